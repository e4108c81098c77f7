use nalgebra::DMatrix;
use purlab::coeffs::{frobenius2, hessian_contraction, spd_sqrt};
use rand::{Rng, SeedableRng};

fn random_orthogonal(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q()
}

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for i in 0..10000 {
        let n = rng.gen_range(2..=4usize);
        let lambda: f64 = rng.gen_range(1.0..10.0);
        let q = random_orthogonal(&mut rng, n);
        let evs: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0 / lambda..lambda)).collect();
        let a = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(evs)) * q.transpose();
        let mut b = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                b[(r, c)] = v;
                b[(c, r)] = v;
            }
        }
        let v = hessian_contraction(&a, &b, lambda * 1.0001).unwrap();
        let s = spd_sqrt(&a, lambda * 1.0001).unwrap();
        let m = &s * &b * &s;
        let err = (v - frobenius2(&m)).abs() / v.abs().max(1.0);
        if err > worst { worst = err; println!("iter {i} rel err {err:.3e} v {v:.3e} lambda {lambda:.2}"); }
    }
    println!("worst {worst:.3e}");
}
