//! Compressed sparse row matrices and a Jacobi-preconditioned BiCGSTAB
//! solver for the per-step linear systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

/// Triplet accumulator; duplicate entries are summed on build.
#[derive(Debug, Clone)]
pub struct Triplets {
    n: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Triplets {
            n,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((row as u32, col as u32, v));
        }
    }

    pub fn build(mut self) -> Csr {
        self.entries
            .sort_unstable_by_key(|&(r, c, _)| ((r as u64) << 32) | c as u64);
        let mut col = Vec::with_capacity(self.entries.len());
        let mut val = Vec::with_capacity(self.entries.len());
        let mut rows = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            if rows.last() == Some(&r) && col.last() == Some(&(c as usize)) {
                *val.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                col.push(c as usize);
                val.push(v);
            }
        }
        let mut row_ptr = vec![0usize; self.n + 1];
        for &r in &rows {
            row_ptr[r as usize + 1] += 1;
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr {
            n: self.n,
            row_ptr,
            col,
            val,
        }
    }
}

impl Csr {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            y[i] = acc;
        }
    }

    /// y = A^T x
    pub fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col[k]] += self.val[k] * xi;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col[k] == i {
                    d[i] += self.val[k];
                }
            }
        }
        d
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.val[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum())
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub struct BiCgStab {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for BiCgStab {
    fn default() -> Self {
        BiCgStab {
            tol: 1e-10,
            max_iters: 20_000,
        }
    }
}

enum Op<'a> {
    Plain(&'a Csr),
    Transposed(&'a Csr),
}

impl Op<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Op::Plain(m) => m.matvec(x, y),
            Op::Transposed(m) => m.matvec_transpose(x, y),
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        // the diagonal is shared between a matrix and its transpose
        match self {
            Op::Plain(m) | Op::Transposed(m) => m.diagonal(),
        }
    }
}

impl BiCgStab {
    pub fn solve(&self, m: &Csr, b: &[f64], x0: Option<&[f64]>) -> Result<Vec<f64>> {
        self.run(Op::Plain(m), b, x0)
    }

    pub fn solve_transpose(&self, m: &Csr, b: &[f64], x0: Option<&[f64]>) -> Result<Vec<f64>> {
        self.run(Op::Transposed(m), b, x0)
    }

    fn run(&self, op: Op, b: &[f64], x0: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = b.len();
        let bnorm = norm(b);
        if bnorm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let inv_diag: Vec<f64> = op
            .diagonal()
            .iter()
            .map(|&d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 })
            .collect();
        let precond = |v: &[f64], out: &mut [f64]| {
            for i in 0..v.len() {
                out[i] = v[i] * inv_diag[i];
            }
        };

        let mut x = match x0 {
            Some(v) => v.to_vec(),
            None => vec![0.0; n],
        };
        let mut r = vec![0.0; n];
        op.apply(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let r0 = r.clone();
        let mut rho = 1.0f64;
        let mut alpha = 1.0f64;
        let mut omega = 1.0f64;
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut phat = vec![0.0; n];
        let mut shat = vec![0.0; n];
        let mut t = vec![0.0; n];
        let mut res = norm(&r);
        if res <= self.tol * bnorm {
            return Ok(x);
        }
        for iter in 0..self.max_iters {
            let rho_new = dot(&r0, &r);
            if rho_new.abs() < 1e-300 {
                return Err(Error::SolveDiverged {
                    residual: res / bnorm,
                    iters: iter,
                });
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            precond(&p, &mut phat);
            op.apply(&phat, &mut v);
            alpha = rho / dot(&r0, &v);
            let mut s = r.clone();
            for i in 0..n {
                s[i] -= alpha * v[i];
            }
            if norm(&s) <= self.tol * bnorm {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                return Ok(x);
            }
            precond(&s, &mut shat);
            op.apply(&shat, &mut t);
            let tt = dot(&t, &t);
            if tt.abs() < 1e-300 {
                return Err(Error::SolveDiverged {
                    residual: res / bnorm,
                    iters: iter,
                });
            }
            omega = dot(&t, &s) / tt;
            for i in 0..n {
                x[i] += alpha * phat[i] + omega * shat[i];
                r[i] = s[i] - omega * t[i];
            }
            res = norm(&r);
            if res <= self.tol * bnorm {
                return Ok(x);
            }
        }
        Err(Error::SolveDiverged {
            residual: res / bnorm,
            iters: self.max_iters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn laplacian_1d(n: usize) -> Csr {
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.add(i, i, 2.0 + 0.1);
            if i > 0 {
                t.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                t.add(i, i + 1, -1.0);
            }
        }
        t.build()
    }

    #[test]
    fn csr_build_and_matvec() {
        let mut t = Triplets::new(3);
        t.add(0, 0, 1.0);
        t.add(0, 0, 2.0); // duplicate merged
        t.add(1, 2, 5.0);
        t.add(2, 1, -1.0);
        let m = t.build();
        let mut y = vec![0.0; 3];
        m.matvec(&[1.0, 1.0, 1.0], &mut y);
        assert_eq!(y, vec![3.0, 5.0, -1.0]);
        let mut yt = vec![0.0; 3];
        m.matvec_transpose(&[1.0, 1.0, 1.0], &mut yt);
        assert_eq!(yt, vec![3.0, -1.0, 5.0]);
    }

    #[test]
    fn bicgstab_solves_spd() {
        let n = 50;
        let m = laplacian_1d(n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = BiCgStab::default().solve(&m, &b, None).unwrap();
        let mut r = vec![0.0; n];
        m.matvec(&x, &mut r);
        for i in 0..n {
            assert_relative_eq!(r[i], b[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn bicgstab_transpose_solve() {
        let n = 30;
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.add(i, i, 3.0);
            if i > 0 {
                t.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                t.add(i, i + 1, -0.5);
            }
        }
        let m = t.build();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let x = BiCgStab::default().solve_transpose(&m, &b, None).unwrap();
        let mut r = vec![0.0; n];
        m.matvec_transpose(&x, &mut r);
        for i in 0..n {
            assert_relative_eq!(r[i], b[i], epsilon = 1e-7);
        }
    }
}
