//! Uniform lattices and sampled fields.
//!
//! Everything in the crate lives on rectangular lattices: the boundary
//! lattice carries graph functions and space-time fields over
//! `(x_1..x_{n-1}, t)`, the flattened ambient lattice carries solver and
//! coefficient fields over `(rho, x_1..x_{n-1}, t)`. Axes are uniform, may be
//! periodic, and are stored row-major with the last axis contiguous.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub len: usize,
    pub min: f64,
    pub step: f64,
    pub periodic: bool,
}

impl Axis {
    pub fn periodic(len: usize, min: f64, step: f64) -> Self {
        Axis {
            len,
            min,
            step,
            periodic: true,
        }
    }

    pub fn bounded(len: usize, min: f64, step: f64) -> Self {
        Axis {
            len,
            min,
            step,
            periodic: false,
        }
    }

    /// Total extent covered by the axis samples (period length if periodic).
    pub fn extent(&self) -> f64 {
        self.len as f64 * self.step
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    /// Signed frequency (cycles per unit) of FFT bin `k`.
    pub fn frequency(&self, k: usize) -> f64 {
        let n = self.len as isize;
        let k = k as isize;
        let signed = if k <= n / 2 { k } else { k - n };
        signed as f64 / self.extent()
    }

    /// Wrapped signed offset `a - b` along a periodic axis, in coordinate units.
    pub fn wrap_diff(&self, a: f64, b: f64) -> f64 {
        let mut d = a - b;
        if self.periodic {
            let period = self.extent();
            d -= (d / period).round() * period;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    axes: Vec<Axis>,
}

impl Lattice {
    pub fn new(axes: Vec<Axis>) -> Self {
        assert!(!axes.is_empty());
        Lattice { axes }
    }

    /// Boundary lattice for graph functions over a periodic box
    /// `[0,L)^{n-1} x [0,L_t)`: `nx` samples per spatial axis and the
    /// parabolic constraint `h_t = h_x^2` built in, so `n_t = L_t / h_x^2`.
    pub fn boundary(spatial_dims: usize, nx: usize, spatial_len: f64, time_len: f64) -> Self {
        let hx = spatial_len / nx as f64;
        let ht = hx * hx;
        let nt = (time_len / ht).round().max(1.0) as usize;
        let mut axes = vec![Axis::periodic(nx, 0.0, hx); spatial_dims];
        axes.push(Axis::periodic(nt, 0.0, ht));
        Lattice::new(axes)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one lattice cell.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step).product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let nd = self.ndim();
        let mut s = vec![1usize; nd];
        for a in (0..nd.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.axes[a + 1].len;
        }
        s
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let strides = self.strides();
        idx.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let strides = self.strides();
        let mut idx = vec![0usize; self.ndim()];
        for (a, s) in strides.iter().enumerate() {
            idx[a] = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn coords(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .zip(&self.axes)
            .map(|(&i, ax)| ax.coord(i))
            .collect()
    }

    pub fn coords_flat(&self, flat: usize) -> Vec<f64> {
        self.coords(&self.multi_index(flat))
    }

    /// Wrap (periodic) or clamp (bounded) an integer index onto the axis.
    pub fn normalize_index(&self, axis: usize, i: isize) -> usize {
        let ax = &self.axes[axis];
        let n = ax.len as isize;
        if ax.periodic {
            (i.rem_euclid(n)) as usize
        } else {
            i.clamp(0, n - 1) as usize
        }
    }
}

/// A real scalar field sampled on a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(lattice: &Lattice) -> Self {
        Field {
            lattice: lattice.clone(),
            values: vec![0.0; lattice.len()],
        }
    }

    pub fn constant(lattice: &Lattice, c: f64) -> Self {
        Field {
            lattice: lattice.clone(),
            values: vec![c; lattice.len()],
        }
    }

    pub fn from_fn(lattice: &Lattice, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut values = Vec::with_capacity(lattice.len());
        for flat in 0..lattice.len() {
            values.push(f(&lattice.coords_flat(flat)));
        }
        Field {
            lattice: lattice.clone(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.lattice.flat_index(idx)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        let cv = self.lattice.cell_volume();
        (self.values.iter().map(|v| v * v).sum::<f64>() * cv).sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            lattice: self.lattice.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.lattice, other.lattice, "lattice mismatch");
        Field {
            lattice: self.lattice.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &Field) -> Field {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.zip_with(other, |a, b| a - b)
    }

    /// Multilinear interpolation at an arbitrary point. Periodic axes wrap,
    /// bounded axes clamp to the sample range.
    pub fn interp(&self, point: &[f64]) -> f64 {
        let nd = self.lattice.ndim();
        assert_eq!(point.len(), nd);
        let mut base = vec![0isize; nd];
        let mut frac = vec![0.0f64; nd];
        for a in 0..nd {
            let ax = &self.lattice.axes()[a];
            let u = (point[a] - ax.min) / ax.step;
            let f = u.floor();
            base[a] = f as isize;
            frac[a] = u - f;
            if !ax.periodic {
                // clamp so the stencil stays inside the sample range
                if base[a] < 0 {
                    base[a] = 0;
                    frac[a] = 0.0;
                } else if base[a] >= ax.len as isize - 1 {
                    base[a] = ax.len as isize - 2;
                    frac[a] = 1.0;
                    if ax.len == 1 {
                        base[a] = 0;
                        frac[a] = 0.0;
                    }
                }
            }
        }
        let strides = self.lattice.strides();
        let corners = 1usize << nd;
        let mut acc = 0.0;
        for c in 0..corners {
            let mut w = 1.0;
            let mut flat = 0usize;
            for a in 0..nd {
                let hi = (c >> a) & 1 == 1;
                let i = base[a] + if hi { 1 } else { 0 };
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                flat += self.lattice.normalize_index(a, i) * strides[a];
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }

    /// Centered finite difference along `axis` (wrap on periodic axes,
    /// one-sided at bounded ends).
    pub fn derivative(&self, axis: usize) -> Field {
        let ax = self.lattice.axes()[axis].clone();
        let strides = self.lattice.strides();
        let stride = strides[axis];
        let n = ax.len;
        let mut out = vec![0.0; self.values.len()];
        let h = ax.step;
        for flat in 0..self.values.len() {
            let i = (flat / stride) % n;
            let (vp, vm, denom) = if ax.periodic {
                let ip = if i + 1 == n { flat + stride - n * stride } else { flat + stride };
                let im = if i == 0 { flat + (n - 1) * stride } else { flat - stride };
                (self.values[ip], self.values[im], 2.0 * h)
            } else if i == 0 {
                (self.values[flat + stride], self.values[flat], h)
            } else if i + 1 == n {
                (self.values[flat], self.values[flat - stride], h)
            } else {
                (self.values[flat + stride], self.values[flat - stride], 2.0 * h)
            };
            out[flat] = (vp - vm) / denom;
        }
        Field {
            lattice: self.lattice.clone(),
            values: out,
        }
    }

    /// Trapezoid-free lattice integral: sum times cell volume (midpoint rule).
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.lattice.cell_volume()
    }
}

/// Complex spectrum of a field, in FFT bin order.
pub struct Spectrum {
    pub lattice: Lattice,
    pub values: Vec<Complex64>,
}

fn fft_along(values: &mut [Complex64], lattice: &Lattice, axis: usize, inverse: bool) {
    let n = lattice.axes()[axis].len;
    if n == 1 {
        return;
    }
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let strides = lattice.strides();
    let stride = strides[axis];
    let total = lattice.len();
    let lanes = total / n;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for lane in 0..lanes {
        // map lane id to the flat index of the lane's first element
        let mut rem = lane;
        let mut start = 0usize;
        for a in 0..lattice.ndim() {
            if a == axis {
                continue;
            }
            let la = lattice.axes()[a].len;
            let ia = rem % la;
            rem /= la;
            start += ia * strides[a];
        }
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = values[start + k * stride];
        }
        fft.process(&mut buf);
        for (k, slot) in buf.iter().enumerate() {
            values[start + k * stride] = *slot;
        }
    }
}

pub fn fft_forward(field: &Field) -> Spectrum {
    let mut values: Vec<Complex64> = field
        .values
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for axis in 0..field.lattice.ndim() {
        fft_along(&mut values, &field.lattice, axis, false);
    }
    Spectrum {
        lattice: field.lattice.clone(),
        values,
    }
}

pub fn fft_inverse(spec: &Spectrum) -> Field {
    let mut values = spec.values.clone();
    for axis in 0..spec.lattice.ndim() {
        fft_along(&mut values, &spec.lattice, axis, true);
    }
    let scale = 1.0 / spec.lattice.len() as f64;
    Field {
        lattice: spec.lattice.clone(),
        values: values.iter().map(|c| c.re * scale).collect(),
    }
}

/// Apply a Fourier multiplier `m(freqs) -> Complex64` on the periodic lattice.
/// The multiplier receives the signed frequency vector (cycles per unit).
pub fn apply_multiplier(field: &Field, m: impl Fn(&[f64]) -> Complex64) -> Field {
    let mut spec = fft_forward(field);
    let lat = spec.lattice.clone();
    let mut freqs = vec![0.0f64; lat.ndim()];
    for flat in 0..lat.len() {
        let idx = lat.multi_index(flat);
        for (a, &k) in idx.iter().enumerate() {
            freqs[a] = lat.axes()[a].frequency(k);
        }
        spec.values[flat] *= m(&freqs);
    }
    fft_inverse(&spec)
}

/// Circular convolution of two fields on the same periodic lattice, scaled so
/// that it approximates `(kernel * field)(x) = sum kernel(y) field(x-y) cellvol`.
pub fn convolve_periodic(field: &Field, kernel: &Field) -> Field {
    assert_eq!(field.lattice, kernel.lattice);
    let fa = fft_forward(field);
    let fb = fft_forward(kernel);
    let cv = field.lattice.cell_volume();
    let values: Vec<Complex64> = fa
        .values
        .iter()
        .zip(&fb.values)
        .map(|(a, b)| a * b * cv)
        .collect();
    fft_inverse(&Spectrum {
        lattice: field.lattice.clone(),
        values,
    })
}

/// Separable convolution with per-axis stencils (odd length, centered).
/// Periodic axes wrap; bounded axes renormalize the stencil mass over the
/// in-range taps so constants are preserved.
pub fn convolve_separable(field: &Field, stencils: &[Vec<f64>]) -> Field {
    let nd = field.lattice.ndim();
    assert_eq!(stencils.len(), nd);
    let mut cur = field.values.clone();
    let strides = field.lattice.strides();
    for axis in 0..nd {
        let st = &stencils[axis];
        if st.len() <= 1 {
            continue;
        }
        assert!(st.len() % 2 == 1, "stencil must be odd-length");
        let half = (st.len() / 2) as isize;
        let ax = &field.lattice.axes()[axis];
        let n = ax.len as isize;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for flat in 0..cur.len() {
            let i = ((flat / stride) % ax.len) as isize;
            let lane_base = flat as isize - i * stride as isize;
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (j, &w) in st.iter().enumerate() {
                let off = j as isize - half;
                let ii = i + off;
                if ax.periodic {
                    let iw = ii.rem_euclid(n);
                    acc += w * cur[(lane_base + iw * stride as isize) as usize];
                    mass += w;
                } else if (0..n).contains(&ii) {
                    acc += w * cur[(lane_base + ii * stride as isize) as usize];
                    mass += w;
                }
            }
            next[flat] = if mass != 0.0 { acc / mass } else { cur[flat] };
        }
        cur = next;
    }
    // stencils are normalized per-point, so total mass 1 by construction
    Field {
        lattice: field.lattice.clone(),
        values: cur,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lat2(nx: usize, nt: usize) -> Lattice {
        Lattice::new(vec![
            Axis::periodic(nx, 0.0, 1.0 / nx as f64),
            Axis::periodic(nt, 0.0, 1.0 / nt as f64),
        ])
    }

    #[test]
    fn indexing_roundtrip() {
        let lat = lat2(4, 8);
        for flat in 0..lat.len() {
            let idx = lat.multi_index(flat);
            assert_eq!(lat.flat_index(&idx), flat);
        }
    }

    #[test]
    fn fft_roundtrip_and_mode() {
        let lat = lat2(8, 16);
        let f = Field::from_fn(&lat, |p| (2.0 * std::f64::consts::PI * (3.0 * p[0] + 2.0 * p[1])).cos());
        let spec = fft_forward(&f);
        let back = fft_inverse(&spec);
        for (a, b) in f.values.iter().zip(&back.values) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // single cosine mode has two nonzero bins
        let nonzero = spec
            .values
            .iter()
            .filter(|c| c.norm() > 1e-9 * lat.len() as f64)
            .count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn multiplier_identity() {
        let lat = lat2(8, 8);
        let f = Field::from_fn(&lat, |p| p[0].sin() + 0.3 * p[1].cos());
        let g = apply_multiplier(&f, |_| Complex64::new(1.0, 0.0));
        for (a, b) in f.values.iter().zip(&g.values) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn interp_matches_samples_and_is_linear() {
        let lat = lat2(8, 8);
        let f = Field::from_fn(&lat, |p| 1.0 + 2.0 * (2.0 * std::f64::consts::PI * p[0]).sin());
        for flat in 0..lat.len() {
            let p = lat.coords_flat(flat);
            assert_relative_eq!(f.interp(&p), f.values[flat], epsilon = 1e-12);
        }
    }

    #[test]
    fn separable_convolution_preserves_constants() {
        let lat = lat2(8, 8);
        let f = Field::constant(&lat, 3.5);
        let st = vec![vec![0.25, 0.5, 0.25], vec![0.25, 0.5, 0.25]];
        let g = convolve_separable(&f, &st);
        for v in &g.values {
            assert_relative_eq!(*v, 3.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_of_mode() {
        let lat = lat2(32, 4);
        let f = Field::from_fn(&lat, |p| (2.0 * std::f64::consts::PI * p[0]).sin());
        let d = f.derivative(0);
        let p = [0.25, 0.0];
        // d/dx sin(2 pi x) = 2 pi cos(2 pi x); centered FD is second order
        assert_relative_eq!(
            d.interp(&p),
            2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * 0.25).cos(),
            epsilon = 0.05
        );
    }
}
