//! Implicit finite-volume solver for `∂_t u = div(A ∇u)` above the graph,
//! in flattened coordinates `(rho, x, t)` with `rho = x0 - psi(x,t)`.
//!
//! The pullback turns the domain into a box: the wall `rho = 0` carries the
//! lateral Dirichlet data, the top `rho = H` is an artificial truncation
//! (absorbing Dirichlet or reflecting Neumann), and the lateral axes are
//! periodic. The transformed operator is `div(At grad u) + psi_t d_rho u`
//! with `At = J^T A J`, discretized conservatively with upwinded drift;
//! time stepping is implicit Euler (optionally Crank-Nicolson with an
//! implicit startup for Green-function injections).

use super::sparse::{BiCgStab, Csr, Triplets};
use crate::error::{Error, Result};
use crate::geometry::{AmbientPoint, SpaceTimePoint};
use crate::graph::GraphFunction;
use crate::grid::{Axis, Lattice};
use nalgebra::DMatrix;
use std::sync::Arc;

/// The flattened space-time grid: a spatial lattice (rho bounded with cell
/// centers, lateral axes periodic) stepped over `0..=n_steps` time levels.
#[derive(Debug, Clone)]
pub struct FlattenedGrid {
    pub spatial: Lattice,
    pub n_steps: usize,
    pub h_t: f64,
    pub t0: f64,
}

impl FlattenedGrid {
    pub fn new(n_rho: usize, height: f64, lateral: Vec<Axis>, n_steps: usize, h_t: f64, t0: f64) -> Self {
        let h_rho = height / n_rho as f64;
        let mut axes = vec![Axis::bounded(n_rho, 0.5 * h_rho, h_rho)];
        axes.extend(lateral);
        FlattenedGrid {
            spatial: Lattice::new(axes),
            n_steps,
            h_t,
            t0,
        }
    }

    /// Grid whose lateral cells and time levels coincide with a boundary
    /// lattice (periodic `x` axes plus time as the last axis).
    pub fn aligned_with_boundary(boundary: &Lattice, n_rho: usize, height: f64) -> Self {
        let nd = boundary.ndim();
        let lateral = boundary.axes()[..nd - 1].to_vec();
        let t_axis = &boundary.axes()[nd - 1];
        FlattenedGrid::new(
            n_rho,
            height,
            lateral,
            t_axis.len - 1,
            t_axis.step,
            t_axis.min,
        )
    }

    pub fn height(&self) -> f64 {
        self.spatial.axes()[0].extent()
    }

    pub fn h_rho(&self) -> f64 {
        self.spatial.axes()[0].step
    }

    pub fn time(&self, level: usize) -> f64 {
        self.t0 + level as f64 * self.h_t
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial.len()
    }

    /// Lattice of the lateral boundary cells (x axes plus time levels).
    pub fn boundary_lattice(&self) -> Lattice {
        let mut axes = self.spatial.axes()[1..].to_vec();
        axes.push(Axis::periodic(self.n_steps + 1, self.t0, self.h_t));
        Lattice::new(axes)
    }

    /// Volume of one spatial cell.
    pub fn cell_volume(&self) -> f64 {
        self.spatial.cell_volume()
    }

    /// Flattened coordinates of a spatial cell center.
    pub fn cell_coords(&self, flat: usize) -> Vec<f64> {
        self.spatial.coords_flat(flat)
    }

    /// Locate the ambient point in the flattened grid: `(rho, x)` cell and
    /// nearest time level.
    pub fn locate(&self, p: &AmbientPoint, psi: &GraphFunction) -> Result<(usize, usize)> {
        let rho = p.x0 - psi.eval(&p.p);
        if rho <= 0.0 || rho >= self.height() {
            return Err(Error::Geometry(format!(
                "point at gap {rho} outside the flattened box (height {})",
                self.height()
            )));
        }
        let mut idx = vec![((rho - self.spatial.axes()[0].min) / self.h_rho()).round() as isize];
        for (a, x) in p.p.x.iter().enumerate() {
            let ax = &self.spatial.axes()[1 + a];
            idx.push(((x - ax.min) / ax.step).floor() as isize);
        }
        let idx: Vec<usize> = idx
            .iter()
            .enumerate()
            .map(|(a, &i)| self.spatial.normalize_index(a, i))
            .collect();
        let level = ((p.p.t - self.t0) / self.h_t).round() as isize;
        if level < 0 || level as usize > self.n_steps {
            return Err(Error::Geometry(format!(
                "time {} outside the stepped window",
                p.p.t
            )));
        }
        Ok((self.spatial.flat_index(&idx), level as usize))
    }
}

/// Matrix-valued coefficients `A(X, t)` with ellipticity metadata.
#[derive(Clone)]
pub struct CoefficientField {
    pub dim: usize,
    pub lambda: f64,
    pub symmetric: bool,
    kind: CoeffKind,
}

#[derive(Clone)]
enum CoeffKind {
    Identity,
    Fn(Arc<dyn Fn(&AmbientPoint) -> DMatrix<f64> + Send + Sync>),
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "CoefficientField(dim={}, lambda={}, symmetric={})",
            self.dim, self.lambda, self.symmetric
        )
    }
}

impl CoefficientField {
    pub fn identity(dim: usize) -> Self {
        CoefficientField {
            dim,
            lambda: 1.0,
            symmetric: true,
            kind: CoeffKind::Identity,
        }
    }

    pub fn from_fn(
        dim: usize,
        lambda: f64,
        symmetric: bool,
        f: impl Fn(&AmbientPoint) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        CoefficientField {
            dim,
            lambda,
            symmetric,
            kind: CoeffKind::Fn(Arc::new(f)),
        }
    }

    pub fn eval(&self, p: &AmbientPoint) -> DMatrix<f64> {
        match &self.kind {
            CoeffKind::Identity => DMatrix::identity(self.dim, self.dim),
            CoeffKind::Fn(f) => f(p),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, CoeffKind::Identity)
    }
}

/// Lateral (graph) data plus the initial slice.
#[derive(Clone)]
pub struct ProblemData {
    pub lateral: Arc<dyn Fn(&SpaceTimePoint) -> f64 + Send + Sync>,
    pub initial: Arc<dyn Fn(&AmbientPoint) -> f64 + Send + Sync>,
}

impl ProblemData {
    pub fn constant(c: f64) -> Self {
        ProblemData {
            lateral: Arc::new(move |_| c),
            initial: Arc::new(move |_| c),
        }
    }

    pub fn zero() -> Self {
        ProblemData::constant(0.0)
    }

    pub fn lateral_only(g: impl Fn(&SpaceTimePoint) -> f64 + Send + Sync + 'static) -> Self {
        ProblemData {
            lateral: Arc::new(g),
            initial: Arc::new(|_| 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopBoundary {
    /// Absorbing truncation: `u = 0` on the top face.
    Dirichlet0,
    /// Reflecting truncation: zero flux through the top face. Keeps
    /// constants exact solutions.
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeScheme {
    BackwardEuler,
    /// Crank-Nicolson with two implicit startup steps (used for Green
    /// injections, second order away from the pole).
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Adjoint,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub top: TopBoundary,
    pub scheme: TimeScheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iters: 50_000,
            top: TopBoundary::Neumann,
            scheme: TimeScheme::BackwardEuler,
        }
    }
}

/// One assembled time level: the spatial operator `L` (so the implicit
/// system is `I - theta h_t L`) and the lateral-boundary source operator
/// (cell, boundary x-index, coefficient), with `div` and drift folded in.
pub struct AssembledLevel {
    pub l: Csr,
    /// Entries (cell, lateral multi-index flattened over x axes, coeff):
    /// contribution `coeff * g(x_j, t)` to `L u` at the cell.
    pub boundary: Vec<(usize, usize, f64)>,
}

/// The problem context shared by solves: domain graph, coefficients, grid.
pub struct Flattened<'a> {
    pub grid: &'a FlattenedGrid,
    pub psi: &'a GraphFunction,
    pub coeff: &'a CoefficientField,
}

impl Flattened<'_> {
    fn lateral_strides(&self) -> (Vec<usize>, usize) {
        // strides over x axes only (time excluded), row-major
        let axes = &self.grid.spatial.axes()[1..];
        let mut s = vec![1usize; axes.len()];
        for a in (0..axes.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * axes[a + 1].len;
        }
        let total = axes.iter().map(|a| a.len).product();
        (s, total)
    }

    /// Transformed matrix `J^T A J` at a flattened point, with
    /// `J = [[1, 0], [-grad psi, I]]` acting on flattened gradients.
    fn transformed_matrix(&self, rho: f64, x: &[f64], t: f64, adjoint: bool) -> DMatrix<f64> {
        let p = SpaceTimePoint::new(x.to_vec(), t);
        let x0 = self.psi.eval(&p) + rho;
        let ambient = AmbientPoint {
            x0,
            p: p.clone(),
        };
        let mut a = self.coeff.eval(&ambient);
        if adjoint {
            a = a.transpose();
        }
        if self.flat_graph() {
            return a;
        }
        let n = self.coeff.dim;
        let grad = self.psi_gradient(&p);
        let mut j = DMatrix::identity(n, n);
        for (i, g) in grad.iter().enumerate() {
            j[(i + 1, 0)] = -g;
        }
        j.transpose() * a * j
    }

    fn flat_graph(&self) -> bool {
        self.psi.lip_constant() == 0.0 && self.psi.slope().iter().all(|&s| s == 0.0)
    }

    fn psi_gradient(&self, p: &SpaceTimePoint) -> Vec<f64> {
        let sd = p.x.len();
        let mut g = Vec::with_capacity(sd);
        for a in 0..sd {
            let h = self.psi.lattice().axes()[a].step;
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.x[a] += h;
            pm.x[a] -= h;
            g.push((self.psi.eval(&pp) - self.psi.eval(&pm)) / (2.0 * h));
        }
        g
    }

    fn psi_dt(&self, p: &SpaceTimePoint) -> f64 {
        if self.flat_graph() {
            return 0.0;
        }
        let ht = self.psi.lattice().axes()[p.x.len()].step;
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp.t += ht;
        pm.t -= ht;
        (self.psi.eval(&pp) - self.psi.eval(&pm)) / (2.0 * ht)
    }

    /// Assemble the spatial operator at time `t`.
    pub fn assemble(&self, t: f64, direction: Direction, top: TopBoundary) -> AssembledLevel {
        let lat = &self.grid.spatial;
        let nd = lat.ndim();
        let strides = lat.strides();
        let n = lat.len();
        let (lstrides, _) = self.lateral_strides();
        let adjoint = direction == Direction::Adjoint;
        let mut trip = Triplets::new(n);
        let mut boundary: Vec<(usize, usize, f64)> = Vec::new();
        let h: Vec<f64> = lat.axes().iter().map(|a| a.step).collect();
        let n_rho = lat.axes()[0].len;

        for flat in 0..n {
            let idx = lat.multi_index(flat);
            let coords = lat.coords(&idx);
            let rho = coords[0];
            let x = &coords[1..];
            let lateral_flat: usize = idx[1..]
                .iter()
                .zip(&lstrides)
                .map(|(i, s)| i * s)
                .sum();

            // neighbor resolution: Some(flat) for in-range / periodic wrap
            let resolve = |offsets: &[isize]| -> Option<usize> {
                let mut f = flat as isize;
                for (a, &off) in offsets.iter().enumerate() {
                    if off == 0 {
                        continue;
                    }
                    let ax = &lat.axes()[a];
                    let i = idx[a] as isize + off;
                    if ax.periodic {
                        let iw = i.rem_euclid(ax.len as isize);
                        f += (iw - idx[a] as isize) * strides[a] as isize;
                    } else {
                        if i < 0 || i >= ax.len as isize {
                            return None;
                        }
                        f += off * strides[a] as isize;
                    }
                }
                Some(f as usize)
            };

            for a in 0..nd {
                for dir in [-1isize, 1] {
                    // face-centered transformed matrix
                    let mut fc = coords.clone();
                    fc[a] += 0.5 * dir as f64 * h[a];
                    let wall = a == 0 && idx[0] == 0 && dir == -1;
                    let top_face = a == 0 && idx[0] + 1 == n_rho && dir == 1;
                    let fc_rho = if a == 0 { fc[0] } else { rho };
                    let at = self.transformed_matrix(fc_rho.max(0.0), &fc[1..], t, adjoint);

                    // diagonal flux
                    let aa = at[(a, a)];
                    if wall {
                        // half-cell Dirichlet to the lateral data
                        let c = 2.0 * aa / (h[0] * h[0]);
                        trip.add(flat, flat, -c);
                        boundary.push((flat, lateral_flat, c));
                        // tangential part of the wall flux from the data
                        for b in 1..nd {
                            let ab = at[(a, b)];
                            if ab != 0.0 {
                                let lb = lat.axes()[b].len;
                                let jp = (idx[b] + 1) % lb;
                                let jm = (idx[b] + lb - 1) % lb;
                                let mut fp = lateral_flat;
                                fp = fp - idx[b] * lstrides[b - 1] + jp * lstrides[b - 1];
                                let mut fm = lateral_flat;
                                fm = fm - idx[b] * lstrides[b - 1] + jm * lstrides[b - 1];
                                let w = ab / (h[0] * 2.0 * h[b]);
                                // -F_-/h with F_- including the tangential term
                                boundary.push((flat, fp, -w));
                                boundary.push((flat, fm, w));
                            }
                        }
                        continue;
                    }
                    if top_face {
                        match top {
                            TopBoundary::Dirichlet0 => {
                                let c = 2.0 * aa / (h[0] * h[0]);
                                trip.add(flat, flat, -c);
                            }
                            TopBoundary::Neumann => {}
                        }
                        continue;
                    }
                    let mut off = vec![0isize; nd];
                    off[a] = dir;
                    let nb = match resolve(&off) {
                        Some(v) => v,
                        None => continue,
                    };
                    let c = aa / (h[a] * h[a]);
                    trip.add(flat, nb, c);
                    trip.add(flat, flat, -c);

                    // mixed terms on this face; skipped when the stencil
                    // pokes out of the rho range (first-order near walls)
                    for b in 0..nd {
                        if b == a {
                            continue;
                        }
                        let ab = at[(a, b)];
                        if ab == 0.0 {
                            continue;
                        }
                        // d_b u at the face: average of centered differences
                        // at the two cells adjacent to the face
                        let sgn = dir as f64;
                        let w = sgn * ab / (h[a] * 4.0 * h[b]);
                        for (da, db, s) in [
                            (0isize, 1isize, 1.0),
                            (0, -1, -1.0),
                            (dir, 1, 1.0),
                            (dir, -1, -1.0),
                        ] {
                            let mut o = vec![0isize; nd];
                            o[a] = da;
                            o[b] = db;
                            if let Some(nbb) = resolve(&o) {
                                trip.add(flat, nbb, w * s);
                            }
                        }
                    }
                }
            }

            // drift psi_t d_rho u (forward) / -psi_t d_rho u (adjoint)
            let p = SpaceTimePoint::new(x.to_vec(), t);
            let mut b_drift = self.psi_dt(&p);
            if adjoint {
                b_drift = -b_drift;
            }
            if b_drift != 0.0 {
                if b_drift > 0.0 {
                    // information from larger rho
                    if idx[0] + 1 < n_rho {
                        let nb = flat + strides[0];
                        trip.add(flat, nb, b_drift / h[0]);
                        trip.add(flat, flat, -b_drift / h[0]);
                    } else if top == TopBoundary::Dirichlet0 {
                        trip.add(flat, flat, -b_drift / h[0]);
                    }
                } else if idx[0] > 0 {
                    let nb = flat - strides[0];
                    trip.add(flat, flat, b_drift / h[0]);
                    trip.add(flat, nb, -b_drift / h[0]);
                } else {
                    // wall half-cell with the lateral data
                    let c = 2.0 * b_drift / h[0];
                    trip.add(flat, flat, c);
                    boundary.push((flat, lateral_flat, -c));
                }
            }
        }
        AssembledLevel {
            l: trip.build(),
            boundary,
        }
    }
}

/// A space-time solution stored per time level on the flattened grid.
#[derive(Debug, Clone)]
pub struct SpaceTimeSolution {
    pub grid: FlattenedGrid,
    pub levels: Vec<Vec<f64>>,
}

impl SpaceTimeSolution {
    pub fn value(&self, level: usize, cell: usize) -> f64 {
        self.levels[level][cell]
    }

    /// Multilinear interpolation in the spatial slab at a given level.
    pub fn interp_at_level(&self, level: usize, point: &[f64]) -> f64 {
        let f = crate::grid::Field {
            lattice: self.grid.spatial.clone(),
            values: self.levels[level].clone(),
        };
        f.interp(point)
    }

    /// Value at an ambient point (nearest time level, spatial interpolation).
    pub fn value_at(&self, p: &AmbientPoint, psi: &GraphFunction) -> Result<f64> {
        let rho = p.x0 - psi.eval(&p.p);
        let level = ((p.p.t - self.grid.t0) / self.grid.h_t).round() as isize;
        if level < 0 || level as usize >= self.levels.len() {
            return Err(Error::Geometry("time outside solution window".into()));
        }
        let mut coords = vec![rho];
        coords.extend_from_slice(&p.p.x);
        Ok(self.interp_at_level(level as usize, &coords))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for l in &self.levels {
            for &v in l {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

/// Flattened-grid derivatives at an interior node, by centered differences.
#[derive(Debug, Clone)]
pub struct FlatDerivs {
    pub v: f64,
    pub d: Vec<f64>,        // first derivatives per spatial axis
    pub dt: f64,            // time derivative
    pub dd: DMatrix<f64>,   // spatial Hessian
    pub dt_d: Vec<f64>,     // d_t of each spatial derivative
}

impl SpaceTimeSolution {
    /// Centered-difference derivatives at `(level, spatial index)`; `None`
    /// at rho-range or time-range edges.
    pub fn flat_derivs(&self, level: usize, flat: usize) -> Option<FlatDerivs> {
        let lat = &self.grid.spatial;
        let nd = lat.ndim();
        let strides = lat.strides();
        let idx = lat.multi_index(flat);
        if level == 0 || level >= self.levels.len() - 1 {
            return None;
        }
        if idx[0] == 0 || idx[0] + 1 == lat.axes()[0].len {
            return None;
        }
        let at = |lv: usize, off: &[isize]| -> Option<f64> {
            let mut f = flat as isize;
            for (a, &o) in off.iter().enumerate() {
                if o == 0 {
                    continue;
                }
                let ax = &lat.axes()[a];
                let i = idx[a] as isize + o;
                if ax.periodic {
                    let iw = i.rem_euclid(ax.len as isize);
                    f += (iw - idx[a] as isize) * strides[a] as isize;
                } else {
                    if i < 0 || i >= ax.len as isize {
                        return None;
                    }
                    f += o * strides[a] as isize;
                }
            }
            Some(self.levels[lv][f as usize])
        };
        let h: Vec<f64> = lat.axes().iter().map(|a| a.step).collect();
        let ht = self.grid.h_t;
        let v = self.levels[level][flat];
        let mut d = vec![0.0; nd];
        let mut dd = DMatrix::zeros(nd, nd);
        let mut dt_d = vec![0.0; nd];
        let mut off = vec![0isize; nd];
        for a in 0..nd {
            off.iter_mut().for_each(|o| *o = 0);
            off[a] = 1;
            let vp = at(level, &off)?;
            off[a] = -1;
            let vm = at(level, &off)?;
            d[a] = (vp - vm) / (2.0 * h[a]);
            dd[(a, a)] = (vp - 2.0 * v + vm) / (h[a] * h[a]);
            let vp_t = at(level + 1, &{
                let mut o = vec![0isize; nd];
                o[a] = 1;
                o
            })?;
            let vm_t = at(level + 1, &{
                let mut o = vec![0isize; nd];
                o[a] = -1;
                o
            })?;
            let vp_b = at(level - 1, &{
                let mut o = vec![0isize; nd];
                o[a] = 1;
                o
            })?;
            let vm_b = at(level - 1, &{
                let mut o = vec![0isize; nd];
                o[a] = -1;
                o
            })?;
            dt_d[a] = ((vp_t - vm_t) - (vp_b - vm_b)) / (4.0 * h[a] * ht);
        }
        for a in 0..nd {
            for b in (a + 1)..nd {
                let mut o = vec![0isize; nd];
                o[a] = 1;
                o[b] = 1;
                let pp = at(level, &o)?;
                o[a] = 1;
                o[b] = -1;
                let pm = at(level, &o)?;
                o[a] = -1;
                o[b] = 1;
                let mp = at(level, &o)?;
                o[a] = -1;
                o[b] = -1;
                let mm = at(level, &o)?;
                let m = (pp - pm - mp + mm) / (4.0 * h[a] * h[b]);
                dd[(a, b)] = m;
                dd[(b, a)] = m;
            }
        }
        let dt = (self.levels[level + 1][flat] - self.levels[level - 1][flat]) / (2.0 * ht);
        Some(FlatDerivs {
            v,
            d,
            dt,
            dd,
            dt_d,
        })
    }

    /// Ambient-coordinate derivatives at a node: chain rule through
    /// `u(x0, x, t) = utilde(x0 - psi(x,t), x, t)`.
    pub fn ambient_derivs(
        &self,
        psi: &GraphFunction,
        level: usize,
        flat: usize,
    ) -> Option<AmbientDerivs> {
        let fd = self.flat_derivs(level, flat)?;
        let lat = &self.grid.spatial;
        let nd = lat.ndim();
        let sd = nd - 1;
        let coords = lat.coords_flat(flat);
        let p = SpaceTimePoint::new(coords[1..].to_vec(), self.grid.time(level));
        // graph derivatives by interpolated finite differences
        let gl = psi.lattice();
        let hx: Vec<f64> = (0..sd).map(|a| gl.axes()[a].step).collect();
        let ht = gl.axes()[sd].step;
        let eval = |dp: &[f64], dt: f64| {
            let mut q = p.clone();
            for a in 0..sd {
                q.x[a] += dp[a];
            }
            q.t += dt;
            psi.eval(&q)
        };
        let mut psi_x = vec![0.0; sd];
        let mut psi_xx = DMatrix::zeros(sd, sd);
        for a in 0..sd {
            let mut dp = vec![0.0; sd];
            dp[a] = hx[a];
            let vp = eval(&dp, 0.0);
            dp[a] = -hx[a];
            let vm = eval(&dp, 0.0);
            let v0 = eval(&vec![0.0; sd], 0.0);
            psi_x[a] = (vp - vm) / (2.0 * hx[a]);
            psi_xx[(a, a)] = (vp - 2.0 * v0 + vm) / (hx[a] * hx[a]);
        }
        for a in 0..sd {
            for b in (a + 1)..sd {
                let mut dp = vec![0.0; sd];
                dp[a] = hx[a];
                dp[b] = hx[b];
                let pp = eval(&dp, 0.0);
                dp[b] = -hx[b];
                let pm = eval(&dp, 0.0);
                dp[a] = -hx[a];
                dp[b] = hx[b];
                let mp = eval(&dp, 0.0);
                dp[b] = -hx[b];
                let mm = eval(&dp, 0.0);
                let m = (pp - pm - mp + mm) / (4.0 * hx[a] * hx[b]);
                psi_xx[(a, b)] = m;
                psi_xx[(b, a)] = m;
            }
        }
        let psi_t = (eval(&vec![0.0; sd], ht) - eval(&vec![0.0; sd], -ht)) / (2.0 * ht);
        let psi_tx: Vec<f64> = (0..sd)
            .map(|a| {
                let mut dp = vec![0.0; sd];
                dp[a] = hx[a];
                let pp = eval(&dp, ht);
                let pm = eval(&dp, -ht);
                dp[a] = -hx[a];
                let mp = eval(&dp, ht);
                let mm = eval(&dp, -ht);
                (pp - pm - mp + mm) / (4.0 * hx[a] * ht)
            })
            .collect();

        // chain rule; flattened axes: 0 = rho, 1.. = x
        let n = nd; // ambient spatial dimension
        let mut grad = vec![0.0; n];
        grad[0] = fd.d[0];
        for a in 0..sd {
            grad[1 + a] = fd.d[1 + a] - psi_x[a] * fd.d[0];
        }
        let u_t = fd.dt - psi_t * fd.d[0];
        let mut hess = DMatrix::zeros(n, n);
        hess[(0, 0)] = fd.dd[(0, 0)];
        for a in 0..sd {
            let v = fd.dd[(0, 1 + a)] - psi_x[a] * fd.dd[(0, 0)];
            hess[(0, 1 + a)] = v;
            hess[(1 + a, 0)] = v;
        }
        for a in 0..sd {
            for b in 0..sd {
                let v = fd.dd[(1 + a, 1 + b)]
                    - psi_x[b] * fd.dd[(0, 1 + a)]
                    - psi_x[a] * fd.dd[(0, 1 + b)]
                    + psi_x[a] * psi_x[b] * fd.dd[(0, 0)]
                    - psi_xx[(a, b)] * fd.d[0];
                hess[(1 + a, 1 + b)] = v;
            }
        }
        // time derivative of the ambient gradient
        let mut t_grad = vec![0.0; n];
        // d_t(u_x0) = d_t(util_rho) = util_rho_t - psi_t util_rho_rho
        t_grad[0] = fd.dt_d[0] - psi_t * fd.dd[(0, 0)];
        for a in 0..sd {
            t_grad[1 + a] = fd.dt_d[1 + a]
                - psi_t * fd.dd[(0, 1 + a)]
                - psi_tx[a] * fd.d[0]
                - psi_x[a] * (fd.dt_d[0] - psi_t * fd.dd[(0, 0)]);
        }
        Some(AmbientDerivs {
            v: fd.v,
            grad,
            u_t,
            hess,
            t_grad,
        })
    }
}

/// Ambient derivatives of a solution at a node.
#[derive(Debug, Clone)]
pub struct AmbientDerivs {
    pub v: f64,
    /// Spatial gradient `(u_{x0}, u_{x_i}...)`.
    pub grad: Vec<f64>,
    pub u_t: f64,
    /// Full spatial Hessian.
    pub hess: DMatrix<f64>,
    /// `d_t` of the spatial gradient.
    pub t_grad: Vec<f64>,
}

impl AmbientDerivs {
    pub fn hess_frobenius2(&self) -> f64 {
        self.hess.iter().map(|v| v * v).sum()
    }
}

/// Solve the Dirichlet problem with given data. Forward marches up in time
/// from the initial slice; adjoint marches down from the terminal slice
/// (the `initial` closure then provides the terminal data).
pub fn solve_parabolic(
    ctx: &Flattened,
    data: &ProblemData,
    direction: Direction,
    config: &SolverConfig,
) -> Result<SpaceTimeSolution> {
    let grid = ctx.grid;
    let n = grid.spatial_len();
    let n_steps = grid.n_steps;
    let mut levels = vec![vec![0.0; n]; n_steps + 1];
    let solver = BiCgStab {
        tol: config.tol,
        max_iters: config.max_iters,
    };
    let (lstrides, _) = ctx.lateral_strides();

    let lateral_at = |t: f64| -> Vec<f64> {
        // boundary data per lateral cell
        let axes = &grid.spatial.axes()[1..];
        let total: usize = axes.iter().map(|a| a.len).product();
        let mut g = vec![0.0; total];
        for (j, gv) in g.iter_mut().enumerate() {
            let mut rem = j;
            let mut x = vec![0.0; axes.len()];
            for (a, s) in lstrides.iter().enumerate() {
                let i = rem / s;
                rem %= s;
                x[a] = axes[a].coord(i);
            }
            *gv = (data.lateral)(&SpaceTimePoint::new(x, t));
        }
        g
    };

    // initial (or terminal) slice
    let start_level = match direction {
        Direction::Forward => 0,
        Direction::Adjoint => n_steps,
    };
    for flat in 0..n {
        let c = grid.cell_coords(flat);
        let p = SpaceTimePoint::new(c[1..].to_vec(), grid.time(start_level));
        let x0 = ctx.psi.eval(&p) + c[0];
        levels[start_level][flat] = (data.initial)(&AmbientPoint { x0, p });
    }

    let static_ops = ctx.flat_graph() && ctx.coeff.is_identity();
    let mut cached: Option<AssembledLevel> = None;

    let steps: Vec<usize> = match direction {
        Direction::Forward => (1..=n_steps).collect(),
        Direction::Adjoint => (0..n_steps).rev().collect(),
    };
    for &m in &steps {
        let t_new = grid.time(m);
        let prev = match direction {
            Direction::Forward => m - 1,
            Direction::Adjoint => m + 1,
        };
        let assembled = if static_ops {
            if cached.is_none() {
                cached = Some(ctx.assemble(t_new, direction, config.top));
            }
            cached.as_ref().unwrap()
        } else {
            cached = Some(ctx.assemble(t_new, direction, config.top));
            cached.as_ref().unwrap()
        };
        let theta = match config.scheme {
            TimeScheme::BackwardEuler => 1.0,
            TimeScheme::CrankNicolson => {
                // implicit startup steps
                let k = match direction {
                    Direction::Forward => m,
                    Direction::Adjoint => n_steps - m,
                };
                if k <= 2 {
                    1.0
                } else {
                    0.5
                }
            }
        };
        let ht = grid.h_t;
        let g_new = lateral_at(t_new);
        // rhs = u_prev + theta ht (B g_new) + (1-theta) ht (L u_prev + B g_prev)
        let mut rhs = levels[prev].clone();
        for &(cell, j, c) in &assembled.boundary {
            rhs[cell] += theta * ht * c * g_new[j];
        }
        if theta < 1.0 {
            let mut lu = vec![0.0; n];
            assembled.l.matvec(&levels[prev], &mut lu);
            let g_prev = lateral_at(grid.time(prev));
            for i in 0..n {
                rhs[i] += (1.0 - theta) * ht * lu[i];
            }
            for &(cell, j, c) in &assembled.boundary {
                rhs[cell] += (1.0 - theta) * ht * c * g_prev[j];
            }
        }
        // system matrix I - theta ht L
        let mut trip = Triplets::new(n);
        for i in 0..n {
            trip.add(i, i, 1.0);
            for k in assembled.l.row_ptr[i]..assembled.l.row_ptr[i + 1] {
                trip.add(i, assembled.l.col[k], -theta * ht * assembled.l.val[k]);
            }
        }
        let msys = trip.build();
        let x0 = Some(levels[prev].as_slice());
        levels[m] = solver.solve(&msys, &rhs, x0)?;
    }
    Ok(SpaceTimeSolution {
        grid: grid.clone(),
        levels,
    })
}

/// Green function with pole at `pole`: discrete delta (one cell of unit
/// mass, then one smoothing pass), zero lateral data, marched forward
/// (`Direction::Forward`) or backward (`Direction::Adjoint`, pole in the
/// adjoint variable).
pub struct GreenFunction {
    pub pole: AmbientPoint,
    pub pole_level: usize,
    pub pole_cell: usize,
    pub solution: SpaceTimeSolution,
    pub direction: Direction,
}

pub fn green_function(
    ctx: &Flattened,
    pole: &AmbientPoint,
    direction: Direction,
    config: &SolverConfig,
) -> Result<GreenFunction> {
    let grid = ctx.grid;
    let (cell, level) = grid.locate(pole, ctx.psi)?;
    // pole must sit at least 4 cells from the wall, top, and time ends
    let idx = grid.spatial.multi_index(cell);
    let min_gap = 4.0 * grid.h_rho();
    let rho = grid.spatial.axes()[0].coord(idx[0]);
    if rho < min_gap || rho > grid.height() - min_gap {
        return Err(Error::PoleTooClose {
            gap: rho.min(grid.height() - rho),
            min_gap,
        });
    }
    if level < 4 || level + 4 > grid.n_steps {
        return Err(Error::PoleTooClose {
            gap: level.min(grid.n_steps - level) as f64,
            min_gap: 4.0,
        });
    }

    let n = grid.spatial_len();
    let n_steps = grid.n_steps;
    let mut levels = vec![vec![0.0; n]; n_steps + 1];
    // unit mass in one cell...
    let mut delta = vec![0.0; n];
    delta[cell] = 1.0 / grid.cell_volume();
    // ...then one smoothing pass per axis
    let f = crate::grid::Field {
        lattice: grid.spatial.clone(),
        values: delta,
    };
    let stencils: Vec<Vec<f64>> = (0..grid.spatial.ndim())
        .map(|_| vec![0.25, 0.5, 0.25])
        .collect();
    let smoothed = crate::grid::convolve_separable(&f, &stencils);
    levels[level] = smoothed.values;

    let solver = BiCgStab {
        tol: config.tol,
        max_iters: config.max_iters,
    };
    let static_ops = ctx.flat_graph() && ctx.coeff.is_identity();
    let mut cached: Option<AssembledLevel> = None;
    let steps: Vec<usize> = match direction {
        Direction::Forward => ((level + 1)..=n_steps).collect(),
        Direction::Adjoint => (0..level).rev().collect(),
    };
    for &m in &steps {
        let prev = match direction {
            Direction::Forward => m - 1,
            Direction::Adjoint => m + 1,
        };
        let t_new = grid.time(m);
        let assembled = if static_ops && cached.is_some() {
            cached.as_ref().unwrap()
        } else {
            cached = Some(ctx.assemble(t_new, direction, config.top));
            cached.as_ref().unwrap()
        };
        let theta = match config.scheme {
            TimeScheme::BackwardEuler => 1.0,
            TimeScheme::CrankNicolson => {
                let k = match direction {
                    Direction::Forward => m - level,
                    Direction::Adjoint => level - m,
                };
                if k <= 2 {
                    1.0
                } else {
                    0.5
                }
            }
        };
        let ht = grid.h_t;
        let mut rhs = levels[prev].clone();
        if theta < 1.0 {
            let mut lu = vec![0.0; n];
            assembled.l.matvec(&levels[prev], &mut lu);
            for i in 0..n {
                rhs[i] += (1.0 - theta) * ht * lu[i];
            }
        }
        let mut trip = Triplets::new(n);
        for i in 0..n {
            trip.add(i, i, 1.0);
            for k in assembled.l.row_ptr[i]..assembled.l.row_ptr[i + 1] {
                trip.add(i, assembled.l.col[k], -theta * ht * assembled.l.val[k]);
            }
        }
        let msys = trip.build();
        levels[m] = solver.solve(&msys, &rhs, Some(&levels[prev]))?;
    }
    Ok(GreenFunction {
        pole: pole.clone(),
        pole_level: level,
        pole_cell: cell,
        solution: SpaceTimeSolution {
            grid: grid.clone(),
            levels,
        },
        direction,
    })
}

/// Periodized half-space heat-kernel oracle for the flat graph with identity
/// coefficients: `Gamma(X - Y, t - s) - Gamma(X - Y*, t - s)` with the image
/// pole reflected through the graph, summed over lateral periodic images.
pub fn image_kernel_oracle(
    ambient_dim: usize,
    lateral_period: f64,
    point: &AmbientPoint,
    pole: &AmbientPoint,
    images: i32,
) -> f64 {
    let tau = point.p.t - pole.p.t;
    if tau <= 0.0 {
        return 0.0;
    }
    let gamma = |dx2: f64| (-dx2 / (4.0 * tau)).exp() / (4.0 * std::f64::consts::PI * tau).powf(ambient_dim as f64 / 2.0);
    let mut acc = 0.0;
    let sd = point.p.x.len();
    let mut offsets = vec![-images; sd];
    loop {
        let mut lat2 = 0.0;
        for a in 0..sd {
            let d = point.p.x[a] - pole.p.x[a] + offsets[a] as f64 * lateral_period;
            lat2 += d * d;
        }
        let dpos = (point.x0 - pole.x0).powi(2) + lat2;
        let dneg = (point.x0 + pole.x0).powi(2) + lat2;
        acc += gamma(dpos) - gamma(dneg);
        let mut a = sd;
        loop {
            if a == 0 {
                return acc;
            }
            a -= 1;
            offsets[a] += 1;
            if offsets[a] <= images {
                break;
            }
            offsets[a] = -images;
        }
    }
}

/// Relative L-infinity error of a flat-graph identity-coefficients Green
/// function against the periodized image-kernel oracle, over the points at
/// parabolic distance at least four cells from the pole and four cells from
/// the wall and top. Cell distances are measured in the parabolic metric
/// (one cell = `max(h_rho, h_x, sqrt(h_t))`), so the four-cell gap in the
/// time direction is the square of the spatial gap.
pub fn green_oracle_rel_error(
    grid: &FlattenedGrid,
    green: &GreenFunction,
    pole: &AmbientPoint,
    images: i32,
) -> f64 {
    let h_sp = grid
        .spatial
        .axes()
        .iter()
        .map(|a| a.step)
        .fold(0.0f64, f64::max);
    let h_cell = h_sp.max(grid.h_t.sqrt());
    let gap = 4.0 * h_cell;
    let lateral_period = grid.spatial.axes()[1].extent();
    let mut max_err = 0.0f64;
    let mut max_val = 0.0f64;
    for level in 0..=grid.n_steps {
        let t = grid.time(level);
        if t - pole.p.t < gap * gap {
            continue;
        }
        for cell in 0..grid.spatial_len() {
            let c = grid.cell_coords(cell);
            if c[0] < 4.0 * grid.h_rho() || c[0] > grid.height() - 4.0 * grid.h_rho() {
                continue;
            }
            let p = AmbientPoint::new(c[0], c[1..].to_vec(), t);
            let dx = p.sub(pole).spatial_norm();
            if dx + (t - pole.p.t).sqrt() < gap {
                continue;
            }
            let num = green.solution.value(level, cell);
            let oracle = image_kernel_oracle(
                grid.spatial.ndim(),
                lateral_period,
                &p,
                pole,
                images,
            );
            max_err = max_err.max((num - oracle).abs());
            max_val = max_val.max(oracle.abs());
        }
    }
    max_err / max_val
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_graph, GraphKind, GraphParams};

    fn flat_setup(nx: usize, n_rho: usize, n_steps: usize, horizon: f64) -> (FlattenedGrid, GraphFunction, CoefficientField) {
        let psi = make_graph(GraphKind::Flat, &GraphParams::desk_default(2, nx)).unwrap();
        let lateral = vec![Axis::periodic(nx, 0.0, 1.0 / nx as f64)];
        let grid = FlattenedGrid::new(n_rho, 1.0, lateral, n_steps, horizon / n_steps as f64, 0.0);
        let coeff = CoefficientField::identity(2);
        (grid, psi, coeff)
    }

    #[test]
    fn constants_are_exact_solutions() {
        let (grid, psi, coeff) = flat_setup(16, 16, 8, 0.05);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let sol = solve_parabolic(
            &ctx,
            &ProblemData::constant(1.0),
            Direction::Forward,
            &SolverConfig::default(),
        )
        .unwrap();
        let (lo, hi) = sol.min_max();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "[{lo}, {hi}]");
    }

    #[test]
    fn max_and_comparison_principles() {
        let (grid, psi, coeff) = flat_setup(16, 16, 12, 0.05);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let g1 = ProblemData {
            lateral: Arc::new(|p: &SpaceTimePoint| (std::f64::consts::TAU * p.x[0]).sin() * 0.5),
            initial: Arc::new(|_| 0.0),
        };
        let sol1 = solve_parabolic(&ctx, &g1, Direction::Forward, &SolverConfig::default()).unwrap();
        let (lo, hi) = sol1.min_max();
        assert!(lo >= -0.5 - 1e-8 && hi <= 0.5 + 1e-8, "[{lo}, {hi}]");
        // comparison: g2 = g1 + 0.3 gives u2 >= u1 ... actually pointwise shift
        let g2 = ProblemData {
            lateral: Arc::new(|p: &SpaceTimePoint| (std::f64::consts::TAU * p.x[0]).sin() * 0.5 + 0.3),
            initial: Arc::new(|_| 0.3),
        };
        let sol2 = solve_parabolic(&ctx, &g2, Direction::Forward, &SolverConfig::default()).unwrap();
        for (l1, l2) in sol1.levels.iter().zip(&sol2.levels) {
            for (a, b) in l1.iter().zip(l2) {
                assert!(b >= &(a - 1e-8));
            }
        }
    }

    #[test]
    fn green_against_image_oracle_small() {
        // coarse version of the acceptance criterion, as a smoke test
        let (grid, psi, coeff) = flat_setup(32, 32, 32, 1.0 / 16.0);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let pole = AmbientPoint::new(0.3, vec![0.5], grid.time(4));
        let config = SolverConfig {
            top: TopBoundary::Dirichlet0,
            scheme: TimeScheme::CrankNicolson,
            ..Default::default()
        };
        let green = green_function(&ctx, &pole, Direction::Forward, &config).unwrap();
        let rel = green_oracle_rel_error(&grid, &green, &pole, 32);
        assert!(rel < 0.05, "relative Linf {rel}");
    }

    #[test]
    fn green_causality_and_subprobability() {
        let (grid, psi, coeff) = flat_setup(16, 16, 16, 0.05);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let pole = AmbientPoint::new(0.4, vec![0.5], 0.02);
        let config = SolverConfig {
            top: TopBoundary::Dirichlet0,
            ..Default::default()
        };
        let green = green_function(&ctx, &pole, Direction::Forward, &config).unwrap();
        // zero before the pole time
        for level in 0..green.pole_level {
            assert!(green
                .solution
                .levels[level]
                .iter()
                .all(|&v| v == 0.0));
        }
        // nonnegative, and total heat per slice at most 1
        let cv = grid.cell_volume();
        for level in green.pole_level..=grid.n_steps {
            let slice: f64 = green.solution.levels[level].iter().sum::<f64>() * cv;
            assert!(slice <= 1.0 + 1e-8, "slice mass {slice}");
            assert!(green.solution.levels[level].iter().all(|&v| v >= -1e-9));
        }
        // pole too close to the wall is rejected
        let low = AmbientPoint::new(0.05, vec![0.5], 0.02);
        assert!(matches!(
            green_function(&ctx, &low, Direction::Forward, &config),
            Err(Error::PoleTooClose { .. })
        ));
    }
}
