//! Level-set construction of approximating graphs: the stopping distance and
//! its regularization, the level function `psi(r; x)` of the normalized
//! Green function, the cut-off approximating graph, transference of interior
//! estimates, the heart square functions, the smoothed family, and the
//! case-by-case regularity verdict.

use crate::analysis::{
    approx_identity, bmo_p_norm, half_time_derivative, john_stromberg, localized_kernel,
    regularized_distance, HalfDeriv, JohnStromberg, LocalizedKernel,
};
use crate::corona::{CubeWindow, StoppingTimeRegime};
use crate::error::{Error, Result};
use crate::geometry::{DyadicCube, SpaceTimePoint, StructuralConstants};
use crate::graph::GraphFunction;
use crate::grid::Field;
use crate::pde::SpaceTimeSolution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Exact stopping-time distance to a regime:
/// `d(x) = inf over regime cubes of (dist(x, Q) + diam(Q))`.
pub fn stopping_distance(window: &CubeWindow, regime: &StoppingTimeRegime, x: &SpaceTimePoint) -> f64 {
    let mut best = f64::INFINITY;
    for q in &regime.cubes {
        let v = window.grid.dist_to(q, x) + window.grid.diam(q.gen);
        if v < best {
            best = v;
        }
    }
    best
}

/// The stopping distance sampled on a boundary lattice.
pub fn stopping_distance_field(
    window: &CubeWindow,
    regime: &StoppingTimeRegime,
    lattice: &crate::grid::Lattice,
) -> Field {
    // group regime cubes by generation for a mild speedup
    let nd = lattice.ndim();
    Field::from_fn(lattice, |c| {
        let p = SpaceTimePoint::new(c[..nd - 1].to_vec(), c[nd - 1]);
        stopping_distance(window, regime, &p)
    })
}

/// Configuration of the level-set machinery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetConfig {
    /// Dilation factor for the interval-membership test (a desk surrogate
    /// for the huge dilates of the underlying construction; it must be
    /// large enough that `4 Q(S)` lies inside the dilate of the top cube).
    pub member_dilate: f64,
    /// Relative root tolerance (times the located cube side).
    pub tol: f64,
    /// Level-range cap factor: levels live in
    /// `(h(x)/10, range_factor * diam(Q0))`.
    pub range_factor: f64,
    /// Samples per octave of the `r` axis in square-function integrals.
    pub r_per_octave: usize,
}

impl Default for LevelSetConfig {
    fn default() -> Self {
        LevelSetConfig {
            member_dilate: 8.0,
            tol: 1e-10,
            range_factor: 16.0,
            r_per_octave: 4,
        }
    }
}

/// The level function of a vertically nondegenerate solution over a regime.
pub struct LevelSetMap<'a> {
    pub window: &'a CubeWindow,
    pub regime: &'a StoppingTimeRegime,
    pub u: &'a SpaceTimeSolution,
    pub constants: &'a StructuralConstants,
    pub config: LevelSetConfig,
}

impl LevelSetMap<'_> {
    /// Union of the per-cube vertical slabs `(l/K, K l)` over regime cubes
    /// whose dilate contains `x`; the union is an interval when the regime
    /// is semi-coherent and the scales are nested.
    pub fn search_interval(&self, x: &SpaceTimePoint) -> Option<(f64, f64)> {
        let k = self.constants.whitney_k;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for q in &self.regime.cubes {
            let c = self.window.grid.center(q);
            let half = 0.5 * self.window.grid.side(q.gen) * self.config.member_dilate;
            let t_half = 0.5
                * self.window.grid.side(q.gen).powi(2)
                * self.config.member_dilate
                * self.config.member_dilate;
            let mut inside = true;
            for a in 0..self.window.grid.spatial_dims {
                let mut d = x.x[a] - c.x[a];
                let period = self.window.grid.spatial_len;
                d -= (d / period).round() * period;
                if d.abs() >= half {
                    inside = false;
                    break;
                }
            }
            if inside {
                let mut dt = x.t - c.t;
                let tp = self.window.grid.time_len();
                dt -= (dt / tp).round() * tp;
                inside = dt.abs() < t_half;
            }
            if inside {
                let l = self.window.grid.side(q.gen);
                lo = lo.min(l / k);
                hi = hi.max(l * k);
            }
        }
        if hi > lo {
            Some((lo, hi))
        } else {
            None
        }
    }

    fn u_profile(&self, x: &SpaceTimePoint, rho: f64) -> f64 {
        let level = ((x.t - self.u.grid.t0) / self.u.grid.h_t).round() as usize;
        let level = level.min(self.u.levels.len() - 1);
        let mut coords = vec![rho];
        coords.extend_from_slice(&x.x);
        self.u.interp_at_level(level, &coords)
    }

    /// Precompute the search interval per lattice node (level solves on a
    /// lattice reuse this instead of rescanning the regime).
    pub fn interval_table(&self, lattice: &crate::grid::Lattice) -> Vec<Option<(f64, f64)>> {
        let nd = lattice.ndim();
        (0..lattice.len())
            .map(|flat| {
                let c = lattice.coords_flat(flat);
                let p = SpaceTimePoint::new(c[..nd - 1].to_vec(), c[nd - 1]);
                self.search_interval(&p)
            })
            .collect()
    }

    /// Solve with a known interval (see `interval_table`).
    pub fn solve_with_interval(
        &self,
        x: &SpaceTimePoint,
        r: f64,
        interval: Option<(f64, f64)>,
    ) -> Result<f64> {
        let (mut lo, mut hi) = interval.ok_or(Error::LevelNotAttained {
            lo: 0.0,
            hi: 0.0,
            level: r,
        })?;
        self.bisect(x, r, &mut lo, &mut hi)
    }

    /// Solve `u(psi, x) = r` on the search interval by bisection.
    pub fn level_solve(&self, x: &SpaceTimePoint, r: f64) -> Result<f64> {
        let (mut lo, mut hi) = self.search_interval(x).ok_or(Error::LevelNotAttained {
            lo: 0.0,
            hi: 0.0,
            level: r,
        })?;
        self.bisect(x, r, &mut lo, &mut hi)
    }

    fn bisect(&self, x: &SpaceTimePoint, r: f64, lo: &mut f64, hi: &mut f64) -> Result<f64> {
        let (mut lo, mut hi) = (*lo, *hi);
        let h_rho = self.u.grid.h_rho();
        lo = lo.max(0.5 * h_rho);
        hi = hi.min(self.u.grid.height() - 0.5 * h_rho);
        let f_lo = self.u_profile(x, lo) - r;
        let f_hi = self.u_profile(x, hi) - r;
        if f_lo >= 0.0 || f_hi <= 0.0 {
            return Err(Error::LevelNotAttained { lo, hi, level: r });
        }
        let tol = self.config.tol * (hi - lo).max(1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.u_profile(x, mid) - r > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < tol {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// The approximating graph `psi_S = (psi(h(.); .) - shift) * phi` with its
/// construction diagnostics.
#[derive(Debug, Clone)]
pub struct ApproxGraph {
    /// Shifted, cut-off approximating graph on the boundary lattice.
    pub graph: GraphFunction,
    /// Raw level values `psi(h(x); x)` (NaN where the level solve was not
    /// attempted or failed).
    pub psi_star: Field,
    /// Normalization shift `psi(h(center); center)`.
    pub shift: f64,
    pub h: Field,
    pub d: Field,
    pub phi: Field,
    pub report: PsiSReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiSReport {
    /// Fraction of attempted level solves that failed.
    pub failure_rate: f64,
    /// min / max over `4Q(S)` of `psi* - psi`.
    pub closeness: (f64, f64),
    /// max over `4Q(S)` of `(psi* - psi) / h`.
    pub closeness_over_h: f64,
    /// Fraction of solved points whose lift lands in a regime Whitney box.
    pub mapped_fraction: f64,
    /// Lip(1,1/2) estimate of the cut-off graph.
    pub lip: f64,
    /// sup of `|d_t psi_S| h` off the zero set of the cutoff.
    pub dt_times_h: f64,
    /// Approximation constant: sup over regime cubes of
    /// `sup_{2Q} dist(lift, graph of psi_S) / diam(Q)`.
    pub approx_constant: f64,
}

/// Smooth cutoff adapted to the regime top: 1 on `2Q(S)`, 0 outside `4Q(S)`.
pub fn regime_cutoff(window: &CubeWindow, top: &DyadicCube, lattice: &crate::grid::Lattice) -> Field {
    let c = window.grid.center(top);
    let side = window.grid.side(top.gen);
    let nd = lattice.ndim();
    Field::from_fn(lattice, |cc| {
        let mut v = 1.0f64;
        for a in 0..nd - 1 {
            let mut d = cc[a] - c.x[a];
            let period = window.grid.spatial_len;
            d -= (d / period).round() * period;
            v *= cutoff_profile(d.abs() / side);
        }
        let mut dt = cc[nd - 1] - c.t;
        let tp = window.grid.time_len();
        dt -= (dt / tp).round() * tp;
        v * cutoff_profile((dt.abs() / (side * side)).sqrt())
    })
}

/// 1 for |u| <= 1 (the 2Q band uses halfwidth 1 in units of the side), 0 at 2.
fn cutoff_profile(u: f64) -> f64 {
    if u <= 1.0 {
        1.0
    } else if u >= 2.0 {
        0.0
    } else {
        let v = 2.0 - u;
        v * v * v * (10.0 - 15.0 * v + 6.0 * v * v)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_psi_s(
    map: &LevelSetMap,
    psi: &GraphFunction,
    m0: f64,
    m2: f64,
) -> Result<ApproxGraph> {
    let lattice = psi.lattice().clone();
    let window = map.window;
    let top = &map.regime.top;
    let nd = lattice.ndim();

    // stopping distance and its regularization
    let d = stopping_distance_field(window, map.regime, &lattice);
    let reg = regularized_distance(&d)?;
    let h = reg.h.clone();

    // cutoff and the 4Q(S) membership mask
    let phi = regime_cutoff(window, top, &lattice);
    let c_top = window.grid.center(top);
    let side = window.grid.side(top.gen);

    // raw level values where the cutoff can see them
    let intervals = map.interval_table(&lattice);
    let mut psi_star = Field::constant(&lattice, f64::NAN);
    let mut attempted = 0usize;
    let mut failures = 0usize;
    let mut mapped = 0usize;
    let mut solved = 0usize;
    for flat in 0..lattice.len() {
        let cc = lattice.coords_flat(flat);
        let p = SpaceTimePoint::new(cc[..nd - 1].to_vec(), cc[nd - 1]);
        if !in_dilated_cube(window, &c_top, side, &p, 4.0) {
            continue;
        }
        attempted += 1;
        match map.solve_with_interval(&p, h.values[flat], intervals[flat]) {
            Ok(v) => {
                psi_star.values[flat] = v;
                solved += 1;
                // mapping property: the lift lands in a regime Whitney box
                if lift_in_regime(map, &p, v) {
                    mapped += 1;
                }
            }
            Err(_) => {
                failures += 1;
            }
        }
    }
    let failure_rate = if attempted == 0 {
        0.0
    } else {
        failures as f64 / attempted as f64
    };
    if failure_rate > 0.01 {
        return Err(Error::invalid(format!(
            "level solve failure rate {failure_rate:.3} exceeds 1%"
        )));
    }

    // normalization at the top-cube center
    let center_flat = {
        let mut idx = Vec::with_capacity(nd);
        for a in 0..nd - 1 {
            let ax = &lattice.axes()[a];
            idx.push(lattice.normalize_index(a, ((c_top.x[a] - ax.min) / ax.step).round() as isize));
        }
        let ax = &lattice.axes()[nd - 1];
        idx.push(lattice.normalize_index(nd - 1, ((c_top.t - ax.min) / ax.step).round() as isize));
        lattice.flat_index(&idx)
    };
    let shift = psi_star.values[center_flat];
    if !shift.is_finite() {
        return Err(Error::invalid("level solve failed at the regime center"));
    }

    // closeness quantities on 4Q(S)
    let mut close_lo = f64::INFINITY;
    let mut close_hi = f64::NEG_INFINITY;
    let mut over_h = 0.0f64;
    for flat in 0..lattice.len() {
        let v = psi_star.values[flat];
        if !v.is_finite() {
            continue;
        }
        let cc = lattice.coords_flat(flat);
        let p = SpaceTimePoint::new(cc[..nd - 1].to_vec(), cc[nd - 1]);
        let gap = v - psi.eval(&p);
        close_lo = close_lo.min(gap);
        close_hi = close_hi.max(gap);
        if h.values[flat] > 0.0 {
            over_h = over_h.max(gap / h.values[flat]);
        }
    }

    // the cut-off graph
    let values = Field {
        lattice: lattice.clone(),
        values: psi_star
            .values
            .iter()
            .zip(&phi.values)
            .map(|(v, p)| if *p == 0.0 { 0.0 } else { (v - shift) * p })
            .collect(),
    };
    let graph = GraphFunction::from_field(values);

    // |d_t psi_S| h bound off the zero set
    let taxis = nd - 1;
    let strides = lattice.strides();
    let mut dt_times_h = 0.0f64;
    for flat in 0..lattice.len() {
        if phi.values[flat] == 0.0 {
            continue;
        }
        let idx = lattice.multi_index(flat);
        let jp = lattice.normalize_index(taxis, idx[taxis] as isize + 1);
        let jm = lattice.normalize_index(taxis, idx[taxis] as isize - 1);
        let vp = graph.field().values
            [(flat as isize + (jp as isize - idx[taxis] as isize) * strides[taxis] as isize) as usize];
        let vm = graph.field().values
            [(flat as isize + (jm as isize - idx[taxis] as isize) * strides[taxis] as isize) as usize];
        if vp == 0.0 && vm == 0.0 {
            continue;
        }
        let dt = (vp - vm) / (2.0 * lattice.axes()[taxis].step);
        dt_times_h = dt_times_h.max(dt.abs() * h.values[flat]);
    }

    // approximation property over regime cubes: lifted 2Q within C1 diam(Q)
    // of the graph of psi_S (both in the shifted frame)
    let mut approx_constant = 0.0f64;
    for q in &map.regime.cubes {
        let cq = window.grid.center(q);
        let diam = window.grid.diam(q.gen);
        let sideq = window.grid.side(q.gen);
        let mut worst = 0.0f64;
        for k in 0..16 {
            let fx = ((k % 4) as f64 + 0.5) / 4.0 * 2.0 - 1.0;
            let ft = ((k / 4) as f64 + 0.5) / 4.0 * 2.0 - 1.0;
            let p = SpaceTimePoint::new(
                cq.x.iter().map(|c| c + fx * sideq).collect(),
                cq.t + ft * sideq * sideq,
            );
            let lift = psi.eval(&p) - shift;
            // vertical distance to the approximating graph
            let dvert = (graph.eval(&p) - lift).abs();
            worst = worst.max(dvert);
        }
        approx_constant = approx_constant.max(worst / diam);
    }

    let report = PsiSReport {
        failure_rate,
        closeness: (close_lo, close_hi),
        closeness_over_h: over_h,
        mapped_fraction: if solved == 0 {
            0.0
        } else {
            mapped as f64 / solved as f64
        },
        lip: graph.lip_constant(),
        dt_times_h,
        approx_constant,
    };
    let _ = (m0, m2);
    Ok(ApproxGraph {
        graph,
        psi_star,
        shift,
        h,
        d,
        phi,
        report,
    })
}

fn in_dilated_cube(
    window: &CubeWindow,
    center: &SpaceTimePoint,
    side: f64,
    p: &SpaceTimePoint,
    dilate: f64,
) -> bool {
    let half = 0.5 * side * dilate;
    let t_half = 0.5 * side * side * dilate * dilate;
    for a in 0..window.grid.spatial_dims {
        let mut d = p.x[a] - center.x[a];
        let period = window.grid.spatial_len;
        d -= (d / period).round() * period;
        if d.abs() >= half {
            return false;
        }
    }
    let mut dt = p.t - center.t;
    let tp = window.grid.time_len();
    dt -= (dt / tp).round() * tp;
    dt.abs() < t_half
}

fn lift_in_regime(map: &LevelSetMap, p: &SpaceTimePoint, rho: f64) -> bool {
    let k = map.constants.whitney_k;
    for q in &map.regime.cubes {
        let l = map.window.grid.side(q.gen);
        if rho <= l / k || rho >= l * k {
            continue;
        }
        let c = map.window.grid.center(q);
        if in_dilated_cube(map.window, &c, l, p, map.config.member_dilate) {
            return true;
        }
    }
    false
}

/// Transference of interior estimates to the level function: compare finite
/// differences of `psi(r; .)` with the implicit-differentiation formulas and
/// report the scaled derivative bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferenceReport {
    /// max relative mismatch of `d_r psi` vs `1 / d_rho u`.
    pub dr_mismatch: f64,
    /// max relative mismatch of `d_s psi` vs `-u_t / d_rho u`.
    pub ds_mismatch: f64,
    /// max relative mismatch of `grad_y psi` vs `-grad_x u / d_rho u`.
    pub dy_mismatch: f64,
    /// Measured constants of
    /// `|grad_{y,r} psi| + r |d_s psi| + r |grad^2 psi| + r^2 |grad d_s psi|`.
    pub scaled_bound: f64,
    pub samples: usize,
}

pub fn transference_check(
    map: &LevelSetMap,
    psi: &GraphFunction,
    samples: usize,
    seed: u64,
) -> Result<TransferenceReport> {
    let lattice = psi.lattice();
    let nd = lattice.ndim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = map.window;
    let top = &map.regime.top;
    let c_top = window.grid.center(top);
    let side = window.grid.side(top.gen);
    let mut dr_mis = 0.0f64;
    let mut ds_mis = 0.0f64;
    let mut dy_mis = 0.0f64;
    let mut scaled = 0.0f64;
    let mut used = 0usize;
    let hx = lattice.axes()[0].step;
    let ht = lattice.axes()[nd - 1].step;
    let mut attempts = 0;
    while used < samples && attempts < samples * 20 {
        attempts += 1;
        let mut x = Vec::with_capacity(nd - 1);
        for a in 0..nd - 1 {
            x.push(c_top.x[a] + side * rng.gen_range(-0.9..0.9));
        }
        let t = c_top.t + side * side * rng.gen_range(-0.9..0.9);
        let p = SpaceTimePoint::new(x, t);
        let hval = {
            let d = stopping_distance(window, map.regime, &p);
            d * rng.gen_range(0.7..1.4)
        };
        let r = hval;
        let solve = |pp: &SpaceTimePoint, rr: f64| map.level_solve(pp, rr);
        let center = match solve(&p, r) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let dr = 0.02 * r;
        let (rp, rm) = match (solve(&p, r + dr), solve(&p, r - dr)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        let mut py = p.clone();
        py.x[0] += hx;
        let mut my = p.clone();
        my.x[0] -= hx;
        let (yp, ym) = match (solve(&py, r), solve(&my, r)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        let mut pt = p.clone();
        pt.t += ht;
        let mut mt = p.clone();
        mt.t -= ht;
        let (tp, tm) = match (solve(&pt, r), solve(&mt, r)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        // finite differences of psi(r; x)
        let dpsi_dr = (rp - rm) / (2.0 * dr);
        let dpsi_dy = (yp - ym) / (2.0 * hx);
        let dpsi_ds = (tp - tm) / (2.0 * ht);
        let d2psi_dr2 = (rp - 2.0 * center + rm) / (dr * dr);
        let d2psi_dy2 = (yp - 2.0 * center + ym) / (hx * hx);
        // u derivatives at the lift, by finite differences of the profile
        let level = ((t - map.u.grid.t0) / map.u.grid.h_t).round() as usize;
        let uval = |pp: &SpaceTimePoint, rho: f64, lv: usize| {
            let mut coords = vec![rho];
            coords.extend_from_slice(&pp.x);
            map.u.interp_at_level(lv.min(map.u.levels.len() - 1), &coords)
        };
        let h_rho = map.u.grid.h_rho();
        let u_rho = (uval(&p, center + h_rho, level) - uval(&p, center - h_rho, level))
            / (2.0 * h_rho);
        let u_y = (uval(&py, center, level) - uval(&my, center, level)) / (2.0 * hx);
        let u_t = if level >= 1 && level + 1 < map.u.levels.len() {
            (uval(&p, center, level + 1) - uval(&p, center, level - 1)) / (2.0 * map.u.grid.h_t)
        } else {
            continue;
        };
        if u_rho.abs() < 1e-12 {
            continue;
        }
        dr_mis = dr_mis.max(rel_mismatch(dpsi_dr, 1.0 / u_rho));
        ds_mis = ds_mis.max(rel_mismatch(dpsi_ds, -u_t / u_rho));
        dy_mis = dy_mis.max(rel_mismatch(dpsi_dy, -u_y / u_rho));
        let grad1 = (dpsi_dy * dpsi_dy + dpsi_dr * dpsi_dr).sqrt();
        let hess = (d2psi_dr2 * d2psi_dr2 + d2psi_dy2 * d2psi_dy2).sqrt();
        // mixed grad d_s by differencing dpsi_dy in time
        let mut pyt = py.clone();
        pyt.t += ht;
        let mut myt = my.clone();
        myt.t += ht;
        let mixed = match (solve(&pyt, r), solve(&myt, r)) {
            (Ok(a), Ok(b)) => {
                let dpsi_dy_t = (a - b) / (2.0 * hx);
                ((dpsi_dy_t - dpsi_dy) / ht).abs()
            }
            _ => 0.0,
        };
        scaled = scaled.max(grad1 + r * dpsi_ds.abs() + r * hess + r * r * mixed);
        used += 1;
    }
    Ok(TransferenceReport {
        dr_mismatch: dr_mis,
        ds_mismatch: ds_mis,
        dy_mismatch: dy_mis,
        scaled_bound: scaled,
        samples: used,
    })
}

fn rel_mismatch(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

/// Quadrature of the heart square functions over the continuous sawtooth
/// `S(Q0)`: `|r d_s psi_heart|^2 + |r grad^2 psi_heart|^2 +
/// |r^2 grad d_s psi_heart|^2` against `dr/r dy ds`, normalized by `|Q0|`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeartReport {
    pub normalized_integral: f64,
    pub term_ds: f64,
    pub term_hess: f64,
    pub term_mixed: f64,
    pub solve_failures: f64,
}

pub fn heart_square_function(
    map: &LevelSetMap,
    approx: &ApproxGraph,
    q0: &DyadicCube,
    lattice: &crate::grid::Lattice,
) -> Result<HeartReport> {
    let window = map.window;
    let c0 = window.grid.center(q0);
    let side0 = window.grid.side(q0.gen);
    let diam0 = window.grid.diam(q0.gen);
    let nd = lattice.ndim();
    let hx = lattice.axes()[0].step;
    let ht = lattice.axes()[nd - 1].step;
    let ratio = 2f64.powf(1.0 / map.config.r_per_octave as f64);
    let lw = ratio.ln();

    // lattice nodes of the dilated cube plus a one-node margin for FDs
    let intervals = map.interval_table(lattice);
    let mut member = vec![false; lattice.len()];
    for flat in 0..lattice.len() {
        let cc = lattice.coords_flat(flat);
        let p = SpaceTimePoint::new(cc[..nd - 1].to_vec(), cc[nd - 1]);
        if in_dilated_cube(window, &c0, side0, &p, 4.0) {
            member[flat] = true;
        }
    }
    let strides = lattice.strides();
    let mut needed = member.clone();
    for flat in 0..lattice.len() {
        if member[flat] {
            let idx = lattice.multi_index(flat);
            for a in 0..nd {
                for off in [-1isize, 1] {
                    let j = lattice.normalize_index(a, idx[a] as isize + off);
                    let nb = (flat as isize
                        + (j as isize - idx[a] as isize) * strides[a] as isize)
                        as usize;
                    needed[nb] = true;
                }
            }
        }
    }
    let nodes: Vec<usize> = (0..lattice.len()).filter(|&i| needed[i]).collect();

    // geometric r grid
    let r_max = map.config.range_factor * diam0;
    let r_min = {
        let finest = window.grid.side(window.max_gen) / map.constants.whitney_k;
        finest.max(2.0 * hx)
    };
    let mut rs = Vec::new();
    let mut r = r_min;
    while r <= r_max * ratio {
        rs.push(r);
        r *= ratio;
    }
    if rs.len() < 3 {
        return Err(Error::invalid("resolvable level band is too thin"));
    }

    // evaluate the normalized cut-off level function on the (r, node) table
    let mut table = vec![vec![f64::NAN; lattice.len()]; rs.len()];
    let mut attempted = 0usize;
    let mut failed = 0usize;
    for (j, &rj) in rs.iter().enumerate() {
        for &flat in &nodes {
            if rj <= approx.h.values[flat] / 10.0 {
                continue;
            }
            attempted += 1;
            let cc = lattice.coords_flat(flat);
            let p = SpaceTimePoint::new(cc[..nd - 1].to_vec(), cc[nd - 1]);
            match map.solve_with_interval(&p, rj, intervals[flat]) {
                Ok(v) => {
                    table[j][flat] = (v - approx.shift) * approx.phi.values[flat];
                }
                Err(_) => {
                    failed += 1;
                }
            }
        }
    }

    // finite differences on the table
    let mut integral = [0.0f64; 3];
    let cellvol = lattice.cell_volume();
    let sd = nd - 1;
    for j in 1..rs.len() - 1 {
        let rj = rs[j];
        let a = rs[j] - rs[j - 1];
        let b = rs[j + 1] - rs[j];
        for &flat in &nodes {
            if !member[flat] || rj <= approx.h.values[flat] / 10.0 {
                continue;
            }
            let idx = lattice.multi_index(flat);
            let v0 = table[j][flat];
            if !v0.is_finite() {
                continue;
            }
            let nb = |jr: usize, axis: usize, off: isize| -> f64 {
                let k = lattice.normalize_index(axis, idx[axis] as isize + off);
                table[jr][(flat as isize
                    + (k as isize - idx[axis] as isize) * strides[axis] as isize)
                    as usize]
            };
            let vrp = table[j + 1][flat];
            let vrm = table[j - 1][flat];
            let vtp = nb(j, nd - 1, 1);
            let vtm = nb(j, nd - 1, -1);
            if ![vrp, vrm, vtp, vtm].iter().all(|v| v.is_finite()) {
                continue;
            }
            // nonuniform second derivative in r
            let d2r = 2.0 * (a * vrp + b * vrm - (a + b) * v0) / (a * b * (a + b));
            let d1r = (a * a * vrp - b * b * vrm - (a * a - b * b) * v0) / (a * b * (a + b));
            let ds = (vtp - vtm) / (2.0 * ht);
            let mut hess2 = d2r * d2r;
            let mut mixed2 = 0.0;
            // d_s of d_r via the r-t cross stencil
            let vtp_rp = nb(j + 1, nd - 1, 1);
            let vtm_rp = nb(j + 1, nd - 1, -1);
            let vtp_rm = nb(j - 1, nd - 1, 1);
            let vtm_rm = nb(j - 1, nd - 1, -1);
            if [vtp_rp, vtm_rp, vtp_rm, vtm_rm].iter().all(|v| v.is_finite()) {
                let ds_rp = (vtp_rp - vtm_rp) / (2.0 * ht);
                let ds_rm = (vtp_rm - vtm_rm) / (2.0 * ht);
                let drds = (a * a * ds_rp - b * b * ds_rm - (a * a - b * b) * ds)
                    / (a * b * (a + b));
                mixed2 += drds * drds;
            }
            let mut ok = true;
            for ax in 0..sd {
                let hxa = lattice.axes()[ax].step;
                let vp = nb(j, ax, 1);
                let vm = nb(j, ax, -1);
                if !vp.is_finite() || !vm.is_finite() {
                    ok = false;
                    break;
                }
                let dyy = (vp - 2.0 * v0 + vm) / (hxa * hxa);
                hess2 += dyy * dyy;
                // mixed y-r second derivative
                let vp_rp = nb(j + 1, ax, 1);
                let vm_rp = nb(j + 1, ax, -1);
                let vp_rm = nb(j - 1, ax, 1);
                let vm_rm = nb(j - 1, ax, -1);
                if [vp_rp, vm_rp, vp_rm, vm_rm].iter().all(|v| v.is_finite()) {
                    let dy_rp = (vp_rp - vm_rp) / (2.0 * hxa);
                    let dy_rm = (vp_rm - vm_rm) / (2.0 * hxa);
                    let dy0 = (vp - vm) / (2.0 * hxa);
                    let dyr = (a * a * dy_rp - b * b * dy_rm - (a * a - b * b) * dy0)
                        / (a * b * (a + b));
                    hess2 += 2.0 * dyr * dyr;
                }
                // d_s of d_y
                let vp_tp = {
                    let k1 = lattice.normalize_index(ax, idx[ax] as isize + 1);
                    let k2 = lattice.normalize_index(nd - 1, idx[nd - 1] as isize + 1);
                    let f2 = (flat as isize
                        + (k1 as isize - idx[ax] as isize) * strides[ax] as isize
                        + (k2 as isize - idx[nd - 1] as isize) * strides[nd - 1] as isize)
                        as usize;
                    table[j][f2]
                };
                let vm_tp = {
                    let k1 = lattice.normalize_index(ax, idx[ax] as isize - 1);
                    let k2 = lattice.normalize_index(nd - 1, idx[nd - 1] as isize + 1);
                    let f2 = (flat as isize
                        + (k1 as isize - idx[ax] as isize) * strides[ax] as isize
                        + (k2 as isize - idx[nd - 1] as isize) * strides[nd - 1] as isize)
                        as usize;
                    table[j][f2]
                };
                if vp_tp.is_finite() && vm_tp.is_finite() {
                    let dy_tp = (vp_tp - vm_tp) / (2.0 * hxa);
                    let dy0 = (vp - vm) / (2.0 * hxa);
                    let dys = (dy_tp - dy0) / ht;
                    mixed2 += dys * dys;
                }
            }
            if !ok {
                continue;
            }
            let _ = d1r;
            let w = lw * cellvol;
            integral[0] += (rj * ds).powi(2) * w;
            integral[1] += rj * rj * hess2 * w;
            integral[2] += rj.powi(4) * mixed2 * w;
        }
    }
    let norm = window.grid.measure(q0.gen);
    Ok(HeartReport {
        normalized_integral: (integral[0] + integral[1] + integral[2]) / norm,
        term_ds: integral[0] / norm,
        term_hess: integral[1] / norm,
        term_mixed: integral[2] / norm,
        solve_failures: if attempted == 0 {
            0.0
        } else {
            failed as f64 / attempted as f64
        },
    })
}

fn interp_field(f: &Field, p: &SpaceTimePoint) -> f64 {
    let mut coords = p.x.clone();
    coords.push(p.t);
    f.interp(&coords)
}

/// The smoothed family `psi~(r; x) = psi_heart(r + P_{gr} h(x); x)` with its
/// containment and bound diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedFamilyReport {
    /// The mollification ratio actually used (halved until the quarter
    /// bound held).
    pub gamma: f64,
    /// max over the band of `|h - P_{gr} h| / r`.
    pub approx_id_margin: f64,
    /// Fraction of samples violating the sawtooth containment.
    pub containment_violations: f64,
    /// sup of `|r d_r^2 psi~| + |r d_t psi~| + |r^2 d_t d_r psi~|`.
    pub pointwise_bound: f64,
    /// Normalized square-function integral of the same three terms.
    pub integral_bound: f64,
    /// `psi~(0;.) = psi_S` check (max abs difference).
    pub agrees_at_zero: f64,
    /// Square functions of the smoothed distance:
    /// `|(P_r - I) h / r|^2` and `|d_r P_r h|^2` integrals over the band,
    /// normalized by `|Q|`.
    pub prh_square_functions: [f64; 2],
}

pub fn smoothed_family(
    map: &LevelSetMap,
    approx: &ApproxGraph,
    q0: &DyadicCube,
    gamma0: f64,
) -> Result<SmoothedFamilyReport> {
    let window = map.window;
    let lattice = approx.h.lattice.clone();
    let nd = lattice.ndim();
    let c0 = window.grid.center(q0);
    let side0 = window.grid.side(q0.gen);
    let diam0 = window.grid.diam(q0.gen);
    let hx = lattice.axes()[0].step;
    let ht = lattice.axes()[nd - 1].step;

    // choose gamma: halve until |h - P_{gr}h| <= r/4 across the band
    let r_lo = (2.0 * hx).max(window.grid.side(window.max_gen) / map.constants.whitney_k);
    let r_hi = map.config.range_factor * diam0;
    let mut gamma = gamma0;
    let mut margin = f64::INFINITY;
    for _ in 0..8 {
        margin = 0.0;
        let mut r = r_lo;
        while r <= r_hi {
            if gamma * r >= 2.0 * hx {
                let ph = approx_identity(&approx.h, gamma * r);
                let diff = ph.sub(&approx.h).linf_norm();
                margin = margin.max(diff / r);
            }
            r *= 2.0;
        }
        if margin <= 0.25 {
            break;
        }
        gamma *= 0.5;
    }

    // sample points in 2Q0
    let mut pts = Vec::new();
    for flat in 0..lattice.len() {
        let cc = lattice.coords_flat(flat);
        let p = SpaceTimePoint::new(cc[..nd - 1].to_vec(), cc[nd - 1]);
        if in_dilated_cube(window, &c0, side0, &p, 2.0) {
            pts.push((flat, p));
        }
    }

    let intervals = map.interval_table(&lattice);
    let node_of = |p: &SpaceTimePoint| -> usize {
        let mut idx = Vec::with_capacity(nd);
        for a in 0..nd - 1 {
            let ax = &lattice.axes()[a];
            idx.push(lattice.normalize_index(a, ((p.x[a] - ax.min) / ax.step).round() as isize));
        }
        let ax = &lattice.axes()[nd - 1];
        idx.push(lattice.normalize_index(nd - 1, ((p.t - ax.min) / ax.step).round() as isize));
        lattice.flat_index(&idx)
    };
    let tilde = |p: &SpaceTimePoint, r: f64, prh: &Field| -> Option<f64> {
        let arg = r + interp_field(prh, p);
        let base = map
            .solve_with_interval(p, arg, intervals[node_of(p)])
            .ok()?;
        Some((base - approx.shift) * interp_field(&approx.phi, p))
    };

    // agreement at r = 0 (P_0 = identity): compare against psi_S samples
    let mut agree = 0.0f64;
    for (flat, p) in pts.iter().take(200) {
        if approx.phi.values[*flat] == 0.0 {
            continue;
        }
        if let Ok(base) = map.solve_with_interval(p, approx.h.values[*flat], intervals[*flat]) {
            let t0 = (base - approx.shift) * approx.phi.values[*flat];
            let s = approx.graph.field().values[*flat];
            agree = agree.max((t0 - s).abs());
        }
    }

    // containment, pointwise bounds, and integrals over the r band
    let ratio = 2f64.powf(1.0 / map.config.r_per_octave as f64);
    let lw = ratio.ln();
    let mut violations = 0usize;
    let mut total = 0usize;
    let mut pointwise = 0.0f64;
    let mut integral = 0.0f64;
    let mut prh_sf = [0.0f64; 2];
    let cellvol = lattice.cell_volume();
    let norm = window.grid.measure(q0.gen);
    let mut r = r_lo.max(2.0 * hx / gamma);
    while r <= r_hi {
        let prh = approx_identity(&approx.h, (gamma * r).max(hx * 1.01));
        let dr_fd = 0.05 * r;
        let prh_p = approx_identity(&approx.h, (gamma * (r + dr_fd)).max(hx * 1.01));
        let prh_m = approx_identity(&approx.h, (gamma * (r - dr_fd)).max(hx * 1.01));
        for (flat, p) in &pts {
            total += 1;
            let arg = r + prh.values[*flat];
            let hval = approx.h.values[*flat];
            if arg <= hval / 10.0 || arg >= map.config.range_factor * diam0 * 2.0 {
                violations += 1;
                continue;
            }
            let v0 = match tilde(p, r, &prh) {
                Some(v) => v,
                None => continue,
            };
            let vp = tilde(p, r + dr_fd, &prh_p);
            let vm = tilde(p, r - dr_fd, &prh_m);
            let mut pt = p.clone();
            pt.t += ht;
            let mut mt = p.clone();
            mt.t -= ht;
            let vt = tilde(&pt, r, &prh);
            let vb = tilde(&mt, r, &prh);
            if let (Some(vp), Some(vm), Some(vt), Some(vb)) = (vp, vm, vt, vb) {
                let d2r = (vp - 2.0 * v0 + vm) / (dr_fd * dr_fd);
                let dt = (vt - vb) / (2.0 * ht);
                // mixed d_t d_r
                let vtp = tilde(&pt, r + dr_fd, &prh_p);
                let vtm = tilde(&pt, r - dr_fd, &prh_m);
                let mixed = match (vtp, vtm) {
                    (Some(a), Some(b)) => {
                        let dr_at_t = (a - b) / (2.0 * dr_fd);
                        let dr_at_0 = (vp - vm) / (2.0 * dr_fd);
                        ((dr_at_t - dr_at_0) / ht).abs()
                    }
                    _ => 0.0,
                };
                let s = (r * d2r).abs() + (r * dt).abs() + (r * r * mixed).abs();
                pointwise = pointwise.max(s);
                integral += ((r * d2r).powi(2) + (r * dt).powi(2) + (r * r * mixed).powi(2))
                    * lw
                    * cellvol;
            }
            // P_r h square functions
            let pr_i = (prh.values[*flat] - approx.h.values[*flat]) / r;
            let drp = (prh_p.values[*flat] - prh_m.values[*flat]) / (2.0 * dr_fd);
            prh_sf[0] += pr_i * pr_i * lw * cellvol;
            prh_sf[1] += drp * drp * lw * cellvol;
        }
        r *= ratio;
    }
    Ok(SmoothedFamilyReport {
        gamma,
        approx_id_margin: margin,
        containment_violations: if total == 0 {
            0.0
        } else {
            violations as f64 / total as f64
        },
        pointwise_bound: pointwise,
        integral_bound: integral / norm,
        agrees_at_zero: agree,
        prh_square_functions: [prh_sf[0] / norm, prh_sf[1] / norm],
    })
}

/// Case classification of a window cube relative to the regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubeCase {
    Near,
    DeepBelow,
    FarAway,
    Boundary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub cube: DyadicCube,
    pub case: CubeCase,
    pub side: f64,
    /// Localized quantity: mean `|Dt^Q psi_S|` for near cubes, sup for the
    /// deep/far cases.
    pub localized: f64,
    /// Per-cube minimal John-Stromberg threshold.
    pub js_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    pub records: Vec<CaseRecord>,
    pub counts: [usize; 4],
    pub bmo_norm: f64,
    pub js: JohnStromberg,
    /// sup of the localized quantity per case (near / deep / far).
    pub case_sups: [f64; 3],
}

/// Classify every window cube into the four regularity cases and compute the
/// localized half-order derivative statistics plus the global
/// John-Stromberg verdict for `Dt psi_S`.
pub fn regularity_report(
    window: &CubeWindow,
    regime: &StoppingTimeRegime,
    approx: &ApproxGraph,
    constants: &StructuralConstants,
    near_dilate: f64,
) -> Result<RegularityReport> {
    let lattice = approx.graph.lattice().clone();
    let f = approx.graph.field().clone();
    let dgrid = &window.grid;
    let top = &regime.top;
    let top_side = dgrid.side(top.gen);
    let eps0 = constants.eps0;

    let dt_all = half_time_derivative(&f, HalfDeriv::Dt).field;
    let max_gen = dgrid.max_generation(&lattice).min(window.max_gen);

    // per-generation localized operators
    let mut localized: Vec<Option<(LocalizedKernel, Field)>> = Vec::new();
    for g in 0..=max_gen {
        let r = 0.5 * dgrid.side(g);
        match localized_kernel(&lattice, r) {
            Ok(loc) => {
                let field = loc.apply_dt(&f);
                localized.push(Some((loc, field)));
            }
            Err(_) => localized.push(None),
        }
    }

    let cube_in_dilated = |q: &DyadicCube, center: &SpaceTimePoint, side: f64, dilate: f64| {
        // all corners of q inside the dilated cube (periodic)
        let rq = dgrid.ranges(q);
        let half = 0.5 * side * dilate;
        let t_half = 0.5 * side * side * dilate * dilate;
        for corner in 0..(1 << rq.len()) {
            let mut ok = true;
            for (a, r) in rq.iter().enumerate() {
                let v = if (corner >> a) & 1 == 1 { r.1 } else { r.0 };
                if a < dgrid.spatial_dims {
                    let mut d = v - center.x[a];
                    d -= (d / dgrid.spatial_len).round() * dgrid.spatial_len;
                    if d.abs() > half {
                        ok = false;
                        break;
                    }
                } else {
                    let mut d = v - center.t;
                    d -= (d / dgrid.time_len()).round() * dgrid.time_len();
                    if d.abs() > t_half {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                return false;
            }
        }
        true
    };

    let c_top = dgrid.center(top);
    let mut records = Vec::new();
    let mut counts = [0usize; 4];
    let mut case_sups = [0.0f64; 3];
    for g in top.gen..=max_gen {
        for q in dgrid.cubes_at(g) {
            let side = dgrid.side(g);
            let diam = dgrid.diam(g);
            let in50 = cube_in_dilated(&q, &c_top, top_side, near_dilate);
            let case = if in50 {
                // is there a regime cube Q0 with q inside its 50-dilate and
                // diam(q) >= eps0 diam(Q0)?
                let mut near = false;
                let mut any_containing = false;
                for q0 in &regime.cubes {
                    let c0 = dgrid.center(q0);
                    let s0 = dgrid.side(q0.gen);
                    if cube_in_dilated(&q, &c0, s0, near_dilate) {
                        any_containing = true;
                        if diam >= eps0 * dgrid.diam(q0.gen) {
                            near = true;
                            break;
                        }
                    }
                }
                if near {
                    CubeCase::Near
                } else if any_containing {
                    CubeCase::DeepBelow
                } else {
                    // inside 50Q(S) but not inside any regime cube's dilate:
                    // treat by distance like the far/boundary split
                    if dgrid.dist_to(top, &dgrid.center(&q)) >= 6.0 * diam {
                        CubeCase::FarAway
                    } else {
                        CubeCase::Boundary
                    }
                }
            } else {
                // distance from q to 4Q(S)
                let d = dist_cube_to_dilated(dgrid, &q, top, 4.0);
                if d >= 6.0 * diam {
                    CubeCase::FarAway
                } else {
                    CubeCase::Boundary
                }
            };
            // localized statistic
            let (mean_abs, sup_abs) = match &localized[g as usize] {
                Some((_, field)) => {
                    let cells = dgrid.cube_cells(&lattice, &q);
                    let mut sum = 0.0;
                    let mut sup = 0.0f64;
                    for &i in &cells {
                        let v = field.values[i].abs();
                        sum += v;
                        sup = sup.max(v);
                    }
                    (sum / cells.len() as f64, sup)
                }
                None => (f64::NAN, f64::NAN),
            };
            let localized_stat = match case {
                CubeCase::Near => mean_abs,
                _ => sup_abs,
            };
            match case {
                CubeCase::Near => {
                    counts[0] += 1;
                    if localized_stat.is_finite() {
                        case_sups[0] = case_sups[0].max(localized_stat);
                    }
                }
                CubeCase::DeepBelow => {
                    counts[1] += 1;
                    if localized_stat.is_finite() {
                        case_sups[1] = case_sups[1].max(localized_stat);
                    }
                }
                CubeCase::FarAway => {
                    counts[2] += 1;
                    if localized_stat.is_finite() {
                        case_sups[2] = case_sups[2].max(localized_stat);
                    }
                }
                CubeCase::Boundary => counts[3] += 1,
            }
            // per-cube JS threshold for the global derivative
            let js_m = {
                let cells = dgrid.cube_cells(&lattice, &q);
                let mut vals: Vec<f64> = cells.iter().map(|&i| dt_all.values[i]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = vals.len();
                let need = n - n / 3;
                let mut local = f64::INFINITY;
                for i in 0..=(n - need) {
                    local = local.min(0.5 * (vals[i + need - 1] - vals[i]));
                }
                local
            };
            records.push(CaseRecord {
                cube: q,
                case,
                side,
                localized: localized_stat,
                js_m,
            });
        }
    }
    let bmo = bmo_p_norm(&dt_all, dgrid, max_gen);
    let js = john_stromberg(&dt_all, dgrid, max_gen, 0.0);
    Ok(RegularityReport {
        records,
        counts,
        bmo_norm: bmo,
        js,
        case_sups,
    })
}

fn dist_cube_to_dilated(
    dgrid: &crate::geometry::DyadicGrid,
    q: &DyadicCube,
    top: &DyadicCube,
    dilate: f64,
) -> f64 {
    // parabolic gap between the cube and the dilated top cube
    let cq = dgrid.center(q);
    let ct = dgrid.center(top);
    let half_q = 0.5 * dgrid.side(q.gen);
    let half_t = 0.5 * dgrid.side(top.gen) * dilate;
    let mut s2 = 0.0;
    for a in 0..dgrid.spatial_dims {
        let mut d = cq.x[a] - ct.x[a];
        d -= (d / dgrid.spatial_len).round() * dgrid.spatial_len;
        let excess = (d.abs() - half_q - half_t).max(0.0);
        s2 += excess * excess;
    }
    let tq = 0.5 * dgrid.side(q.gen).powi(2);
    let tt = 0.5 * dgrid.side(top.gen).powi(2) * dilate * dilate;
    let mut dt = cq.t - ct.t;
    dt -= (dt / dgrid.time_len()).round() * dgrid.time_len();
    let t_excess = (dt.abs() - tq - tt).max(0.0);
    s2.sqrt() + t_excess.sqrt()
}

/// Case-1 pairing decomposition for one cube: the direct pairing
/// `iint Dt^Q psi_S f`, the boundary terms `b1, b2` of the parts chain, and
/// the three bulk terms, each compared to `|Q|^{1/2}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairingReport {
    pub lhs: f64,
    pub b1: f64,
    pub b2: f64,
    pub i_terms: [f64; 3],
    /// `|lhs - (i1+i2+i3+b1-b2)|`.
    pub identity_residual: f64,
    /// Each of `|lhs|, |b1|, |b2|, |i1|, |i2|, |i3|` over `|Q|^{1/2}`.
    pub over_sqrt_q: [f64; 6],
}

pub fn case1_pairing(
    map: &LevelSetMap,
    approx: &ApproxGraph,
    q0: &DyadicCube,
    gamma: f64,
    seed: u64,
) -> Result<PairingReport> {
    let window = map.window;
    let lattice = approx.graph.lattice().clone();
    let nd = lattice.ndim();
    let dgrid = &window.grid;
    // the paired cube Q is the dilate of Q0; desk: use Q = 2 Q0 ranges
    let c0 = dgrid.center(q0);
    let side_q = 2.0 * dgrid.side(q0.gen);
    let r_loc = 0.5 * side_q;
    let loc = localized_kernel(&lattice, r_loc)?;

    // random band-limited f supported in Q, unit L2 norm
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Field::zeros(&lattice);
    for _ in 0..6 {
        let kx = rng.gen_range(2i32..=6) as f64;
        let kt = rng.gen_range(2i32..=12) as f64;
        let amp: f64 = rng.gen_range(-1.0..1.0);
        let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let g = Field::from_fn(&lattice, |c| {
            amp * (std::f64::consts::TAU
                * (kx * c[0] / lattice.axes()[0].extent()
                    + kt * c[1] / lattice.axes()[1].extent())
                + ph)
                .cos()
        });
        f = f.add(&g);
    }
    // cutoff to Q
    let fq = Field::from_fn(&lattice, |c| {
        let p = SpaceTimePoint::new(c[..nd - 1].to_vec(), c[nd - 1]);
        let mut v = 1.0;
        for a in 0..dgrid.spatial_dims {
            let mut d = p.x[a] - c0.x[a];
            d -= (d / dgrid.spatial_len).round() * dgrid.spatial_len;
            v *= cutoff_profile(2.0 * d.abs() / side_q);
        }
        let mut dt = p.t - c0.t;
        dt -= (dt / dgrid.time_len()).round() * dgrid.time_len();
        v * cutoff_profile(2.0 * (dt.abs()).sqrt() / side_q)
    });
    let mut f = f.zip_with(&fq, |a, b| a * b);
    let n2 = f.l2_norm();
    if n2 > 0.0 {
        f = f.scale(1.0 / n2);
    }

    // lhs: direct pairing with the localized derivative of psi_S
    let dt_q = loc.apply_dt(approx.graph.field());
    let cv = lattice.cell_volume();
    let lhs: f64 = dt_q
        .values
        .iter()
        .zip(&f.values)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        * cv;

    // smoothed-family values on an r-grid
    let diam_q = side_q * ((dgrid.spatial_dims as f64).sqrt() + 1.0);
    let ratio = 2f64.powf(1.0 / map.config.r_per_octave as f64);
    let hx = lattice.axes()[0].step;
    let r_min = 2.0 * hx / gamma.max(1e-6);
    let intervals = map.interval_table(&lattice);
    let tilde_field = |r: f64| -> Field {
        let prh = approx_identity(&approx.h, (gamma * r).max(hx * 1.01));
        let mut flat = 0usize;
        Field::from_fn(&lattice, |c| {
            let p = SpaceTimePoint::new(c[..nd - 1].to_vec(), c[nd - 1]);
            let arg = r + interp_field(&prh, &p);
            let iv = intervals[flat];
            flat += 1;
            match map.solve_with_interval(&p, arg, iv) {
                Ok(v) => (v - approx.shift) * interp_field(&approx.phi, &p),
                Err(_) => 0.0,
            }
        })
    };

    // bulk terms I1, I2, I3 and boundary terms b1, b2
    let mut i_terms = [0.0f64; 3];
    let mut r = r_min;
    let mut last_r = r_min;
    while r <= diam_q {
        let dr_fd = 0.1 * r;
        let t0 = tilde_field(r);
        let tp = tilde_field(r + dr_fd);
        let tm = tilde_field(r - dr_fd);
        let d2 = tp
            .add(&tm)
            .sub(&t0.scale(2.0))
            .scale(1.0 / (dr_fd * dr_fd));
        let d1 = tp.sub(&tm).scale(1.0 / (2.0 * dr_fd));
        let pf0 = approx_identity(&f, (gamma * r).max(hx * 1.01));
        let pfp = approx_identity(&f, (gamma * (r + dr_fd)).max(hx * 1.01));
        let pfm = approx_identity(&f, (gamma * (r - dr_fd)).max(hx * 1.01));
        let pf1 = pfp.sub(&pfm).scale(gamma / (2.0 * dr_fd));
        let pf2 = pfp
            .add(&pfm)
            .sub(&pf0.scale(2.0))
            .scale(gamma * gamma / (dr_fd * dr_fd));
        let w = ratio.ln() * r; // r dr integration with dr = r ln(ratio)
        let dtq_d2 = loc.apply_dt(&d2);
        let dtq_d1 = loc.apply_dt(&d1);
        let dtq_t0 = loc.apply_dt(&t0);
        i_terms[0] += inner(&dtq_d2, &pf0) * cv * w;
        i_terms[1] += 2.0 * inner(&dtq_d1, &pf1) * cv * w;
        i_terms[2] += inner(&dtq_t0, &pf2) * cv * w;
        last_r = r;
        r *= ratio;
    }
    // boundary terms at r = diam(Q)
    let r_b = last_r;
    let dr_fd = 0.1 * r_b;
    let t0 = tilde_field(r_b);
    let tp = tilde_field(r_b + dr_fd);
    let tm = tilde_field(r_b - dr_fd);
    let pf0 = approx_identity(&f, (gamma * r_b).max(hx * 1.01));
    let pfp = approx_identity(&f, (gamma * (r_b + dr_fd)).max(hx * 1.01));
    let pfm = approx_identity(&f, (gamma * (r_b - dr_fd)).max(hx * 1.01));
    let b1 = inner(&loc.apply_dt(&t0), &pf0) * cv;
    // b2 = d_r [ Dt^Q tilde(r) . P_{gr} f ] r at r = diam(Q)
    let val = |t: &Field, p: &Field| inner(&loc.apply_dt(t), p) * cv;
    let b2 = (val(&tp, &pfp) - val(&tm, &pfm)) / (2.0 * dr_fd) * r_b;
    let recon = i_terms[0] + i_terms[1] + i_terms[2] + b1 - b2;
    let sq = window.grid.measure(q0.gen).sqrt();
    Ok(PairingReport {
        lhs,
        b1,
        b2,
        i_terms,
        identity_residual: (lhs - recon).abs(),
        over_sqrt_q: [
            lhs.abs() / sq,
            b1.abs() / sq,
            b2.abs() / sq,
            i_terms[0].abs() / sq,
            i_terms[1].abs() / sq,
            i_terms[2].abs() / sq,
        ],
    })
}

fn inner(a: &Field, b: &Field) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corona::CubeWindow;
    use crate::geometry::DyadicGrid;
    use crate::grid::{Axis, Lattice};
    use crate::pde::FlattenedGrid;
    use approx::assert_relative_eq;
    use std::collections::BTreeSet;

    fn window(max_gen: u32) -> CubeWindow {
        let grid = DyadicGrid::new(1, 1.0);
        CubeWindow {
            top: grid.root(),
            grid,
            max_gen,
        }
    }

    fn full_regime(w: &CubeWindow) -> StoppingTimeRegime {
        StoppingTimeRegime {
            top: w.top.clone(),
            cubes: w.cubes().into_iter().collect::<BTreeSet<_>>(),
        }
    }

    fn synthetic_solution(grid: &FlattenedGrid, f: impl Fn(f64, &[f64], f64) -> f64) -> SpaceTimeSolution {
        let mut levels = Vec::with_capacity(grid.n_steps + 1);
        for m in 0..=grid.n_steps {
            let t = grid.time(m);
            let mut slab = vec![0.0; grid.spatial_len()];
            for (cell, v) in slab.iter_mut().enumerate() {
                let c = grid.cell_coords(cell);
                *v = f(c[0], &c[1..], t);
            }
            levels.push(slab);
        }
        SpaceTimeSolution {
            grid: grid.clone(),
            levels,
        }
    }

    #[test]
    fn stopping_distance_single_cube() {
        let grid = DyadicGrid::new(1, 1.0);
        let w = CubeWindow {
            top: grid.root(),
            grid,
            max_gen: 0,
        };
        let regime = StoppingTimeRegime {
            top: w.top.clone(),
            cubes: std::iter::once(w.top.clone()).collect(),
        };
        // inside the cube: d = diam
        let inside = SpaceTimePoint::new(vec![0.5], 0.5);
        assert_relative_eq!(
            stopping_distance(&w, &regime, &inside),
            w.grid.diam(0),
            epsilon = 1e-12
        );
        // lip constant at most 1 over sampled pairs
        let lat = Lattice::boundary(1, 16, 1.0, 1.0);
        let d = stopping_distance_field(&w, &regime, &lat);
        let lip = crate::analysis::field_lip_estimate(&d);
        assert!(lip <= 1.0 + 1e-9, "lip {lip}");
    }

    #[test]
    fn level_solve_linear_and_cubic() {
        let w = window(3);
        let regime = full_regime(&w);
        let lateral = vec![Axis::periodic(16, 0.0, 1.0 / 16.0)];
        let grid = FlattenedGrid::new(64, 2.0, lateral, 16, 1.0 / 16.0, 0.0);
        let constants = StructuralConstants::desk(2, 0.0).unwrap();
        // u = rho: levels are exactly psi(r) = r
        let u = synthetic_solution(&grid, |rho, _, _| rho);
        let map = LevelSetMap {
            window: &w,
            regime: &regime,
            u: &u,
            constants: &constants,
            config: LevelSetConfig::default(),
        };
        let p = SpaceTimePoint::new(vec![0.5], 0.5);
        for r in [0.1, 0.2, 0.5] {
            assert_relative_eq!(map.level_solve(&p, r).unwrap(), r, epsilon = 1e-7);
        }
        // u = rho + rho^3: root of the cubic, checked against bisection here
        let u3 = synthetic_solution(&grid, |rho, _, _| rho + rho * rho * rho);
        let map3 = LevelSetMap {
            window: &w,
            regime: &regime,
            u: &u3,
            constants: &constants,
            config: LevelSetConfig::default(),
        };
        let r = 0.7;
        let got = map3.level_solve(&p, r).unwrap();
        // oracle: independent bisection on the same interpolated profile
        let mut lo = 0.02;
        let mut hi = 1.9;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let v = u3.interp_at_level(8, &[mid, 0.5]);
            if v > r {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert_relative_eq!(got, 0.5 * (lo + hi), epsilon = 1e-5);
        // monotone in r
        let a = map3.level_solve(&p, 0.3).unwrap();
        let b = map3.level_solve(&p, 0.6).unwrap();
        assert!(a < b);
        // level not attained outside the range
        assert!(matches!(
            map3.level_solve(&p, 500.0),
            Err(Error::LevelNotAttained { .. })
        ));
    }

    #[test]
    fn transference_on_linear_solution() {
        let w = window(3);
        let regime = full_regime(&w);
        let psi = crate::graph::make_graph(
            crate::graph::GraphKind::Flat,
            &crate::graph::GraphParams::desk_default(2, 16),
        )
        .unwrap();
        let grid = FlattenedGrid::aligned_with_boundary(psi.lattice(), 64, 2.0);
        let constants = StructuralConstants::desk(2, 0.0).unwrap();
        let u = synthetic_solution(&grid, |rho, _, _| rho);
        let map = LevelSetMap {
            window: &w,
            regime: &regime,
            u: &u,
            constants: &constants,
            config: LevelSetConfig::default(),
        };
        let rep = transference_check(&map, &psi, 40, 7).unwrap();
        assert!(rep.samples > 10);
        // d_r psi = 1, all mismatches tiny, second derivatives vanish
        assert!(rep.dr_mismatch < 1e-5, "{:?}", rep);
        assert!(rep.ds_mismatch < 1e-5);
        assert!(rep.scaled_bound < 1.2, "scaled {}", rep.scaled_bound);
    }

    #[test]
    fn heart_vanishes_for_linear_u() {
        let w = window(3);
        let regime = full_regime(&w);
        let psi = crate::graph::make_graph(
            crate::graph::GraphKind::Flat,
            &crate::graph::GraphParams::desk_default(2, 16),
        )
        .unwrap();
        let grid = FlattenedGrid::aligned_with_boundary(psi.lattice(), 64, 2.0);
        let constants = StructuralConstants::desk(2, 0.0).unwrap();
        let u = synthetic_solution(&grid, |rho, _, _| rho);
        let map = LevelSetMap {
            window: &w,
            regime: &regime,
            u: &u,
            constants: &constants,
            config: LevelSetConfig::default(),
        };
        let approx = build_psi_s(&map, &psi, 2.0, 1.0).unwrap();
        // psi(r; x) = r: the heart integrand vanishes where phi is constant;
        // restrict to a deep cube so the cutoff is locally 1
        let q0 = DyadicCube {
            gen: 2,
            idx: vec![2, 8],
        };
        let rep = heart_square_function(&map, &approx, &q0, psi.lattice()).unwrap();
        assert!(
            rep.normalized_integral < 0.05,
            "integral {}",
            rep.normalized_integral
        );
    }
}
