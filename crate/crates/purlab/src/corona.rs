//! Stopping-time regimes, the measure-driven corona decomposition, the
//! Green-function nondegeneracy refinement, sawtooth cutoff functions, and
//! the square-function / integration-by-parts verification reports.

use crate::coeffs::hessian_contraction;
use crate::error::{Error, Result};
use crate::geometry::{
    DyadicCube, DyadicGrid, SpaceTimePoint, StructuralConstants, WhitneyRegion, WhitneyVariant,
};
use crate::graph::GraphFunction;
use crate::grid::{Field, Lattice};
use crate::pde::{Flattened, FlattenedGrid, SpaceTimeSolution};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// A dyadic window: all descendants of a top cube down to `max_gen`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubeWindow {
    pub grid: DyadicGrid,
    pub top: DyadicCube,
    pub max_gen: u32,
}

impl CubeWindow {
    pub fn cubes(&self) -> Vec<DyadicCube> {
        (self.top.gen..=self.max_gen)
            .flat_map(|g| self.grid.descendants_at(&self.top, g))
            .collect()
    }

    pub fn contains(&self, q: &DyadicCube) -> bool {
        q.gen >= self.top.gen && q.gen <= self.max_gen && self.grid.contains(&self.top, q)
    }
}

/// Semi-coherent stopping-time regime: a cube family with a unique maximal
/// cube, closed under taking intermediate cubes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingTimeRegime {
    pub top: DyadicCube,
    pub cubes: BTreeSet<DyadicCube>,
}

impl StoppingTimeRegime {
    pub fn contains(&self, q: &DyadicCube) -> bool {
        self.cubes.contains(q)
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    /// Exact semi-coherence check: whenever a member has a member-ancestor,
    /// every intermediate cube is a member; and the top is the unique
    /// maximal cube.
    pub fn is_semi_coherent(&self, grid: &DyadicGrid) -> bool {
        for q in &self.cubes {
            if !grid.contains(&self.top, q) {
                return false;
            }
            // walk up from q to the top; once we leave the regime, we may
            // not re-enter
            let mut cur = q.clone();
            let mut outside = false;
            while cur.gen > self.top.gen {
                cur = grid.parent(&cur).unwrap();
                if self.cubes.contains(&cur) {
                    if outside {
                        return false;
                    }
                } else {
                    outside = true;
                }
            }
        }
        self.cubes.contains(&self.top)
    }

    /// Members with side length in `[2^{-n2} l(top), 2^{-n1} l(top)]`.
    pub fn truncated(&self, n1: u32, n2: u32) -> Vec<DyadicCube> {
        self.cubes
            .iter()
            .filter(|q| {
                let d = q.gen - self.top.gen;
                d >= n1 && d <= n2
            })
            .cloned()
            .collect()
    }
}

/// Per-cube measures over a window (both the parabolic measure of the
/// lifted cube and its surface measure).
#[derive(Debug, Clone)]
pub struct CubeMeasures {
    pub omega: BTreeMap<DyadicCube, f64>,
    pub sigma: BTreeMap<DyadicCube, f64>,
}

impl CubeMeasures {
    /// Aggregate per-cell fields on the boundary lattice into cube sums.
    pub fn from_fields(
        window: &CubeWindow,
        lattice: &Lattice,
        omega: &Field,
        sigma: &Field,
    ) -> Self {
        let mut om = BTreeMap::new();
        let mut sg = BTreeMap::new();
        for q in window.cubes() {
            let cells = window.grid.cube_cells(lattice, &q);
            om.insert(q.clone(), cells.iter().map(|&i| omega.values[i]).sum());
            sg.insert(q.clone(), cells.iter().map(|&i| sigma.values[i]).sum());
        }
        CubeMeasures {
            omega: om,
            sigma: sg,
        }
    }

    /// Synthetic measures from a density function on cube centers (used by
    /// soundness tests): `omega(Q) = density(center) * sigma(Q)` with
    /// `sigma(Q) = |Q|`.
    pub fn synthetic(window: &CubeWindow, density: impl Fn(&DyadicCube) -> f64) -> Self {
        let mut om = BTreeMap::new();
        let mut sg = BTreeMap::new();
        for q in window.cubes() {
            let s = window.grid.measure(q.gen);
            sg.insert(q.clone(), s);
            om.insert(q.clone(), density(&q) * s);
        }
        // enforce additivity: rebuild parents from leaves
        for g in (window.top.gen..window.max_gen).rev() {
            for q in window.grid.descendants_at(&window.top, g) {
                let kids = window.grid.children(&q);
                let osum: f64 = kids.iter().map(|k| om[k]).sum();
                let ssum: f64 = kids.iter().map(|k| sg[k]).sum();
                om.insert(q.clone(), osum);
                sg.insert(q, ssum);
            }
        }
        CubeMeasures {
            omega: om,
            sigma: sg,
        }
    }

    pub fn density(&self, q: &DyadicCube) -> Option<f64> {
        let o = self.omega.get(q)?;
        let s = self.sigma.get(q)?;
        Some(o / s)
    }
}

/// One stopping pass: stop at maximal cubes whose density ratio against the
/// top leaves `[1/m', m']`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoronaStep {
    pub top: DyadicCube,
    pub stopped: Vec<DyadicCube>,
    pub regime: StoppingTimeRegime,
    /// `|union of stopped| / |top|` in parameter measure.
    pub stopped_fraction: f64,
    /// `1 - stopped_fraction` (the contact-set lower bound check).
    pub contact_fraction: f64,
}

pub fn measure_corona_step(
    window: &CubeWindow,
    measures: &CubeMeasures,
    top: &DyadicCube,
    m_prime: f64,
) -> Result<CoronaStep> {
    let top_density = measures
        .density(top)
        .ok_or_else(|| Error::MeasureMissing(format!("{top:?}")))?;
    let mut regime = BTreeSet::new();
    let mut stopped = Vec::new();
    let mut queue = VecDeque::new();
    regime.insert(top.clone());
    if top.gen < window.max_gen {
        for ch in window.grid.children(top) {
            queue.push_back(ch);
        }
    }
    while let Some(q) = queue.pop_front() {
        let d = measures
            .density(&q)
            .ok_or_else(|| Error::MeasureMissing(format!("{q:?}")))?;
        let ratio = d / top_density;
        if !(1.0 / m_prime..=m_prime).contains(&ratio) {
            stopped.push(q);
        } else {
            regime.insert(q.clone());
            if q.gen < window.max_gen {
                for ch in window.grid.children(&q) {
                    queue.push_back(ch);
                }
            }
        }
    }
    let stopped_measure: f64 = stopped.iter().map(|q| window.grid.measure(q.gen)).sum();
    let top_measure = window.grid.measure(top.gen);
    let stopped_fraction = stopped_measure / top_measure;
    Ok(CoronaStep {
        top: top.clone(),
        stopped,
        regime: StoppingTimeRegime {
            top: top.clone(),
            cubes: regime,
        },
        stopped_fraction,
        contact_fraction: 1.0 - stopped_fraction,
    })
}

/// Packing statistic: sup over every window cube `P` of
/// `sum_{tops inside P} |top| / |P|`.
pub fn packing_ratio(window: &CubeWindow, family: &[DyadicCube]) -> f64 {
    let mut best = 0.0f64;
    for p in window.cubes() {
        let sum: f64 = family
            .iter()
            .filter(|q| window.grid.contains(&p, q))
            .map(|q| window.grid.measure(q.gen))
            .sum();
        let ratio = sum / window.grid.measure(p.gen);
        if ratio > best {
            best = ratio;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoronaDecomposition {
    pub regimes: Vec<StoppingTimeRegime>,
    /// Fraction stopped at each pass.
    pub stopped_fractions: Vec<f64>,
    /// Sup over window cubes of the top-measure packing ratio.
    pub top_packing: f64,
}

/// Iterated measure corona over the window. The measure may depend on the
/// regime top (each pass re-evaluates it from the supplied closure, matching
/// pole placement at the top's corkscrew); the two-measure variant stops on
/// either family.
pub fn measure_corona(
    window: &CubeWindow,
    m_prime: f64,
    mut omega_for_top: impl FnMut(&DyadicCube) -> Result<CubeMeasures>,
    mut omega_tilde_for_top: Option<&mut dyn FnMut(&DyadicCube) -> Result<CubeMeasures>>,
) -> Result<CoronaDecomposition> {
    let mut regimes = Vec::new();
    let mut fractions = Vec::new();
    let mut queue = VecDeque::new();
    queue.push_back(window.top.clone());
    while let Some(top) = queue.pop_front() {
        let measures = omega_for_top(&top)?;
        let step = measure_corona_step(window, &measures, &top, m_prime)?;
        let mut stopped = step.stopped.clone();
        let mut regime = step.regime;
        if let Some(omega_tilde) = omega_tilde_for_top.as_deref_mut() {
            let measures2 = omega_tilde(&top)?;
            let step2 = measure_corona_step(window, &measures2, &top, m_prime)?;
            // stop on either family: maximal cubes of the union
            let mut all: Vec<DyadicCube> = stopped;
            all.extend(step2.stopped);
            all.sort();
            all.dedup();
            let maximal: Vec<DyadicCube> = all
                .iter()
                .filter(|q| {
                    !all.iter()
                        .any(|p| p != *q && window.grid.contains(p, q))
                })
                .cloned()
                .collect();
            // regime = descendants of top not below any stopped cube
            let mut cubes = BTreeSet::new();
            for q in window.cubes() {
                if window.grid.contains(&top, &q)
                    && !maximal.iter().any(|s| window.grid.contains(s, &q))
                {
                    cubes.insert(q);
                }
            }
            regime = StoppingTimeRegime {
                top: top.clone(),
                cubes,
            };
            stopped = maximal;
        }
        let stopped_measure: f64 = stopped.iter().map(|q| window.grid.measure(q.gen)).sum();
        fractions.push(stopped_measure / window.grid.measure(top.gen));
        regimes.push(regime);
        for s in stopped {
            queue.push_back(s);
        }
    }
    let tops: Vec<DyadicCube> = regimes.iter().map(|r| r.top.clone()).collect();
    let top_packing = packing_ratio(window, &tops);
    Ok(CoronaDecomposition {
        regimes,
        stopped_fractions: fractions,
        top_packing,
    })
}

/// Derivative fields of a solution on the flattened grid, precomputed once:
/// squared Hessian and time-derivative magnitudes in ambient coordinates,
/// the vertical derivative, the mixed `d_t grad` magnitude, and the raw
/// value. Entries are NaN where the stencil does not fit.
pub struct SolutionDerivFields {
    pub grid: FlattenedGrid,
    pub value: Vec<Vec<f64>>,
    pub hess2: Vec<Vec<f64>>,
    pub ut: Vec<Vec<f64>>,
    pub u_rho: Vec<Vec<f64>>,
    pub t_grad2: Vec<Vec<f64>>,
    /// Ambient Hessian entries per node (row-major n x n), for the
    /// integration-by-parts contraction.
    pub hess: Vec<Vec<Vec<f64>>>,
}

pub fn solution_deriv_fields(
    sol: &SpaceTimeSolution,
    psi: &GraphFunction,
    max_level: usize,
) -> SolutionDerivFields {
    let grid = sol.grid.clone();
    let n = grid.spatial.ndim();
    let levels = max_level.min(sol.levels.len() - 1) + 1;
    let mut value = vec![vec![f64::NAN; grid.spatial_len()]; levels];
    let mut hess2 = vec![vec![f64::NAN; grid.spatial_len()]; levels];
    let mut ut = vec![vec![f64::NAN; grid.spatial_len()]; levels];
    let mut u_rho = vec![vec![f64::NAN; grid.spatial_len()]; levels];
    let mut t_grad2 = vec![vec![f64::NAN; grid.spatial_len()]; levels];
    let mut hess = vec![vec![Vec::new(); grid.spatial_len()]; levels];
    for level in 0..levels {
        for cell in 0..grid.spatial_len() {
            value[level][cell] = sol.levels[level][cell];
            if let Some(ad) = sol.ambient_derivs(psi, level, cell) {
                hess2[level][cell] = ad.hess_frobenius2();
                ut[level][cell] = ad.u_t;
                u_rho[level][cell] = ad.grad[0];
                t_grad2[level][cell] = ad.t_grad.iter().map(|v| v * v).sum();
                hess[level][cell] = ad.hess.iter().cloned().collect();
            }
        }
    }
    let _ = n;
    SolutionDerivFields {
        grid,
        value,
        hess2,
        ut,
        u_rho,
        t_grad2,
        hess,
    }
}

/// Visit the flattened cells of a Whitney region: calls `f(level, cell, rho)`
/// for nodes with parameter point in the dilated cube, vertical gap in the
/// region band, and time level in range.
pub fn for_each_whitney_cell(
    grid: &FlattenedGrid,
    region: &WhitneyRegion,
    dgrid: &DyadicGrid,
    mut f: impl FnMut(usize, usize, f64),
) {
    let lat = &grid.spatial;
    let c = dgrid.center(&region.cube);
    let side = dgrid.side(region.cube.gen);
    let half = 0.5 * side * region.dilate;
    let t_half = 0.5 * side * side * region.dilate * region.dilate;
    // time levels in range (clipped to the window)
    let t_lo = ((c.t - t_half - grid.t0) / grid.h_t).ceil().max(0.0) as usize;
    let t_hi = (((c.t + t_half - grid.t0) / grid.h_t).floor() as isize)
        .min(grid.n_steps as isize)
        .max(0) as usize;
    if t_lo > t_hi {
        return;
    }
    // spatial cells: rho band and dilated-cube lateral membership
    let mut cells = Vec::new();
    for cell in 0..grid.spatial_len() {
        let cc = lat.coords_flat(cell);
        let rho = cc[0];
        if rho <= region.gap_lo || rho >= region.gap_hi {
            continue;
        }
        let mut inside = true;
        for a in 0..dgrid.spatial_dims {
            let d = lat.axes()[1 + a].wrap_diff(cc[1 + a], c.x[a]);
            if d.abs() >= half {
                inside = false;
                break;
            }
        }
        if inside {
            cells.push((cell, rho));
        }
    }
    for level in t_lo..=t_hi {
        for &(cell, rho) in &cells {
            f(level, cell, rho);
        }
    }
}

/// Nondegeneracy refinement of a regime: cubes are bad when too large
/// (within `top_gens_excluded` generations of the regime top) or when the
/// local square-function mass of the normalized Green function exceeds
/// `eps |Q|`; on good cubes the vertical derivative stays above `c1/8`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementReport {
    pub good: Vec<DyadicCube>,
    pub bad: Vec<DyadicCube>,
    pub skipped: Vec<DyadicCube>,
    pub bad_packing: f64,
    /// min over good-cube Whitney cells of the vertical derivative.
    pub min_vertical_derivative: f64,
    /// Number of good cubes violating the `c1/8` floor (reported, not fatal).
    pub floor_violations: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn nondegeneracy_refinement(
    window: &CubeWindow,
    regime: &StoppingTimeRegime,
    derivs: &SolutionDerivFields,
    constants: &StructuralConstants,
    eps: f64,
    c1: f64,
    top_gens_excluded: u32,
) -> Result<RefinementReport> {
    let grid = &derivs.grid;
    let mut good = Vec::new();
    let mut bad = Vec::new();
    let mut skipped = Vec::new();
    let mut min_vert = f64::INFINITY;
    let mut floor_violations = 0usize;
    for q in &regime.cubes {
        if q.gen < regime.top.gen + top_gens_excluded {
            bad.push(q.clone());
            continue;
        }
        // oscillation integral over U_Q^*
        let region = WhitneyRegion::new(&window.grid, q, WhitneyVariant::Star, constants);
        let mut integral = 0.0;
        let mut resolved = 0usize;
        let mut total = 0usize;
        let cv = grid.cell_volume() * grid.h_t;
        for_each_whitney_cell(grid, &region, &window.grid, |level, cell, rho| {
            total += 1;
            if level < derivs.hess2.len() {
                let h2 = derivs.hess2[level][cell];
                let ut = derivs.ut[level][cell];
                if h2.is_finite() && ut.is_finite() {
                    resolved += 1;
                    integral += (h2 + ut * ut) * rho * cv;
                }
            }
        });
        if total == 0 || resolved * 2 < total {
            skipped.push(q.clone());
            continue;
        }
        let threshold = eps * window.grid.measure(q.gen);
        if integral >= threshold {
            bad.push(q.clone());
            continue;
        }
        // verify the vertical floor on U_Q
        let plain = WhitneyRegion::new(&window.grid, q, WhitneyVariant::Plain, constants);
        let mut local_min = f64::INFINITY;
        for_each_whitney_cell(grid, &plain, &window.grid, |level, cell, _| {
            if level < derivs.u_rho.len() {
                let v = derivs.u_rho[level][cell];
                if v.is_finite() {
                    local_min = local_min.min(v);
                }
            }
        });
        if local_min.is_finite() {
            min_vert = min_vert.min(local_min);
            if local_min < c1 / 8.0 {
                floor_violations += 1;
            }
        }
        good.push(q.clone());
    }
    let bad_packing = packing_ratio(window, &bad);
    Ok(RefinementReport {
        good,
        bad,
        skipped,
        bad_packing,
        min_vertical_derivative: min_vert,
        floor_violations,
    })
}

/// Split a good-cube family into maximal semi-coherent stopping regimes.
pub fn split_regimes(window: &CubeWindow, good: &[DyadicCube]) -> Vec<StoppingTimeRegime> {
    let good_set: BTreeSet<DyadicCube> = good.iter().cloned().collect();
    let mut assigned: BTreeSet<DyadicCube> = BTreeSet::new();
    let mut regimes = Vec::new();
    // maximal good cubes, largest first
    let mut sorted: Vec<DyadicCube> = good.to_vec();
    sorted.sort_by_key(|q| q.gen);
    for top in sorted {
        if assigned.contains(&top) {
            continue;
        }
        // regime = descendants of top with an all-good chain up to top
        let mut cubes = BTreeSet::new();
        cubes.insert(top.clone());
        let mut frontier = vec![top.clone()];
        while let Some(q) = frontier.pop() {
            if q.gen >= window.max_gen {
                continue;
            }
            for ch in window.grid.children(&q) {
                if good_set.contains(&ch) && !assigned.contains(&ch) {
                    cubes.insert(ch.clone());
                    frontier.push(ch);
                }
            }
        }
        for q in &cubes {
            assigned.insert(q.clone());
        }
        regimes.push(StoppingTimeRegime { top, cubes });
    }
    regimes
}

/// Smooth sawtooth cutoff adapted to a truncated regime: the normalized sum
/// of per-cube mollified indicators of the `U_Q^*` boxes, equal to 1 on the
/// covered part of the `**` sawtooth and supported in the neighbor union.
pub struct SawtoothCutoff {
    pub grid: FlattenedGrid,
    /// Per level, per cell.
    pub eta: Vec<Vec<f64>>,
    pub report: CutoffReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutoffReport {
    /// sup of `|grad eta| rho + |d_t eta| rho^2`.
    pub derivative_constant: f64,
    /// `iiint (|grad eta| + |d_t eta| rho) / |Q(S)|`.
    pub integral_bound: f64,
    /// Packing of the transition cubes against `|Q(S)|`.
    pub boundary_packing: f64,
    /// Transition-family counts per case (out-cube too large / inside the
    /// regime top / outside it).
    pub f_counts: [usize; 3],
    /// Fraction of `**`-sawtooth nodes covered by the partition with eta = 1.
    pub on_region_coverage: f64,
}

fn ramp(cdf_arg: f64) -> f64 {
    // integral of the smooth bump zeta from -inf to u, normalized:
    // approximated by the quintic smoothstep on [-1, 1]
    let u = (cdf_arg + 1.0) / 2.0;
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

/// Smoothed box indicator: product of per-axis ramps of width `w` around
/// `[lo, hi]` (periodic axes get the wrapped offset).
fn smooth_box(u: f64, lo: f64, hi: f64, w: f64) -> f64 {
    ramp((u - lo) / w) * ramp((hi - u) / w)
}

pub fn sawtooth_cutoff(
    window: &CubeWindow,
    truncated: &[DyadicCube],
    grid: &FlattenedGrid,
    constants: &StructuralConstants,
    top_of_regime: &DyadicCube,
) -> Result<SawtoothCutoff> {
    let lat = &grid.spatial;
    let n_levels = grid.n_steps + 1;
    let eps = 0.2; // mollification scale relative to the cube side
    let all_cubes = window.cubes();

    // mark the ** sawtooth of the truncated family
    let mut on_region = vec![vec![false; grid.spatial_len()]; n_levels];
    for q in truncated {
        let region = WhitneyRegion::new(&window.grid, q, WhitneyVariant::StarStar, constants);
        for_each_whitney_cell(grid, &region, &window.grid, |level, cell, _| {
            on_region[level][cell] = true;
        });
    }
    // membership of the neighbor family: cubes whose ** box touches the mark
    let mut in_tilde: BTreeSet<DyadicCube> = BTreeSet::new();
    for q in &all_cubes {
        let region = WhitneyRegion::new(&window.grid, q, WhitneyVariant::StarStar, constants);
        let mut touches = false;
        for_each_whitney_cell(grid, &region, &window.grid, |level, cell, _| {
            if on_region[level][cell] {
                touches = true;
            }
        });
        if touches {
            in_tilde.insert(q.clone());
        }
    }

    // accumulate numerator and denominator of the partition
    let mut numer = vec![vec![0.0f64; grid.spatial_len()]; n_levels];
    let mut denom = vec![vec![0.0f64; grid.spatial_len()]; n_levels];
    for q in &all_cubes {
        let star = WhitneyRegion::new(&window.grid, q, WhitneyVariant::Star, constants);
        let support = WhitneyRegion::new(&window.grid, q, WhitneyVariant::StarStar, constants);
        let side = window.grid.side(q.gen);
        let w_sp = eps * side;
        let w_t = (eps * side) * (eps * side);
        let c = window.grid.center(&q.clone());
        let half = 0.5 * side * star.dilate;
        let t_half = 0.5 * side * side * star.dilate * star.dilate;
        let member = in_tilde.contains(q);
        for_each_whitney_cell(grid, &support, &window.grid, |level, cell, rho| {
            let cc = lat.coords_flat(cell);
            let t = grid.time(level);
            // product of smoothed indicators of the U_Q^* box
            let mut v = smooth_box(rho, star.gap_lo, star.gap_hi, w_sp);
            for a in 0..window.grid.spatial_dims {
                let d = lat.axes()[1 + a].wrap_diff(cc[1 + a], c.x[a]);
                v *= smooth_box(d, -half, half, w_sp);
            }
            let dt = {
                let period = window.grid.time_len();
                let mut d = t - c.t;
                d -= (d / period).round() * period;
                d
            };
            v *= smooth_box(dt, -t_half, t_half, w_t);
            if v > 0.0 {
                denom[level][cell] += v;
                if member {
                    numer[level][cell] += v;
                }
            }
        });
    }
    let mut eta = vec![vec![0.0f64; grid.spatial_len()]; n_levels];
    for level in 0..n_levels {
        for cell in 0..grid.spatial_len() {
            if denom[level][cell] > 1e-12 {
                eta[level][cell] = numer[level][cell] / denom[level][cell];
            }
        }
    }

    // derivative and integral diagnostics
    let strides = lat.strides();
    let mut derivative_constant = 0.0f64;
    let mut integral = 0.0f64;
    let mut transition = vec![vec![false; grid.spatial_len()]; n_levels];
    let cv = grid.cell_volume() * grid.h_t;
    for level in 1..n_levels - 1 {
        for cell in 0..grid.spatial_len() {
            let idx = lat.multi_index(cell);
            if idx[0] == 0 || idx[0] + 1 == lat.axes()[0].len {
                continue;
            }
            let rho = lat.axes()[0].coord(idx[0]);
            let mut g2 = 0.0;
            for a in 0..lat.ndim() {
                let h = lat.axes()[a].step;
                let j = lat.normalize_index(a, idx[a] as isize + 1);
                let jm = lat.normalize_index(a, idx[a] as isize - 1);
                let p = (cell as isize + (j as isize - idx[a] as isize) * strides[a] as isize)
                    as usize;
                let m = (cell as isize + (jm as isize - idx[a] as isize) * strides[a] as isize)
                    as usize;
                let d = (eta[level][p] - eta[level][m]) / (2.0 * h);
                g2 += d * d;
            }
            let dt = (eta[level + 1][cell] - eta[level - 1][cell]) / (2.0 * grid.h_t);
            let g = g2.sqrt();
            derivative_constant = derivative_constant.max(g * rho + dt.abs() * rho * rho);
            integral += (g + dt.abs() * rho) * cv;
            if g > 1e-9 || dt.abs() > 1e-9 {
                transition[level][cell] = true;
            }
        }
    }
    let q_top_measure = window.grid.measure(top_of_regime.gen);
    let integral_bound = integral / q_top_measure;

    // transition cubes and the case accounting
    let mut f_family = Vec::new();
    let mut f_counts = [0usize; 3];
    let n1_side = window.grid.side(top_of_regime.gen + 1);
    for q in &all_cubes {
        let region = WhitneyRegion::new(&window.grid, q, WhitneyVariant::StarStar, constants);
        let mut touched = false;
        for_each_whitney_cell(grid, &region, &window.grid, |level, cell, _| {
            if transition[level][cell] {
                touched = true;
            }
        });
        if touched {
            f_family.push(q.clone());
            // classify by the largest overlapping non-member cube
            let out = all_cubes
                .iter()
                .filter(|p| !in_tilde.contains(*p))
                .find(|p| {
                    let rp = WhitneyRegion::new(&window.grid, p, WhitneyVariant::StarStar, constants);
                    boxes_overlap(&window.grid, &rp, &region)
                });
            match out {
                Some(p) if window.grid.side(p.gen) > n1_side => f_counts[0] += 1,
                Some(p) if window.grid.contains(top_of_regime, p) => f_counts[1] += 1,
                Some(_) => f_counts[2] += 1,
                None => {}
            }
        }
    }
    let boundary_packing: f64 = f_family
        .iter()
        .map(|q| window.grid.measure(q.gen))
        .sum::<f64>()
        / q_top_measure;

    // coverage: eta = 1 on covered ** nodes
    let mut covered = 0usize;
    let mut ones = 0usize;
    for level in 0..n_levels {
        for cell in 0..grid.spatial_len() {
            if on_region[level][cell] && denom[level][cell] > 1e-12 {
                covered += 1;
                if (eta[level][cell] - 1.0).abs() < 1e-9 {
                    ones += 1;
                }
            }
        }
    }
    let on_region_coverage = if covered == 0 {
        0.0
    } else {
        ones as f64 / covered as f64
    };

    Ok(SawtoothCutoff {
        grid: grid.clone(),
        eta,
        report: CutoffReport {
            derivative_constant,
            integral_bound,
            boundary_packing,
            f_counts,
            on_region_coverage,
        },
    })
}

fn boxes_overlap(dgrid: &DyadicGrid, a: &WhitneyRegion, b: &WhitneyRegion) -> bool {
    if a.gap_hi <= b.gap_lo || b.gap_hi <= a.gap_lo {
        return false;
    }
    let ca = dgrid.center(&a.cube);
    let cb = dgrid.center(&b.cube);
    let ha = 0.5 * dgrid.side(a.cube.gen) * a.dilate;
    let hb = 0.5 * dgrid.side(b.cube.gen) * b.dilate;
    for i in 0..dgrid.spatial_dims {
        let mut d = ca.x[i] - cb.x[i];
        d -= (d / dgrid.spatial_len).round() * dgrid.spatial_len;
        if d.abs() >= ha + hb {
            return false;
        }
    }
    let ta = 0.5 * dgrid.side(a.cube.gen).powi(2) * a.dilate.powi(2);
    let tb = 0.5 * dgrid.side(b.cube.gen).powi(2) * b.dilate.powi(2);
    let mut dt = ca.t - cb.t;
    dt -= (dt / dgrid.time_len()).round() * dgrid.time_len();
    dt.abs() < ta + tb
}

/// Square-function integrals over a sawtooth region, each normalized by the
/// parameter measure of the regime top.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquareFunctionReport {
    /// `iiint (|d_t u|^2 + |grad^2 u|^2) dist` over the `**` region.
    pub main_over_region: f64,
    /// The same integrand weighted by `u eta` instead of `dist`.
    pub main_weighted: f64,
    /// The four reduced terms: `|dist d_t u|^2/dist`, `|dist grad^2 u|^2/dist`,
    /// `|dist^2 d_t u grad^2 u|^2/dist`, `|dist^2 grad d_t u|^2/dist`.
    pub reduced_terms: [f64; 4],
    /// Cells masked because derivative stencils did not fit.
    pub masked_fraction: f64,
}

pub fn square_function_report(
    window: &CubeWindow,
    cubes: &[DyadicCube],
    derivs: &SolutionDerivFields,
    constants: &StructuralConstants,
    eta: Option<&SawtoothCutoff>,
    top: &DyadicCube,
) -> SquareFunctionReport {
    let grid = &derivs.grid;
    let cv = grid.cell_volume() * grid.h_t;
    // union of U_Q^{**}: mark nodes to avoid double counting
    let n_levels = derivs.value.len();
    let mut mark = vec![vec![false; grid.spatial_len()]; n_levels];
    for q in cubes {
        let region = WhitneyRegion::new(&window.grid, q, WhitneyVariant::StarStar, constants);
        for_each_whitney_cell(grid, &region, &window.grid, |level, cell, _| {
            if level < n_levels {
                mark[level][cell] = true;
            }
        });
    }
    let mut main = 0.0;
    let mut weighted = 0.0;
    let mut reduced = [0.0f64; 4];
    let mut masked = 0usize;
    let mut total = 0usize;
    for level in 0..n_levels {
        for cell in 0..grid.spatial_len() {
            if !mark[level][cell] {
                continue;
            }
            total += 1;
            let h2 = derivs.hess2[level][cell];
            let ut = derivs.ut[level][cell];
            let tg2 = derivs.t_grad2[level][cell];
            if !h2.is_finite() || !ut.is_finite() || !tg2.is_finite() {
                masked += 1;
                continue;
            }
            let rho = grid.cell_coords(cell)[0];
            let integrand = ut * ut + h2;
            main += integrand * rho * cv;
            let w = if let Some(cut) = eta {
                derivs.value[level][cell].max(0.0) * cut.eta[level][cell]
            } else {
                derivs.value[level][cell].max(0.0)
            };
            weighted += integrand * w * cv;
            reduced[0] += ut * ut * rho * cv;
            reduced[1] += h2 * rho * cv;
            reduced[2] += rho.powi(3) * ut * ut * h2 * cv;
            reduced[3] += rho.powi(3) * tg2 * cv;
        }
    }
    let norm = window.grid.measure(top.gen);
    SquareFunctionReport {
        main_over_region: main / norm,
        main_weighted: weighted / norm,
        reduced_terms: reduced.map(|v| v / norm),
        masked_fraction: if total == 0 {
            0.0
        } else {
            masked as f64 / total as f64
        },
    }
}

/// Integration-by-parts identity diagnostics for symmetric coefficients:
/// `alpha = iiint u (a_ij u_xi_xk)(a_kl u_xj_xl) eta`,
/// `beta = iiint u (u_t)^2 eta`, the equivalence of `alpha` with the plain
/// Hessian square, the pointwise product-rule identity residual, and the
/// near-cancellation `alpha + 2 beta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbpReport {
    pub alpha: f64,
    pub beta: f64,
    /// `iiint u |grad^2 u|^2 eta` for the ellipticity comparison.
    pub hessian_weighted: f64,
    /// `|alpha + 2 beta| / |Q(S)|`.
    pub cancellation_constant: f64,
    /// Max pointwise residual of the symmetric product-rule identity over
    /// the sampled interior points.
    pub pointwise_residual: f64,
}

pub fn ibp_identity_check(
    ctx: &Flattened,
    window: &CubeWindow,
    derivs: &SolutionDerivFields,
    cutoff: &SawtoothCutoff,
    sol: &SpaceTimeSolution,
    top: &DyadicCube,
    sample_points: usize,
) -> Result<IbpReport> {
    if !ctx.coeff.symmetric {
        return Err(Error::invalid(
            "the alpha/beta scheme requires symmetric coefficients",
        ));
    }
    let grid = &derivs.grid;
    let n = ctx.coeff.dim;
    let cv = grid.cell_volume() * grid.h_t;
    let n_levels = derivs.value.len();
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut hessw = 0.0;
    for level in 0..n_levels {
        for cell in 0..grid.spatial_len() {
            let eta = cutoff.eta[level][cell];
            if eta == 0.0 {
                continue;
            }
            let u = derivs.value[level][cell];
            let ut = derivs.ut[level][cell];
            let h2 = derivs.hess2[level][cell];
            if !ut.is_finite() || !h2.is_finite() || derivs.hess[level][cell].is_empty() {
                continue;
            }
            let cc = grid.cell_coords(cell);
            let p = SpaceTimePoint::new(cc[1..].to_vec(), grid.time(level));
            let amb = crate::geometry::AmbientPoint {
                x0: ctx.psi.eval(&p) + cc[0],
                p,
            };
            let a = ctx.coeff.eval(&amb);
            let b = nalgebra::DMatrix::from_row_slice(n, n, &derivs.hess[level][cell]);
            let contraction = hessian_contraction(&a, &b, ctx.coeff.lambda * 1.001)?;
            alpha += u.max(0.0) * contraction * eta * cv;
            beta += u.max(0.0) * ut * ut * eta * cv;
            hessw += u.max(0.0) * h2 * eta * cv;
        }
    }

    // pointwise identity at sampled interior nodes:
    // (1/2) d_t (A grad u . grad u) = A grad u . grad u_t + (1/2)(d_t A) grad u . grad u
    let mut residual = 0.0f64;
    let mut count = 0usize;
    let mut level = 2usize;
    let mut cell = grid.spatial_len() / 3;
    while count < sample_points && level + 2 < n_levels {
        cell = (cell * 29 + 17) % grid.spatial_len();
        level = 2 + (level * 13 + 7) % (n_levels.saturating_sub(4).max(1));
        let e_at = |lv: usize| -> Option<f64> {
            let ad = sol.ambient_derivs(ctx.psi, lv, cell)?;
            let cc = grid.cell_coords(cell);
            let p = SpaceTimePoint::new(cc[1..].to_vec(), grid.time(lv));
            let amb = crate::geometry::AmbientPoint {
                x0: ctx.psi.eval(&p) + cc[0],
                p,
            };
            let a = ctx.coeff.eval(&amb);
            let mut e = 0.0;
            for i in 0..n {
                for j in 0..n {
                    e += a[(i, j)] * ad.grad[i] * ad.grad[j];
                }
            }
            Some(e)
        };
        let (em, e0, ep) = match (e_at(level - 1), e_at(level), e_at(level + 1)) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => continue,
        };
        let _ = e0;
        let lhs = 0.5 * (ep - em) / (2.0 * grid.h_t);
        let ad = match sol.ambient_derivs(ctx.psi, level, cell) {
            Some(v) => v,
            None => continue,
        };
        let cc = grid.cell_coords(cell);
        let p = SpaceTimePoint::new(cc[1..].to_vec(), grid.time(level));
        let amb = crate::geometry::AmbientPoint {
            x0: ctx.psi.eval(&p) + cc[0],
            p,
        };
        let a = ctx.coeff.eval(&amb);
        // d_t A by finite differences
        let mut amb_p = amb.clone();
        amb_p.p.t += grid.h_t;
        let mut amb_m = amb.clone();
        amb_m.p.t -= grid.h_t;
        let da = (ctx.coeff.eval(&amb_p) - ctx.coeff.eval(&amb_m)).scale(1.0 / (2.0 * grid.h_t));
        let mut rhs = 0.0;
        for i in 0..n {
            for j in 0..n {
                rhs += a[(i, j)] * ad.grad[i] * ad.t_grad[j];
                rhs += 0.5 * da[(i, j)] * ad.grad[i] * ad.grad[j];
            }
        }
        residual = residual.max((lhs - rhs).abs());
        count += 1;
    }

    let norm = window.grid.measure(top.gen);
    Ok(IbpReport {
        alpha,
        beta,
        hessian_weighted: hessw,
        cancellation_constant: (alpha + 2.0 * beta).abs() / norm,
        pointwise_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> CubeWindow {
        let grid = DyadicGrid::new(1, 1.0);
        CubeWindow {
            top: grid.root(),
            grid,
            max_gen: 4,
        }
    }

    #[test]
    fn constant_density_single_regime() {
        let w = window();
        let m = CubeMeasures::synthetic(&w, |_| 1.0);
        let step = measure_corona_step(&w, &m, &w.top.clone(), 4.0).unwrap();
        assert!(step.stopped.is_empty());
        assert_eq!(step.stopped_fraction, 0.0);
        assert_eq!(step.regime.len(), w.cubes().len());
        assert!(step.regime.is_semi_coherent(&w.grid));
        // full corona: one regime, packing ratio exactly 1 at the top
        let dec = measure_corona(&w, 4.0, |_| Ok(CubeMeasures::synthetic(&w, |_| 1.0)), None)
            .unwrap();
        assert_eq!(dec.regimes.len(), 1);
        assert!(dec.top_packing <= 4.0 / 3.0 + 0.1);
    }

    #[test]
    fn spiked_density_stops_ancestor_chain() {
        let w = window();
        // spike on one deep cube: its ancestors' densities grow toward it
        let spike = DyadicCube {
            gen: 4,
            idx: vec![3, 77],
        };
        let g = w.grid.clone();
        let m = CubeMeasures::synthetic(&w, move |q| {
            if q.gen == 4 && g.contains(q, &spike.clone()) {
                2000.0
            } else {
                1.0
            }
        });
        let step = measure_corona_step(&w, &m, &w.top.clone(), 4.0).unwrap();
        // the stop happens exactly along the spike's ancestor chain: one
        // stopped cube, an ancestor of the spike
        assert_eq!(step.stopped.len(), 1, "stopped {:?}", step.stopped);
        let spike = DyadicCube {
            gen: 4,
            idx: vec![3, 77],
        };
        assert!(w.grid.contains(&step.stopped[0], &spike));
        assert!(step.regime.is_semi_coherent(&w.grid));
        // resulting regime omits the subtree below the stopped cube
        for q in &step.regime.cubes {
            assert!(!w.grid.contains(&step.stopped[0], q) || q == &step.stopped[0]);
        }
    }

    #[test]
    fn two_measure_variant_equals_single_when_identical() {
        let w = window();
        let spike = DyadicCube {
            gen: 3,
            idx: vec![1, 17],
        };
        let mk = || {
            let g = w.grid.clone();
            let spike = spike.clone();
            CubeMeasures::synthetic(&w, move |q| {
                if q.gen >= 2 && g.contains(&g.ancestor(&spike, 2), q) {
                    10.0
                } else {
                    1.0
                }
            })
        };
        let single = measure_corona(&w, 3.0, |_| Ok(mk()), None).unwrap();
        let mut tilde = |_: &DyadicCube| Ok(mk());
        let double = measure_corona(&w, 3.0, |_| Ok(mk()), Some(&mut tilde)).unwrap();
        assert_eq!(single.regimes.len(), double.regimes.len());
        for (a, b) in single.regimes.iter().zip(&double.regimes) {
            assert_eq!(a.cubes, b.cubes);
        }
    }

    #[test]
    fn split_regimes_semi_coherent() {
        let w = window();
        // all cubes good except one at generation 2
        let bad = DyadicCube {
            gen: 2,
            idx: vec![1, 5],
        };
        let good: Vec<DyadicCube> = w
            .cubes()
            .into_iter()
            .filter(|q| *q != bad)
            .collect();
        let regimes = split_regimes(&w, &good);
        // one main regime plus the per-child regimes under the bad cube
        assert!(regimes.len() > 1);
        let total: usize = regimes.iter().map(|r| r.len()).sum();
        assert_eq!(total, good.len());
        for r in &regimes {
            assert!(r.is_semi_coherent(&w.grid), "regime {:?}", r.top);
        }
        // partition: no overlaps
        let mut seen = BTreeSet::new();
        for r in &regimes {
            for q in &r.cubes {
                assert!(seen.insert(q.clone()));
            }
        }
    }

    #[test]
    fn trivial_regime_covers_whole_window() {
        let w = window();
        let good = w.cubes();
        let regimes = split_regimes(&w, &good);
        assert_eq!(regimes.len(), 1);
        assert_eq!(regimes[0].len(), good.len());
    }
}
