//! Divergence-form parabolic solver above the graph, Green functions,
//! parabolic measure, reverse-Hoelder / A-infinity diagnostics, and the
//! boundary-estimate verification suite.

pub mod measure;
pub mod solver;
pub mod sparse;

pub use measure::{
    adjoint_sweep, measure_via_solve, reverse_holder, riesz_identity_check, AdjointSweep,
    BoundaryMeasure, ReverseHolderReport,
};
pub use solver::{
    green_function, image_kernel_oracle, solve_parabolic, AmbientDerivs, CoefficientField,
    Direction, FlatDerivs, Flattened, FlattenedGrid, GreenFunction, ProblemData, SolverConfig,
    SpaceTimeSolution, TimeScheme, TopBoundary,
};

use crate::error::{Error, Result};
use crate::geometry::{corkscrew, AmbientPoint, SpaceTimePoint, StructuralConstants};
use crate::graph::GraphDomain;
use crate::grid::{Axis, Field, Lattice};
use serde::{Deserialize, Serialize};

/// Coefficient diagnostics: ellipticity margin, weighted derivative bounds,
/// and the oscillation Carleson norms (the L1 form and the derived L2 form).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientReport {
    /// Smallest quadratic-form eigenvalue bound found (should be >= 1/Lambda).
    pub ellipticity_floor: f64,
    /// Largest matrix sup-norm found (should be <= Lambda).
    pub sup_norm: f64,
    /// sup over samples of `dist^k |grad^k A|`, k = 1, 2.
    pub weighted_grad: [f64; 2],
    /// sup over samples of `dist^{2k} |d_t^k A|`, k = 1, 2.
    pub weighted_dt: [f64; 2],
    /// sup of `dist^3 |d_t grad A|`.
    pub weighted_mixed: f64,
    /// Carleson norm of `(|grad A| + |d_t A| dist) dX dt`.
    pub carleson_l1: f64,
    /// Carleson norm of `(|grad A|^2 dist + |d_t A|^2 dist^3) dX dt`.
    pub carleson_l2: f64,
}

/// Sample the coefficient field on the flattened grid and verify pointwise
/// ellipticity; measure the oscillation Carleson quantities with the
/// vertical gap as the distance surrogate (comparable to the true distance
/// within `m0`).
pub fn check_coefficients(
    ctx: &Flattened,
    constants: &StructuralConstants,
) -> Result<CoefficientReport> {
    let grid = ctx.grid;
    let lat = &grid.spatial;
    let nd = lat.ndim();
    let n = ctx.coeff.dim;
    // sample the matrix entries on the space-time lattice
    let mut axes = lat.axes().to_vec();
    axes.push(Axis::periodic(
        (grid.n_steps + 1).min(33),
        grid.t0,
        grid.h_t * ((grid.n_steps / (grid.n_steps + 1).min(33).max(1)).max(1)) as f64,
    ));
    let sample_lat = Lattice::new(axes);
    let mut entries: Vec<Field> = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        entries.push(Field::zeros(&sample_lat));
    }
    let mut ellipticity_floor = f64::INFINITY;
    let mut sup_norm = 0.0f64;
    let mut witness: Option<(Vec<f64>, f64)> = None;
    for flat in 0..sample_lat.len() {
        let c = sample_lat.coords_flat(flat);
        let p = SpaceTimePoint::new(c[1..nd].to_vec(), c[nd]);
        let amb = AmbientPoint {
            x0: ctx.psi.eval(&p) + c[0],
            p,
        };
        let a = ctx.coeff.eval(&amb);
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j].values[flat] = a[(i, j)];
            }
        }
        // quadratic form on the axes and a few diagonal directions
        let mut local_floor = f64::INFINITY;
        for d in 0..n {
            local_floor = local_floor.min(a[(d, d)]);
        }
        for d in 0..n {
            for e in (d + 1)..n {
                let q = 0.5 * (a[(d, d)] + a[(e, e)]) + 0.5 * (a[(d, e)] + a[(e, d)]);
                local_floor = local_floor.min(q / 1.0);
                let qm = 0.5 * (a[(d, d)] + a[(e, e)]) - 0.5 * (a[(d, e)] + a[(e, d)]);
                local_floor = local_floor.min(qm);
            }
        }
        if local_floor < ellipticity_floor {
            ellipticity_floor = local_floor;
            witness = Some((
                {
                    let mut w = vec![amb.x0];
                    w.extend_from_slice(&amb.p.x);
                    w.push(amb.p.t);
                    w
                },
                local_floor,
            ));
        }
        sup_norm = sup_norm.max(a.iter().map(|v| v.abs()).fold(0.0f64, f64::max));
    }
    if ellipticity_floor < 1.0 / ctx.coeff.lambda - 1e-12 {
        let (point, value) = witness.unwrap();
        return Err(Error::Ellipticity {
            point,
            value,
            bound: 1.0 / ctx.coeff.lambda,
        });
    }

    // finite-difference derivative magnitudes per sample point
    let mut weighted_grad = [0.0f64; 2];
    let mut weighted_dt = [0.0f64; 2];
    let mut weighted_mixed = 0.0f64;
    let mut grad_mag = Field::zeros(&sample_lat);
    let mut dt_mag = Field::zeros(&sample_lat);
    let strides = sample_lat.strides();
    for flat in 0..sample_lat.len() {
        let idx = sample_lat.multi_index(flat);
        let rho = sample_lat.axes()[0].coord(idx[0]);
        // skip cells touching the rho range ends
        if idx[0] == 0 || idx[0] + 1 == sample_lat.axes()[0].len {
            continue;
        }
        let mut g1 = 0.0f64; // |grad A|
        let mut g2 = 0.0f64; // |grad^2 A| (diagonal second differences)
        let mut d1 = 0.0f64; // |d_t A|
        let mut d2 = 0.0f64;
        let mut m1 = 0.0f64; // |d_t grad A|
        for e in &entries {
            for a in 0..nd {
                let hp = e.values[neighbor(&sample_lat, &strides, flat, a, 1)];
                let hm = e.values[neighbor(&sample_lat, &strides, flat, a, -1)];
                let h = sample_lat.axes()[a].step;
                g1 = g1.max(((hp - hm) / (2.0 * h)).abs());
                g2 = g2.max(((hp - 2.0 * e.values[flat] + hm) / (h * h)).abs());
            }
            let tp = e.values[neighbor(&sample_lat, &strides, flat, nd, 1)];
            let tm = e.values[neighbor(&sample_lat, &strides, flat, nd, -1)];
            let ht = sample_lat.axes()[nd].step;
            d1 = d1.max(((tp - tm) / (2.0 * ht)).abs());
            d2 = d2.max(((tp - 2.0 * e.values[flat] + tm) / (ht * ht)).abs());
            // mixed: d_t of the rho-derivative
            let pp = e.values[neighbor2(&sample_lat, &strides, flat, 0, 1, nd, 1)];
            let pm = e.values[neighbor2(&sample_lat, &strides, flat, 0, 1, nd, -1)];
            let mp = e.values[neighbor2(&sample_lat, &strides, flat, 0, -1, nd, 1)];
            let mm = e.values[neighbor2(&sample_lat, &strides, flat, 0, -1, nd, -1)];
            let h0 = sample_lat.axes()[0].step;
            m1 = m1.max(((pp - pm - mp + mm) / (4.0 * h0 * ht)).abs());
        }
        grad_mag.values[flat] = g1;
        dt_mag.values[flat] = d1;
        weighted_grad[0] = weighted_grad[0].max(rho * g1);
        weighted_grad[1] = weighted_grad[1].max(rho * rho * g2);
        weighted_dt[0] = weighted_dt[0].max(rho * rho * d1);
        weighted_dt[1] = weighted_dt[1].max(rho.powi(4) * d2);
        weighted_mixed = weighted_mixed.max(rho.powi(3) * m1);
    }

    // Carleson norms over boxes centered at boundary points, dyadic radii
    let d_hom = constants.n + 1;
    let mut carleson_l1 = 0.0f64;
    let mut carleson_l2 = 0.0f64;
    let cv = sample_lat.cell_volume();
    let spatial_len = sample_lat.axes()[1].extent();
    let mut radius = grid.height().min(spatial_len / 2.0);
    while radius >= 4.0 * grid.h_rho() {
        // subsample boundary centers
        for cidx in 0..4usize {
            for tidx in 0..4usize {
                let zc = (cidx as f64 + 0.5) / 4.0 * spatial_len;
                let tc = grid.t0 + (tidx as f64 + 0.5) / 4.0 * (grid.h_t * grid.n_steps as f64);
                let mut mu1 = 0.0;
                let mut mu2 = 0.0;
                for flat in 0..sample_lat.len() {
                    let c = sample_lat.coords_flat(flat);
                    if c[0] >= radius {
                        continue;
                    }
                    let dx = sample_lat.axes()[1].wrap_diff(c[1], zc);
                    if dx.abs() >= radius || (c[nd] - tc).abs() >= radius * radius {
                        continue;
                    }
                    let g = grad_mag.values[flat];
                    let dt = dt_mag.values[flat];
                    mu1 += (g + dt * c[0]) * cv;
                    mu2 += (g * g * c[0] + dt * dt * c[0].powi(3)) * cv;
                }
                carleson_l1 = carleson_l1.max(mu1 / radius.powi(d_hom as i32));
                carleson_l2 = carleson_l2.max(mu2 / radius.powi(d_hom as i32));
            }
        }
        radius /= 2.0;
    }

    Ok(CoefficientReport {
        ellipticity_floor,
        sup_norm,
        weighted_grad,
        weighted_dt,
        weighted_mixed,
        carleson_l1,
        carleson_l2,
    })
}

fn neighbor(lat: &Lattice, strides: &[usize], flat: usize, axis: usize, off: isize) -> usize {
    let idx = lat.multi_index(flat);
    let j = lat.normalize_index(axis, idx[axis] as isize + off);
    (flat as isize + (j as isize - idx[axis] as isize) * strides[axis] as isize) as usize
}

fn neighbor2(
    lat: &Lattice,
    strides: &[usize],
    flat: usize,
    a: usize,
    oa: isize,
    b: usize,
    ob: isize,
) -> usize {
    neighbor(lat, strides, neighbor(lat, strides, flat, a, oa), b, ob)
}

/// One sampled configuration of the boundary-estimate suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundarySample {
    pub center: SpaceTimePoint,
    pub radius: f64,
    pub holder_alpha: f64,
    pub carleson_ratio: f64,
    pub backward_harnack: f64,
    pub cfms_plus: f64,
    pub cfms_minus: f64,
    pub doubling: f64,
    pub bourgain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryEstimatesReport {
    pub samples: Vec<BoundarySample>,
}

impl BoundaryEstimatesReport {
    pub fn band(&self, f: impl Fn(&BoundarySample) -> f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &self.samples {
            let v = f(s);
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

/// Verify the boundary estimates on sampled (center, radius) pairs:
/// fitted Hoelder exponent, Carleson-estimate ratio, backward Harnack,
/// CFMS comparability `R^n G / omega`, doubling, and the Bourgain floor.
pub fn boundary_estimates_report(
    ctx: &Flattened,
    domain: &GraphDomain,
    constants: &StructuralConstants,
    samples: &[(SpaceTimePoint, f64)],
    config: &SolverConfig,
) -> Result<BoundaryEstimatesReport> {
    let mut out = Vec::with_capacity(samples.len());
    let n_amb = constants.n;
    for (center, radius) in samples {
        let r = *radius;
        let on_graph = domain.lift(center);

        // far-forward pole for the measure quantities
        let t_max = ctx.grid.t0 + ctx.grid.h_t * ctx.grid.n_steps as f64;
        let pole_time_target = center.t + 6.0 * r * r * 16.0;
        let pole = if pole_time_target < t_max - 4.0 * ctx.grid.h_t {
            corkscrew(&on_graph, 4.0 * r, true, constants)?
        } else {
            return Err(Error::Geometry(format!(
                "sample at t = {} leaves no room for a forward pole",
                center.t
            )));
        };
        // place the pole via a parabola-compatible lift: A^+_{4r} has time
        // shift 2 (4r)^2 = 32 r^2 >= 16 (2r')^2 for r' <= r/ sqrt(2)
        let sweep = adjoint_sweep(ctx, &pole, config)?;

        // (i) Hoelder exponent: solution with data vanishing on the 2r ball
        let c2 = center.clone();
        let psi_lat = ctx.psi.lattice().clone();
        let data = ProblemData::lateral_only(move |p: &SpaceTimePoint| {
            let dx = psi_lat.axes()[0].wrap_diff(p.x[0], c2.x[0]).abs();
            let far_space = dx >= 2.0 * r;
            let far_time = (p.t - c2.t).abs() >= 4.0 * r * r;
            if far_space || far_time {
                1.0
            } else {
                0.0
            }
        });
        let sol = solve_parabolic(ctx, &data, Direction::Forward, config)?;
        let mut heights = Vec::new();
        let mut values = Vec::new();
        let mut hgt = 2.0 * ctx.grid.h_rho();
        while hgt < 0.8 * r {
            let p = AmbientPoint::new(domain.psi.eval(center) + hgt, center.x.clone(), center.t);
            let v = sol.value_at(&p, &domain.psi)?;
            if v > 1e-12 {
                heights.push(hgt.ln());
                values.push(v.ln());
            }
            hgt *= 1.5;
        }
        let holder_alpha = slope(&heights, &values);

        // (ii) Carleson ratio: sup over the elongated box of u vs corkscrew
        let a_plus = corkscrew(&on_graph, r, true, constants)?;
        let u_cork = sol.value_at(&a_plus, &domain.psi)?;
        let mut sup_u = 0.0f64;
        for k in 0..200 {
            let s = (k as f64 + 0.5) / 200.0;
            let hgt = 0.02 * r + s * (2.0 * constants.m0 * r - 0.02 * r);
            let xoff = ((k * 7) % 13) as f64 / 13.0 * 2.0 - 1.0;
            let toff = ((k * 5) % 11) as f64 / 11.0 * 2.0 - 1.0;
            let p = AmbientPoint::new(
                domain.psi.eval(&SpaceTimePoint::new(
                    vec![center.x[0] + 0.9 * r * xoff],
                    center.t + 0.9 * r * r * toff,
                )) + hgt,
                vec![center.x[0] + 0.9 * r * xoff],
                center.t + 0.9 * r * r * toff,
            );
            if let Ok(v) = sol.value_at(&p, &domain.psi) {
                sup_u = sup_u.max(v);
            }
        }
        let carleson_ratio = sup_u / u_cork.max(1e-300);

        // (iii)-(v): Green and measure comparability seen from the pole
        let a_minus = corkscrew(&on_graph, r, false, constants)?;
        let g_plus = sweep.green.value_at(&shift_to_grid(&a_plus), &domain.psi)?;
        let g_minus = sweep.green.value_at(&shift_to_grid(&a_minus), &domain.psi)?;
        let omega_r = sweep.measure.ball(center, r);
        let omega_half = sweep.measure.ball(center, 0.5 * r);
        let rn = r.powi(n_amb as i32);
        let cfms_plus = rn * g_plus / omega_r.max(1e-300);
        let cfms_minus = rn * g_minus / omega_r.max(1e-300);
        let backward_harnack = g_minus / g_plus.max(1e-300);
        let doubling = omega_r / omega_half.max(1e-300);

        // Bourgain floor: measure of the r-ball from its own corkscrew
        let sweep_near = adjoint_sweep(ctx, &a_plus, config)?;
        let bourgain = sweep_near.measure.ball(center, r);

        out.push(BoundarySample {
            center: center.clone(),
            radius: r,
            holder_alpha,
            carleson_ratio,
            backward_harnack,
            cfms_plus,
            cfms_minus,
            doubling,
            bourgain,
        });
    }
    Ok(BoundaryEstimatesReport { samples: out })
}

fn shift_to_grid(p: &AmbientPoint) -> AmbientPoint {
    p.clone()
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Normalized Green pair and the interior derivative bounds on Whitney
/// sample points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedGreenReport {
    /// min/max of `u / dist` over the sampled Whitney points.
    pub u_over_dist: (f64, f64),
    /// Measured comparability constant: `max(max ratio, 1/min ratio)`.
    pub m2: f64,
    /// sup of `|grad u|`, `dist |grad^2 u|`, `dist |d_t u|`, `dist^2 |d_t grad u|`.
    pub derivative_constants: [f64; 4],
    pub sigma_top: f64,
}

/// The normalized Green pair for a corona top cube: `u` from the forward
/// corkscrew pole (adjoint variable), `v` from the backward pole (forward
/// variable), both scaled by the surface measure of the top cube.
pub struct NormalizedGreen {
    pub u: SpaceTimeSolution,
    pub v: Option<SpaceTimeSolution>,
    pub measure: BoundaryMeasure,
    pub report: NormalizedGreenReport,
    pub pole_plus: AmbientPoint,
    pub pole_minus: Option<AmbientPoint>,
    pub sigma_top: f64,
}

pub fn normalized_green(
    ctx: &Flattened,
    domain: &GraphDomain,
    constants: &StructuralConstants,
    top_center: &SpaceTimePoint,
    top_radius: f64,
    sigma_top: f64,
    with_adjoint_pair: bool,
    config: &SolverConfig,
) -> Result<NormalizedGreen> {
    let on_graph = domain.lift(top_center);
    let pole_plus = corkscrew(&on_graph, constants.m_star * top_radius, true, constants)?;
    let sweep = adjoint_sweep(ctx, &pole_plus, config)?;
    let u = SpaceTimeSolution {
        grid: sweep.green.grid.clone(),
        levels: sweep
            .green
            .levels
            .iter()
            .map(|l| l.iter().map(|v| v * sigma_top).collect())
            .collect(),
    };
    let (v, pole_minus) = if with_adjoint_pair {
        let pm = corkscrew(&on_graph, constants.m_star * top_radius, false, constants)?;
        let g = green_function(ctx, &pm, Direction::Forward, config)?;
        (
            Some(SpaceTimeSolution {
                grid: g.solution.grid.clone(),
                levels: g
                    .solution
                    .levels
                    .iter()
                    .map(|l| l.iter().map(|v| v * sigma_top).collect())
                    .collect(),
            }),
            Some(pm),
        )
    } else {
        (None, None)
    };

    // comparability and derivative bounds over interior nodes below the pole
    let grid = ctx.grid;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut dc = [0.0f64; 4];
    let level_hi = sweep.measure.pole_level.saturating_sub(2);
    for level in (1..level_hi).step_by((level_hi / 24).max(1)) {
        for cell in 0..grid.spatial_len() {
            let c = grid.cell_coords(cell);
            let rho = c[0];
            if rho < 2.0 * grid.h_rho() || rho > grid.height() - 2.0 * grid.h_rho() {
                continue;
            }
            let val = u.levels[level][cell];
            if val <= 0.0 {
                continue;
            }
            let ratio = val / rho;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
            if let Some(ad) = u.ambient_derivs(&domain.psi, level, cell) {
                let g1 = ad.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g2 = ad.hess_frobenius2().sqrt();
                let tg = ad.t_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                dc[0] = dc[0].max(g1);
                dc[1] = dc[1].max(rho * g2);
                dc[2] = dc[2].max(rho * ad.u_t.abs());
                dc[3] = dc[3].max(rho * rho * tg);
            }
        }
    }
    let m2 = hi.max(1.0 / lo.max(1e-300));
    let report = NormalizedGreenReport {
        u_over_dist: (lo, hi),
        m2,
        derivative_constants: dc,
        sigma_top,
    };
    Ok(NormalizedGreen {
        u,
        v,
        measure: sweep.measure,
        report,
        pole_plus,
        pole_minus,
        sigma_top,
    })
}
