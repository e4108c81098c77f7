//! Parabolic measure and the adjoint Green function from one backward sweep
//! with the transposed step matrices.
//!
//! The discrete solution map is affine in the lateral data, so the measure
//! of every boundary cell is obtained exactly (for the implicit Euler
//! scheme) by propagating the evaluation functional backward:
//! `lambda^m = M_m^{-T} lambda^{m+1}` with `M_m = I - h_t L_m`. The same
//! sweep yields `G(pole; cell, level) = lambda^level[cell] / cellvol`, the
//! Green function in the adjoint variable.

use super::solver::{
    Direction, Flattened, GreenFunction, ProblemData, SolverConfig, SpaceTimeSolution,
};
use super::sparse::{BiCgStab, Triplets};
use crate::error::{Error, Result};
use crate::geometry::{AmbientPoint, SpaceTimePoint};
use crate::graph::GraphFunction;
use crate::grid::{Axis, Field, Lattice};
use serde::{Deserialize, Serialize};

/// Parabolic measure of the lateral boundary cells seen from a pole, with
/// per-cell densities against the surface measure.
#[derive(Debug, Clone)]
pub struct BoundaryMeasure {
    pub pole: AmbientPoint,
    pub pole_level: usize,
    /// Boundary cell lattice: lateral axes plus the time levels.
    pub lattice: Lattice,
    pub omega: Field,
    pub sigma: Field,
    pub density: Field,
    /// Mass attributed to the initial slice (per ambient cell, summed).
    pub initial_mass: f64,
    pub lateral_mass: f64,
}

/// Adjoint Green function together with the boundary measure from the same
/// sweep.
pub struct AdjointSweep {
    pub green: SpaceTimeSolution,
    pub measure: BoundaryMeasure,
    /// The evaluation functional at level 1 paired with initial data.
    pub initial_weights: Vec<f64>,
}

pub fn adjoint_sweep(
    ctx: &Flattened,
    pole: &AmbientPoint,
    config: &SolverConfig,
) -> Result<AdjointSweep> {
    let grid = ctx.grid;
    let (cell, pole_level) = grid.locate(pole, ctx.psi)?;
    let idx = grid.spatial.multi_index(cell);
    let min_gap = 4.0 * grid.h_rho();
    let rho = grid.spatial.axes()[0].coord(idx[0]);
    if rho < min_gap {
        return Err(Error::PoleTooClose {
            gap: rho,
            min_gap,
        });
    }
    if pole_level < 4 {
        return Err(Error::PoleTooClose {
            gap: pole_level as f64,
            min_gap: 4.0,
        });
    }

    let n = grid.spatial_len();
    let solver = BiCgStab {
        tol: config.tol,
        max_iters: config.max_iters,
    };

    // evaluation functional: same smoothing stencil as the forward delta
    let mut w = vec![0.0; n];
    w[cell] = 1.0;
    let f = Field {
        lattice: grid.spatial.clone(),
        values: w,
    };
    let stencils: Vec<Vec<f64>> = (0..grid.spatial.ndim())
        .map(|_| vec![0.25, 0.5, 0.25])
        .collect();
    let w = crate::grid::convolve_separable(&f, &stencils).values;

    let boundary_lattice = grid.boundary_lattice();
    let mut omega = Field::zeros(&boundary_lattice);
    let lat_cells: usize = grid.spatial.axes()[1..].iter().map(|a| a.len).product();
    let mut lambda_levels = vec![vec![0.0; n]; grid.n_steps + 1];

    let static_ops = ctx.coeff.is_identity() && ctx.psi.lip_constant() == 0.0;
    let mut cached: Option<(super::sparse::Csr, Vec<(usize, usize, f64)>)> = None;
    let mut carry = w;
    for m in (1..=pole_level).rev() {
        let t_m = grid.time(m);
        if cached.is_none() || !static_ops {
            let assembled = ctx.assemble(t_m, Direction::Forward, config.top);
            // M = I - h_t L
            let mut trip = Triplets::new(n);
            for i in 0..n {
                trip.add(i, i, 1.0);
                for k in assembled.l.row_ptr[i]..assembled.l.row_ptr[i + 1] {
                    trip.add(i, assembled.l.col[k], -grid.h_t * assembled.l.val[k]);
                }
            }
            cached = Some((trip.build(), assembled.boundary));
        }
        let (msys, bops) = cached.as_ref().unwrap();
        let lambda = solver.solve_transpose(msys, &carry, Some(&carry))?;
        // boundary weights at this level
        for &(cell_i, j, c) in bops {
            omega.values[j * (grid.n_steps + 1) + m] += grid.h_t * c * lambda[cell_i];
        }
        lambda_levels[m] = lambda.clone();
        carry = lambda;
    }
    let initial_weights = carry;
    let initial_mass: f64 = initial_weights.iter().sum();
    let lateral_mass: f64 = omega.values.iter().sum();

    // wait: omega indexing must match the boundary lattice strides
    debug_assert_eq!(boundary_lattice.len(), lat_cells * (grid.n_steps + 1));

    // surface measure per boundary cell
    let mut sigma = Field::zeros(&boundary_lattice);
    let cellvol: f64 = grid.spatial.axes()[1..]
        .iter()
        .map(|a| a.step)
        .product::<f64>()
        * grid.h_t;
    for flat in 0..boundary_lattice.len() {
        let c = boundary_lattice.coords_flat(flat);
        let p = SpaceTimePoint::new(c[..c.len() - 1].to_vec(), c[c.len() - 1]);
        let idxg: Vec<usize> = (0..p.x.len())
            .map(|a| {
                let ax = &ctx.psi.lattice().axes()[a];
                ctx.psi
                    .lattice()
                    .normalize_index(a, ((p.x[a] - ax.min) / ax.step).round() as isize)
            })
            .chain(std::iter::once({
                let ax = &ctx.psi.lattice().axes()[p.x.len()];
                ctx.psi
                    .lattice()
                    .normalize_index(p.x.len(), ((p.t - ax.min) / ax.step).round() as isize)
            }))
            .collect();
        let g = ctx.psi.gradient_at(&idxg);
        sigma.values[flat] = (1.0 + g.iter().map(|v| v * v).sum::<f64>()).sqrt() * cellvol;
    }
    let density = omega.zip_with(&sigma, |o, s| o / s);

    let green = SpaceTimeSolution {
        grid: grid.clone(),
        levels: lambda_levels
            .iter()
            .map(|l| {
                let cv = grid.cell_volume();
                l.iter().map(|v| v / cv).collect()
            })
            .collect(),
    };
    Ok(AdjointSweep {
        green,
        measure: BoundaryMeasure {
            pole: pole.clone(),
            pole_level,
            lattice: boundary_lattice,
            omega,
            sigma,
            density,
            initial_mass,
            lateral_mass,
        },
        initial_weights,
    })
}

impl BoundaryMeasure {
    /// Measure of the surface ball over `Q_R(center)` (wrapped in the
    /// lateral axes, one-sided in time).
    pub fn ball(&self, center: &SpaceTimePoint, r: f64) -> f64 {
        self.sum_ball(center, r, &self.omega)
    }

    pub fn sigma_ball(&self, center: &SpaceTimePoint, r: f64) -> f64 {
        self.sum_ball(center, r, &self.sigma)
    }

    fn sum_ball(&self, center: &SpaceTimePoint, r: f64, field: &Field) -> f64 {
        let lat = &self.lattice;
        let nd = lat.ndim();
        let mut acc = 0.0;
        for flat in 0..lat.len() {
            let c = lat.coords_flat(flat);
            let mut inside = true;
            for a in 0..nd - 1 {
                let d = lat.axes()[a].wrap_diff(c[a], center.x[a]);
                if d.abs() >= r {
                    inside = false;
                    break;
                }
            }
            if inside && (c[nd - 1] - center.t).abs() < r * r {
                acc += field.values[flat];
            }
        }
        acc
    }

    /// Reverse-Hoelder quotient over a surface ball:
    /// `(avg k^q dsigma)^(1/q) / (avg k dsigma)`.
    pub fn reverse_holder_ball(&self, center: &SpaceTimePoint, r: f64, q: f64) -> f64 {
        let lat = &self.lattice;
        let nd = lat.ndim();
        let mut sig = 0.0;
        let mut om = 0.0;
        let mut kq = 0.0;
        for flat in 0..lat.len() {
            let c = lat.coords_flat(flat);
            let mut inside = true;
            for a in 0..nd - 1 {
                let d = lat.axes()[a].wrap_diff(c[a], center.x[a]);
                if d.abs() >= r {
                    inside = false;
                    break;
                }
            }
            if inside && (c[nd - 1] - center.t).abs() < r * r {
                let s = self.sigma.values[flat];
                sig += s;
                om += self.omega.values[flat];
                kq += self.density.values[flat].max(0.0).powf(q) * s;
            }
        }
        if sig == 0.0 || om <= 0.0 {
            return f64::NAN;
        }
        let mean_k = om / sig;
        (kq / sig).powf(1.0 / q) / mean_k
    }
}

/// Reverse-Hoelder report over a family of surface balls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReverseHolderReport {
    pub q: f64,
    /// Largest reverse-Hoelder quotient over the family.
    pub c_star: f64,
    /// Per-ball quotients.
    pub quotients: Vec<f64>,
    /// Doubling ratios `omega(D_R) / omega(D_{R/2})`.
    pub doubling: Vec<f64>,
    /// Whether the pole lay in the forward parabola of each ball.
    pub parabola_ok: Vec<bool>,
}

pub fn reverse_holder(
    measure: &BoundaryMeasure,
    psi: &GraphFunction,
    kappa: f64,
    q: f64,
    balls: &[(SpaceTimePoint, f64)],
) -> Result<ReverseHolderReport> {
    if balls.is_empty() {
        return Err(Error::invalid("empty surface-ball family"));
    }
    let mut quotients = Vec::with_capacity(balls.len());
    let mut doubling = Vec::with_capacity(balls.len());
    let mut parabola_ok = Vec::with_capacity(balls.len());
    for (center, r) in balls {
        let on_graph = AmbientPoint {
            x0: psi.eval(center),
            p: center.clone(),
        };
        parabola_ok.push(crate::geometry::in_parabola(
            &measure.pole,
            &on_graph,
            2.0 * r,
            true,
            kappa,
        ));
        quotients.push(measure.reverse_holder_ball(center, *r, q));
        let w_full = measure.ball(center, *r);
        let w_half = measure.ball(center, 0.5 * r);
        doubling.push(if w_half > 0.0 { w_full / w_half } else { f64::NAN });
    }
    let c_star = quotients
        .iter()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    Ok(ReverseHolderReport {
        q,
        c_star,
        quotients,
        doubling,
        parabola_ok,
    })
}

/// Definitional route for the measure of one surface ball: solve with the
/// one-cell-mollified indicator of the ball as lateral data and read the
/// solution at the pole. Used to cross-check the adjoint sweep.
pub fn measure_via_solve(
    ctx: &Flattened,
    pole: &AmbientPoint,
    center: &SpaceTimePoint,
    r: f64,
    config: &SolverConfig,
) -> Result<f64> {
    let psi_lat = ctx.psi.lattice().clone();
    let c = center.clone();
    let hx = psi_lat.axes()[0].step;
    let ht_cell = ctx.grid.h_t;
    let data = ProblemData::lateral_only(move |p: &SpaceTimePoint| {
        // indicator mollified over half a cell, so lattice nodes read 0/1
        let mut v = 1.0f64;
        for (a, x) in p.x.iter().enumerate() {
            let d = psi_lat.axes()[a].wrap_diff(*x, c.x[a]).abs();
            v = v.min(((r - d) / (0.5 * hx) + 0.5).clamp(0.0, 1.0));
        }
        let dt = (p.t - c.t).abs();
        v = v.min(((r * r - dt) / (0.5 * ht_cell) + 0.5).clamp(0.0, 1.0));
        v
    });
    let sol = super::solver::solve_parabolic(ctx, &data, Direction::Forward, config)?;
    sol.value_at(pole, ctx.psi)
}

/// Quadrature check of the representation identity: for a smooth compactly
/// supported bump `phi` away from the pole,
/// `-iiint (A* grad_X G(Y,.) . grad phi + G(Y,.) d_t phi) = iint phi d omega^Y`
/// (the forward-in-time orientation of the sweep puts the measure on the
/// right with a positive sign). Returns `(lhs, rhs)`.
pub fn riesz_identity_check(
    ctx: &Flattened,
    sweep: &AdjointSweep,
    phi_center: &AmbientPoint,
    phi_radius: f64,
) -> (f64, f64) {
    let grid = ctx.grid;
    let phi = |p: &AmbientPoint| -> f64 {
        let dr = (p.x0 - phi_center.x0) / phi_radius;
        let mut v = bumpc(dr);
        for (a, x) in p.p.x.iter().enumerate() {
            let d = grid.spatial.axes()[1 + a].wrap_diff(*x, phi_center.p.x[a]) / phi_radius;
            v *= bumpc(d);
        }
        v * bumpc((p.p.t - phi_center.p.t) / (phi_radius * phi_radius))
    };
    // lhs by midpoint quadrature with centered differences of phi and G
    let mut lhs = 0.0;
    let cv = grid.cell_volume() * grid.h_t;
    let h: Vec<f64> = grid.spatial.axes().iter().map(|a| a.step).collect();
    for level in 1..sweep.measure.pole_level {
        let t = grid.time(level);
        for cell in 0..grid.spatial_len() {
            let g = sweep.green.levels[level][cell];
            let c = grid.cell_coords(cell);
            let p = AmbientPoint::new(ctx.psi.eval(&SpaceTimePoint::new(c[1..].to_vec(), t)) + c[0], c[1..].to_vec(), t);
            // grad phi (ambient) by finite differences; flat-graph ambient
            // gradient equals the flattened one
            let mut grad_phi = vec![0.0; grid.spatial.ndim()];
            for a in 0..grid.spatial.ndim() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                if a == 0 {
                    pp.x0 += h[0];
                    pm.x0 -= h[0];
                } else {
                    pp.p.x[a - 1] += h[a];
                    pm.p.x[a - 1] -= h[a];
                }
                grad_phi[a] = (phi(&pp) - phi(&pm)) / (2.0 * h[a]);
            }
            let mut pt = p.clone();
            pt.p.t += grid.h_t;
            let mut pb = p.clone();
            pb.p.t -= grid.h_t;
            let dphi_dt = (phi(&pt) - phi(&pb)) / (2.0 * grid.h_t);
            // grad G by centered differences on the slab
            if let Some(fd) = sweep.green.flat_derivs(level, cell) {
                let a_mat = ctx.coeff.eval(&p).transpose();
                let mut flux = 0.0;
                for i in 0..grid.spatial.ndim() {
                    let mut gi = 0.0;
                    for j in 0..grid.spatial.ndim() {
                        gi += a_mat[(i, j)] * fd.d[j];
                    }
                    flux += gi * grad_phi[i];
                }
                lhs += (flux + g * dphi_dt) * cv;
            }
        }
    }
    // rhs: boundary integral of phi against omega
    let mut rhs = 0.0;
    let blat = &sweep.measure.lattice;
    for flat in 0..blat.len() {
        let w = sweep.measure.omega.values[flat];
        if w == 0.0 {
            continue;
        }
        let c = blat.coords_flat(flat);
        let p = SpaceTimePoint::new(c[..c.len() - 1].to_vec(), c[c.len() - 1]);
        let amb = AmbientPoint {
            x0: ctx.psi.eval(&p),
            p,
        };
        rhs += w * phi(&amb);
    }
    (-lhs, rhs)
}

fn bumpc(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let w = 1.0 - u * u;
        w * w * w
    }
}

/// Forward Green consistency: the adjoint sweep at `(cell, level)` equals a
/// forward Green function injected there and read at the pole. Used by tests.
pub fn forward_value_at_pole(
    ctx: &Flattened,
    source: &AmbientPoint,
    pole: &AmbientPoint,
    config: &SolverConfig,
) -> Result<(GreenFunction, f64)> {
    let g = super::solver::green_function(ctx, source, Direction::Forward, config)?;
    let (pc, pl) = ctx.grid.locate(pole, ctx.psi)?;
    // read with the same smoothing functional as the sweep
    let mut w = vec![0.0; ctx.grid.spatial_len()];
    w[pc] = 1.0;
    let f = Field {
        lattice: ctx.grid.spatial.clone(),
        values: w,
    };
    let stencils: Vec<Vec<f64>> = (0..ctx.grid.spatial.ndim())
        .map(|_| vec![0.25, 0.5, 0.25])
        .collect();
    let w = crate::grid::convolve_separable(&f, &stencils).values;
    let val: f64 = w
        .iter()
        .zip(&g.solution.levels[pl])
        .map(|(a, b)| a * b)
        .sum();
    Ok((g, val))
}

/// Build a boundary lattice view of a measure-aligned field (used by the
/// corona stage, which consumes densities per graph-lattice cell).
pub fn measure_on_boundary_lattice(m: &BoundaryMeasure, boundary: &Lattice) -> Result<(Field, Field)> {
    // the sweep's lattice has time levels n_steps+1 = boundary nt; check
    let nd = boundary.ndim();
    let same = m.lattice.ndim() == nd
        && m.lattice.axes()[..nd - 1] == boundary.axes()[..nd - 1]
        && m.lattice.axes()[nd - 1].len == boundary.axes()[nd - 1].len;
    if !same {
        return Err(Error::invalid(
            "measure lattice does not match the boundary lattice",
        ));
    }
    let mut omega = Field::zeros(boundary);
    let mut sigma = Field::zeros(boundary);
    omega.values.copy_from_slice(&m.omega.values);
    sigma.values.copy_from_slice(&m.sigma.values);
    Ok((omega, sigma))
}

/// Convenience: the time axis used by sweeps aligned with a boundary lattice.
pub fn aligned_time_axis(boundary: &Lattice) -> Axis {
    boundary.axes()[boundary.ndim() - 1].clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_graph, GraphKind, GraphParams};
    use crate::pde::solver::{CoefficientField, FlattenedGrid, TopBoundary};

    fn flat_ctx(nx: usize) -> (FlattenedGrid, GraphFunction, CoefficientField) {
        let psi = make_graph(GraphKind::Flat, &GraphParams::desk_default(2, nx)).unwrap();
        let grid = FlattenedGrid::aligned_with_boundary(psi.lattice(), 2 * nx, 1.0);
        (grid, psi, CoefficientField::identity(2))
    }

    #[test]
    fn omega_is_a_probability_with_neumann_top() {
        let (grid, psi, coeff) = flat_ctx(8);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let pole = AmbientPoint::new(0.5, vec![0.5], 0.5);
        let config = SolverConfig {
            top: TopBoundary::Neumann,
            ..Default::default()
        };
        let sweep = adjoint_sweep(&ctx, &pole, &config).unwrap();
        let total = sweep.measure.lateral_mass + sweep.measure.initial_mass;
        assert!((total - 1.0).abs() < 1e-7, "total mass {total}");
        assert!(sweep.measure.omega.values.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn adjoint_matches_forward_green() {
        let (grid, psi, coeff) = flat_ctx(8);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let pole = AmbientPoint::new(0.5, vec![0.5], 0.75);
        let config = SolverConfig {
            top: TopBoundary::Dirichlet0,
            ..Default::default()
        };
        let sweep = adjoint_sweep(&ctx, &pole, &config).unwrap();
        let source = AmbientPoint::new(0.4, vec![0.25], 0.25);
        let (g, forward_val) = forward_value_at_pole(&ctx, &source, &pole, &config).unwrap();
        // lambda^{m+1} pairs with a forward delta injected at level m
        let level = g.pole_level + 1;
        let mut w = vec![0.0; grid.spatial_len()];
        w[g.pole_cell] = 1.0;
        let f = Field {
            lattice: grid.spatial.clone(),
            values: w,
        };
        let stencils: Vec<Vec<f64>> = (0..grid.spatial.ndim())
            .map(|_| vec![0.25, 0.5, 0.25])
            .collect();
        let wsm = crate::grid::convolve_separable(&f, &stencils).values;
        let sweep_val: f64 = wsm
            .iter()
            .zip(&sweep.green.levels[level])
            .map(|(a, b)| a * b)
            .sum();
        let rel = (forward_val - sweep_val).abs() / forward_val.abs().max(1e-300);
        assert!(rel < 1e-6, "forward {forward_val} vs sweep {sweep_val}");
    }

    #[test]
    fn measure_additivity_and_definitional_crosscheck() {
        let (grid, psi, coeff) = flat_ctx(8);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let pole = AmbientPoint::new(0.4, vec![0.5], 0.8);
        let config = SolverConfig {
            top: TopBoundary::Neumann,
            ..Default::default()
        };
        let sweep = adjoint_sweep(&ctx, &pole, &config).unwrap();
        let c = SpaceTimePoint::new(vec![0.5], 0.4);
        let r = 0.2;
        let whole = sweep.measure.ball(&c, r);
        assert!(whole > 0.0);
        // additivity: partition the ball cells by time and re-sum
        let blat = sweep.measure.lattice.clone();
        let mut early = 0.0;
        let mut late = 0.0;
        for flat in 0..blat.len() {
            let cc = blat.coords_flat(flat);
            let d = blat.axes()[0].wrap_diff(cc[0], c.x[0]);
            if d.abs() < r && (cc[1] - c.t).abs() < r * r {
                if cc[1] < c.t {
                    early += sweep.measure.omega.values[flat];
                } else {
                    late += sweep.measure.omega.values[flat];
                }
            }
        }
        assert!((early + late - whole).abs() < 1e-14 * whole.max(1.0));
        // definitional solve agrees with the sweep
        let via_solve = measure_via_solve(&ctx, &pole, &c, r, &config).unwrap();
        let rel = (via_solve - whole).abs() / whole;
        assert!(rel < 0.15, "sweep {whole} vs solve {via_solve} rel {rel}");
    }

    #[test]
    fn riesz_identity_holds() {
        let (grid, psi, coeff) = flat_ctx(16);
        let ctx = Flattened {
            grid: &grid,
            psi: &psi,
            coeff: &coeff,
        };
        let pole = AmbientPoint::new(0.6, vec![0.5], 0.9);
        let config = SolverConfig {
            top: TopBoundary::Neumann,
            ..Default::default()
        };
        let sweep = adjoint_sweep(&ctx, &pole, &config).unwrap();
        let phi_center = AmbientPoint::new(0.0, vec![0.3], 0.4);
        let (lhs, rhs) = riesz_identity_check(&ctx, &sweep, &phi_center, 0.3);
        let rel = (lhs - rhs).abs() / rhs.abs().max(1e-12);
        assert!(rel < 0.2, "lhs {lhs} rhs {rhs} rel {rel}");
    }
}
