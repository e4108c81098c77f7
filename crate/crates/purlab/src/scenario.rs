//! Deterministic end-to-end scenarios: configuration parsing, the pipeline
//! (coefficient check, solve, measure, A-infinity, corona, refinement,
//! level-set graphs, regularity, beta diagnostics), and report emission.

use crate::coeffs::SmoothingReport;
use crate::corona::{
    measure_corona, nondegeneracy_refinement, sawtooth_cutoff, solution_deriv_fields,
    split_regimes, square_function_report, CoronaDecomposition, CubeMeasures, CubeWindow,
    CutoffReport, IbpReport, SquareFunctionReport,
};
use crate::error::{Error, Result};
use crate::geometry::{DyadicCube, DyadicGrid, StructuralConstants};
use crate::graph::{
    beta_field, carleson_packing_norm, make_graph, GraphFunction, GraphKind, GraphParams,
    LipEstimate,
};
use crate::grid::Lattice;
use crate::io::{write_csv_table, write_field_csv, write_graph};
use crate::levelset::{
    build_psi_s, heart_square_function, regularity_report, smoothed_family, transference_check,
    ApproxGraph, HeartReport, LevelSetConfig, LevelSetMap, PsiSReport, RegularityReport,
    SmoothedFamilyReport, TransferenceReport,
};
use crate::pde::{
    adjoint_sweep, check_coefficients, normalized_green, reverse_holder, CoefficientField,
    CoefficientReport, Flattened, FlattenedGrid, NormalizedGreenReport, ReverseHolderReport,
    SolverConfig, TopBoundary,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Coefficient field specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CoeffSpec {
    /// The heat operator.
    Identity,
    /// `(1 + eps * cutoff(dist) * sin(k x_1)) I`: elliptic, oscillating at
    /// unit scale, decaying at the boundary.
    Perturbed { eps: f64, k: f64 },
    /// Diagonal anisotropy `diag(a, 1, ..)`.
    Anisotropic { a: f64 },
}

impl CoeffSpec {
    pub fn build(&self, dim: usize, lambda: f64) -> CoefficientField {
        match self {
            CoeffSpec::Identity => CoefficientField::identity(dim),
            CoeffSpec::Perturbed { eps, k } => {
                let eps = *eps;
                let k = *k;
                CoefficientField::from_fn(dim, lambda, true, move |p| {
                    let cut = (1.0 - (-p.x0).exp()).clamp(0.0, 1.0);
                    let w = 1.0 + eps * cut * (k * p.p.x[0]).sin();
                    DMatrix::identity(dim, dim).scale(w)
                })
            }
            CoeffSpec::Anisotropic { a } => {
                let a = *a;
                CoefficientField::from_fn(dim, lambda, true, move |_| {
                    let mut m = DMatrix::identity(dim, dim);
                    m[(0, 0)] = a;
                    m
                })
            }
        }
    }
}

/// A fully deterministic experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Ambient spatial dimension.
    pub n: usize,
    /// Boundary lattice resolution per spatial axis (time gets `nx^2`).
    pub nx: usize,
    /// Flattened box height and its resolution.
    pub height: f64,
    pub n_rho: usize,
    pub lambda: f64,
    pub graph: GraphKind,
    pub graph_amplitude: f64,
    pub graph_width: f64,
    pub graph_depth: usize,
    pub graph_slope: f64,
    pub graph_offset: f64,
    pub coeff: CoeffSpec,
    /// Structural overrides.
    pub whitney_k: f64,
    pub m_star: f64,
    pub m_prime: f64,
    /// Refinement threshold factor relative to the measured baseline
    /// square-function density.
    pub eps_factor: f64,
    pub eps0: f64,
    pub gamma: f64,
    pub q_exponent: f64,
    /// Window top cube.
    pub window_gen: u32,
    pub window_x: u64,
    pub window_t: u64,
    /// Deepest generation (0 = lattice maximum).
    pub max_gen: u32,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "flat-heat".into(),
            n: 2,
            nx: 32,
            height: 2.25,
            n_rho: 72,
            lambda: 1.0,
            graph: GraphKind::Flat,
            graph_amplitude: 0.1,
            graph_width: 0.25,
            graph_depth: 4,
            graph_slope: 0.0,
            graph_offset: 0.0,
            coeff: CoeffSpec::Identity,
            whitney_k: 8.0,
            m_star: 4.0,
            m_prime: 4.0,
            eps_factor: 100.0,
            eps0: 1.0 / 64.0,
            gamma: 0.05,
            q_exponent: 2.0,
            window_gen: 2,
            window_x: 1,
            window_t: 6,
            max_gen: 0,
            seed: 7,
        }
    }
}

impl Scenario {
    /// Parse the flat `key = value` configuration format. Unknown keys are
    /// rejected; omitted keys keep their defaults.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut s = Scenario::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let parse_f = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| Error::invalid(format!("{key}: bad number {value}")))
            };
            let parse_u = || -> Result<u64> {
                value
                    .parse()
                    .map_err(|_| Error::invalid(format!("{key}: bad integer {value}")))
            };
            match key {
                "name" => s.name = value.into(),
                "n" => s.n = parse_u()? as usize,
                "nx" => s.nx = parse_u()? as usize,
                "height" => s.height = parse_f()?,
                "n_rho" => s.n_rho = parse_u()? as usize,
                "lambda" => s.lambda = parse_f()?,
                "graph.kind" => {
                    s.graph = match value {
                        "flat" => GraphKind::Flat,
                        "affine" => GraphKind::Affine,
                        "bump" => GraphKind::Bump,
                        "regular" => GraphKind::Regular,
                        "rough" => GraphKind::Rough,
                        _ => return Err(Error::invalid(format!("unknown graph kind {value}"))),
                    }
                }
                "graph.amplitude" => s.graph_amplitude = parse_f()?,
                "graph.width" => s.graph_width = parse_f()?,
                "graph.depth" => s.graph_depth = parse_u()? as usize,
                "graph.slope" => s.graph_slope = parse_f()?,
                "graph.offset" => s.graph_offset = parse_f()?,
                "coeff.kind" => {
                    s.coeff = match value {
                        "identity" => CoeffSpec::Identity,
                        "perturbed" => CoeffSpec::Perturbed { eps: 0.1, k: std::f64::consts::TAU },
                        "anisotropic" => CoeffSpec::Anisotropic { a: 2.0 },
                        _ => return Err(Error::invalid(format!("unknown coeff kind {value}"))),
                    }
                }
                "coeff.eps" => {
                    if let CoeffSpec::Perturbed { ref mut eps, .. } = s.coeff {
                        *eps = parse_f()?;
                    }
                }
                "k" => s.whitney_k = parse_f()?,
                "m_star" => s.m_star = parse_f()?,
                "m_prime" => s.m_prime = parse_f()?,
                "eps" => s.eps_factor = parse_f()?,
                "eps0" => s.eps0 = parse_f()?,
                "gamma" => s.gamma = parse_f()?,
                "q" => s.q_exponent = parse_f()?,
                "window.gen" => s.window_gen = parse_u()? as u32,
                "window.x" => s.window_x = parse_u()?,
                "window.t" => s.window_t = parse_u()?,
                "max_gen" => s.max_gen = parse_u()? as u32,
                "seed" => s.seed = parse_u()?,
                _ => return Err(Error::invalid(format!("unknown config key {key}"))),
            }
        }
        Ok(s)
    }

    pub fn graph_params(&self) -> GraphParams {
        let mut p = GraphParams::desk_default(self.n, self.nx);
        p.amplitude = self.graph_amplitude;
        p.width = self.graph_width;
        p.depth = self.graph_depth;
        p.seed = self.seed;
        if self.n >= 2 {
            p.slope = vec![self.graph_slope; self.n - 1];
        }
        p.offset = self.graph_offset;
        p
    }

    pub fn build_graph(&self) -> Result<GraphFunction> {
        make_graph(self.graph, &self.graph_params())
    }

    pub fn constants(&self, lip: f64) -> Result<StructuralConstants> {
        let mut c = StructuralConstants::desk(self.n, lip)?;
        c.lambda = self.lambda;
        c.whitney_k = self.whitney_k;
        c.m_star = self.m_star;
        c.m_prime = self.m_prime;
        c.eps0 = self.eps0;
        c.gamma = self.gamma;
        c.q = self.q_exponent;
        c.validate()?;
        Ok(c)
    }

    pub fn window(&self, lattice: &Lattice) -> CubeWindow {
        let grid = DyadicGrid::new(self.n - 1, 1.0);
        let max_gen = if self.max_gen == 0 {
            grid.max_generation(lattice)
        } else {
            self.max_gen
        };
        let top = DyadicCube {
            gen: self.window_gen,
            idx: {
                let mut idx = vec![self.window_x; self.n - 1];
                idx.push(self.window_t);
                idx
            },
        };
        CubeWindow { grid, top, max_gen }
    }
}

/// One measured constant with a stable anchor key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasuredConstant {
    pub anchor: String,
    pub value: f64,
}

/// Full pipeline output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub scenario: Scenario,
    pub constants: StructuralConstants,
    pub lip: LipEstimate,
    pub coefficients: CoefficientReport,
    pub smoothing: Option<SmoothingReport>,
    pub ainfty: ReverseHolderReport,
    pub corona: CoronaSummary,
    pub green: NormalizedGreenReport,
    pub refinement: RefinementSummary,
    pub square_function: SquareFunctionReport,
    pub ibp: Option<IbpReport>,
    pub cutoff: CutoffReport,
    pub psi_s: Option<PsiSReport>,
    pub transference: Option<TransferenceReport>,
    pub heart: Option<HeartReport>,
    pub smoothed: Option<SmoothedFamilyReport>,
    pub regularity: Option<RegularityReport>,
    pub beta: BetaSummary,
    /// Structured non-fatal outcomes, e.g. "no good regimes".
    pub outcomes: Vec<String>,
    pub measured: Vec<MeasuredConstant>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoronaSummary {
    pub regimes: usize,
    pub top_packing: f64,
    pub stopped_fractions: Vec<f64>,
    pub regime_sizes: Vec<usize>,
    pub semi_coherent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementSummary {
    pub good: usize,
    pub bad: usize,
    pub skipped: usize,
    pub bad_packing: f64,
    pub min_vertical_derivative: f64,
    pub sub_regimes: usize,
    pub chosen_regime_size: usize,
    pub eps_used: f64,
    pub c1_used: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaSummary {
    /// Packing norm of the input graph.
    pub input_norm: f64,
    /// Packing norm of the approximating graph, when one was built.
    pub psi_s_norm: Option<f64>,
    /// Per-generation maximal beta of the input graph.
    pub max_beta_per_gen: Vec<f64>,
}

/// Artifacts that are too large for the JSON summary but are exported by
/// `emit_report` (fields, the approximating graph, per-cube tables).
pub struct PipelineArtifacts {
    pub psi: GraphFunction,
    pub approx: Option<ApproxGraph>,
    pub densities: Vec<(DyadicCube, f64, f64, f64)>,
    pub beta_rows: Vec<(DyadicCube, f64, f64)>,
}

pub struct PipelineOutput {
    pub bundle: ReportBundle,
    pub artifacts: PipelineArtifacts,
}

/// Run the full pipeline for a scenario.
pub fn run_pipeline(scenario: &Scenario) -> Result<PipelineOutput> {
    let psi = scenario.build_graph().map_err(|e| e.in_stage("graph"))?;
    let lip = psi.lip_estimate();
    let constants = scenario.constants(lip.combined)?;
    let m0 = constants.m0;
    let lattice = psi.lattice().clone();
    let coeff = scenario.coeff.build(scenario.n, scenario.lambda);
    let grid = FlattenedGrid::aligned_with_boundary(&lattice, scenario.n_rho, scenario.height);
    let ctx = Flattened {
        grid: &grid,
        psi: &psi,
        coeff: &coeff,
    };
    let solver_config = SolverConfig {
        top: TopBoundary::Dirichlet0,
        ..Default::default()
    };
    let mut outcomes: Vec<String> = Vec::new();
    let mut measured: Vec<MeasuredConstant> = Vec::new();
    let push = |measured: &mut Vec<MeasuredConstant>, anchor: &str, value: f64| {
        measured.push(MeasuredConstant {
            anchor: anchor.into(),
            value,
        });
    };

    // stage: coefficient diagnostics
    let coefficients =
        check_coefficients(&ctx, &constants).map_err(|e| e.in_stage("coefficients"))?;
    push(&mut measured, "coeff.carleson_l1", coefficients.carleson_l1);
    push(&mut measured, "coeff.carleson_l2", coefficients.carleson_l2);
    let smoothing = match scenario.coeff {
        CoeffSpec::Identity => None,
        _ => Some(
            crate::coeffs::smooth_coefficients(&ctx, 0.25, 4.0, 9)
                .map_err(|e| e.in_stage("coefficients"))?
                .report,
        ),
    };

    // stage: normalized Green pair for the window top
    let window = scenario.window(&lattice);
    let top_center = window.grid.center(&window.top);
    let top_radius = 0.5 * window.grid.side(window.top.gen);
    let sigma_top =
        crate::graph::surface_measure_cube(&psi, &window.grid, &window.top);
    let green = normalized_green(
        &ctx,
        &crate::graph::GraphDomain::new(psi.clone()),
        &constants,
        &top_center,
        top_radius,
        sigma_top,
        false,
        &solver_config,
    )
    .map_err(|e| e.in_stage("green"))?;
    push(&mut measured, "green.m2", green.report.m2);
    push(
        &mut measured,
        "green.grad_const",
        green.report.derivative_constants[0],
    );

    // stage: A-infinity diagnostics from the same pole
    let ainfty = {
        let mut balls = Vec::new();
        let mut r = top_radius;
        for _ in 0..3 {
            balls.push((top_center.clone(), r));
            r *= 0.5;
        }
        reverse_holder(
            &green.measure,
            &psi,
            constants.kappa,
            constants.q,
            &balls,
        )
        .map_err(|e| e.in_stage("ainfty"))?
    };
    push(&mut measured, "ainfty.c_star", ainfty.c_star);

    // stage: measure corona over the window (fresh sweep per regime top)
    let corona_dec: CoronaDecomposition = {
        let psi_ref = &psi;
        let grid_ref = &grid;
        let coeff_ref = &coeff;
        let window_ref = &window;
        let constants_ref = &constants;
        let solver_ref = &solver_config;
        measure_corona(
            &window,
            constants.m_prime,
            move |top: &DyadicCube| -> Result<CubeMeasures> {
                let c = window_ref.grid.center(top);
                let r = 0.5 * window_ref.grid.side(top.gen);
                let on_graph = crate::geometry::AmbientPoint {
                    x0: psi_ref.eval(&c),
                    p: c.clone(),
                };
                let pole = crate::geometry::corkscrew(
                    &on_graph,
                    constants_ref.m_star * r,
                    true,
                    constants_ref,
                )?;
                let ctx2 = Flattened {
                    grid: grid_ref,
                    psi: psi_ref,
                    coeff: coeff_ref,
                };
                let sweep = adjoint_sweep(&ctx2, &pole, solver_ref)?;
                Ok(CubeMeasures::from_fields(
                    window_ref,
                    &sweep.measure.lattice,
                    &sweep.measure.omega,
                    &sweep.measure.sigma,
                ))
            },
            None,
        )
        .map_err(|e| e.in_stage("corona"))?
    };
    let corona = CoronaSummary {
        regimes: corona_dec.regimes.len(),
        top_packing: corona_dec.top_packing,
        stopped_fractions: corona_dec.stopped_fractions.clone(),
        regime_sizes: corona_dec.regimes.iter().map(|r| r.len()).collect(),
        semi_coherent: corona_dec
            .regimes
            .iter()
            .all(|r| r.is_semi_coherent(&window.grid)),
    };
    push(&mut measured, "corona.top_packing", corona_dec.top_packing);

    // stage: refinement of the first regime using the normalized Green pair
    let s_star = &corona_dec.regimes[0];
    let derivs = solution_deriv_fields(&green.u, &psi, green.u.levels.len() - 1);
    // baseline density for the refinement threshold
    let full_cubes: Vec<DyadicCube> = s_star.cubes.iter().cloned().collect();
    let square_function = square_function_report(
        &window,
        &full_cubes,
        &derivs,
        &constants,
        None,
        &s_star.top,
    );
    push(
        &mut measured,
        "sqfn.main_over_region",
        square_function.main_over_region,
    );
    let eps_used = scenario.eps_factor * square_function.main_over_region.max(1e-12);
    // c1 from the measured vertical derivative over the regime's Whitney cells
    let c1_used = {
        let mut min_v = f64::INFINITY;
        for q in s_star.cubes.iter() {
            if q.gen < s_star.top.gen + 2 {
                continue;
            }
            let region = crate::geometry::WhitneyRegion::new(
                &window.grid,
                q,
                crate::geometry::WhitneyVariant::Plain,
                &constants,
            );
            crate::corona::for_each_whitney_cell(&grid, &region, &window.grid, |level, cell, _| {
                if level < derivs.u_rho.len() {
                    let v = derivs.u_rho[level][cell];
                    if v.is_finite() {
                        min_v = min_v.min(v);
                    }
                }
            });
        }
        if min_v.is_finite() {
            min_v.max(0.0)
        } else {
            0.0
        }
    };
    push(&mut measured, "green.c1", c1_used);
    let refinement = nondegeneracy_refinement(
        &window,
        s_star,
        &derivs,
        &constants,
        eps_used,
        c1_used,
        2,
    )
    .map_err(|e| e.in_stage("refinement"))?;
    let sub = split_regimes(&window, &refinement.good);
    let chosen = sub.iter().max_by_key(|r| r.len()).cloned();
    let refinement_summary = RefinementSummary {
        good: refinement.good.len(),
        bad: refinement.bad.len(),
        skipped: refinement.skipped.len(),
        bad_packing: refinement.bad_packing,
        min_vertical_derivative: refinement.min_vertical_derivative,
        sub_regimes: sub.len(),
        chosen_regime_size: chosen.as_ref().map_or(0, |r| r.len()),
        eps_used,
        c1_used,
    };

    // stage: sawtooth cutoff + weighted square function + IBP on the regime
    let trunc: Vec<DyadicCube> = s_star
        .cubes
        .iter()
        .filter(|q| q.gen >= s_star.top.gen + 2)
        .cloned()
        .collect();
    let cutoff = sawtooth_cutoff(&window, &trunc, &grid, &constants, &s_star.top)
        .map_err(|e| e.in_stage("cutoff"))?;
    push(
        &mut measured,
        "cutoff.derivative_const",
        cutoff.report.derivative_constant,
    );
    let ibp = if coeff.symmetric {
        Some(
            crate::corona::ibp_identity_check(
                &ctx,
                &window,
                &derivs,
                &cutoff,
                &green.u,
                &s_star.top,
                64,
            )
            .map_err(|e| e.in_stage("ibp"))?,
        )
    } else {
        None
    };

    // stage: level-set graph on the chosen good regime
    let (psi_s, approx, transference, heart, smoothed, regularity) = match chosen {
        Some(ref regime) if regime.len() >= 4 => {
            let map = LevelSetMap {
                window: &window,
                regime,
                u: &green.u,
                constants: &constants,
                config: LevelSetConfig::default(),
            };
            let approx = build_psi_s(&map, &psi, m0, green.report.m2)
                .map_err(|e| e.in_stage("levelset"))?;
            let transference = transference_check(&map, &psi, 60, scenario.seed)
                .map_err(|e| e.in_stage("levelset"))?;
            let deep = regime
                .cubes
                .iter()
                .find(|q| q.gen == regime.top.gen + 1)
                .cloned()
                .unwrap_or_else(|| regime.top.clone());
            let heart = heart_square_function(&map, &approx, &deep, &lattice)
                .map_err(|e| e.in_stage("levelset"))?;
            let smoothed = smoothed_family(&map, &approx, &deep, constants.gamma)
                .map_err(|e| e.in_stage("levelset"))?;
            let regularity = regularity_report(&window, regime, &approx, &constants, 50.0)
                .map_err(|e| e.in_stage("regularity"))?;
            (
                Some(approx.report.clone()),
                Some(approx),
                Some(transference),
                Some(heart),
                Some(smoothed),
                Some(regularity),
            )
        }
        _ => {
            outcomes.push("no good regimes large enough for a level-set graph".into());
            (None, None, None, None, None, None)
        }
    };
    if let Some(r) = &regularity {
        push(&mut measured, "regularity.bmo", r.bmo_norm);
        push(&mut measured, "regularity.m_star", r.js.m_star);
    }

    // stage: beta diagnostics of the input graph and the approximant
    let dgrid = window.grid.clone();
    let bf = beta_field(&psi, &dgrid, window.max_gen).map_err(|e| e.in_stage("beta"))?;
    let input_norm = carleson_packing_norm(&bf);
    push(&mut measured, "beta.input_packing", input_norm);
    let psi_s_norm = match &approx {
        Some(a) => {
            let bfa = beta_field(&a.graph, &dgrid, window.max_gen)
                .map_err(|e| e.in_stage("beta"))?;
            Some(carleson_packing_norm(&bfa))
        }
        None => None,
    };
    let max_beta_per_gen: Vec<f64> = bf
        .values
        .iter()
        .map(|level| level.iter().cloned().fold(0.0f64, f64::max))
        .collect();
    let mut beta_rows = Vec::new();
    for g in 0..=window.max_gen {
        for q in dgrid.cubes_at(g) {
            beta_rows.push((q.clone(), dgrid.side(g), bf.beta(&q)));
        }
    }
    let densities: Vec<(DyadicCube, f64, f64, f64)> = {
        let m = CubeMeasures::from_fields(
            &window,
            &green.measure.lattice,
            &green.measure.omega,
            &green.measure.sigma,
        );
        window
            .cubes()
            .into_iter()
            .map(|q| {
                let o = m.omega[&q];
                let s = m.sigma[&q];
                (q, o, s, o / s)
            })
            .collect()
    };

    let bundle = ReportBundle {
        scenario: scenario.clone(),
        constants,
        lip,
        coefficients,
        smoothing,
        ainfty,
        corona,
        green: green.report.clone(),
        refinement: refinement_summary,
        square_function,
        ibp,
        cutoff: cutoff.report.clone(),
        psi_s,
        transference,
        heart,
        smoothed,
        regularity,
        beta: BetaSummary {
            input_norm,
            psi_s_norm,
            max_beta_per_gen,
        },
        outcomes,
        measured,
    };
    Ok(PipelineOutput {
        bundle,
        artifacts: PipelineArtifacts {
            psi,
            approx,
            densities,
            beta_rows,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

/// Write the report bundle (and the large artifacts) to a directory.
pub fn emit_report(out: &PipelineOutput, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Json => {
                let path = dir.join("summary.json");
                let json = serde_json::to_string_pretty(&out.bundle)?;
                std::fs::write(&path, json)?;
                written.push(path.display().to_string());
            }
            ReportFormat::Csv => {
                // beta vs scale
                let path = dir.join("beta_vs_scale.csv");
                let rows: Vec<Vec<String>> = out
                    .artifacts
                    .beta_rows
                    .iter()
                    .map(|(q, side, beta)| {
                        vec![cube_id(q), format!("{side:.9e}"), format!("{beta:.9e}")]
                    })
                    .collect();
                write_csv_table(&path, &["cube", "side", "beta"], &rows)?;
                written.push(path.display().to_string());
                // densities
                let path = dir.join("densities.csv");
                let rows: Vec<Vec<String>> = out
                    .artifacts
                    .densities
                    .iter()
                    .map(|(q, o, s, k)| {
                        vec![
                            cube_id(q),
                            format!("{o:.9e}"),
                            format!("{s:.9e}"),
                            format!("{k:.9e}"),
                        ]
                    })
                    .collect();
                write_csv_table(&path, &["cube", "omega", "sigma", "density"], &rows)?;
                written.push(path.display().to_string());
                // case classification and JS ratios
                if let Some(reg) = &out.bundle.regularity {
                    let path = dir.join("js_ratios.csv");
                    let rows: Vec<Vec<String>> = reg
                        .records
                        .iter()
                        .map(|r| {
                            vec![
                                cube_id(&r.cube),
                                format!("{:?}", r.case),
                                format!("{:.9e}", r.side),
                                format!("{:.9e}", r.localized),
                                format!("{:.9e}", r.js_m),
                            ]
                        })
                        .collect();
                    write_csv_table(
                        &path,
                        &["cube", "case", "side", "localized_norm", "js_threshold"],
                        &rows,
                    )?;
                    written.push(path.display().to_string());
                }
                // graph exports
                let path = dir.join("psi.pgf");
                write_graph(&path, &out.artifacts.psi, out.bundle.scenario.n)?;
                written.push(path.display().to_string());
                let path = dir.join("psi.csv");
                write_field_csv(&path, &out.artifacts.psi.sampled(), "psi")?;
                written.push(path.display().to_string());
                if let Some(a) = &out.artifacts.approx {
                    let path = dir.join("psi_s.pgf");
                    write_graph(&path, &a.graph, out.bundle.scenario.n)?;
                    written.push(path.display().to_string());
                }
            }
            ReportFormat::Text => {
                let path = dir.join("summary.txt");
                let mut text = String::new();
                text.push_str(&format!("scenario: {}\n", out.bundle.scenario.name));
                text.push_str(&format!("graph: {:?}\n", out.bundle.scenario.graph));
                text.push_str(&format!(
                    "lip(1,1/2): {:.6}\n",
                    out.bundle.lip.combined
                ));
                text.push_str("measured constants (anchor = value):\n");
                for m in &out.bundle.measured {
                    text.push_str(&format!("  {} = {:.6e}\n", m.anchor, m.value));
                }
                for o in &out.bundle.outcomes {
                    text.push_str(&format!("outcome: {o}\n"));
                }
                std::fs::write(&path, text)?;
                written.push(path.display().to_string());
            }
        }
    }
    Ok(written)
}

pub fn cube_id(q: &DyadicCube) -> String {
    let idx: Vec<String> = q.idx.iter().map(|i| i.to_string()).collect();
    format!("g{}:{}", q.gen, idx.join(":"))
}

/// Stage summary used by the JSON round-trip check.
pub fn bundle_to_sorted_json(bundle: &ReportBundle) -> Result<String> {
    let value: serde_json::Value = serde_json::to_value(bundle)?;
    let map: BTreeMap<String, serde_json::Value> = match value {
        serde_json::Value::Object(m) => m.into_iter().collect(),
        _ => return Err(Error::invalid("bundle did not serialize to an object")),
    };
    Ok(serde_json::to_string_pretty(&map)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_unknown_keys() {
        let text = "
            # comment
            name = demo
            nx = 16
            graph.kind = bump
            graph.amplitude = 0.05
            seed = 9
        ";
        let s = Scenario::from_config_text(text).unwrap();
        assert_eq!(s.name, "demo");
        assert_eq!(s.nx, 16);
        assert_eq!(s.graph, GraphKind::Bump);
        assert_eq!(s.seed, 9);
        assert!(Scenario::from_config_text("bogus = 1").is_err());
    }
}
