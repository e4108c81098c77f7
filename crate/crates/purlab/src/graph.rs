//! Lip(1,1/2) graph functions over a periodic parabolic lattice: generators,
//! Lip-norm estimation, beta numbers with Carleson packing norms, and surface
//! measure.
//!
//! A graph function is stored as a periodic sampled part plus an exactly
//! carried affine-in-x part, so affine graphs stay globally affine across the
//! periodic seam and beta fits can absorb them exactly.

use crate::error::{Error, Result};
use crate::geometry::{DyadicCube, DyadicGrid, SpaceTimePoint};
use crate::grid::{Field, Lattice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFunction {
    periodic: Field,
    slope: Vec<f64>,
    offset: f64,
    lip: LipEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipEstimate {
    pub spatial: f64,
    pub temporal_half: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    Flat,
    Affine,
    Bump,
    Regular,
    Rough,
}

/// Generator parameters. Only the fields relevant to the requested kind are
/// read; the rest keep their defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphParams {
    /// Ambient spatial dimension n (the lattice has n-1 spatial axes).
    pub n: usize,
    /// Samples per spatial axis; the time axis gets `nx^2 * time_len` samples.
    pub nx: usize,
    pub spatial_len: f64,
    pub time_len: f64,
    /// Affine part `psi = slope . x + offset`.
    pub slope: Vec<f64>,
    pub offset: f64,
    /// Bump / rough amplitude.
    pub amplitude: f64,
    /// Bump halfwidth (spatial; temporal uses its square).
    pub width: f64,
    /// Band for the regular generator (modes with max-norm in [lo, hi]).
    pub band: (usize, usize),
    /// Lacunary depth for the rough generator.
    pub depth: usize,
    pub seed: u64,
    /// Generators whose measured Lip constant exceeds this cap are rejected.
    pub lip_cap: f64,
}

impl GraphParams {
    pub fn desk_default(n: usize, nx: usize) -> Self {
        GraphParams {
            n,
            nx,
            spatial_len: 1.0,
            time_len: 1.0,
            slope: vec![0.0; n.saturating_sub(1)],
            offset: 0.0,
            amplitude: 0.1,
            width: 0.25,
            band: (2, 5),
            depth: 4,
            seed: 0,
            lip_cap: 16.0,
        }
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::boundary(self.n - 1, self.nx, self.spatial_len, self.time_len)
    }
}

/// Smooth even bump supported on [-1, 1], value 1 at 0.
fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let w = 1.0 - u * u;
        w * w * w
    }
}

/// 1-periodic triangle wave with range [-1, 1] and |slope| = 4.
fn triangle(u: f64) -> f64 {
    let f = u - u.floor();
    if f < 0.5 {
        4.0 * f - 1.0
    } else {
        3.0 - 4.0 * f
    }
}

pub fn make_graph(kind: GraphKind, params: &GraphParams) -> Result<GraphFunction> {
    if params.n < 2 {
        // desk mode tolerates n = 1 nowhere; the lattice would have no spatial axis
        return Err(Error::invalid("graph generators need ambient dimension n >= 2"));
    }
    let lat = params.lattice();
    let sd = params.n - 1;
    let (periodic, slope, offset): (Field, Vec<f64>, f64) = match kind {
        GraphKind::Flat => (Field::zeros(&lat), vec![0.0; sd], 0.0),
        GraphKind::Affine => {
            if params.slope.len() != sd {
                return Err(Error::invalid("slope length must equal n-1"));
            }
            (Field::zeros(&lat), params.slope.clone(), params.offset)
        }
        GraphKind::Bump => {
            let cx = 0.5 * params.spatial_len;
            let ct = 0.5 * params.time_len;
            let w = params.width;
            let amp = params.amplitude;
            let f = Field::from_fn(&lat, |c| {
                let mut v = amp;
                for x in &c[..sd] {
                    v *= bump((x - cx) / w);
                }
                v * bump((c[sd] - ct) / (w * w))
            });
            (f, vec![0.0; sd], 0.0)
        }
        GraphKind::Regular => {
            // random band-limited field: smooth, small half-derivative BMO
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let (lo, hi) = params.band;
            let mut modes: Vec<(Vec<i64>, i64, f64, f64)> = Vec::new();
            let mut kidx = vec![-(hi as i64); sd];
            loop {
                for mt in -(hi as i64)..=(hi as i64) {
                    let norm = kidx
                        .iter()
                        .map(|k| k.abs())
                        .chain(std::iter::once(mt.abs()))
                        .max()
                        .unwrap();
                    if norm >= lo as i64 && norm <= hi as i64 {
                        let a: f64 = rng.gen_range(-1.0..1.0);
                        let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        modes.push((kidx.clone(), mt, a, ph));
                    }
                }
                let mut a = sd;
                let mut done = false;
                loop {
                    if a == 0 {
                        done = true;
                        break;
                    }
                    a -= 1;
                    kidx[a] += 1;
                    if kidx[a] <= hi as i64 {
                        break;
                    }
                    kidx[a] = -(hi as i64);
                }
                if done {
                    break;
                }
            }
            let amp = params.amplitude / (modes.len() as f64).sqrt().max(1.0);
            let ls = params.spatial_len;
            let lt = params.time_len;
            let f = Field::from_fn(&lat, |c| {
                let mut v = 0.0;
                for (kx, kt, a, ph) in &modes {
                    let mut phase = *ph;
                    for (x, k) in c[..sd].iter().zip(kx) {
                        phase += std::f64::consts::TAU * (*k as f64) * x / ls;
                    }
                    phase += std::f64::consts::TAU * (*kt as f64) * c[sd] / lt;
                    v += a * phase.cos();
                }
                amp * v
            });
            (f, vec![0.0; sd], 0.0)
        }
        GraphKind::Rough => {
            // lacunary time series: Lip(1,1/2) uniformly in depth, but the
            // half-order time derivative leaves BMO as the depth grows
            let cx = 0.5 * params.spatial_len;
            let w = params.width.max(1e-6);
            let amp = params.amplitude;
            let depth = params.depth.max(1);
            let lt = params.time_len;
            let f = Field::from_fn(&lat, |c| {
                let mut chi = amp;
                for x in &c[..sd] {
                    chi *= bump((x - cx) / w);
                }
                let mut v = 0.0;
                for k in 1..=depth {
                    let scale = 2f64.powf(-(k as f64) / 2.0);
                    v += scale * triangle(2f64.powi(k as i32) * c[sd] / lt);
                }
                chi * v
            });
            (f, vec![0.0; sd], 0.0)
        }
    };
    let mut g = GraphFunction {
        periodic,
        slope,
        offset,
        lip: LipEstimate {
            spatial: 0.0,
            temporal_half: 0.0,
            combined: 0.0,
        },
    };
    g.lip = lip_norm_estimate(&g);
    if g.lip.combined > params.lip_cap {
        return Err(Error::invalid(format!(
            "requested graph has Lip(1,1/2) constant {:.3} above the cap {:.3}",
            g.lip.combined, params.lip_cap
        )));
    }
    Ok(g)
}

impl GraphFunction {
    pub fn from_field(field: Field) -> Self {
        let sd = field.lattice.ndim() - 1;
        let mut g = GraphFunction {
            periodic: field,
            slope: vec![0.0; sd],
            offset: 0.0,
            lip: LipEstimate {
                spatial: 0.0,
                temporal_half: 0.0,
                combined: 0.0,
            },
        };
        g.lip = lip_norm_estimate(&g);
        g
    }

    pub fn field(&self) -> &Field {
        &self.periodic
    }

    pub fn slope(&self) -> &[f64] {
        &self.slope
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn spatial_dims(&self) -> usize {
        self.periodic.lattice.ndim() - 1
    }

    pub fn lattice(&self) -> &Lattice {
        &self.periodic.lattice
    }

    pub fn lip_estimate(&self) -> LipEstimate {
        self.lip
    }

    pub fn lip_constant(&self) -> f64 {
        self.lip.combined
    }

    /// Evaluate at a parameter point. The periodic part wraps; the affine
    /// part uses raw (unwrapped) coordinates so affine graphs stay affine.
    pub fn eval(&self, p: &SpaceTimePoint) -> f64 {
        let mut coords: Vec<f64> = p.x.clone();
        coords.push(p.t);
        let mut v = self.offset + self.periodic.interp(&coords);
        for (a, s) in self.slope.iter().enumerate() {
            v += s * p.x[a];
        }
        v
    }

    /// Samples of the full function at lattice nodes.
    pub fn sampled(&self) -> Field {
        let lat = self.periodic.lattice.clone();
        Field::from_fn(&lat, |c| {
            self.eval(&SpaceTimePoint::new(c[..c.len() - 1].to_vec(), c[c.len() - 1]))
        })
    }

    /// Shift by a constant (used to normalize approximating graphs).
    pub fn shifted(&self, c: f64) -> GraphFunction {
        let mut g = self.clone();
        g.offset += c;
        g
    }

    /// Add another graph function sampled on the same lattice.
    pub fn add(&self, other: &GraphFunction) -> GraphFunction {
        assert_eq!(self.periodic.lattice, other.periodic.lattice);
        let mut g = GraphFunction {
            periodic: self.periodic.add(&other.periodic),
            slope: self
                .slope
                .iter()
                .zip(&other.slope)
                .map(|(a, b)| a + b)
                .collect(),
            offset: self.offset + other.offset,
            lip: self.lip,
        };
        g.lip = lip_norm_estimate(&g);
        g
    }

    /// Spatial gradient at a lattice node (affine part included).
    pub fn gradient_at(&self, idx: &[usize]) -> Vec<f64> {
        let lat = &self.periodic.lattice;
        let strides = lat.strides();
        let flat = lat.flat_index(idx);
        let sd = self.spatial_dims();
        let mut g = Vec::with_capacity(sd);
        for a in 0..sd {
            let ax = &lat.axes()[a];
            let n = ax.len;
            let i = idx[a];
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let base = flat as isize - (i * strides[a]) as isize;
            let vp = self.periodic.values[(base + (ip * strides[a]) as isize) as usize];
            let vm = self.periodic.values[(base + (im * strides[a]) as isize) as usize];
            g.push((vp - vm) / (2.0 * ax.step) + self.slope[a]);
        }
        g
    }

    /// Surface measure density `sqrt(1 + |grad_x psi|^2)` at every node.
    pub fn surface_density(&self) -> Field {
        let lat = self.periodic.lattice.clone();
        let mut out = Field::zeros(&lat);
        for flat in 0..lat.len() {
            let idx = lat.multi_index(flat);
            let g = self.gradient_at(&idx);
            out.values[flat] = (1.0 + g.iter().map(|v| v * v).sum::<f64>()).sqrt();
        }
        out
    }
}

/// The domain above a graph: `Omega = {x0 > psi(x,t)}` with its structural
/// size constant `m0 = 2 + Lip(1,1/2)`.
#[derive(Debug, Clone)]
pub struct GraphDomain {
    pub psi: GraphFunction,
    pub m0: f64,
}

impl GraphDomain {
    pub fn new(psi: GraphFunction) -> Self {
        let m0 = 2.0 + psi.lip_constant();
        GraphDomain { psi, m0 }
    }

    pub fn contains(&self, p: &crate::geometry::AmbientPoint) -> bool {
        p.x0 > self.psi.eval(&p.p)
    }

    /// Lift a parameter point to the graph surface.
    pub fn lift(&self, p: &SpaceTimePoint) -> crate::geometry::AmbientPoint {
        crate::geometry::AmbientPoint {
            x0: self.psi.eval(p),
            p: p.clone(),
        }
    }
}

/// Three-part Lip estimate: local difference quotients within 3 grid cells
/// plus a seeded long-range sample.
pub fn lip_norm_estimate(g: &GraphFunction) -> LipEstimate {
    let lat = &g.periodic.lattice;
    let nd = lat.ndim();
    let sd = nd - 1;
    let mut spatial = 0.0f64;
    let mut temporal = 0.0f64;
    let mut combined = 0.0f64;

    // local pairs: per-axis offsets up to 3 cells
    for flat in 0..lat.len() {
        let idx = lat.multi_index(flat);
        let p = point_at(lat, &idx);
        let v = g.eval(&p);
        for a in 0..nd {
            for d in 1..=3isize {
                let mut jdx = idx.clone();
                jdx[a] = lat.normalize_index(a, idx[a] as isize + d);
                // raw (unwrapped) coordinate offset for the affine part
                let mut q = p.clone();
                if a < sd {
                    q.x[a] += d as f64 * lat.axes()[a].step;
                } else {
                    q.t += d as f64 * lat.axes()[a].step;
                }
                let w = eval_unwrapped(g, lat, &jdx, &q);
                let num = (w - v).abs();
                if a < sd {
                    let den = (d as f64) * lat.axes()[a].step;
                    spatial = spatial.max(num / den);
                    combined = combined.max(num / den);
                } else {
                    let den = ((d as f64) * lat.axes()[a].step).sqrt();
                    temporal = temporal.max(num / den);
                    combined = combined.max(num / den);
                }
            }
        }
    }

    // long-range random pairs
    let mut rng = ChaCha8Rng::seed_from_u64(0x11aa55);
    let samples = 4 * lat.len().min(20_000);
    for _ in 0..samples {
        let mut p = SpaceTimePoint::new(vec![0.0; sd], 0.0);
        let mut q = SpaceTimePoint::new(vec![0.0; sd], 0.0);
        for a in 0..sd {
            let ext = lat.axes()[a].extent();
            p.x[a] = rng.gen_range(0.0..ext);
            q.x[a] = rng.gen_range(0.0..ext);
        }
        let ext = lat.axes()[sd].extent();
        p.t = rng.gen_range(0.0..ext);
        q.t = rng.gen_range(0.0..ext);
        let dist = p.sub(&q).parabolic_norm();
        if dist < 1e-12 {
            continue;
        }
        let r = (g.eval(&p) - g.eval(&q)).abs() / dist;
        combined = combined.max(r);
        if (p.t - q.t).abs() < 1e-15 {
            spatial = spatial.max(r);
        }
    }

    LipEstimate {
        spatial,
        temporal_half: temporal,
        combined,
    }
}

fn point_at(lat: &Lattice, idx: &[usize]) -> SpaceTimePoint {
    let c = lat.coords(idx);
    SpaceTimePoint::new(c[..c.len() - 1].to_vec(), c[c.len() - 1])
}

/// Evaluate using the periodic sample at `jdx` but the unwrapped coordinates
/// `q` for the affine part.
fn eval_unwrapped(g: &GraphFunction, lat: &Lattice, jdx: &[usize], q: &SpaceTimePoint) -> f64 {
    let mut v = g.offset + g.periodic.values[lat.flat_index(jdx)];
    for (a, s) in g.slope.iter().enumerate() {
        v += s * q.x[a];
    }
    v
}

/// Least-squares beta number over a parabolic cube: the sigma-weighted RMS
/// distance of `psi` to the best affine-in-x fit, normalized by the scale.
/// Degenerate normal systems fall back to a mean-only fit and set the flag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BetaValue {
    pub beta: f64,
    pub degenerate: bool,
}

pub fn beta_number(psi: &GraphFunction, center: &SpaceTimePoint, r: f64) -> Result<BetaValue> {
    let lat = psi.lattice();
    let sd = psi.spatial_dims();
    // gather cells with parabolic window membership, unwrapped relative coords
    let mut lo = Vec::with_capacity(sd + 1);
    let mut hi = Vec::with_capacity(sd + 1);
    for a in 0..sd {
        let ax = &lat.axes()[a];
        lo.push(((center.x[a] - r - ax.min) / ax.step).ceil() as isize);
        hi.push(((center.x[a] + r - ax.min) / ax.step).floor() as isize);
    }
    let axt = &lat.axes()[sd];
    lo.push(((center.t - r * r - axt.min) / axt.step).ceil() as isize);
    hi.push(((center.t + r * r - axt.min) / axt.step).floor() as isize);
    for a in 0..=sd {
        if hi[a] < lo[a] {
            return Err(Error::Geometry("beta window resolves no grid cells".into()));
        }
    }
    solve_beta_window(psi, &lo, &hi, center, r)
}

fn solve_beta_window(
    psi: &GraphFunction,
    lo: &[isize],
    hi: &[isize],
    center: &SpaceTimePoint,
    r: f64,
) -> Result<BetaValue> {
    let lat = psi.lattice();
    let sd = psi.spatial_dims();
    let density = psi.surface_density();
    let m = sd + 1; // fit coefficients: constant + slopes

    // first pass: collect (weight, relative spatial coords, value)
    let mut rows: Vec<(f64, Vec<f64>, f64)> = Vec::new();
    let mut idx = lo.to_vec();
    'outer: loop {
        let mut wrapped = Vec::with_capacity(sd + 1);
        let mut rel = Vec::with_capacity(sd);
        for a in 0..sd {
            let ax = &lat.axes()[a];
            rel.push(ax.min + idx[a] as f64 * ax.step - center.x[a]);
            wrapped.push(lat.normalize_index(a, idx[a]));
        }
        wrapped.push(lat.normalize_index(sd, idx[sd]));
        let flat = lat.flat_index(&wrapped);
        let w = density.values[flat];
        let mut v = psi.offset + psi.periodic.values[flat];
        for a in 0..sd {
            v += psi.slope[a] * (center.x[a] + rel[a]);
        }
        rows.push((w, rel, v));
        let mut a = sd + 1;
        loop {
            if a == 0 {
                break 'outer;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] <= hi[a] {
                break;
            }
            idx[a] = lo[a];
        }
    }

    // center the values to keep the normal equations well scaled
    let sw: f64 = rows.iter().map(|r| r.0).sum();
    let vbar: f64 = rows.iter().map(|r| r.0 * r.2).sum::<f64>() / sw;
    let mut normal = nalgebra::DMatrix::<f64>::zeros(m, m);
    let mut rhs = nalgebra::DVector::<f64>::zeros(m);
    for (w, rel, v) in &rows {
        let vc = v - vbar;
        let mut basis = vec![1.0];
        basis.extend_from_slice(rel);
        for i in 0..m {
            for j in 0..m {
                normal[(i, j)] += w * basis[i] * basis[j];
            }
            rhs[i] += w * basis[i] * vc;
        }
    }
    let chol = normal.clone().cholesky();
    let (coef, degenerate) = match chol {
        Some(c) => (c.solve(&rhs), false),
        None => {
            let mut mean_only = nalgebra::DVector::<f64>::zeros(m);
            mean_only[0] = rhs[0] / normal[(0, 0)].max(1e-300);
            (mean_only, true)
        }
    };

    // second pass: residual by direct evaluation (no cancellation)
    let mut rss = 0.0;
    for (w, rel, v) in &rows {
        let mut fit = vbar + coef[0];
        for a in 0..sd {
            fit += coef[1 + a] * rel[a];
        }
        let d = v - fit;
        rss += w * d * d;
    }
    let beta2 = rss / (sw * r * r);
    Ok(BetaValue {
        beta: beta2.sqrt(),
        degenerate,
    })
}

/// Beta numbers of every dyadic cube down to `max_gen`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaField {
    pub grid: DyadicGrid,
    pub max_gen: u32,
    /// Per generation, per cube (in `DyadicGrid::cubes_at` order).
    pub values: Vec<Vec<f64>>,
    pub degenerate_fits: usize,
}

pub fn beta_field(psi: &GraphFunction, grid: &DyadicGrid, max_gen: u32) -> Result<BetaField> {
    let mut values = Vec::new();
    let mut degenerate = 0usize;
    for g in 0..=max_gen {
        let cubes = grid.cubes_at(g);
        let mut level = Vec::with_capacity(cubes.len());
        for q in &cubes {
            let c = grid.center(&q.clone());
            let b = beta_number(psi, &c, 0.5 * grid.side(g))?;
            if b.degenerate {
                degenerate += 1;
            }
            level.push(b.beta);
        }
        values.push(level);
    }
    Ok(BetaField {
        grid: grid.clone(),
        max_gen,
        values,
        degenerate_fits: degenerate,
    })
}

impl BetaField {
    pub fn beta(&self, q: &DyadicCube) -> f64 {
        let side: u64 = 1 << q.gen;
        let nt: u64 = 1 << (2 * q.gen);
        let sd = self.grid.spatial_dims;
        let mut flat = 0u64;
        for a in 0..sd {
            flat = flat * side + q.idx[a];
        }
        flat = flat * nt + q.idx[sd];
        self.values[q.gen as usize][flat as usize]
    }
}

/// Discrete Carleson packing norm of the beta-square measure: for every
/// dyadic window cube, sum `beta(Q)^2 |Q| ln 2` over cubes `Q` inside the
/// window at scales at or below it, normalized by the window volume; report
/// the sup. This is the dyadic-scales discretization of the Carleson bound
/// and is nondecreasing under grid refinement.
pub fn carleson_packing_norm(bf: &BetaField) -> f64 {
    let grid = &bf.grid;
    let max_gen = bf.max_gen;
    let ln2 = std::f64::consts::LN_2;
    let mut best = 0.0f64;
    for wg in 0..=max_gen {
        for window in grid.cubes_at(wg) {
            let mut nu = 0.0;
            for g in wg..=max_gen {
                for q in grid.descendants_at(&window, g) {
                    let b = bf.beta(&q);
                    nu += b * b * grid.measure(g) * ln2;
                }
            }
            let ratio = nu / grid.measure(wg);
            if ratio > best {
                best = ratio;
            }
        }
    }
    best
}

/// Surface measure of the graph over a union of dyadic cubes (or any cell
/// predicate): integral of `sqrt(1 + |grad psi|^2)` over the parameter set.
pub fn surface_measure_cells(psi: &GraphFunction, cells: impl Fn(&[usize]) -> bool) -> f64 {
    let lat = psi.lattice();
    let density = psi.surface_density();
    let cv = lat.cell_volume();
    let mut acc = 0.0;
    for flat in 0..lat.len() {
        let idx = lat.multi_index(flat);
        if cells(&idx) {
            acc += density.values[flat] * cv;
        }
    }
    acc
}

/// Surface measure of a dyadic cube.
pub fn surface_measure_cube(psi: &GraphFunction, grid: &DyadicGrid, q: &DyadicCube) -> f64 {
    let ranges = grid.ranges(q);
    let lat = psi.lattice();
    surface_measure_cells(psi, |idx| {
        for (a, r) in ranges.iter().enumerate() {
            let c = lat.axes()[a].coord(idx[a]);
            if c < r.0 - 1e-12 || c >= r.1 - 1e-12 {
                return false;
            }
        }
        true
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn flat_graph_is_flat() {
        let g = make_graph(GraphKind::Flat, &GraphParams::desk_default(2, 16)).unwrap();
        assert_eq!(g.lip_constant(), 0.0);
        assert_eq!(g.eval(&SpaceTimePoint::new(vec![0.37], 0.8)), 0.0);
    }

    #[test]
    fn affine_lip_and_beta_zero() {
        let mut p = GraphParams::desk_default(2, 16);
        p.slope = vec![2.0];
        p.offset = 3.0;
        let g = make_graph(GraphKind::Affine, &p).unwrap();
        assert_relative_eq!(g.lip_estimate().spatial, 2.0, epsilon = 1e-9);
        assert!(g.lip_estimate().temporal_half < 1e-12);
        // beta vanishes at all scales
        let grid = DyadicGrid::new(1, 1.0);
        let bf = beta_field(&g, &grid, 3).unwrap();
        for level in &bf.values {
            for b in level {
                assert!(*b < 1e-12, "affine beta = {b}");
            }
        }
        assert_relative_eq!(carleson_packing_norm(&bf), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn beta_quadratic_oracle() {
        // psi = y^2 on Q_1(0) with unit sigma weight: best fit y^2 - 1/3,
        // closed form beta^2 = (first moment of (y^2-1/3)^2 on [-1,1])/2 = 4/45
        let n = 4096usize;
        let lat = Lattice::new(vec![
            crate::grid::Axis::periodic(n, -1.0, 2.0 / n as f64),
            crate::grid::Axis::periodic(4, -1.0, 0.5),
        ]);
        let f = Field::from_fn(&lat, |c| c[0] * c[0]);
        let g = GraphFunction::from_field(f);
        // kill the sigma weight variation by measuring against the analytic value
        // with the weight included: for psi = y^2 the density is sqrt(1+4y^2),
        // so instead sample a tiny amplitude to make the weight ~ 1
        let eps = 1e-4;
        let f2 = Field::from_fn(&lat, |c| eps * c[0] * c[0]);
        let g2 = GraphFunction::from_field(f2);
        let b2 = beta_number(&g2, &SpaceTimePoint::new(vec![0.0], 0.0), 1.0).unwrap();
        assert_relative_eq!(b2.beta / eps, (4.0f64 / 45.0).sqrt(), epsilon = 1e-3);
        // full-weight version still close (weight is 1 + O(eps^2))
        let b = beta_number(&g, &SpaceTimePoint::new(vec![0.0], 0.0), 1.0).unwrap();
        assert!((b.beta - (4.0f64 / 45.0).sqrt()).abs() < 0.05);
    }

    #[test]
    fn beta_affine_invariance() {
        let mut p = GraphParams::desk_default(2, 16);
        p.amplitude = 0.05;
        let g = make_graph(GraphKind::Bump, &p).unwrap();
        let mut pa = p.clone();
        pa.slope = vec![0.5];
        pa.offset = 1.0;
        let aff = make_graph(GraphKind::Affine, &pa).unwrap();
        let sum = g.add(&aff);
        let center = SpaceTimePoint::new(vec![0.5], 0.5);
        let b1 = beta_number(&g, &center, 0.25).unwrap().beta;
        // sigma weights differ once a slope is added, so invariance is tested
        // with the same weight field: small slope keeps them near-identical
        let mut pa2 = p.clone();
        pa2.slope = vec![1e-6];
        let aff2 = make_graph(GraphKind::Affine, &pa2).unwrap();
        let sum2 = g.add(&aff2);
        let b2 = beta_number(&sum2, &center, 0.25).unwrap().beta;
        assert_relative_eq!(b1, b2, epsilon = 1e-10);
        let b3 = beta_number(&sum, &center, 0.25).unwrap().beta;
        assert!((b1 - b3).abs() / b1.max(1e-12) < 0.2);
    }

    #[test]
    fn rough_graph_lip_bounded() {
        let mut p = GraphParams::desk_default(2, 16);
        p.depth = 6;
        p.amplitude = 0.2;
        let g = make_graph(GraphKind::Rough, &p).unwrap();
        // finite Lip(1,1/2) constant; temporal part dominated by the lacunary bound
        assert!(g.lip_constant().is_finite());
        assert!(g.lip_estimate().temporal_half > 0.0);
        assert!(g.lip_estimate().temporal_half < 4.0);
    }

    #[test]
    fn surface_measure_flat_and_sloped() {
        let g = make_graph(GraphKind::Flat, &GraphParams::desk_default(2, 16)).unwrap();
        let grid = DyadicGrid::new(1, 1.0);
        let q = grid.root();
        assert_relative_eq!(surface_measure_cube(&g, &grid, &q), 1.0, epsilon = 1e-12);
        let mut p = GraphParams::desk_default(2, 16);
        p.slope = vec![2.0];
        let a = make_graph(GraphKind::Affine, &p).unwrap();
        assert_relative_eq!(
            surface_measure_cube(&a, &grid, &q),
            5f64.sqrt(),
            epsilon = 1e-12
        );
        // additivity over children
        let kids = grid.children(&q);
        let total: f64 = kids
            .iter()
            .map(|k| surface_measure_cube(&a, &grid, k))
            .sum();
        assert_relative_eq!(total, 5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn lip_cap_rejects() {
        let mut p = GraphParams::desk_default(2, 16);
        p.slope = vec![100.0];
        p.lip_cap = 10.0;
        assert!(make_graph(GraphKind::Affine, &p).is_err());
    }
}
