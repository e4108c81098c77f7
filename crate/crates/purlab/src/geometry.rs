//! Parabolic metric and quasinorm, cubes, dyadic grids, corkscrew points,
//! space-time parabolas, Whitney regions, and the ledger of structural
//! constants. Time scales like length squared throughout.

use crate::error::{Error, Result};
use crate::graph::GraphFunction;
use serde::{Deserialize, Serialize};

/// Point of space-time `R^n = R^{n-1} x R_t` (boundary parameter space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    /// Spatial coordinates (length units), `n-1` of them.
    pub x: Vec<f64>,
    /// Time (length^2 units).
    pub t: f64,
}

impl SpaceTimePoint {
    pub fn new(x: Vec<f64>, t: f64) -> Self {
        SpaceTimePoint { x, t }
    }

    pub fn spatial_norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Parabolic length `|x| + |t|^(1/2)`.
    pub fn parabolic_norm(&self) -> f64 {
        self.spatial_norm() + self.t.abs().sqrt()
    }

    pub fn sub(&self, other: &SpaceTimePoint) -> SpaceTimePoint {
        SpaceTimePoint {
            x: self
                .x
                .iter()
                .zip(&other.x)
                .map(|(a, b)| a - b)
                .collect(),
            t: self.t - other.t,
        }
    }
}

/// Point of ambient space-time `R^{n+1}`, with the graph coordinate split off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientPoint {
    /// Graph coordinate (vertical direction).
    pub x0: f64,
    pub p: SpaceTimePoint,
}

impl AmbientPoint {
    pub fn new(x0: f64, x: Vec<f64>, t: f64) -> Self {
        AmbientPoint {
            x0,
            p: SpaceTimePoint::new(x, t),
        }
    }

    /// Euclidean norm of the full spatial part `(x0, x)`.
    pub fn spatial_norm(&self) -> f64 {
        (self.x0 * self.x0 + self.p.x.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn parabolic_norm(&self) -> f64 {
        self.spatial_norm() + self.p.t.abs().sqrt()
    }

    pub fn sub(&self, other: &AmbientPoint) -> AmbientPoint {
        AmbientPoint {
            x0: self.x0 - other.x0,
            p: self.p.sub(&other.p),
        }
    }
}

/// Parabolic cube in `R^n`: spatial halfwidth `radius`, temporal halfwidth
/// `radius^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParabolicCube {
    pub center: SpaceTimePoint,
    pub radius: f64,
}

impl ParabolicCube {
    pub fn new(center: SpaceTimePoint, radius: f64) -> Self {
        assert!(radius > 0.0);
        ParabolicCube { center, radius }
    }

    pub fn volume(&self) -> f64 {
        let n = self.center.x.len() + 1; // ambient spatial dimension
        2f64.powi(n as i32) * self.radius.powi(n as i32 + 1)
    }

    pub fn contains(&self, p: &SpaceTimePoint) -> bool {
        self.center
            .x
            .iter()
            .zip(&p.x)
            .all(|(c, v)| (v - c).abs() < self.radius)
            && (p.t - self.center.t).abs() < self.radius * self.radius
    }

    pub fn dilate(&self, tau: f64) -> ParabolicCube {
        ParabolicCube {
            center: self.center.clone(),
            radius: tau * self.radius,
        }
    }
}

/// Closed parabolic cube in ambient `R^{n+1}`: vertical halfwidth `radius`
/// around `center.x0` over the parabolic cube of the same radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientCube {
    pub center: AmbientPoint,
    pub radius: f64,
}

impl AmbientCube {
    pub fn new(center: AmbientPoint, radius: f64) -> Self {
        assert!(radius > 0.0);
        AmbientCube { center, radius }
    }

    /// Parabolic side length `l = 2R`.
    pub fn side(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn contains(&self, q: &AmbientPoint) -> bool {
        (q.x0 - self.center.x0).abs() <= self.radius
            && self
                .center
                .p
                .x
                .iter()
                .zip(&q.p.x)
                .all(|(c, v)| (v - c).abs() <= self.radius)
            && (q.p.t - self.center.p.t).abs() <= self.radius * self.radius
    }
}

/// Smooth parabolic quasinorm: the unique positive root of
/// `|x|^2/rho^2 + t^2/rho^4 = 1`, comparable to the parabolic length with
/// dimension-dependent constants. Bisection to relative 1e-12.
pub fn smooth_quasinorm(spatial_norm: f64, t: f64) -> Result<f64> {
    if spatial_norm == 0.0 && t == 0.0 {
        return Err(Error::QuasinormAtOrigin);
    }
    let s2 = spatial_norm * spatial_norm;
    let t2 = t * t;
    let m = spatial_norm.max(t.abs().sqrt());
    let mut lo = m / 2.0;
    let mut hi = m * std::f64::consts::SQRT_2;
    // F is strictly decreasing in rho; F(lo) > 1 > F(hi)
    let f = |rho: f64| s2 / (rho * rho) + t2 / (rho * rho * rho * rho);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) < 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn smooth_quasinorm_point(p: &SpaceTimePoint) -> Result<f64> {
    smooth_quasinorm(p.spatial_norm(), p.t)
}

/// Structural constants of a configuration. Desk-scale defaults replace the
/// astronomically large values of the underlying theory; every derived
/// quantity that depends on them is measured and reported, never assumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuralConstants {
    /// Ambient spatial dimension (graph coordinate plus n-1 lateral ones).
    pub n: usize,
    /// Ellipticity constant of the coefficient matrix.
    pub lambda: f64,
    /// `m0 = 2 + Lip(1,1/2) norm of the graph`.
    pub m0: f64,
    /// Aperture of the space-time parabolas, `40 m0 sqrt(n)`.
    pub kappa: f64,
    /// Whitney height fattening `K = 2^N`.
    pub whitney_k: f64,
    /// Corkscrew elevation factor for top-cube poles (desk default 4).
    pub m_star: f64,
    /// Measure comparability threshold for corona stopping.
    pub m_prime: f64,
    /// Green comparability constants (measured on runs).
    pub m1: f64,
    pub m2: f64,
    /// Vertical nondegeneracy floor for the normalized Green function.
    pub c1: f64,
    /// Boundary Hoelder exponent (measured by log-log fits).
    pub alpha: f64,
    /// Level-range parameter for level-set solves.
    pub delta: f64,
    /// Mollification ratio for the smoothed level-set family.
    pub gamma: f64,
    /// Small-cube threshold separating Case 1 from Case 2.
    pub eps0: f64,
    /// Coefficient Carleson constant.
    pub c_a: f64,
    /// Reverse-Hoelder constant and exponent.
    pub c_star: f64,
    pub q: f64,
    /// Parameter-box dilation factors of the Whitney regions
    /// (plain, *, **); desk replacements for 1e5..1e7.
    pub whitney_dilate: [f64; 3],
}

impl StructuralConstants {
    /// Desk defaults for ambient dimension `n` and a graph with the given
    /// Lip(1,1/2) norm.
    pub fn desk(n: usize, lip: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("ambient dimension must be at least 1"));
        }
        let m0 = 2.0 + lip;
        let c = StructuralConstants {
            n,
            lambda: 1.0,
            m0,
            kappa: 40.0 * m0 * (n as f64).sqrt(),
            whitney_k: 8.0,
            m_star: 4.0,
            m_prime: 4.0,
            m1: 1.0,
            m2: 1.0,
            c1: 0.0,
            alpha: 0.25,
            delta: 1.0 / 16.0,
            gamma: 0.05,
            eps0: 1.0 / 64.0,
            c_a: 0.0,
            c_star: 1.0,
            q: 2.0,
            whitney_dilate: [2.0, 4.0, 8.0],
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 1.0 {
            return Err(Error::invalid("ellipticity constant must be >= 1"));
        }
        if self.m0 < 2.0 {
            return Err(Error::invalid("m0 must be >= 2"));
        }
        let l = self.whitney_k.log2();
        if (l.round() - l).abs() > 1e-12 || l.round() < 2.0 {
            return Err(Error::invalid("whitney K must be 2^N with N >= 2"));
        }
        if self.q <= 1.0 {
            return Err(Error::invalid("reverse-Hoelder exponent q must be > 1"));
        }
        for (name, v) in [
            ("m_star", self.m_star),
            ("m_prime", self.m_prime),
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("eps0", self.eps0),
        ] {
            if v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Time-forward/backward corkscrew point relative to the surface ball of
/// radius `r` at a boundary point: elevation `2 m0 r`, time shift `+-2 r^2`.
pub fn corkscrew(on_graph: &AmbientPoint, r: f64, forward: bool, c: &StructuralConstants) -> Result<AmbientPoint> {
    if r <= 0.0 {
        return Err(Error::invalid("corkscrew radius must be positive"));
    }
    let shift = if forward { 2.0 * r * r } else { -2.0 * r * r };
    Ok(AmbientPoint::new(
        on_graph.x0 + 2.0 * c.m0 * r,
        on_graph.p.x.clone(),
        on_graph.p.t + shift,
    ))
}

/// Space-time parabola membership: `y` lies in `P^{+-}_{kappa,r}(x)` iff the
/// full spatial distance is dominated by `kappa |t-s|^(1/2)` and the time gap
/// is at least `16 r^2` in the chosen direction.
pub fn in_parabola(y: &AmbientPoint, x: &AmbientPoint, r: f64, forward: bool, kappa: f64) -> bool {
    let spatial = y.sub(x).spatial_norm();
    let dt = y.p.t - x.p.t;
    let gap_ok = if forward { dt >= 16.0 * r * r } else { -dt >= 16.0 * r * r };
    gap_ok && spatial <= kappa * dt.abs().sqrt()
}

/// Distance from an interior point to the graph, via local minimization over
/// a window of parabolic width equal to the vertical gap. The exact vertical
/// candidate is always included, so the output lies in
/// `[gap / m0, gap]` with `gap = x0 - psi(x,t)`.
pub fn dist_to_graph(x: &AmbientPoint, psi: &GraphFunction) -> Result<f64> {
    let gap = x.x0 - psi.eval(&x.p);
    if gap <= 0.0 {
        return Err(Error::Geometry(format!(
            "point at x0 = {} lies on or below the graph",
            x.x0
        )));
    }
    let mut best = gap; // vertical candidate
    let lat = psi.field().lattice.clone();
    let nd = lat.ndim();
    // lattice nodes within parabolic distance `gap` of (x, t)
    let mut ranges: Vec<(isize, isize)> = Vec::with_capacity(nd);
    for (a, ax) in lat.axes().iter().enumerate() {
        let halfwidth = if a + 1 == nd { gap * gap } else { gap };
        let c = if a + 1 == nd { x.p.t } else { x.p.x[a] };
        let lo = ((c - halfwidth - ax.min) / ax.step).floor() as isize;
        let hi = ((c + halfwidth - ax.min) / ax.step).ceil() as isize;
        ranges.push((lo, hi));
    }
    let mut idx = ranges.iter().map(|r| r.0).collect::<Vec<_>>();
    loop {
        // evaluate candidate at this lattice node
        let mut coords = Vec::with_capacity(nd);
        for (a, &i) in idx.iter().enumerate() {
            coords.push(lat.axes()[a].min + i as f64 * lat.axes()[a].step);
        }
        let q = SpaceTimePoint::new(coords[..nd - 1].to_vec(), coords[nd - 1]);
        let psi_q = psi.eval(&q);
        let d_spatial = {
            let mut s = (x.x0 - psi_q) * (x.x0 - psi_q);
            for (xv, qv) in x.p.x.iter().zip(&q.x) {
                s += (xv - qv) * (xv - qv);
            }
            s.sqrt()
        };
        let cand = d_spatial + (x.p.t - q.t).abs().sqrt();
        if cand < best {
            best = cand;
        }
        // advance multi-index
        let mut a = nd;
        loop {
            if a == 0 {
                return Ok(best);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] <= ranges[a].1 {
                break;
            }
            idx[a] = ranges[a].0;
        }
    }
}

/// Dyadic grid of parabolic cubes over a box `[0,L)^{n-1} x [0, L^2)`.
/// Generation `g` cubes have spatial side `L 2^{-g}` and temporal side
/// `(L 2^{-g})^2`; children refine by 2 spatially and 4 temporally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub spatial_dims: usize,
    pub spatial_len: f64,
}

/// A parabolic dyadic cube: generation plus spatial/temporal indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub gen: u32,
    /// `spatial_dims` spatial indices followed by the time index.
    pub idx: Vec<u64>,
}

impl DyadicGrid {
    pub fn new(spatial_dims: usize, spatial_len: f64) -> Self {
        DyadicGrid {
            spatial_dims,
            spatial_len,
        }
    }

    pub fn time_len(&self) -> f64 {
        self.spatial_len * self.spatial_len
    }

    /// Side length of a generation-`g` cube.
    pub fn side(&self, gen: u32) -> f64 {
        self.spatial_len / 2f64.powi(gen as i32)
    }

    /// Parabolic diameter convention: `side * (sqrt(n-1) + 1)`.
    pub fn diam(&self, gen: u32) -> f64 {
        self.side(gen) * ((self.spatial_dims as f64).sqrt() + 1.0)
    }

    /// Parameter-space measure `|Q| = side^{n+1}`.
    pub fn measure(&self, gen: u32) -> f64 {
        self.side(gen).powi(self.spatial_dims as i32 + 2)
    }

    pub fn root(&self) -> DyadicCube {
        DyadicCube {
            gen: 0,
            idx: vec![0; self.spatial_dims + 1],
        }
    }

    pub fn cubes_at(&self, gen: u32) -> Vec<DyadicCube> {
        let ns = 1u64 << gen;
        let nt = 1u64 << (2 * gen);
        let mut out = Vec::new();
        let mut idx = vec![0u64; self.spatial_dims + 1];
        loop {
            out.push(DyadicCube {
                gen,
                idx: idx.clone(),
            });
            let mut a = self.spatial_dims + 1;
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                idx[a] += 1;
                let cap = if a == self.spatial_dims { nt } else { ns };
                if idx[a] < cap {
                    break;
                }
                idx[a] = 0;
            }
        }
    }

    pub fn children(&self, q: &DyadicCube) -> Vec<DyadicCube> {
        let mut out = Vec::new();
        let sd = self.spatial_dims;
        let spatial_splits = 1usize << sd;
        for s in 0..spatial_splits {
            for tt in 0..4u64 {
                let mut idx = Vec::with_capacity(sd + 1);
                for a in 0..sd {
                    idx.push(q.idx[a] * 2 + ((s >> a) & 1) as u64);
                }
                idx.push(q.idx[sd] * 4 + tt);
                out.push(DyadicCube {
                    gen: q.gen + 1,
                    idx,
                });
            }
        }
        out
    }

    pub fn parent(&self, q: &DyadicCube) -> Option<DyadicCube> {
        if q.gen == 0 {
            return None;
        }
        let sd = self.spatial_dims;
        let mut idx = Vec::with_capacity(sd + 1);
        for a in 0..sd {
            idx.push(q.idx[a] / 2);
        }
        idx.push(q.idx[sd] / 4);
        Some(DyadicCube { gen: q.gen - 1, idx })
    }

    /// Ancestor of `q` at generation `gen <= q.gen`.
    pub fn ancestor(&self, q: &DyadicCube, gen: u32) -> DyadicCube {
        assert!(gen <= q.gen);
        let shift = q.gen - gen;
        let sd = self.spatial_dims;
        let mut idx = Vec::with_capacity(sd + 1);
        for a in 0..sd {
            idx.push(q.idx[a] >> shift);
        }
        idx.push(q.idx[sd] >> (2 * shift));
        DyadicCube { gen, idx }
    }

    pub fn contains(&self, outer: &DyadicCube, inner: &DyadicCube) -> bool {
        inner.gen >= outer.gen && self.ancestor(inner, outer.gen) == *outer
    }

    /// Center of the cube in parameter coordinates.
    pub fn center(&self, q: &DyadicCube) -> SpaceTimePoint {
        let side = self.side(q.gen);
        let ts = side * side;
        let x = (0..self.spatial_dims)
            .map(|a| (q.idx[a] as f64 + 0.5) * side)
            .collect();
        SpaceTimePoint::new(x, (q.idx[self.spatial_dims] as f64 + 0.5) * ts)
    }

    /// The cube as a parabolic cube (center + halfwidth).
    pub fn as_cube(&self, q: &DyadicCube) -> ParabolicCube {
        ParabolicCube::new(self.center(q), 0.5 * self.side(q.gen))
    }

    /// Coordinate ranges `[lo, hi)` per axis (spatial axes then time).
    pub fn ranges(&self, q: &DyadicCube) -> Vec<(f64, f64)> {
        let side = self.side(q.gen);
        let ts = side * side;
        let mut out = Vec::with_capacity(self.spatial_dims + 1);
        for a in 0..self.spatial_dims {
            let lo = q.idx[a] as f64 * side;
            out.push((lo, lo + side));
        }
        let lo = q.idx[self.spatial_dims] as f64 * ts;
        out.push((lo, lo + ts));
        out
    }

    /// Parabolic distance from a point to the cube, wrapped periodically on
    /// the box.
    pub fn dist_to(&self, q: &DyadicCube, p: &SpaceTimePoint) -> f64 {
        let ranges = self.ranges(q);
        let side = self.side(q.gen);
        let c = self.center(q);
        let mut s2 = 0.0;
        for a in 0..self.spatial_dims {
            let period = self.spatial_len;
            let mut d = p.x[a] - c.x[a];
            d -= (d / period).round() * period;
            let excess = (d.abs() - 0.5 * side).max(0.0);
            s2 += excess * excess;
        }
        let mut dt = p.t - c.t;
        let tp = self.time_len();
        dt -= (dt / tp).round() * tp;
        let t_half = 0.5 * (ranges[self.spatial_dims].1 - ranges[self.spatial_dims].0);
        let t_excess = (dt.abs() - t_half).max(0.0);
        s2.sqrt() + t_excess.sqrt()
    }

    /// All cubes from generation 0 through `max_gen` inclusive.
    pub fn window(&self, max_gen: u32) -> Vec<DyadicCube> {
        (0..=max_gen).flat_map(|g| self.cubes_at(g)).collect()
    }

    /// Deepest generation the lattice resolves with whole cells per cube.
    pub fn max_generation(&self, lat: &crate::grid::Lattice) -> u32 {
        let mut g = 0u32;
        loop {
            let next = g + 1;
            let ok_space = (0..self.spatial_dims).all(|a| {
                let n = lat.axes()[a].len;
                n % (1usize << next) == 0 && n >= (1usize << next)
            });
            let nt = lat.axes()[self.spatial_dims].len;
            let ok_time = nt % (1usize << (2 * next)) == 0 && nt >= (1usize << (2 * next));
            if ok_space && ok_time {
                g = next;
            } else {
                return g;
            }
        }
    }

    /// Cell index ranges `(start, count)` per axis for a cube on an aligned
    /// lattice (the lattice box must equal the dyadic box).
    pub fn cell_ranges(&self, lat: &crate::grid::Lattice, q: &DyadicCube) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.spatial_dims + 1);
        for a in 0..self.spatial_dims {
            let n = lat.axes()[a].len;
            let per = n >> q.gen;
            out.push((q.idx[a] as usize * per, per));
        }
        let nt = lat.axes()[self.spatial_dims].len;
        let per_t = nt >> (2 * q.gen);
        out.push((q.idx[self.spatial_dims] as usize * per_t, per_t));
        out
    }

    /// Iterate the flat lattice indices of the cells of a cube.
    pub fn cube_cells(&self, lat: &crate::grid::Lattice, q: &DyadicCube) -> Vec<usize> {
        let ranges = self.cell_ranges(lat, q);
        let strides = lat.strides();
        let mut out = Vec::with_capacity(ranges.iter().map(|r| r.1).product());
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            let mut a = ranges.len();
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < ranges[a].0 + ranges[a].1 {
                    break;
                }
                idx[a] = ranges[a].0;
            }
        }
    }

    /// Cubes of `gen` below a given top cube.
    pub fn descendants_at(&self, top: &DyadicCube, gen: u32) -> Vec<DyadicCube> {
        assert!(gen >= top.gen);
        let mut cubes = vec![top.clone()];
        for _ in top.gen..gen {
            cubes = cubes.iter().flat_map(|q| self.children(q)).collect();
        }
        cubes
    }
}

/// Whitney region variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WhitneyVariant {
    Plain,
    Star,
    StarStar,
    StarStarStar,
}

impl WhitneyVariant {
    /// (parameter-box dilation index, height-band widening factor)
    fn tier(self) -> (usize, f64) {
        match self {
            WhitneyVariant::Plain => (0, 1.0),
            WhitneyVariant::Star => (1, 2.0),
            WhitneyVariant::StarStar | WhitneyVariant::StarStarStar => (2, 4.0),
        }
    }
}

/// Whitney region of a dyadic cube: parameter points in a dilate of the cube
/// with vertical gap `x0 - psi` inside `(1/(mK) l, mK l)` for the variant
/// widening `m`. In flattened coordinates `(rho, x, t)` the region is a box.
#[derive(Debug, Clone)]
pub struct WhitneyRegion {
    pub cube: DyadicCube,
    pub variant: WhitneyVariant,
    pub dilate: f64,
    pub gap_lo: f64,
    pub gap_hi: f64,
    grid: DyadicGrid,
}

impl WhitneyRegion {
    pub fn new(
        grid: &DyadicGrid,
        cube: &DyadicCube,
        variant: WhitneyVariant,
        c: &StructuralConstants,
    ) -> Self {
        let (tier, widen) = variant.tier();
        let l = grid.side(cube.gen);
        let k = c.whitney_k * widen;
        WhitneyRegion {
            cube: cube.clone(),
            variant,
            dilate: c.whitney_dilate[tier],
            gap_lo: l / k,
            gap_hi: l * k,
            grid: grid.clone(),
        }
    }

    /// Membership test for an ambient point given the graph.
    pub fn contains(&self, x: &AmbientPoint, psi: &GraphFunction) -> bool {
        let gap = x.x0 - psi.eval(&x.p);
        if gap <= self.gap_lo || gap >= self.gap_hi {
            return false;
        }
        self.param_contains(&x.p)
    }

    /// Parameter-box membership (dilated cube), periodic on the box.
    pub fn param_contains(&self, p: &SpaceTimePoint) -> bool {
        let c = self.grid.center(&self.cube);
        let half = 0.5 * self.grid.side(self.cube.gen) * self.dilate;
        let t_half = 0.5 * self.grid.side(self.cube.gen).powi(2) * self.dilate.powi(2);
        for a in 0..self.grid.spatial_dims {
            let period = self.grid.spatial_len;
            let mut d = p.x[a] - c.x[a];
            d -= (d / period).round() * period;
            if d.abs() >= half {
                return false;
            }
        }
        let mut dt = p.t - c.t;
        let tp = self.grid.time_len();
        dt -= (dt / tp).round() * tp;
        dt.abs() < t_half
    }

    /// Quasi-uniform interior sample: `per_axis` points per parameter axis
    /// and vertically log-spaced gaps, lifted to ambient points.
    pub fn samples(&self, psi: &GraphFunction, per_axis: usize, n_heights: usize) -> Vec<AmbientPoint> {
        let c = self.grid.center(&self.cube);
        let half = 0.5 * self.grid.side(self.cube.gen) * self.dilate;
        let t_half = 0.5 * self.grid.side(self.cube.gen).powi(2) * self.dilate.powi(2);
        let mut out = Vec::new();
        let m = per_axis.max(1);
        let heights: Vec<f64> = (0..n_heights.max(1))
            .map(|j| {
                let s = (j as f64 + 0.5) / n_heights.max(1) as f64;
                self.gap_lo * (self.gap_hi / self.gap_lo).powf(s)
            })
            .collect();
        let sd = self.grid.spatial_dims;
        let mut idx = vec![0usize; sd + 1];
        loop {
            let mut x = Vec::with_capacity(sd);
            for a in 0..sd {
                let s = (idx[a] as f64 + 0.5) / m as f64;
                x.push(c.x[a] - half + 2.0 * half * s);
            }
            let st = (idx[sd] as f64 + 0.5) / m as f64;
            let t = c.t - t_half + 2.0 * t_half * st;
            let p = SpaceTimePoint::new(x, t);
            let base = psi.eval(&p);
            for &g in &heights {
                out.push(AmbientPoint {
                    x0: base + g,
                    p: p.clone(),
                });
            }
            let mut a = sd + 1;
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < m {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
}

/// Member cubes of the `***` neighbor union: all cubes whose `**` region box
/// overlaps the `**` region box of `q` in flattened coordinates.
pub fn whitney_neighbors(
    grid: &DyadicGrid,
    q: &DyadicCube,
    all_cubes: &[DyadicCube],
    c: &StructuralConstants,
) -> Vec<DyadicCube> {
    let rq = WhitneyRegion::new(grid, q, WhitneyVariant::StarStar, c);
    all_cubes
        .iter()
        .filter(|q2| {
            let r2 = WhitneyRegion::new(grid, q2, WhitneyVariant::StarStar, c);
            // vertical band overlap
            if r2.gap_hi <= rq.gap_lo || rq.gap_hi <= r2.gap_lo {
                return false;
            }
            // parameter box overlap (periodic)
            let c1 = grid.center(q);
            let c2 = grid.center(q2);
            let h1 = 0.5 * grid.side(q.gen) * rq.dilate;
            let h2 = 0.5 * grid.side(q2.gen) * r2.dilate;
            for a in 0..grid.spatial_dims {
                let mut d = c1.x[a] - c2.x[a];
                d -= (d / grid.spatial_len).round() * grid.spatial_len;
                if d.abs() >= h1 + h2 {
                    return false;
                }
            }
            let th1 = 0.5 * grid.side(q.gen).powi(2) * rq.dilate.powi(2);
            let th2 = 0.5 * grid.side(q2.gen).powi(2) * r2.dilate.powi(2);
            let mut dt = c1.t - c2.t;
            dt -= (dt / grid.time_len()).round() * grid.time_len();
            dt.abs() < th1 + th2
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_graph, GraphKind, GraphParams};
    use approx::assert_relative_eq;

    #[test]
    fn parabolic_norm_basics() {
        // n = 2: one spatial coordinate
        let p = SpaceTimePoint::new(vec![3.0], 4.0);
        assert_relative_eq!(p.parabolic_norm(), 5.0);
        let z = SpaceTimePoint::new(vec![0.0], 0.0);
        assert_relative_eq!(z.parabolic_norm(), 0.0);
        // ambient point (X=(1,1), t=-9)
        let a = AmbientPoint::new(1.0, vec![1.0], -9.0);
        assert_relative_eq!(a.parabolic_norm(), 2f64.sqrt() + 3.0, epsilon = 1e-14);
    }

    #[test]
    fn quasinorm_reductions() {
        // t = 0 reduces to |x|
        assert_relative_eq!(smooth_quasinorm(2.5, 0.0).unwrap(), 2.5, epsilon = 1e-11);
        // x = 0 reduces to sqrt|t|
        assert_relative_eq!(smooth_quasinorm(0.0, 4.0).unwrap(), 2.0, epsilon = 1e-11);
        // (1,1): rho^2 = (1+sqrt 5)/2
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(
            smooth_quasinorm(1.0, 1.0).unwrap(),
            golden.sqrt(),
            epsilon = 1e-10
        );
        assert!(matches!(
            smooth_quasinorm(0.0, 0.0),
            Err(Error::QuasinormAtOrigin)
        ));
    }

    #[test]
    fn quasinorm_equivalence_band() {
        // rho(p) / ||p|| stays in a fixed two-sided band over random points
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-5.0..5.0);
            let t: f64 = rng.gen_range(-5.0..5.0);
            if x == 0.0 && t == 0.0 {
                continue;
            }
            let p = SpaceTimePoint::new(vec![x], t);
            let ratio = smooth_quasinorm_point(&p).unwrap() / p.parabolic_norm();
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        assert!(lo > 0.5 && hi < 1.5, "band [{lo}, {hi}] out of range");
    }

    #[test]
    fn quasi_triangle_and_scaling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = SpaceTimePoint::new(vec![rng.gen_range(-2.0..2.0)], rng.gen_range(-2.0..2.0));
            let q = SpaceTimePoint::new(vec![rng.gen_range(-2.0..2.0)], rng.gen_range(-2.0..2.0));
            let sum = SpaceTimePoint::new(vec![p.x[0] + q.x[0]], p.t + q.t);
            assert!(sum.parabolic_norm() <= p.parabolic_norm() + q.parabolic_norm() + 1e-12);
            let lambda: f64 = rng.gen_range(0.1..3.0);
            let scaled = SpaceTimePoint::new(vec![lambda * p.x[0]], lambda * lambda * p.t);
            assert_relative_eq!(
                scaled.parabolic_norm(),
                lambda * p.parabolic_norm(),
                epsilon = 1e-12,
            );
        }
    }

    #[test]
    fn corkscrew_flat_graph() {
        let c = StructuralConstants::desk(2, 0.0).unwrap();
        assert_relative_eq!(c.m0, 2.0);
        let x = AmbientPoint::new(0.0, vec![0.3], 0.5);
        let a_plus = corkscrew(&x, 1.0, true, &c).unwrap();
        assert_relative_eq!(a_plus.x0, 4.0);
        assert_relative_eq!(a_plus.p.t, 2.5);
        let a_minus = corkscrew(&x, 1.0, false, &c).unwrap();
        assert_relative_eq!(a_minus.p.t, -1.5);
        // flat graph: distance to boundary is the elevation = 4 = 2 * (2R)
        assert!(a_plus.x0 >= 2.0 * 1.0);
        assert!(corkscrew(&x, -1.0, true, &c).is_err());
        // m0 = 3, R = 2: elevation 12, time shift 8
        let mut c3 = c.clone();
        c3.m0 = 3.0;
        let a = corkscrew(&x, 2.0, true, &c3).unwrap();
        assert_relative_eq!(a.x0 - x.x0, 12.0);
        assert_relative_eq!(a.p.t - x.p.t, 8.0);
    }

    #[test]
    fn parabola_membership() {
        let c = StructuralConstants::desk(2, 0.0).unwrap();
        let x = AmbientPoint::new(0.0, vec![0.0], 0.0);
        // same time: never inside
        let y = AmbientPoint::new(1.0, vec![0.0], 0.0);
        assert!(!in_parabola(&y, &x, 0.5, true, c.kappa));
        // directly above at s = t + 16 r^2: both conditions tight
        let r: f64 = 0.25;
        let y2 = AmbientPoint::new(0.0, vec![0.0], 16.0 * r * r);
        assert!(in_parabola(&y2, &x, r, true, c.kappa));
        assert!(!in_parabola(&y2, &x, r, false, c.kappa));
    }

    #[test]
    fn corkscrew_lands_in_parabola() {
        // A^+_{4r}(X) in P^+_{kappa, 2 rho}(Z) whenever the 2rho-ball at Z
        // sits inside the r-ball at X
        let c = StructuralConstants::desk(2, 0.0).unwrap();
        let psi = make_graph(GraphKind::Flat, &GraphParams::desk_default(2, 16)).unwrap();
        let r = 0.2;
        let x = AmbientPoint::new(0.0, vec![0.5], 0.5);
        let a = corkscrew(&x, 4.0 * r, true, &c).unwrap();
        for &(dz, rho) in &[(0.01f64, 0.04f64), (-0.05, 0.02), (0.1, 0.05)] {
            // delta_{2 rho}(Z) subset delta_r(X) roughly: |z - x| + 2 rho <= r
            assert!(dz.abs() + 2.0 * rho <= r);
            let z = AmbientPoint::new(
                psi.eval(&SpaceTimePoint::new(vec![0.5 + dz], 0.5)),
                vec![0.5 + dz],
                0.5,
            );
            assert!(in_parabola(&a, &z, 2.0 * rho, true, c.kappa));
        }
    }

    #[test]
    fn dyadic_partition_exact() {
        let grid = DyadicGrid::new(1, 1.0);
        let root = grid.root();
        let children = grid.children(&root);
        assert_eq!(children.len(), 8);
        let sum: f64 = children.iter().map(|q| grid.measure(q.gen)).sum();
        assert_relative_eq!(sum, grid.measure(0), epsilon = 1e-14);
        // children tile: every one of their centers lies in the parent ranges,
        // and each child's parent is the root
        for ch in &children {
            assert_eq!(grid.parent(ch).unwrap(), root);
            assert!(grid.contains(&root, ch));
        }
    }

    #[test]
    fn dist_to_graph_flat_and_sloped() {
        let params = GraphParams::desk_default(2, 32);
        let flat = make_graph(GraphKind::Flat, &params).unwrap();
        let x = AmbientPoint::new(0.21, vec![0.5], 0.5);
        assert_relative_eq!(dist_to_graph(&x, &flat).unwrap(), 0.21, epsilon = 1e-12);
        assert!(dist_to_graph(&AmbientPoint::new(-0.1, vec![0.5], 0.5), &flat).is_err());

        // sloped graph: sandwich bounds with m0 = 2 + lip
        let mut p = GraphParams::desk_default(2, 32);
        p.slope = vec![0.75];
        p.offset = 0.0;
        let affine = make_graph(GraphKind::Affine, &p).unwrap();
        let m0 = 2.0 + affine.lip_constant();
        let x = AmbientPoint::new(affine.eval(&SpaceTimePoint::new(vec![0.5], 0.5)) + 0.1, vec![0.5], 0.5);
        let d = dist_to_graph(&x, &affine).unwrap();
        let gap = 0.1;
        assert!(d <= gap + 1e-12 && d >= gap / m0 - 1e-12, "d = {d}");
    }

    #[test]
    fn whitney_nesting() {
        let c = StructuralConstants::desk(2, 0.0).unwrap();
        let psi = make_graph(GraphKind::Flat, &GraphParams::desk_default(2, 16)).unwrap();
        let grid = DyadicGrid::new(1, 1.0);
        let q = DyadicCube {
            gen: 2,
            idx: vec![1, 3],
        };
        let u = WhitneyRegion::new(&grid, &q, WhitneyVariant::Plain, &c);
        let us = WhitneyRegion::new(&grid, &q, WhitneyVariant::Star, &c);
        let uss = WhitneyRegion::new(&grid, &q, WhitneyVariant::StarStar, &c);
        for p in u.samples(&psi, 3, 4) {
            assert!(u.contains(&p, &psi));
            assert!(us.contains(&p, &psi));
            assert!(uss.contains(&p, &psi));
        }
        // distance comparability inside U_Q
        let l = grid.side(q.gen);
        for p in u.samples(&psi, 3, 4) {
            let d = dist_to_graph(&p, &psi).unwrap();
            assert!(d > l / (2.0 * c.whitney_k) && d < 2.0 * c.whitney_k * l);
        }
    }
}
