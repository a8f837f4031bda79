//! Periodic layer structures on the unit cube `(-1/2, 1/2)^3`.
//!
//! A lattice with parameter `n` has period `eps = 1/(2n+1)` and lattice planes
//! `x_i = eps * k` for `|k| <= n`. Around each plane normal to axis `i` sits a
//! conductive slab of half-thickness `r_i`, enclosed by a wider control slab of
//! half-width `R_i`. Everything here is closed form apart from the Monte Carlo
//! estimator, which exists to check the closed forms.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

/// Axis pairs in the fixed order used by every per-pair array.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Largest control half-width allowed by [`ControlRule::GeometricMean`], as a
/// fraction of the period.
pub const CONTROL_CAP: f64 = 0.49;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("n must be at least 1")]
    ZeroN,
    #[error("axis {axis}: negative or non-finite value (r = {r}, R = {control})")]
    Negative { axis: usize, r: f64, control: f64 },
    #[error("axis {axis}: layer half-thickness r = {r} must be smaller than control half-width R = {control}")]
    LayerNotInsideControl { axis: usize, r: f64, control: f64 },
    #[error("axis {axis}: control half-width R = {control} must be smaller than eps/2 = {half_eps}")]
    ControlTooWide { axis: usize, control: f64, half_eps: f64 },
    #[error("{0}")]
    ModeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Three families of layers (box structure).
    Reticulated,
    /// Only the layers normal to axes 1 and 2.
    Gridwork,
}

impl Mode {
    pub fn active_axes(self) -> &'static [usize] {
        match self {
            Mode::Reticulated => &[0, 1, 2],
            Mode::Gridwork => &[0, 1],
        }
    }

    pub fn family_count(self) -> usize {
        self.active_axes().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Reticulated => "reticulated",
            Mode::Gridwork => "gridwork",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reticulated" | "box" | "honeycomb" => Ok(Mode::Reticulated),
            "gridwork" => Ok(Mode::Gridwork),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Validated lattice parameters. Only `n` is stored for the period so that
/// `eps * (2n+1) = 1` holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeParams {
    n: u32,
    r: [f64; 3],
    control: [f64; 3],
    mode: Mode,
}

pub fn make_lattice(
    n: u32,
    r: [f64; 3],
    control: [f64; 3],
    mode: Mode,
) -> Result<LatticeParams, GeometryError> {
    LatticeParams::new(n, r, control, mode)
}

impl LatticeParams {
    pub fn new(n: u32, r: [f64; 3], control: [f64; 3], mode: Mode) -> Result<Self, GeometryError> {
        if n == 0 {
            return Err(GeometryError::ZeroN);
        }
        let half_eps = 0.5 / (2 * n + 1) as f64;
        for axis in 0..3 {
            let (ri, ci) = (r[axis], control[axis]);
            if !(ri.is_finite() && ci.is_finite()) || ri < 0.0 || ci < 0.0 {
                return Err(GeometryError::Negative { axis, r: ri, control: ci });
            }
            if ci >= half_eps {
                return Err(GeometryError::ControlTooWide { axis, control: ci, half_eps });
            }
            if ri > 0.0 && ri >= ci {
                return Err(GeometryError::LayerNotInsideControl { axis, r: ri, control: ci });
            }
        }
        match mode {
            Mode::Reticulated if r.iter().any(|&x| x == 0.0) => {
                return Err(GeometryError::ModeMismatch(
                    "reticulated lattices need r_i > 0 on every axis".into(),
                ))
            }
            Mode::Gridwork if r[2] != 0.0 || r[0] == 0.0 || r[1] == 0.0 => {
                return Err(GeometryError::ModeMismatch(
                    "gridwork lattices need r_1, r_2 > 0 and r_3 = 0".into(),
                ))
            }
            _ => {}
        }
        Ok(Self { n, r, control, mode })
    }

    /// Builds a lattice from a thickness law and a control-width rule.
    pub fn from_law(
        n: u32,
        law: &ThicknessLaw,
        rule: ControlRule,
        mode: Mode,
    ) -> Result<Self, GeometryError> {
        if n == 0 {
            return Err(GeometryError::ZeroN);
        }
        let eps = 1.0 / (2 * n + 1) as f64;
        let mut r = law.radii(eps);
        if mode == Mode::Gridwork {
            r[2] = 0.0;
        }
        let control = rule.widths(r, eps);
        Self::new(n, r, control, mode)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / self.periods() as f64
    }

    /// Number of lattice planes per axis, `2n+1 = 1/eps`.
    pub fn periods(&self) -> u32 {
        2 * self.n + 1
    }

    pub fn r(&self) -> [f64; 3] {
        self.r
    }

    pub fn control(&self) -> [f64; 3] {
        self.control
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_active(&self, axis: usize) -> bool {
        self.r[axis] > 0.0
    }

    pub fn active_axes(&self) -> &'static [usize] {
        self.mode.active_axes()
    }

    /// Plane indices `k` with `|k| <= n`.
    pub fn plane_indices(&self) -> impl Iterator<Item = i64> + Clone {
        let n = self.n as i64;
        -n..=n
    }

    /// Position `eps * k` of lattice plane `k`. Computed as `k / (2n+1)` so that
    /// planes `k` and `-k` are exact negatives of each other.
    pub fn plane(&self, k: i64) -> f64 {
        k as f64 / self.periods() as f64
    }

    /// Index of the lattice plane closest to `x`.
    pub fn nearest_plane(&self, x: f64) -> i64 {
        let n = self.n as i64;
        ((x * self.periods() as f64).round() as i64).clamp(-n, n)
    }

    /// Signed offset from the nearest lattice plane and its index.
    pub fn offset(&self, x: f64) -> (i64, f64) {
        let k = self.nearest_plane(x);
        (k, x - self.plane(k))
    }

    /// Order of the layer thickness used by the triple-intersection bound.
    pub fn min_active_r(&self) -> f64 {
        self.active_axes()
            .iter()
            .map(|&i| self.r[i])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_r(&self) -> f64 {
        self.r.iter().copied().fold(0.0, f64::max)
    }

    pub fn in_layer(&self, p: [f64; 3], axis: usize) -> bool {
        in_layer(p, axis, self)
    }

    pub fn in_control(&self, p: [f64; 3], axis: usize) -> bool {
        self.is_active(axis) && self.offset(p[axis]).1.abs() < self.control[axis]
    }

    pub fn measures(&self) -> MeasureReport {
        measures(self)
    }
}

/// Layer half-thickness law `r_i(eps) = c_i * eps^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessLaw {
    pub c: [f64; 3],
    pub p: f64,
}

impl ThicknessLaw {
    pub fn radii(&self, eps: f64) -> [f64; 3] {
        self.c.map(|c| c * eps.powf(self.p))
    }

    /// Limit volume fractions `c_i / sum_j c_j` over the active axes.
    pub fn limit_fractions(&self, mode: Mode) -> [f64; 3] {
        let mut c = self.c;
        if mode == Mode::Gridwork {
            c[2] = 0.0;
        }
        let total: f64 = c.iter().sum();
        c.map(|x| x / total)
    }
}

/// How the control half-widths are derived from the layer thickness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlRule {
    /// `R = sqrt(r * eps)`, capped at `CONTROL_CAP * eps` so control slabs of
    /// neighbouring planes never touch.
    GeometricMean,
    /// `R = f * eps` for a fixed fraction `f < 1/2`.
    FractionOfPeriod(f64),
}

impl ControlRule {
    pub fn widths(&self, r: [f64; 3], eps: f64) -> [f64; 3] {
        r.map(|ri| {
            if ri == 0.0 {
                return 0.0;
            }
            match *self {
                ControlRule::GeometricMean => (ri * eps).sqrt().min(CONTROL_CAP * eps),
                ControlRule::FractionOfPeriod(f) => f * eps,
            }
        })
    }
}

impl std::str::FromStr for ControlRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("geometric_mean") {
            return Ok(ControlRule::GeometricMean);
        }
        if let Some(rest) = s.strip_prefix("fraction:") {
            let f: f64 = rest.trim().parse().map_err(|_| format!("bad fraction `{rest}`"))?;
            if !(f > 0.0 && f < 0.5) {
                return Err(format!("control fraction {f} outside (0, 1/2)"));
            }
            return Ok(ControlRule::FractionOfPeriod(f));
        }
        Err(format!("unknown control rule `{s}`"))
    }
}

/// A measurable subset of the cube defined by layer membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Union,
    Layer(usize),
    Pair(usize, usize),
    Triple,
}

impl Region {
    pub fn contains(&self, p: [f64; 3], lat: &LatticeParams) -> bool {
        match *self {
            Region::Union => in_union(p, lat),
            Region::Layer(i) => in_layer(p, i, lat),
            Region::Pair(i, j) => in_pair(p, i, j, lat),
            Region::Triple => in_triple(p, lat),
        }
    }

    pub fn measure(&self, m: &MeasureReport) -> f64 {
        match *self {
            Region::Union => m.union,
            Region::Layer(i) => m.layer[i],
            Region::Pair(i, j) => m.pair[pair_index(i, j)],
            Region::Triple => m.triple,
        }
    }

    /// All eight regions in a fixed order.
    pub fn all() -> [Region; 8] {
        [
            Region::Union,
            Region::Layer(0),
            Region::Layer(1),
            Region::Layer(2),
            Region::Pair(0, 1),
            Region::Pair(0, 2),
            Region::Pair(1, 2),
            Region::Triple,
        ]
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Region::Union => write!(f, "union"),
            Region::Layer(i) => write!(f, "layer{}", i + 1),
            Region::Pair(i, j) => write!(f, "pair{}{}", i + 1, j + 1),
            Region::Triple => write!(f, "triple"),
        }
    }
}

pub fn pair_index(i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    PAIRS
        .iter()
        .position(|&p| p == (i, j))
        .unwrap_or_else(|| panic!("invalid axis pair ({i}, {j})"))
}

/// True iff `|p_i - eps k| < r_i` for some lattice plane `k`.
pub fn in_layer(p: [f64; 3], axis: usize, lat: &LatticeParams) -> bool {
    let r = lat.r[axis];
    // r < eps/2, so only the nearest plane can be within r.
    r > 0.0 && lat.offset(p[axis]).1.abs() < r
}

pub fn in_union(p: [f64; 3], lat: &LatticeParams) -> bool {
    (0..3).any(|i| in_layer(p, i, lat))
}

pub fn in_pair(p: [f64; 3], i: usize, j: usize, lat: &LatticeParams) -> bool {
    in_layer(p, i, lat) && in_layer(p, j, lat)
}

pub fn in_triple(p: [f64; 3], lat: &LatticeParams) -> bool {
    (0..3).all(|i| in_layer(p, i, lat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureReport {
    pub layer: [f64; 3],
    /// Indexed like [`PAIRS`].
    pub pair: [f64; 3],
    pub triple: f64,
    pub union: f64,
    /// `|T^i| / |T|` at this eps.
    pub finite_fractions: [f64; 3],
    /// Limit fractions from the thickness ratios `r_i / sum_j r_j`.
    pub limit_fractions: [f64; 3],
}

/// Closed-form measures. Slabs of one family are disjoint and strictly inside
/// the cube, so `|T^i| = 2 r_i / eps`, `|T^ij| = |T^i| |T^j|`, and the union
/// follows from inclusion-exclusion.
pub fn measures(lat: &LatticeParams) -> MeasureReport {
    let eps = lat.epsilon();
    let layer = lat.r.map(|r| 2.0 * r / eps);
    let pair = PAIRS.map(|(i, j)| layer[i] * layer[j]);
    let triple = layer[0] * layer[1] * layer[2];
    let union = layer.iter().sum::<f64>() - pair.iter().sum::<f64>() + triple;
    let finite_fractions = layer.map(|l| l / union);
    let total_r: f64 = lat.r.iter().sum();
    let limit_fractions = lat.r.map(|r| r / total_r);
    MeasureReport { layer, pair, triple, union, finite_fractions, limit_fractions }
}

/// Measures in exact rational arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMeasures {
    pub epsilon: BigRational,
    pub layer: [BigRational; 3],
    pub pair: [BigRational; 3],
    pub triple: BigRational,
    pub union: BigRational,
    pub limit_fractions: [BigRational; 3],
}

impl ExactMeasures {
    /// Same closed forms as [`measures`] for rational half-thicknesses. The
    /// caller is responsible for `0 <= r_i < eps/2`.
    pub fn compute(n: u32, r: &[BigRational; 3]) -> Self {
        let epsilon = BigRational::new(BigInt::one(), BigInt::from(2 * n + 1));
        let two = BigRational::from_integer(BigInt::from(2));
        let layer = r.clone().map(|ri| &two * ri / &epsilon);
        let pair = PAIRS.map(|(i, j)| &layer[i] * &layer[j]);
        let triple = &layer[0] * &layer[1] * &layer[2];
        let mut union = BigRational::zero();
        for l in &layer {
            union += l;
        }
        for p in &pair {
            union -= p;
        }
        union += &triple;
        let total = &r[0] + &r[1] + &r[2];
        let limit_fractions = r.clone().map(|ri| ri / &total);
        Self { epsilon, layer, pair, triple, union, limit_fractions }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_hits(hits: u64, samples: u64) -> Self {
        let p = hits as f64 / samples as f64;
        Self { estimate: p, std_error: (p * (1.0 - p) / samples as f64).sqrt() }
    }

    /// `|estimate - exact| <= k * std_error`.
    pub fn agrees(&self, exact: f64, k: f64) -> bool {
        (self.estimate - exact).abs() <= k * self.std_error
    }
}

pub const MIN_MC_SAMPLES: u64 = 10_000;
const MC_CHUNK: u64 = 1 << 14;

/// Estimates for all eight regions of [`Region::all`] from one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub samples: u64,
    pub estimates: [McEstimate; 8],
}

impl MonteCarloReport {
    pub fn get(&self, region: Region) -> McEstimate {
        let idx = Region::all().iter().position(|&r| r == region).expect("known region");
        self.estimates[idx]
    }
}

/// Uniform sampling of the cube. Chunk `c` draws from ChaCha stream `c` of the
/// seeded generator, and chunk counts are summed in chunk order, so the result
/// depends only on `(samples, seed)` and not on the thread count.
pub fn monte_carlo_all(lat: &LatticeParams, samples: u64, seed: u64) -> MonteCarloReport {
    let samples = samples.max(MIN_MC_SAMPLES);
    let chunks = samples.div_ceil(MC_CHUNK);
    let regions = Region::all();
    let counts: Vec<[u64; 8]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let len = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut hits = [0u64; 8];
            for _ in 0..len {
                let p: [f64; 3] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
                let inside = [in_layer(p, 0, lat), in_layer(p, 1, lat), in_layer(p, 2, lat)];
                for (h, region) in hits.iter_mut().zip(regions.iter()) {
                    let hit = match *region {
                        Region::Union => inside.iter().any(|&b| b),
                        Region::Layer(i) => inside[i],
                        Region::Pair(i, j) => inside[i] && inside[j],
                        Region::Triple => inside.iter().all(|&b| b),
                    };
                    *h += hit as u64;
                }
            }
            hits
        })
        .collect();
    let mut total = [0u64; 8];
    for chunk in &counts {
        for (t, h) in total.iter_mut().zip(chunk) {
            *t += h;
        }
    }
    MonteCarloReport { samples, estimates: total.map(|h| McEstimate::from_hits(h, samples)) }
}

pub fn monte_carlo_measure(lat: &LatticeParams, region: Region, samples: u64, seed: u64) -> McEstimate {
    monte_carlo_all(lat, samples, seed).get(region)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn third() -> LatticeParams {
        make_lattice(1, [0.01; 3], [0.05; 3], Mode::Reticulated).unwrap()
    }

    fn grid5() -> LatticeParams {
        make_lattice(2, [0.004, 0.004, 0.0], [0.02; 3], Mode::Gridwork).unwrap()
    }

    #[test]
    fn epsilon_from_n() {
        assert_eq!(third().epsilon(), 1.0 / 3.0);
        let g = grid5();
        assert_eq!(g.epsilon(), 0.2);
        assert!(!g.is_active(2));
        assert_eq!(g.active_axes(), &[0, 1]);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let e = make_lattice(1, [0.2, 0.01, 0.01], [0.05; 3], Mode::Reticulated).unwrap_err();
        assert!(matches!(e, GeometryError::LayerNotInsideControl { axis: 0, .. }));
        let e = make_lattice(1, [0.01; 3], [0.2, 0.05, 0.05], Mode::Reticulated).unwrap_err();
        assert!(matches!(e, GeometryError::ControlTooWide { axis: 0, .. }));
        let e = make_lattice(1, [-0.01, 0.01, 0.01], [0.05; 3], Mode::Reticulated).unwrap_err();
        assert!(matches!(e, GeometryError::Negative { .. }));
        assert!(matches!(
            make_lattice(1, [0.01, 0.01, 0.0], [0.05; 3], Mode::Reticulated),
            Err(GeometryError::ModeMismatch(_))
        ));
        assert!(matches!(
            make_lattice(1, [0.01; 3], [0.05; 3], Mode::Gridwork),
            Err(GeometryError::ModeMismatch(_))
        ));
        assert_eq!(make_lattice(0, [0.01; 3], [0.05; 3], Mode::Reticulated), Err(GeometryError::ZeroN));
    }

    #[test]
    fn membership_examples() {
        let lat = third();
        assert!(in_layer([0.0, 0.2, 0.4], 0, &lat));
        assert!(in_layer([0.34, 0.0, 0.0], 0, &lat));
        assert!(!in_layer([0.1, 0.0, 0.0], 0, &lat));
        assert!(in_triple([0.0; 3], &lat));
        assert!(in_pair([0.0, 0.0, 0.1], 0, 1, &lat));
        assert!(!in_triple([0.0, 0.0, 0.1], &lat));
        let g = grid5();
        for p in [[0.0; 3], [0.1, 0.2, 0.0], [0.4, -0.4, 0.2]] {
            assert!(!in_layer(p, 2, &g));
        }
    }

    #[test]
    fn closed_form_measures() {
        let m = measures(&third());
        assert_relative_eq!(m.layer[0], 0.06, max_relative = 1e-14);
        assert_relative_eq!(m.pair[1], 0.0036, max_relative = 1e-14);
        assert_relative_eq!(m.triple, 0.000216, max_relative = 1e-13);
        assert_relative_eq!(m.union, 0.169416, max_relative = 1e-14);
        assert_relative_eq!(m.limit_fractions.iter().sum::<f64>(), 1.0, max_relative = 1e-15);
        for f in m.limit_fractions {
            assert_relative_eq!(f, 1.0 / 3.0, max_relative = 1e-15);
        }

        let g = measures(&grid5());
        assert_relative_eq!(g.union, 0.0784, max_relative = 1e-14);
        assert_eq!(g.limit_fractions, [0.5, 0.5, 0.0]);
        assert_eq!(g.triple, 0.0);
    }

    #[test]
    fn exact_measures_match_float() {
        let r = BigRational::new(1.into(), 100.into());
        let exact = ExactMeasures::compute(1, &[r.clone(), r.clone(), r]);
        assert_eq!(exact.union, BigRational::new(21177.into(), 125000.into()));
        assert_eq!(exact.epsilon * BigRational::from_integer(3.into()), BigRational::one());

        let r = BigRational::new(1.into(), 250.into());
        let exact = ExactMeasures::compute(2, &[r.clone(), r, BigRational::zero()]);
        assert_eq!(exact.union, BigRational::new(49.into(), 625.into()));
        assert_eq!(exact.limit_fractions[2], BigRational::zero());
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let lat = third();
        let a = monte_carlo_measure(&lat, Region::Union, 100_000, 7);
        let b = monte_carlo_measure(&lat, Region::Union, 100_000, 7);
        assert_eq!(a, b);
        let c = monte_carlo_measure(&lat, Region::Union, 100_000, 8);
        assert_ne!(a.estimate, c.estimate);
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let lat = third();
        let exact = measures(&lat);
        let mc = monte_carlo_all(&lat, 1_000_000, 2024);
        for region in Region::all() {
            let est = mc.get(region);
            assert!(est.agrees(region.measure(&exact), 3.0), "{region}: {est:?}");
        }
        let g = grid5();
        let est = monte_carlo_measure(&g, Region::Layer(2), 10_000, 1);
        assert_eq!(est.estimate, 0.0);
    }

    #[test]
    fn law_and_control_rule() {
        let law = ThicknessLaw { c: [1.0; 3], p: 2.0 };
        let lat = LatticeParams::from_law(3, &law, ControlRule::GeometricMean, Mode::Reticulated).unwrap();
        let eps = 1.0 / 7.0;
        assert_relative_eq!(lat.r()[0], eps * eps, max_relative = 1e-15);
        assert_relative_eq!(lat.control()[0], (eps * eps * eps).sqrt(), max_relative = 1e-15);
        // n = 1: sqrt(r eps) = eps^1.5 exceeds eps/2, so the cap applies.
        let lat = LatticeParams::from_law(1, &law, ControlRule::GeometricMean, Mode::Reticulated).unwrap();
        assert_relative_eq!(lat.control()[0], CONTROL_CAP / 3.0, max_relative = 1e-15);
        let g = LatticeParams::from_law(2, &law, ControlRule::GeometricMean, Mode::Gridwork).unwrap();
        assert_eq!(g.r()[2], 0.0);
        assert_eq!(law.limit_fractions(Mode::Gridwork), [0.5, 0.5, 0.0]);
    }
}
