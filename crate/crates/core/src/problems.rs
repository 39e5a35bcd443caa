//! Synthetic test problems: smooth-plus-spike truths, forward operators,
//! noise, and a binary container for reproducible runs.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covariance::{
    build_covariance, leading_eigenpairs_grid, sample_smooth_field, sample_truncated_field,
    standard_normal, GridGeometry, GridStationaryCovariance, KernelSpec, DEFAULT_RELATIVE_JITTER,
};
use crate::error::{Error, Result};
use crate::operators::{
    diag_map, BlockDiagMap, CsrMatrix, DenseMap, DiagSpd, LinearMap, ScaledSpd, SpdMap,
};
use crate::solvers::{InverseProblem, Truth};

pub use crate::solvers::rel_error;

/// Largest number of unknowns a generator will build.
pub const MAX_UNKNOWNS: usize = 1_000_000;

/// Noise standard deviation of a published 50%-noise satellite run; kept as a
/// reference value only, the underlying data are not available.
pub const REFERENCE_SIGMA_HALF_NOISE: f64 = 0.5648;

const MAGIC: &[u8; 5] = b"SDKP1";

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Smooth field plus `n_spikes` positive spikes.
///
/// Spike amplitudes are uniform in `amp_range` and the first one is set to the
/// upper end of the range.
pub fn gen_smooth_plus_spikes(
    q: &dyn SpdMap,
    n_spikes: usize,
    amp_range: (f64, f64),
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = q.dim();
    let s1 = sample_smooth_field(q, &DVector::zeros(n), sub_seed(seed, 1))?;
    let s2 = spike_vector(n, n_spikes, amp_range, sub_seed(seed, 2))?;
    Ok((s1, s2))
}

fn check_amp_range(amp_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = amp_range;
    if !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(Error::InvalidParameter(format!(
            "amplitude range ({lo}, {hi}) is degenerate"
        )));
    }
    Ok(())
}

fn spike_vector(
    n: usize,
    n_spikes: usize,
    amp_range: (f64, f64),
    seed: u64,
) -> Result<DVector<f64>> {
    check_amp_range(amp_range)?;
    if n_spikes > n {
        return Err(Error::InvalidParameter(format!(
            "{n_spikes} spikes on {n} unknowns"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s2 = DVector::zeros(n);
    let (lo, hi) = amp_range;
    for (j, idx) in sample(&mut rng, n, n_spikes).into_iter().enumerate() {
        s2[idx] = if j == 0 {
            hi
        } else {
            lo + (hi - lo) * rng.random::<f64>()
        };
    }
    Ok(s2)
}

/// Dense footprint operator on `grid`: each row is a Gaussian bump of the given
/// width around a random grid point, scaled to unit row sum.
pub fn gen_footprint_operator(
    m: usize,
    grid: &GridGeometry,
    width: f64,
    seed: u64,
) -> Result<DenseMap> {
    if m == 0 {
        return Err(Error::InvalidParameter(
            "footprint operator needs m >= 1".into(),
        ));
    }
    if !(width > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "footprint width must be > 0, got {width}"
        )));
    }
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::zeros(m, n);
    for i in 0..m {
        let center = rng.random_range(0..n);
        let mut total = 0.0;
        for j in 0..n {
            let d = grid.distance(center, j);
            let v = (-0.5 * (d / width).powi(2)).exp();
            a[(i, j)] = v;
            total += v;
        }
        a.row_mut(i).scale_mut(1.0 / total);
    }
    Ok(DenseMap::new(a))
}

/// Spherical-means operator on a `side × side` image covering `[-1, 1]²`.
///
/// View centers sit on the circumscribing circle at angles spread evenly over
/// `[offset, offset + 340]` degrees. For every view there are `round(side·√2)`
/// radius bins; each row integrates the bilinearly interpolated image along one
/// circle, with arc length measured in pixels.
pub fn gen_spherical_means(
    img_side: usize,
    n_angles: usize,
    angle_offset: f64,
) -> Result<CsrMatrix> {
    if img_side < 8 {
        return Err(Error::InvalidParameter(format!(
            "image side must be >= 8, got {img_side}"
        )));
    }
    if n_angles == 0 {
        return Err(Error::InvalidParameter(
            "need at least one view angle".into(),
        ));
    }
    let side = img_side;
    let h = 2.0 / side as f64;
    let ring = std::f64::consts::SQRT_2;
    let nr = (side as f64 * std::f64::consts::SQRT_2).round() as usize;
    let dr = 2.0 * ring / nr as f64;
    let step = if n_angles > 1 {
        340.0 / (n_angles - 1) as f64
    } else {
        0.0
    };
    let mut triplets = Vec::new();
    for ia in 0..n_angles {
        let theta = (angle_offset + step * ia as f64).to_radians();
        let (cx, cy) = (ring * theta.cos(), ring * theta.sin());
        for ir in 0..nr {
            let row = ia * nr + ir;
            let r = (ir as f64 + 0.5) * dr;
            let samples = ((2.0 * std::f64::consts::PI * r / (0.5 * h)).ceil() as usize).max(16);
            let ds = 2.0 * std::f64::consts::PI * r / samples as f64 / h;
            for s in 0..samples {
                let phi = 2.0 * std::f64::consts::PI * (s as f64 + 0.5) / samples as f64;
                // continuous pixel coordinates, pixel centers at integers
                let u = (cx + r * phi.cos() + 1.0) / h - 0.5;
                let v = (cy + r * phi.sin() + 1.0) / h - 0.5;
                if u <= -1.0 || v <= -1.0 || u >= side as f64 || v >= side as f64 {
                    continue;
                }
                let (i0, j0) = (u.floor(), v.floor());
                let (fu, fv) = (u - i0, v - j0);
                for (di, wu) in [(0, 1.0 - fu), (1, fu)] {
                    for (dj, wv) in [(0, 1.0 - fv), (1, fv)] {
                        let (ix, iy) = (i0 as i64 + di, j0 as i64 + dj);
                        let w = wu * wv * ds;
                        if ix < 0 || iy < 0 || ix >= side as i64 || iy >= side as i64 || w == 0.0 {
                            continue;
                        }
                        triplets.push((row, ix as usize + side * iy as usize, w));
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(
        n_angles * nr,
        side * side,
        triplets,
    ))
}

/// `d = A s + σ·z` with `σ = nlevel·‖A s‖/‖z‖`, so `‖d − A s‖/‖A s‖ = nlevel`.
///
/// `R = σ²I`, or `I` when `σ = 0`.
pub fn add_noise(
    a: &dyn LinearMap,
    s_true: &DVector<f64>,
    nlevel: f64,
    seed: u64,
) -> Result<(DVector<f64>, DiagSpd, f64)> {
    if !(nlevel >= 0.0) || !nlevel.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise level must be >= 0, got {nlevel}"
        )));
    }
    let clean = a.apply(s_true);
    let m = clean.len();
    let z = standard_normal(m, seed);
    let (zn, cn) = (z.norm(), clean.norm());
    let sigma = if nlevel == 0.0 || zn == 0.0 {
        0.0
    } else {
        nlevel * cn / zn
    };
    let d = if sigma == 0.0 {
        clean
    } else {
        clean + z * sigma
    };
    let var = if sigma > 0.0 { sigma * sigma } else { 1.0 };
    Ok((d, diag_map(DVector::from_element(m, var))?, sigma))
}

/// Which generator a [`ProblemSpec`] drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Smooth field plus spikes on a square grid, footprint observations.
    Case1,
    /// Dynamic spherical-means tomography with star clusters.
    Case2,
    /// One-dimensional footprint problem.
    Custom,
}

impl ProblemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Case1 => "case1",
            ProblemKind::Case2 => "case2",
            ProblemKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" => Ok(ProblemKind::Case1),
            "case2" => Ok(ProblemKind::Case2),
            "custom" => Ok(ProblemKind::Custom),
            _ => Err(Error::InvalidParameter(format!(
                "unknown problem kind `{s}`"
            ))),
        }
    }
}

/// Every generation parameter; round-trips through `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Image side (or signal length for the 1-D problem).
    pub side: usize,
    pub frames: usize,
    pub angles: usize,
    pub truth_nu: f64,
    pub truth_ell: f64,
    pub prior_nu: f64,
    pub prior_ell: f64,
    /// Multiplier on the prior covariance; the truth is drawn from the unscaled kernel.
    pub prior_scale: f64,
    pub kl_modes: usize,
    pub n_spikes: usize,
    pub clusters: usize,
    pub cluster_size: usize,
    pub cluster_radius: f64,
    /// Spike amplitudes as multiples of the smooth field's standard deviation.
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub m_ratio: f64,
    pub width: f64,
    pub nlevel: f64,
    pub seed: u64,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        let base = Self {
            kind,
            side: 32,
            frames: 1,
            angles: 6,
            truth_nu: 2.5,
            truth_ell: 0.05,
            prior_nu: 2.5,
            prior_ell: 0.05,
            prior_scale: 1.0,
            kl_modes: 12,
            n_spikes: 10,
            clusters: 3,
            cluster_size: 5,
            cluster_radius: 3.0,
            amp_lo: 2.0,
            amp_hi: 8.0,
            m_ratio: 0.3,
            width: 0.03,
            nlevel: 0.04,
            seed: 0,
        };
        match kind {
            ProblemKind::Case1 => base,
            ProblemKind::Case2 => Self {
                frames: 8,
                truth_nu: 0.2,
                truth_ell: 0.2,
                prior_nu: 0.5,
                prior_ell: 0.4,
                nlevel: 0.02,
                ..base
            },
            ProblemKind::Custom => Self {
                side: 128,
                truth_nu: 1.5,
                truth_ell: 0.1,
                prior_nu: 1.5,
                prior_ell: 0.1,
                n_spikes: 5,
                m_ratio: 0.5,
                width: 0.02,
                ..base
            },
        }
    }

    /// Ordered `(key, value)` pairs; `Display` on floats round-trips exactly.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.as_str().to_string()),
            ("side", self.side.to_string()),
            ("frames", self.frames.to_string()),
            ("angles", self.angles.to_string()),
            ("truth_nu", self.truth_nu.to_string()),
            ("truth_ell", self.truth_ell.to_string()),
            ("prior_nu", self.prior_nu.to_string()),
            ("prior_ell", self.prior_ell.to_string()),
            ("prior_scale", self.prior_scale.to_string()),
            ("kl_modes", self.kl_modes.to_string()),
            ("n_spikes", self.n_spikes.to_string()),
            ("clusters", self.clusters.to_string()),
            ("cluster_size", self.cluster_size.to_string()),
            ("cluster_radius", self.cluster_radius.to_string()),
            ("amp_lo", self.amp_lo.to_string()),
            ("amp_hi", self.amp_hi.to_string()),
            ("m_ratio", self.m_ratio.to_string()),
            ("width", self.width.to_string()),
            ("nlevel", self.nlevel.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one key; unknown keys and unparsable values are errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "kind" => self.kind = value.parse()?,
            "side" => self.side = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "angles" => self.angles = num(key, value)?,
            "truth_nu" => self.truth_nu = num(key, value)?,
            "truth_ell" => self.truth_ell = num(key, value)?,
            "prior_nu" => self.prior_nu = num(key, value)?,
            "prior_ell" => self.prior_ell = num(key, value)?,
            "prior_scale" => self.prior_scale = num(key, value)?,
            "kl_modes" => self.kl_modes = num(key, value)?,
            "n_spikes" => self.n_spikes = num(key, value)?,
            "clusters" => self.clusters = num(key, value)?,
            "cluster_size" => self.cluster_size = num(key, value)?,
            "cluster_radius" => self.cluster_radius = num(key, value)?,
            "amp_lo" => self.amp_lo = num(key, value)?,
            "amp_hi" => self.amp_hi = num(key, value)?,
            "m_ratio" => self.m_ratio = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "nlevel" => self.nlevel = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::InvalidParameter(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.side == 0 || self.frames == 0 || self.angles == 0 {
            return bad("`side`, `frames` and `angles` must be >= 1");
        }
        if self.kind == ProblemKind::Case2 && self.side < 8 {
            return bad("`side` must be >= 8 for case2");
        }
        if self.unknowns() > MAX_UNKNOWNS {
            return Err(Error::TooLarge(self.unknowns()));
        }
        KernelSpec::Matern {
            nu: self.truth_nu,
            ell: self.truth_ell,
        }
        .validate()?;
        KernelSpec::Matern {
            nu: self.prior_nu,
            ell: self.prior_ell,
        }
        .validate()?;
        check_amp_range((self.amp_lo, self.amp_hi))?;
        if !(self.m_ratio > 0.0) || !self.m_ratio.is_finite() {
            return bad("`m_ratio` must be > 0");
        }
        if !(self.prior_scale > 0.0) || !self.prior_scale.is_finite() {
            return bad("`prior_scale` must be > 0");
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return bad("`width` must be > 0");
        }
        if !(self.nlevel >= 0.0) || !self.nlevel.is_finite() {
            return bad("`nlevel` must be >= 0");
        }
        if !(self.cluster_radius >= 0.0) {
            return bad("`cluster_radius` must be >= 0");
        }
        Ok(())
    }

    pub fn unknowns(&self) -> usize {
        match self.kind {
            ProblemKind::Case1 => self.side.saturating_mul(self.side),
            ProblemKind::Case2 => self
                .side
                .saturating_mul(self.side)
                .saturating_mul(self.frames),
            ProblemKind::Custom => self.side,
        }
    }

    /// `(nx, ny, frames)` for image-shaped problems.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        match self.kind {
            ProblemKind::Case1 => Some((self.side, self.side, 1)),
            ProblemKind::Case2 => Some((self.side, self.side, self.frames)),
            ProblemKind::Custom => None,
        }
    }
}

/// Generation parameters together with the values derived while generating.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub spec: ProblemSpec,
    pub sigma: f64,
    /// Standard deviation of the smooth truth, the unit of `amp_lo`/`amp_hi`.
    pub smooth_std: f64,
    pub m: usize,
    pub n: usize,
}

impl Descriptor {
    /// Plain-text `key = value` form; `derived.*` keys are informational.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# sdkrylov problem descriptor\n");
        for (k, v) in self.spec.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "derived.sigma = {}", self.sigma);
        let _ = writeln!(out, "derived.smooth_std = {}", self.smooth_std);
        let _ = writeln!(out, "derived.m = {}", self.m);
        let _ = writeln!(out, "derived.n = {}", self.n);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec: Option<ProblemSpec> = None;
        let mut derived = std::collections::HashMap::new();
        for (key, value) in parse_key_values(text)? {
            if let Some(d) = key.strip_prefix("derived.") {
                derived.insert(d.to_string(), value);
            } else if key == "kind" {
                spec = Some(ProblemSpec::new(value.parse()?));
            } else {
                let s = spec
                    .as_mut()
                    .ok_or_else(|| Error::Format("descriptor must start with `kind`".into()))?;
                s.set(&key, &value)?;
            }
        }
        let spec = spec.ok_or_else(|| Error::Format("descriptor has no `kind`".into()))?;
        let get = |k: &str| -> Result<f64> {
            derived
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("descriptor lacks `derived.{k}`")))
        };
        Ok(Self {
            spec,
            sigma: get("sigma")?,
            smooth_std: get("smooth_std")?,
            m: get("m")? as usize,
            n: get("n")? as usize,
        })
    }
}

/// Parses `key = value` lines with `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// A generated problem with its decomposed truth.
#[derive(Clone)]
pub struct TestProblem {
    pub problem: InverseProblem,
    pub s_true: DVector<f64>,
    pub s1_true: DVector<f64>,
    pub s2_true: DVector<f64>,
    pub seed: u64,
    pub descriptor: Descriptor,
}

impl TestProblem {
    pub fn truth(&self) -> Truth {
        Truth {
            s: self.s_true.clone(),
            s1: self.s1_true.clone(),
            s2: self.s2_true.clone(),
        }
    }
}

struct Operators {
    a: Arc<dyn LinearMap>,
    q: Arc<dyn SpdMap>,
    /// Covariance the smooth truth is drawn from (footprint problems only).
    truth_q: Option<Arc<dyn SpdMap>>,
}

fn matern(nu: f64, ell: f64) -> KernelSpec {
    KernelSpec::Matern { nu, ell }
}

fn scaled(q: Arc<dyn SpdMap>, scale: f64) -> Result<Arc<dyn SpdMap>> {
    if scale == 1.0 {
        Ok(q)
    } else {
        Ok(Arc::new(ScaledSpd::new(q, scale)?))
    }
}

fn build_operators(spec: &ProblemSpec) -> Result<Operators> {
    spec.validate()?;
    let seed = spec.seed;
    match spec.kind {
        ProblemKind::Case1 | ProblemKind::Custom => {
            let grid = if spec.kind == ProblemKind::Case1 {
                GridGeometry::unit_square(spec.side, spec.side)
            } else {
                GridGeometry::line(spec.side)
            };
            let n = grid.len();
            let m = ((spec.m_ratio * n as f64).round() as usize).max(1);
            let a = gen_footprint_operator(m, &grid, spec.width, sub_seed(seed, 3))?;
            let prior: Arc<dyn SpdMap> = Arc::new(build_covariance(
                &grid,
                &matern(spec.prior_nu, spec.prior_ell),
                DEFAULT_RELATIVE_JITTER,
            )?);
            let truth_q: Arc<dyn SpdMap> =
                if (spec.truth_nu, spec.truth_ell) == (spec.prior_nu, spec.prior_ell) {
                    prior.clone()
                } else {
                    Arc::new(build_covariance(
                        &grid,
                        &matern(spec.truth_nu, spec.truth_ell),
                        DEFAULT_RELATIVE_JITTER,
                    )?)
                };
            Ok(Operators {
                a: Arc::new(a),
                q: scaled(prior, spec.prior_scale)?,
                truth_q: Some(truth_q),
            })
        }
        ProblemKind::Case2 => {
            let blocks = (0..spec.frames)
                .map(|f| {
                    gen_spherical_means(spec.side, spec.angles, 1.0 + f as f64)
                        .map(|a| Arc::new(a) as Arc<dyn LinearMap>)
                })
                .collect::<Result<Vec<_>>>()?;
            let q = GridStationaryCovariance::new(
                spec.side,
                spec.side,
                spec.frames,
                &matern(spec.prior_nu, spec.prior_ell),
                DEFAULT_RELATIVE_JITTER,
            )?;
            Ok(Operators {
                a: Arc::new(BlockDiagMap::new(blocks)),
                q: scaled(Arc::new(q), spec.prior_scale)?,
                truth_q: None,
            })
        }
    }
}

/// Star clusters: pixel positions shared by every frame, amplitudes drawn per frame.
fn star_clusters(spec: &ProblemSpec, amp_range: (f64, f64), seed: u64) -> DVector<f64> {
    let side = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels: Vec<usize> = Vec::new();
    let rad = spec.cluster_radius;
    for _ in 0..spec.clusters {
        let (cx, cy) = (
            rng.random_range(0..side) as f64,
            rng.random_range(0..side) as f64,
        );
        let mut placed = 0;
        let mut tries = 0;
        while placed < spec.cluster_size && tries < 10_000 {
            tries += 1;
            let (dx, dy) = (rng.random_range(-rad..=rad), rng.random_range(-rad..=rad));
            if dx * dx + dy * dy > rad * rad {
                continue;
            }
            let (x, y) = ((cx + dx).round(), (cy + dy).round());
            if x < 0.0 || y < 0.0 || x >= side as f64 || y >= side as f64 {
                continue;
            }
            let p = x as usize + side * y as usize;
            if pixels.contains(&p) {
                continue;
            }
            pixels.push(p);
            placed += 1;
        }
    }
    let (lo, hi) = amp_range;
    let npix = side * side;
    let mut s2 = DVector::zeros(npix * spec.frames);
    for f in 0..spec.frames {
        for (j, &p) in pixels.iter().enumerate() {
            s2[f * npix + p] = if f == 0 && j == 0 {
                hi
            } else {
                lo + (hi - lo) * rng.random::<f64>()
            };
        }
    }
    s2
}

fn std_dev(v: &DVector<f64>) -> f64 {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Builds the problem described by `spec`.
pub fn generate(spec: &ProblemSpec) -> Result<TestProblem> {
    let ops = build_operators(spec)?;
    let n = ops.a.ncols();
    let seed = spec.seed;
    let s1 = match spec.kind {
        ProblemKind::Case2 => {
            let truth_cov = GridStationaryCovariance::new(
                spec.side,
                spec.side,
                spec.frames,
                &matern(spec.truth_nu, spec.truth_ell),
                DEFAULT_RELATIVE_JITTER,
            )?;
            let (vals, vecs) =
                leading_eigenpairs_grid(&truth_cov, spec.kl_modes, sub_seed(seed, 4));
            sample_truncated_field(&vals, &vecs, &DVector::zeros(n), sub_seed(seed, 1))?
        }
        _ => {
            let q = ops
                .truth_q
                .as_deref()
                .expect("footprint problems carry a truth covariance");
            sample_smooth_field(q, &DVector::zeros(n), sub_seed(seed, 1))?
        }
    };
    let smooth_std = std_dev(&s1);
    let amp = (spec.amp_lo * smooth_std, spec.amp_hi * smooth_std);
    let s2 = match spec.kind {
        ProblemKind::Case2 => star_clusters(spec, amp, sub_seed(seed, 2)),
        _ => spike_vector(n, spec.n_spikes, amp, sub_seed(seed, 2))?,
    };
    let s = &s1 + &s2;
    let (d, r, sigma) = add_noise(&*ops.a, &s, spec.nlevel, sub_seed(seed, 5))?;
    let m = d.len();
    let problem = InverseProblem::new(ops.a, Arc::new(r), ops.q, d)?;
    Ok(TestProblem {
        problem,
        s_true: s,
        s1_true: s1,
        s2_true: s2,
        seed,
        descriptor: Descriptor {
            spec: spec.clone(),
            sigma,
            smooth_std,
            m,
            n,
        },
    })
}

/// Dynamic tomography problem with the given frame count, image side and views per frame.
pub fn gen_dynamic_problem(
    n_frames: usize,
    img_side: usize,
    n_angles_per_frame: usize,
    nlevel: f64,
    seed: u64,
) -> Result<TestProblem> {
    let spec = ProblemSpec {
        frames: n_frames,
        side: img_side,
        angles: n_angles_per_frame,
        nlevel,
        seed,
        ..ProblemSpec::new(ProblemKind::Case2)
    };
    generate(&spec)
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64s(w: &mut impl Write, v: &DVector<f64>) -> std::io::Result<()> {
    for x in v.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Writes the binary container: magic `SDKP1`, little-endian `u64` lengths
/// `(m, n, descriptor bytes)`, the descriptor text, then `f64` payloads
/// `d, s_true, s1_true, s2_true, μ₁, μ₂`. Operators are rebuilt from the
/// descriptor when reading.
pub fn write_container(w: &mut impl Write, tp: &TestProblem) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    let desc = tp.descriptor.to_text();
    w.write_all(MAGIC).map_err(io)?;
    write_u64(w, tp.problem.m() as u64).map_err(io)?;
    write_u64(w, tp.problem.n() as u64).map_err(io)?;
    write_u64(w, desc.len() as u64).map_err(io)?;
    w.write_all(desc.as_bytes()).map_err(io)?;
    for v in [
        &tp.problem.d,
        &tp.s_true,
        &tp.s1_true,
        &tp.s2_true,
        &tp.problem.mu1,
        &tp.problem.mu2,
    ] {
        write_f64s(w, v).map_err(io)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(buf)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(n);
    for i in 0..n {
        out[i] = f64::from_le_bytes(read_exact::<8>(r)?);
    }
    Ok(out)
}

pub fn read_container(r: &mut impl Read) -> Result<TestProblem> {
    if &read_exact::<5>(r)? != MAGIC {
        return Err(Error::Format("not an SDKP1 container".into()));
    }
    let m = u64::from_le_bytes(read_exact::<8>(r)?) as usize;
    let n = u64::from_le_bytes(read_exact::<8>(r)?) as usize;
    let len = u64::from_le_bytes(read_exact::<8>(r)?) as usize;
    if n > MAX_UNKNOWNS || m > 64 * MAX_UNKNOWNS || len > 1 << 20 {
        return Err(Error::Format("container header out of range".into()));
    }
    let mut desc = vec![0u8; len];
    r.read_exact(&mut desc)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    let desc =
        String::from_utf8(desc).map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
    let descriptor = Descriptor::from_text(&desc)?;
    let d = read_f64s(r, m)?;
    let s_true = read_f64s(r, n)?;
    let s1_true = read_f64s(r, n)?;
    let s2_true = read_f64s(r, n)?;
    let mu1 = read_f64s(r, n)?;
    let mu2 = read_f64s(r, n)?;
    let ops = build_operators(&descriptor.spec)?;
    if (ops.a.nrows(), ops.a.ncols()) != (m, n) {
        return Err(Error::Format(format!(
            "descriptor builds a {}x{} operator, container holds {m}x{n}",
            ops.a.nrows(),
            ops.a.ncols()
        )));
    }
    let var = if descriptor.sigma > 0.0 {
        descriptor.sigma.powi(2)
    } else {
        1.0
    };
    let mut problem = InverseProblem::new(
        ops.a,
        Arc::new(diag_map(DVector::from_element(m, var))?),
        ops.q,
        d,
    )?;
    problem.mu1 = mu1;
    problem.mu2 = mu2;
    Ok(TestProblem {
        problem,
        s_true,
        s1_true,
        s2_true,
        seed: descriptor.spec.seed,
        descriptor,
    })
}
