//! Regularization-parameter selection on the projected problem and the
//! GCV-based stopping rule for the outer iteration.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::projected::{evaluate, lift_solution, solve_projected, ProjectedSystem, SolutionBasis};

/// Denominators below this are rejected by the GCV-type functionals.
pub const MIN_DENOMINATOR: f64 = 1e-14;

/// Default simplex starting point in `log₁₀` coordinates.
pub const LOG_START: f64 = -0.5;

/// Safeguard grid bounds in `log₁₀` coordinates and points per axis.
pub const GRID_LOG_RANGE: (f64, f64) = (-6.0, 2.0);
pub const GRID_POINTS: usize = 9;

/// Rule used to pick `(λ, α)` at each iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionRule {
    /// Minimizes the error against a known truth (testing only).
    Optimal {
        truth: DVector<f64>,
    },
    /// Like [`SelectionRule::Optimal`] but by exhaustive search on a square
    /// `log₁₀` grid with `points` per axis over `range`.
    OptimalGrid {
        truth: DVector<f64>,
        points: usize,
        range: (f64, f64),
    },
    Upre,
    /// Discrepancy principle with safety factor `tau ≥ 1`.
    Dp {
        tau: f64,
    },
    Wgcv,
    Fixed {
        lambda: f64,
        alpha: f64,
    },
}

impl SelectionRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            SelectionRule::Dp { tau } if !(*tau >= 1.0) => Err(Error::InvalidParameter(format!(
                "discrepancy safety factor must be >= 1, got {tau}"
            ))),
            SelectionRule::Fixed { lambda, alpha } if !(*lambda >= 0.0 && *alpha >= 0.0) => {
                Err(Error::InvalidParameter(format!(
                    "fixed parameters must be >= 0, got ({lambda}, {alpha})"
                )))
            }
            SelectionRule::OptimalGrid { points, .. } if *points == 0 => Err(
                Error::InvalidParameter("grid needs at least one point".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionRule::Optimal { .. } => "optimal",
            SelectionRule::OptimalGrid { .. } => "optimal-grid",
            SelectionRule::Upre => "upre",
            SelectionRule::Dp { .. } => "dp",
            SelectionRule::Wgcv => "wgcv",
            SelectionRule::Fixed { .. } => "fixed",
        }
    }

    fn truth(&self) -> Option<&DVector<f64>> {
        match self {
            SelectionRule::Optimal { truth } | SelectionRule::OptimalGrid { truth, .. } => {
                Some(truth)
            }
            _ => None,
        }
    }
}

/// How the searched coordinates map to `(λ, α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamMap {
    /// Independent search over both parameters.
    Both,
    /// `α = 0`; search over `λ`.
    LambdaOnly,
    /// `λ = 0`; search over `α`.
    AlphaOnly,
    /// `α = ratio · λ`; search over `λ`.
    Tied(f64),
}

impl ParamMap {
    fn dims(&self) -> usize {
        match self {
            ParamMap::Both => 2,
            _ => 1,
        }
    }

    fn params(&self, logs: &[f64]) -> (f64, f64) {
        let p = 10f64.powf(logs[0]);
        match *self {
            ParamMap::Both => (p, 10f64.powf(logs[1])),
            ParamMap::LambdaOnly => (p, 0.0),
            ParamMap::AlphaOnly => (0.0, p),
            ParamMap::Tied(r) => (p, r * p),
        }
    }
}

/// `(1/k)‖r‖² + (2/k) tr(M C) − 1`.
pub fn upre_objective(sys: &ProjectedSystem, lambda: f64, alpha: f64) -> Result<f64> {
    let e = evaluate(sys, lambda, alpha)?;
    let k = sys.k() as f64;
    Ok(e.residual_norm_sq() / k + 2.0 * e.trace / k - 1.0)
}

/// `|‖r‖² − m τ|`.
pub fn dp_objective(sys: &ProjectedSystem, lambda: f64, alpha: f64, tau: f64) -> Result<f64> {
    let e = evaluate(sys, lambda, alpha)?;
    Ok((e.residual_norm_sq() - sys.m_obs as f64 * tau).abs())
}

/// `‖r‖² / (k − ω tr(M C))²` with `ω = k/m`.
pub fn wgcv_objective(sys: &ProjectedSystem, lambda: f64, alpha: f64) -> Result<f64> {
    let omega = sys.k() as f64 / sys.m_obs as f64;
    wgcv_objective_weighted(sys, lambda, alpha, omega)
}

/// Weighted GCV with an explicit weight `ω`.
pub fn wgcv_objective_weighted(
    sys: &ProjectedSystem,
    lambda: f64,
    alpha: f64,
    omega: f64,
) -> Result<f64> {
    let e = evaluate(sys, lambda, alpha)?;
    let denom = sys.k() as f64 - omega * e.trace;
    if denom.abs() < MIN_DENOMINATOR {
        return Err(Error::DegenerateDenominator(denom));
    }
    Ok(e.residual_norm_sq() / (denom * denom))
}

/// Stopping functional `Ĝ(k) = k‖r‖² / (k − tr(M C))²`.
pub fn gcv_stop_value(sys: &ProjectedSystem, lambda: f64, alpha: f64) -> Result<f64> {
    let e = evaluate(sys, lambda, alpha)?;
    let k = sys.k() as f64;
    let denom = k - e.trace;
    if denom.abs() < MIN_DENOMINATOR {
        return Err(Error::DegenerateDenominator(denom));
    }
    Ok(k * e.residual_norm_sq() / (denom * denom))
}

/// `‖s_k(λ, α) − s_true‖²` by explicit lifting.
pub fn optimal_objective<B: SolutionBasis + ?Sized>(
    basis: &B,
    sys: &ProjectedSystem,
    lambda: f64,
    alpha: f64,
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
    s_true: &DVector<f64>,
) -> Result<f64> {
    let f = solve_projected(sys, lambda, alpha)?;
    let lifted = lift_solution(basis, &f, mu1, mu2)?;
    Ok((lifted.s - s_true).norm_squared())
}

/// Precomputed quadratic form of the truth error in the coefficients:
/// `‖μ + B f − s_true‖² = fᵀGf − 2fᵀg + c₀` with `B = QV_k + W_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthQuadratic {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    base: f64,
}

impl TruthQuadratic {
    pub fn new<B: SolutionBasis + ?Sized>(
        basis: &B,
        mu1: &DVector<f64>,
        mu2: &DVector<f64>,
        s_true: &DVector<f64>,
    ) -> Self {
        let b = basis.smooth_basis() + basis.sparse_basis();
        let e = s_true - mu1 - mu2;
        Self {
            gram: b.tr_mul(&b),
            cross: b.tr_mul(&e),
            base: e.norm_squared(),
        }
    }

    pub fn value(&self, f: &DVector<f64>) -> f64 {
        let v = f.dot(&(&self.gram * f)) - 2.0 * f.dot(&self.cross) + self.base;
        v.max(0.0)
    }
}

/// Selected parameters and the attained objective value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub lambda: f64,
    pub alpha: f64,
    pub value: f64,
}

/// Selects `(λ, α)` for `sys` under `rule`.
///
/// `truth` must be supplied for the optimal rules; it is built from the
/// current basis by the caller.
pub fn select_params(
    sys: &ProjectedSystem,
    rule: &SelectionRule,
    map: ParamMap,
    truth: Option<&TruthQuadratic>,
) -> Result<Selection> {
    rule.validate()?;
    let need_truth = || {
        truth.ok_or_else(|| Error::InvalidParameter("optimal rule requires a truth vector".into()))
    };
    match rule {
        SelectionRule::Fixed { lambda, alpha } => Ok(Selection {
            lambda: *lambda,
            alpha: *alpha,
            value: f64::NAN,
        }),
        SelectionRule::Optimal { .. } => {
            let tq = need_truth()?;
            minimize_params(|l, a| Ok(tq.value(&solve_projected(sys, l, a)?)), map)
        }
        SelectionRule::OptimalGrid { points, range, .. } => {
            let tq = need_truth()?;
            grid_search(
                |l, a| Ok(tq.value(&solve_projected(sys, l, a)?)),
                map,
                *points,
                *range,
            )
        }
        SelectionRule::Upre => minimize_params(|l, a| upre_objective(sys, l, a), map),
        SelectionRule::Dp { tau } => minimize_params(|l, a| dp_objective(sys, l, a, *tau), map),
        SelectionRule::Wgcv => minimize_params(|l, a| wgcv_objective(sys, l, a), map),
    }
}

/// Whether a rule needs the truth quadratic.
pub fn needs_truth(rule: &SelectionRule) -> Option<&DVector<f64>> {
    rule.truth()
}

struct Tracker {
    best: Option<(Vec<f64>, f64)>,
    last_error: Option<Error>,
}

impl Tracker {
    fn record(&mut self, x: &[f64], r: &Result<f64>) -> f64 {
        match r {
            Ok(v) if v.is_finite() => {
                if self.best.as_ref().is_none_or(|(_, b)| *v < *b) {
                    self.best = Some((x.to_vec(), *v));
                }
                *v
            }
            Ok(v) => {
                self.last_error = Some(Error::Selection(format!("objective evaluated to {v}")));
                f64::INFINITY
            }
            Err(e) => {
                self.last_error = Some(e.clone());
                f64::INFINITY
            }
        }
    }
}

/// Simplex search in `log₁₀` space from `(−0.5, −0.5)` followed by a coarse grid
/// safeguard; returns the better point. Evaluation failures count as `+∞`.
pub fn minimize_params<F>(objective: F, map: ParamMap) -> Result<Selection>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let dims = map.dims();
    let mut tracker = Tracker {
        best: None,
        last_error: None,
    };
    let eval = |x: &[f64], t: &mut Tracker| {
        let (l, a) = map.params(x);
        let r = objective(l, a);
        t.record(x, &r)
    };
    let start = vec![LOG_START; dims];
    nelder_mead(&start, 0.5, |x| eval(x, &mut tracker), 400, 1e-10);

    let grid = grid_points(dims, GRID_POINTS, GRID_LOG_RANGE);
    let grid_vals: Vec<Result<f64>> = grid
        .par_iter()
        .map(|x| {
            let (l, a) = map.params(x);
            objective(l, a)
        })
        .collect();
    for (x, r) in grid.iter().zip(grid_vals.iter()) {
        tracker.record(x, r);
    }
    finish(tracker, map)
}

/// Exhaustive search over a square `log₁₀` grid.
pub fn grid_search<F>(
    objective: F,
    map: ParamMap,
    points: usize,
    range: (f64, f64),
) -> Result<Selection>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let mut tracker = Tracker {
        best: None,
        last_error: None,
    };
    let grid = grid_points(map.dims(), points, range);
    let vals: Vec<Result<f64>> = grid
        .par_iter()
        .map(|x| {
            let (l, a) = map.params(x);
            objective(l, a)
        })
        .collect();
    for (x, r) in grid.iter().zip(vals.iter()) {
        tracker.record(x, r);
    }
    finish(tracker, map)
}

fn finish(tracker: Tracker, map: ParamMap) -> Result<Selection> {
    match tracker.best {
        Some((x, value)) => {
            let (lambda, alpha) = map.params(&x);
            Ok(Selection {
                lambda,
                alpha,
                value,
            })
        }
        None => Err(Error::Selection(match tracker.last_error {
            Some(e) => format!("every objective evaluation failed; last cause: {e}"),
            None => "no objective evaluations".into(),
        })),
    }
}

/// Points of a `points^dims` grid, equally spaced over `range` per axis.
pub fn grid_points(dims: usize, points: usize, range: (f64, f64)) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..points)
        .map(|i| {
            if points == 1 {
                0.5 * (range.0 + range.1)
            } else {
                range.0 + (range.1 - range.0) * i as f64 / (points - 1) as f64
            }
        })
        .collect();
    match dims {
        1 => axis.iter().map(|&a| vec![a]).collect(),
        _ => axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
            .collect(),
    }
}

/// Nelder–Mead minimizer with the standard coefficients; returns the best vertex.
pub fn nelder_mead<F>(
    start: &[f64],
    step: f64,
    mut f: F,
    max_iter: usize,
    xtol: f64,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let d = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let v0 = f(start);
    simplex.push((start.to_vec(), v0));
    for i in 0..d {
        let mut x = start.to_vec();
        x[i] += step;
        let v = f(&x);
        simplex.push((x, v));
    }
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread = simplex[d].1 - simplex[0].1;
        if size < xtol
            || (spread.is_finite() && spread <= 1e-15 * simplex[0].1.abs().max(1e-300))
                && size < 1e-6
        {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / d as f64;
            }
        }
        let worst = simplex[d].clone();
        let reflected = combine(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[d] = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < worst.1 {
                let c = combine(&centroid, &worst.0, -0.5);
                let v = f(&c);
                (c, v)
            } else {
                let c = combine(&centroid, &worst.0, 0.5);
                let v = f(&c);
                (c, v)
            };
            if fc < worst.1.min(fr) {
                simplex[d] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = combine(&best, &vertex.0, 0.5);
                    let v = f(&x);
                    *vertex = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Outer-iteration stopping policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingPolicy {
    pub max_iter: usize,
    pub gcv_tol: f64,
    pub window: usize,
}

impl Default for StoppingPolicy {
    fn default() -> Self {
        Self {
            max_iter: 50,
            gcv_tol: 1e-6,
            window: 3,
        }
    }
}

/// Why the outer iteration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIter,
    /// `Ĝ` rose above its running minimum for a full window.
    MinPassed,
    /// `Ĝ` changed by less than the tolerance for a full window.
    Flat,
    /// The basis captured the data exactly.
    Breakdown,
    /// Zero initial residual; nothing was iterated.
    ZeroResidual,
    /// The alternating scheme's change or budget criterion.
    Converged,
    Budget,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIter => "max_iter",
            StopReason::MinPassed => "min-passed",
            StopReason::Flat => "flat",
            StopReason::Breakdown => "breakdown",
            StopReason::ZeroResidual => "zero-residual",
            StopReason::Converged => "converged",
            StopReason::Budget => "budget",
        }
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Applies the stopping policy to the `Ĝ` history (one value per iteration).
pub fn check_stopping(history: &[f64], policy: &StoppingPolicy) -> StopDecision {
    let len = history.len();
    let w = policy.window.max(1);
    if len > w {
        let split = len - w;
        let running_min = history[..split]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if history[split..].iter().all(|&g| g > running_min) {
            return StopDecision::Stop(StopReason::MinPassed);
        }
        let flat = (split..len).all(|i| {
            let prev = history[i - 1];
            (history[i] - prev).abs() / prev.abs().max(f64::EPSILON) < policy.gcv_tol
        });
        if flat {
            return StopDecision::Stop(StopReason::Flat);
        }
    }
    if len >= policy.max_iter {
        return StopDecision::Stop(StopReason::MaxIter);
    }
    StopDecision::Continue
}
