//! Hybrid solver drivers: the joint smooth-plus-sparse method, its smooth-only
//! and sparse-only baselines, the alternating baseline, and the stacked-vector
//! variant.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::fggk::{AltFggkState, FggkOps, FggkOptions, FggkState, Mode, OpCounts, StepOutcome};
use crate::operators::{diag_map, DiagSpd, InverseSpd, LinearMap, SpdMap};
use crate::projected::{lift_solution, solve_projected, Lifted, SolutionBasis};
use crate::regparam::{
    check_stopping, gcv_stop_value, needs_truth, select_params, ParamMap, SelectionRule,
    StopDecision, StopReason, StoppingPolicy, TruthQuadratic,
};

/// Default smoothing of the 1-norm.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// `d = A s + δ` with noise covariance `R`, prior covariance `Q` and means `μ₁`, `μ₂`.
#[derive(Clone)]
pub struct InverseProblem {
    pub a: Arc<dyn LinearMap>,
    /// Noise covariance; must support `apply_inverse`.
    pub r: Arc<dyn SpdMap>,
    pub q: Arc<dyn SpdMap>,
    pub d: DVector<f64>,
    pub mu1: DVector<f64>,
    pub mu2: DVector<f64>,
}

impl InverseProblem {
    /// Problem with zero prior means.
    pub fn new(
        a: Arc<dyn LinearMap>,
        r: Arc<dyn SpdMap>,
        q: Arc<dyn SpdMap>,
        d: DVector<f64>,
    ) -> Result<Self> {
        let n = a.ncols();
        let p = Self {
            a,
            r,
            q,
            d,
            mu1: DVector::zeros(n),
            mu2: DVector::zeros(n),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.a.nrows(), self.a.ncols());
        check_dim("data length", m, self.d.len())?;
        check_dim("R dimension", m, self.r.dim())?;
        check_dim("Q dimension", n, self.q.dim())?;
        check_dim("mu1 length", n, self.mu1.len())?;
        check_dim("mu2 length", n, self.mu2.len())?;
        if !self.r.has_inverse() {
            return Err(Error::Unsupported("noise covariance inverse"));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }
    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    /// `c = d − A(μ₁ + μ₂)`; `A` is not applied when both means vanish.
    pub fn shifted_data(&self) -> DVector<f64> {
        let mu = &self.mu1 + &self.mu2;
        if mu.iter().all(|&v| v == 0.0) {
            self.d.clone()
        } else {
            &self.d - self.a.apply(&mu)
        }
    }
}

/// True components used for error reporting and the optimal rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub s: DVector<f64>,
    pub s1: DVector<f64>,
    pub s2: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub rule: SelectionRule,
    pub stopping: StoppingPolicy,
    /// Smoothing `ε` of the 1-norm in the reweighting.
    pub epsilon: f64,
    pub reorthogonalize: bool,
    pub tau_break: f64,
    /// Enables relative-error columns in the history.
    pub truth: Option<Arc<Truth>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            rule: SelectionRule::Wgcv,
            stopping: StoppingPolicy::default(),
            epsilon: DEFAULT_EPSILON,
            reorthogonalize: true,
            tau_break: crate::fggk::DEFAULT_TAU_BREAK,
            truth: None,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.stopping.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
        }
        self.rule.validate()
    }
}

/// One row of the iteration history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lambda: f64,
    pub alpha: f64,
    /// `Ĝ(k)`; NaN when its denominator degenerates.
    pub gcv: f64,
    /// `‖M_k f_k − β₁e₁‖`.
    pub res_proj: f64,
    pub relerr: Option<f64>,
    pub relerr_s1: Option<f64>,
    pub relerr_s2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub s1: DVector<f64>,
    pub s2: DVector<f64>,
    pub s: DVector<f64>,
    pub history: Vec<IterRecord>,
    pub stop_reason: StopReason,
    /// Iteration whose iterate is returned (0 when nothing was iterated).
    pub selected_iter: usize,
    /// Operator applications made by the Krylov process.
    pub counts: OpCounts,
    /// Set when a solution-space breakdown ended the run early.
    pub v_breakdown: bool,
    pub wall_time: f64,
}

impl SolveResult {
    fn trivial(problem: &InverseProblem, start: Instant) -> Self {
        let s = &problem.mu1 + &problem.mu2;
        Self {
            s1: problem.mu1.clone(),
            s2: problem.mu2.clone(),
            s,
            history: Vec::new(),
            stop_reason: StopReason::ZeroResidual,
            selected_iter: 0,
            counts: OpCounts::default(),
            v_breakdown: false,
            wall_time: start.elapsed().as_secs_f64(),
        }
    }

    /// Parameters of the returned iterate.
    pub fn selected_params(&self) -> Option<(f64, f64)> {
        self.history
            .iter()
            .find(|r| r.iter == self.selected_iter)
            .map(|r| (r.lambda, r.alpha))
    }
}

/// `D(ξ) = diag((2√(ξᵢ² + ε))^{−1/2})`.
pub fn weight_matrix(xi: &DVector<f64>, epsilon: f64) -> Result<DiagSpd> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    diag_map(xi.map(|x| (2.0 * (x * x + epsilon).sqrt()).powf(-0.5)))
}

/// `‖x − y‖ / ‖y‖`.
pub fn rel_error(s_est: &DVector<f64>, s_true: &DVector<f64>) -> Result<f64> {
    check_dim("rel_error", s_true.len(), s_est.len())?;
    let denom = s_true.norm();
    if denom == 0.0 {
        return Err(Error::InvalidParameter(
            "relative error against a zero truth".into(),
        ));
    }
    Ok((s_est - s_true).norm() / denom)
}

fn optional_rel(est: &DVector<f64>, truth: &DVector<f64>) -> Option<f64> {
    rel_error(est, truth).ok()
}

/// Processes that can drive the hybrid loop.
trait Process: SolutionBasis {
    fn advance(&mut self, ops: FggkOps<'_>, dinv: &dyn SpdMap) -> Result<StepOutcome>;
    fn op_counts(&self) -> OpCounts;
}

impl Process for FggkState {
    fn advance(&mut self, ops: FggkOps<'_>, dinv: &dyn SpdMap) -> Result<StepOutcome> {
        self.step(ops, dinv)
    }
    fn op_counts(&self) -> OpCounts {
        self.counts()
    }
}

impl Process for AltFggkState {
    fn advance(&mut self, ops: FggkOps<'_>, dinv: &dyn SpdMap) -> Result<StepOutcome> {
        self.step(ops, dinv)
    }
    fn op_counts(&self) -> OpCounts {
        self.counts()
    }
}

fn hybrid_loop<P: Process>(
    problem: &InverseProblem,
    opts: &SolveOptions,
    map: ParamMap,
    reweight: bool,
    init: impl FnOnce(FggkOps<'_>, &DVector<f64>) -> Result<P>,
) -> Result<SolveResult> {
    let start = Instant::now();
    problem.validate()?;
    opts.validate()?;
    let c = problem.shifted_data();
    if c.iter().all(|&v| v == 0.0) {
        return Ok(SolveResult::trivial(problem, start));
    }
    let rinv = InverseSpd::new(&*problem.r)?;
    let ops = FggkOps {
        a: &*problem.a,
        rinv: &rinv,
        q: &*problem.q,
    };
    let mut state = match init(ops, &c) {
        Err(Error::ZeroResidual) => return Ok(SolveResult::trivial(problem, start)),
        other => other?,
    };
    let n = problem.n();
    let truth_vec = needs_truth(&opts.rule).cloned();
    let mut dinv = diag_map(DVector::from_element(n, 1.0))?;
    let mut history = Vec::new();
    let mut gcv_values = Vec::new();
    let mut best: Option<(usize, f64, Lifted)> = None;
    let mut latest: Option<(usize, Lifted)> = None;
    let mut v_breakdown = false;

    let stop_reason = loop {
        let outcome = match state.advance(ops, &dinv) {
            Ok(o) => o,
            Err(Error::VBreakdown { .. }) if latest.is_some() => {
                v_breakdown = true;
                break StopReason::Breakdown;
            }
            Err(e) => return Err(e),
        };
        let k = state.k();
        let sys = state.projected();
        let tq = truth_vec
            .as_ref()
            .map(|t| TruthQuadratic::new(&state, &problem.mu1, &problem.mu2, t));
        let sel = select_params(&sys, &opts.rule, map, tq.as_ref())?;
        let f = solve_projected(&sys, sel.lambda, sel.alpha)?;
        let lifted = lift_solution(&state, &f, &problem.mu1, &problem.mu2)?;
        let res_proj = crate::projected::projected_residual(&sys, &f)?.norm();
        let gcv = gcv_stop_value(&sys, sel.lambda, sel.alpha).unwrap_or(f64::NAN);
        let (relerr, relerr_s1, relerr_s2) = match &opts.truth {
            Some(t) => (
                optional_rel(&lifted.s, &t.s),
                optional_rel(&lifted.s1, &t.s1),
                optional_rel(&lifted.s2, &t.s2),
            ),
            None => (None, None, None),
        };
        history.push(IterRecord {
            iter: k,
            lambda: sel.lambda,
            alpha: sel.alpha,
            gcv,
            res_proj,
            relerr,
            relerr_s1,
            relerr_s2,
        });
        if reweight {
            dinv = weight_matrix(&(&lifted.s2 - &problem.mu2), opts.epsilon)?.inverse();
        }
        // A degenerate Ĝ carries no information and is left out of the stopping history.
        if gcv.is_finite() {
            gcv_values.push(gcv);
            if best.as_ref().is_none_or(|(_, bg, _)| gcv < *bg) {
                best = Some((k, gcv, lifted.clone()));
            }
        }
        latest = Some((k, lifted));
        if outcome == StepOutcome::Breakdown {
            break StopReason::Breakdown;
        }
        if history.len() >= opts.stopping.max_iter {
            break StopReason::MaxIter;
        }
        if let StopDecision::Stop(reason) = check_stopping(&gcv_values, &opts.stopping) {
            break reason;
        }
    };

    let (selected_iter, lifted) = match (stop_reason, best) {
        (StopReason::MinPassed, Some((k, _, l))) => (k, l),
        _ => latest.expect("at least one iteration completed"),
    };
    Ok(SolveResult {
        s1: lifted.s1,
        s2: lifted.s2,
        s: lifted.s,
        history,
        stop_reason,
        selected_iter,
        counts: state.op_counts(),
        v_breakdown,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn fggk_options(opts: &SolveOptions, mode: Mode) -> FggkOptions {
    FggkOptions {
        mode,
        reorthogonalize: opts.reorthogonalize,
        tau_break: opts.tau_break,
    }
}

/// Joint smooth-plus-sparse hybrid method with both parameters selected per iteration.
pub fn sdhybr(problem: &InverseProblem, opts: &SolveOptions) -> Result<SolveResult> {
    let fo = fggk_options(opts, Mode::SmoothAndSparse);
    hybrid_loop(problem, opts, ParamMap::Both, true, |ops, c| {
        FggkState::init(ops, c, fo)
    })
}

/// Smooth-only baseline: generalized Golub–Kahan hybrid method (`α = 0`).
pub fn genhybr(problem: &InverseProblem, opts: &SolveOptions) -> Result<SolveResult> {
    let fo = fggk_options(opts, Mode::SmoothOnly);
    hybrid_loop(problem, opts, ParamMap::LambdaOnly, false, |ops, c| {
        FggkState::init(ops, c, fo)
    })
}

/// Sparse-only baseline: flexible hybrid method with reweighting (`λ = 0`, `Q` unused).
pub fn fhybr(problem: &InverseProblem, opts: &SolveOptions) -> Result<SolveResult> {
    let fo = fggk_options(opts, Mode::SparseOnly);
    hybrid_loop(problem, opts, ParamMap::AlphaOnly, true, |ops, c| {
        FggkState::init(ops, c, fo)
    })
}

/// Stacked-vector variant with `α = lambda_ratio · λ` and one-dimensional selection.
pub fn sdhybr_alt(
    problem: &InverseProblem,
    opts: &SolveOptions,
    lambda_ratio: f64,
) -> Result<SolveResult> {
    if !(lambda_ratio > 0.0) || !lambda_ratio.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda_ratio must be > 0, got {lambda_ratio}"
        )));
    }
    let fo = fggk_options(opts, Mode::SmoothAndSparse);
    hybrid_loop(
        problem,
        opts,
        ParamMap::Tied(lambda_ratio),
        true,
        |ops, c| AltFggkState::init(ops, c, fo),
    )
}

#[derive(Debug, Clone)]
pub struct AlternatingOptions {
    /// Options for both inner solves; the rule defaults to WGCV.
    pub inner: SolveOptions,
    pub max_sweeps: usize,
    /// Total inner iterations allowed across all sweeps.
    pub inner_budget: usize,
    /// Relative change of `s` that ends the sweeps.
    pub tol: f64,
    /// Starting sparse component; `μ₂` when absent.
    pub s2_init: Option<DVector<f64>>,
}

impl Default for AlternatingOptions {
    fn default() -> Self {
        Self {
            inner: SolveOptions::default(),
            max_sweeps: 20,
            inner_budget: 200,
            tol: 1e-6,
            s2_init: None,
        }
    }
}

/// Per-sweep summary of the alternating scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub inner_iters: usize,
    pub change: f64,
}

#[derive(Debug, Clone)]
pub struct AlternatingResult {
    pub result: SolveResult,
    pub sweeps: Vec<SweepRecord>,
    /// Iterates `(s₁, s₂)` after every sweep.
    pub iterates: Vec<(DVector<f64>, DVector<f64>)>,
}

fn inner_rule(rule: &SelectionRule, truth: Option<&Truth>, smooth: bool) -> SelectionRule {
    match (rule, truth) {
        (SelectionRule::Optimal { .. }, Some(t)) => SelectionRule::Optimal {
            truth: if smooth { t.s1.clone() } else { t.s2.clone() },
        },
        (SelectionRule::OptimalGrid { points, range, .. }, Some(t)) => SelectionRule::OptimalGrid {
            truth: if smooth { t.s1.clone() } else { t.s2.clone() },
            points: *points,
            range: *range,
        },
        _ => rule.clone(),
    }
}

/// Alternates the smooth-only solve on `d − A s₂` with the sparse-only solve on `d − A s₁`.
pub fn alternating(
    problem: &InverseProblem,
    opts: &AlternatingOptions,
) -> Result<AlternatingResult> {
    let start = Instant::now();
    problem.validate()?;
    opts.inner.validate()?;
    let n = problem.n();
    let mut s2 = match &opts.s2_init {
        Some(v) => {
            check_dim("s2_init", n, v.len())?;
            v.clone()
        }
        None => problem.mu2.clone(),
    };
    let mut s1 = problem.mu1.clone();
    let truth = opts.inner.truth.clone();
    let mut budget = opts.inner_budget;
    let mut sweeps = Vec::new();
    let mut iterates = Vec::new();
    let mut history = Vec::new();
    let mut counts = OpCounts::default();
    let mut s_prev = &s1 + &s2;
    let mut reason = StopReason::MaxIter;

    for sweep in 1..=opts.max_sweeps {
        if budget == 0 {
            reason = StopReason::Budget;
            break;
        }
        let wrap = |e: Error| Error::Sweep {
            sweep,
            source: Box::new(e),
        };
        let smooth_problem = InverseProblem {
            d: &problem.d - problem.a.apply(&s2),
            mu2: DVector::zeros(n),
            ..problem.clone()
        };
        let mut inner = opts.inner.clone();
        inner.rule = inner_rule(&opts.inner.rule, truth.as_deref(), true);
        inner.truth = None;
        inner.stopping.max_iter = inner.stopping.max_iter.min(budget);
        let r1 = genhybr(&smooth_problem, &inner).map_err(wrap)?;
        budget -= r1.history.len().min(budget);
        s1 = r1.s1.clone();

        let sparse_problem = InverseProblem {
            d: &problem.d - problem.a.apply(&s1),
            mu1: DVector::zeros(n),
            ..problem.clone()
        };
        let mut inner = opts.inner.clone();
        inner.rule = inner_rule(&opts.inner.rule, truth.as_deref(), false);
        inner.truth = None;
        inner.stopping.max_iter = inner.stopping.max_iter.min(budget.max(1));
        let r2 = fhybr(&sparse_problem, &inner).map_err(wrap)?;
        budget -= r2.history.len().min(budget);
        s2 = r2.s2.clone();

        for c in [r1.counts, r2.counts] {
            counts.a_forward += c.a_forward;
            counts.a_adjoint += c.a_adjoint;
            counts.q += c.q;
            counts.rinv += c.rinv;
            counts.dinv += c.dinv;
        }
        let s = &s1 + &s2;
        let change = (&s - &s_prev).norm() / s.norm().max(f64::MIN_POSITIVE);
        s_prev = s.clone();
        let lambda = r1.selected_params().map_or(f64::NAN, |p| p.0);
        let alpha = r2.selected_params().map_or(f64::NAN, |p| p.1);
        let (relerr, relerr_s1, relerr_s2) = match &truth {
            Some(t) => (
                optional_rel(&s, &t.s),
                optional_rel(&s1, &t.s1),
                optional_rel(&s2, &t.s2),
            ),
            None => (None, None, None),
        };
        history.push(IterRecord {
            iter: sweep,
            lambda,
            alpha,
            gcv: f64::NAN,
            res_proj: f64::NAN,
            relerr,
            relerr_s1,
            relerr_s2,
        });
        sweeps.push(SweepRecord {
            sweep,
            lambda,
            alpha,
            inner_iters: r1.history.len() + r2.history.len(),
            change,
        });
        iterates.push((s1.clone(), s2.clone()));
        if change < opts.tol {
            reason = StopReason::Converged;
            break;
        }
    }
    let s = &s1 + &s2;
    let selected_iter = sweeps.len();
    Ok(AlternatingResult {
        result: SolveResult {
            s1,
            s2,
            s,
            history,
            stop_reason: reason,
            selected_iter,
            counts,
            v_breakdown: false,
            wall_time: start.elapsed().as_secs_f64(),
        },
        sweeps,
        iterates,
    })
}
