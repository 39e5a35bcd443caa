//! Full-space majorization-minimization reference solver.
//!
//! Works in the variables `(x, ξ)` with `s₁ = μ₁ + Qx` and `s₂ = μ₂ + ξ`:
//! `f_ε = ‖AQx + Aξ − c‖²_{R⁻¹} + λ²‖x‖²_Q + α²Σφ_ε(ξⱼ)`, `φ_ε(t) = √(t² + ε)`.
//! Everything is dense, so this is for small problems only.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::operators::{dense_from_map, dense_from_spd};
use crate::solvers::{weight_matrix, InverseProblem};

/// Largest `n` accepted by the dense oracle.
pub const MAX_DENSE_N: usize = 2000;
/// Default relative objective change ending [`direct_map_small`].
pub const DEFAULT_MAP_TOL: f64 = 1e-10;
/// Step limit of [`direct_map_small`].
pub const MAX_MAP_STEPS: usize = 500;

/// `φ_ε(t) = √(t² + ε)`.
pub fn phi(t: f64, epsilon: f64) -> f64 {
    (t * t + epsilon).sqrt()
}

/// Quadratic majorizer of `φ_ε` touching at `tk`.
pub fn psi(t: f64, tk: f64, epsilon: f64) -> f64 {
    let p = phi(tk, epsilon);
    p + (t * t - tk * tk) / (2.0 * p)
}

/// Dense whitened form of an [`InverseProblem`].
#[derive(Debug, Clone)]
pub struct MmProblem {
    /// `L⁻¹AQ` with `R = LLᵀ`.
    aq: DMatrix<f64>,
    /// `L⁻¹A`.
    a: DMatrix<f64>,
    /// `L_Qᵀ` with `Q = L_Q L_Qᵀ`.
    q_half: DMatrix<f64>,
    q: DMatrix<f64>,
    /// `L⁻¹c`.
    c: DVector<f64>,
}

impl MmProblem {
    pub fn new(problem: &InverseProblem) -> Result<Self> {
        problem.validate()?;
        let n = problem.n();
        if n > MAX_DENSE_N {
            return Err(Error::TooLarge(n));
        }
        let a = dense_from_map(&*problem.a);
        let q = dense_from_spd(&*problem.q);
        let r = dense_from_spd(&*problem.r);
        let lr = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Definiteness("noise covariance is not positive definite".into()))?
            .l();
        let lq = q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Definiteness("prior covariance is not positive definite".into()))?
            .l();
        let whiten = |m: &DMatrix<f64>| {
            lr.solve_lower_triangular(m)
                .expect("Cholesky factor has a positive diagonal")
        };
        let c = problem.shifted_data();
        let c = whiten(&DMatrix::from_column_slice(c.len(), 1, c.as_slice()))
            .column(0)
            .into_owned();
        Ok(Self {
            aq: whiten(&(&a * &q)),
            a: whiten(&a),
            q_half: lq.transpose(),
            q,
            c,
        })
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    fn check(&self, x: &DVector<f64>, xi: &DVector<f64>) -> Result<()> {
        check_dim("x length", self.n(), x.len())?;
        check_dim("xi length", self.n(), xi.len())
    }

    /// Whitened residual `L⁻¹(AQx + Aξ − c)`.
    fn residual(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        &self.aq * x + &self.a * xi - &self.c
    }

    /// Smooth component offset `Qx`.
    pub fn smooth_part(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x
    }
}

fn check_eps(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "epsilon must be > 0, got {epsilon}"
        )))
    }
}

/// Smoothed MAP objective `f_ε(x, ξ)`.
pub fn f_eps(
    mp: &MmProblem,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
) -> Result<f64> {
    check_eps(epsilon)?;
    mp.check(x, xi)?;
    let fit = mp.residual(x, xi).norm_squared();
    let smooth = (&mp.q_half * x).norm_squared();
    let sparse: f64 = xi.iter().map(|&t| phi(t, epsilon)).sum();
    Ok(fit + lambda * lambda * smooth + alpha * alpha * sparse)
}

/// Gradient of `f_ε` with respect to `(x, ξ)`.
pub fn f_eps_gradient(
    mp: &MmProblem,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_eps(epsilon)?;
    mp.check(x, xi)?;
    let r = mp.residual(x, xi);
    let gx = mp.aq.tr_mul(&r) * 2.0 + &mp.q * x * (2.0 * lambda * lambda);
    let gxi = mp.a.tr_mul(&r) * 2.0 + xi.map(|t| alpha * alpha * t / phi(t, epsilon));
    Ok((gx, gxi))
}

/// Surrogate `g_ε(x, ξ | x_k, ξ_k)`; it does not depend on `x_k`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate(
    mp: &MmProblem,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    xk: &DVector<f64>,
    xik: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
) -> Result<f64> {
    check_eps(epsilon)?;
    mp.check(x, xi)?;
    mp.check(xk, xik)?;
    let fit = mp.residual(x, xi).norm_squared();
    let smooth = (&mp.q_half * x).norm_squared();
    let sparse: f64 = xi
        .iter()
        .zip(xik.iter())
        .map(|(&t, &tk)| psi(t, tk, epsilon))
        .sum();
    Ok(fit + lambda * lambda * smooth + alpha * alpha * sparse)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmIterate {
    pub x: DVector<f64>,
    pub xi: DVector<f64>,
    /// `f_ε(x, ξ)`.
    pub objective: f64,
}

/// Householder least squares; `None` when `R` is numerically singular.
fn full_rank_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let diag = r.diagonal().abs();
    if !(diag.min() > 1e-10 * diag.max()) {
        return None;
    }
    let rhs = qr.q().tr_mul(b);
    r.solve_upper_triangular(&rhs)
}

/// Exact minimizer of the surrogate at `ξ_k` via the stacked least-squares system
/// `[AQ A; λL_Qᵀ 0; 0 αD(ξ_k)] [x; ξ] ≈ [c; 0; 0]` (minimum-norm when rank-deficient).
fn surrogate_minimizer(
    mp: &MmProblem,
    xik: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = mp.n();
    let m = mp.c.len();
    let dk = weight_matrix(xik, epsilon)?;
    let mut big = DMatrix::zeros(m + 2 * n, 2 * n);
    big.view_mut((0, 0), (m, n)).copy_from(&mp.aq);
    big.view_mut((0, n), (m, n)).copy_from(&mp.a);
    big.view_mut((m, 0), (n, n))
        .copy_from(&(&mp.q_half * lambda));
    for (i, &d) in dk.values().iter().enumerate() {
        big[(m + n + i, n + i)] = alpha * d;
    }
    let mut rhs = DVector::zeros(m + 2 * n);
    rhs.rows_mut(0, m).copy_from(&mp.c);
    if let Some(z) = full_rank_least_squares(&big, &rhs) {
        return Ok((z.rows(0, n).into_owned(), z.rows(n, n).into_owned()));
    }
    let svd = big.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || !smax.is_finite() {
        return Err(Error::Factorization {
            min_eigenvalue: smax,
        });
    }
    let z = svd
        .solve(&rhs, 1e-13 * smax)
        .map_err(|e| Error::Format(format!("least-squares solve failed: {e}")))?;
    Ok((z.rows(0, n).into_owned(), z.rows(n, n).into_owned()))
}

/// Damped Newton steps on the smooth objective; MM stalls where `φ_ε` is sharply
/// curved, and a few Newton steps restore stationarity. Steps that do not
/// decrease `f_ε` are rejected, so the result is never worse than the input.
fn newton_polish(
    mp: &MmProblem,
    mut x: DVector<f64>,
    mut xi: DVector<f64>,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = mp.n();
    let mut f = f_eps(mp, &x, &xi, lambda, alpha, epsilon)?;
    for _ in 0..50 {
        let (gx, gxi) = f_eps_gradient(mp, &x, &xi, lambda, alpha, epsilon)?;
        let mut g = DVector::zeros(2 * n);
        g.rows_mut(0, n).copy_from(&gx);
        g.rows_mut(n, n).copy_from(&gxi);
        if g.norm() <= 1e-13 * (1.0 + f.abs()) {
            break;
        }
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n))
            .copy_from(&((mp.aq.tr_mul(&mp.aq) + &mp.q * (lambda * lambda)) * 2.0));
        let cross = mp.aq.tr_mul(&mp.a) * 2.0;
        h.view_mut((0, n), (n, n)).copy_from(&cross);
        h.view_mut((n, 0), (n, n)).copy_from(&cross.transpose());
        let mut hyy = mp.a.tr_mul(&mp.a) * 2.0;
        for i in 0..n {
            hyy[(i, i)] += alpha * alpha * epsilon / phi(xi[i], epsilon).powi(3);
        }
        h.view_mut((n, n), (n, n)).copy_from(&hyy);
        let Some(step) = h.lu().solve(&g) else { break };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xn = &x - step.rows(0, n) * t;
            let xin = &xi - step.rows(n, n) * t;
            let fnew = f_eps(mp, &xn, &xin, lambda, alpha, epsilon)?;
            if fnew < f {
                (x, xi, f) = (xn, xin, fnew);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((x, xi))
}

/// `n_iters` MM steps from `(0, 0)`; element 0 of the result is the starting point.
pub fn mm_solve(
    mp: &MmProblem,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
    n_iters: usize,
) -> Result<Vec<MmIterate>> {
    check_eps(epsilon)?;
    let n = mp.n();
    let mut x = DVector::zeros(n);
    let mut xi = DVector::zeros(n);
    let mut out = Vec::with_capacity(n_iters + 1);
    out.push(MmIterate {
        objective: f_eps(mp, &x, &xi, lambda, alpha, epsilon)?,
        x: x.clone(),
        xi: xi.clone(),
    });
    for _ in 0..n_iters {
        (x, xi) = surrogate_minimizer(mp, &xi, lambda, alpha, epsilon)?;
        out.push(MmIterate {
            objective: f_eps(mp, &x, &xi, lambda, alpha, epsilon)?,
            x: x.clone(),
            xi: xi.clone(),
        });
    }
    Ok(out)
}

/// MM run to a relative objective change below `tol`, then polished to
/// stationarity, as a reference MAP estimate.
pub fn direct_map_small(
    mp: &MmProblem,
    lambda: f64,
    alpha: f64,
    epsilon: f64,
    tol: f64,
) -> Result<MmIterate> {
    check_eps(epsilon)?;
    let n = mp.n();
    if mp.c.iter().all(|&v| v == 0.0) {
        let z = DVector::zeros(n);
        return Ok(MmIterate {
            objective: f_eps(mp, &z, &z, lambda, alpha, epsilon)?,
            x: z.clone(),
            xi: z,
        });
    }
    let mut xi = DVector::zeros(n);
    let mut prev = f64::INFINITY;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_MAP_STEPS {
        let (x, next) = surrogate_minimizer(mp, &xi, lambda, alpha, epsilon)?;
        xi = next;
        let obj = f_eps(mp, &x, &xi, lambda, alpha, epsilon)?;
        change = (prev - obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        prev = obj;
        if change < tol {
            let (x, xi) = newton_polish(mp, x, xi, lambda, alpha, epsilon)?;
            let objective = f_eps(mp, &x, &xi, lambda, alpha, epsilon)?;
            return Ok(MmIterate { x, xi, objective });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_MAP_STEPS,
        last_change: change,
    })
}
