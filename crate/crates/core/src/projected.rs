//! The small regularized least-squares problem in the Krylov coordinates.
//!
//! `min_f ‖M f − β₁e₁‖² + λ²‖L₁ f‖² + α²‖L₂ f‖²`, where `L₁ = I` and `L₂ = R_W`
//! for the main process.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::fggk::{AltFggkState, FggkState, Mode};

/// Relative pivot size below which the stacked factor is treated as singular.
const SINGULAR_PIVOT: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSystem {
    /// `(k+1) × k` Hessenberg factor.
    pub m: DMatrix<f64>,
    /// Square factor of the smooth regularizer; `None` means the identity.
    pub smooth_factor: Option<DMatrix<f64>>,
    /// Factor of the sparse regularizer (`R_W`).
    pub sparse_factor: DMatrix<f64>,
    pub beta1: f64,
    /// Number of observations.
    pub m_obs: usize,
}

impl ProjectedSystem {
    pub fn new(m: DMatrix<f64>, rw: DMatrix<f64>, beta1: f64, m_obs: usize) -> Result<Self> {
        let k = m.ncols();
        check_dim("projected M rows", k + 1, m.nrows())?;
        check_dim("projected R_W columns", k, rw.ncols())?;
        if !(beta1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta1 must be positive, got {beta1}"
            )));
        }
        Ok(Self {
            m,
            smooth_factor: None,
            sparse_factor: rw,
            beta1,
            m_obs,
        })
    }

    pub fn k(&self) -> usize {
        self.m.ncols()
    }

    /// Unit right-hand side scaled by `β₁`.
    pub fn rhs(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.k() + 1);
        b[0] = self.beta1;
        b
    }

    /// Dense normal matrix `MᵀM + λ²L₁ᵀL₁ + α²L₂ᵀL₂` (for oracles and diagnostics).
    pub fn normal_matrix(&self, lambda: f64, alpha: f64) -> DMatrix<f64> {
        let k = self.k();
        let smooth = match &self.smooth_factor {
            Some(l) => l.transpose() * l,
            None => DMatrix::identity(k, k),
        };
        self.m.transpose() * &self.m
            + smooth * (lambda * lambda)
            + self.sparse_factor.transpose() * &self.sparse_factor * (alpha * alpha)
    }
}

/// Solution, residual and influence trace at one parameter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEval {
    pub f: DVector<f64>,
    pub residual: DVector<f64>,
    /// `tr(M C)` with `C = (MᵀM + λ²L₁ᵀL₁ + α²L₂ᵀL₂)⁻¹ Mᵀ`.
    pub trace: f64,
}

impl ProjectedEval {
    pub fn residual_norm_sq(&self) -> f64 {
        self.residual.norm_squared()
    }
}

/// Triangular factor of the stacked matrix `[M; λL₁; αL₂]`.
fn stacked_factor(
    sys: &ProjectedSystem,
    lambda: f64,
    alpha: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(lambda >= 0.0 && alpha >= 0.0) || !lambda.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "regularization parameters must be finite and >= 0, got ({lambda}, {alpha})"
        )));
    }
    let k = sys.k();
    let l1_rows = sys.smooth_factor.as_ref().map_or(k, |l| l.nrows());
    let l2_rows = sys.sparse_factor.nrows();
    let rows = k + 1 + l1_rows + l2_rows;
    let mut s = DMatrix::zeros(rows, k);
    s.view_mut((0, 0), (k + 1, k)).copy_from(&sys.m);
    match &sys.smooth_factor {
        Some(l) => s
            .view_mut((k + 1, 0), (l1_rows, k))
            .copy_from(&(l * lambda)),
        None => {
            for i in 0..k {
                s[(k + 1 + i, i)] = lambda;
            }
        }
    }
    s.view_mut((k + 1 + l1_rows, 0), (l2_rows, k))
        .copy_from(&(&sys.sparse_factor * alpha));
    let mut b = DVector::zeros(rows);
    b[0] = sys.beta1;
    let qr = s.qr();
    let r = qr.r();
    let qtb = qr.q().tr_mul(&b);
    let diag_max = r.diagonal().amax();
    let diag_min = r
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |a, &x| a.min(x.abs()));
    if k > 0 && !(diag_min > SINGULAR_PIVOT * diag_max.max(sys.beta1 * f64::EPSILON)) {
        return Err(Error::RankDeficient);
    }
    Ok((r, qtb))
}

/// Solves the projected problem by a QR factorization of the stacked rows.
pub fn solve_projected(sys: &ProjectedSystem, lambda: f64, alpha: f64) -> Result<DVector<f64>> {
    Ok(evaluate(sys, lambda, alpha)?.f)
}

/// Solution, residual and influence trace from a single factorization.
pub fn evaluate(sys: &ProjectedSystem, lambda: f64, alpha: f64) -> Result<ProjectedEval> {
    let k = sys.k();
    if k == 0 {
        return Ok(ProjectedEval {
            f: DVector::zeros(0),
            residual: -sys.rhs(),
            trace: 0.0,
        });
    }
    let (r, qtb) = stacked_factor(sys, lambda, alpha)?;
    let f = r
        .solve_upper_triangular(&qtb.rows(0, k).into_owned())
        .ok_or(Error::RankDeficient)?;
    // tr(M C) = ‖M R⁻¹‖_F² since the stacked normal matrix is RᵀR
    let mrinv_t = r
        .transpose()
        .solve_lower_triangular(&sys.m.transpose())
        .ok_or(Error::RankDeficient)?;
    let trace = mrinv_t.norm_squared();
    let residual = projected_residual(sys, &f)?;
    Ok(ProjectedEval { f, residual, trace })
}

/// `M f − β₁e₁`.
pub fn projected_residual(sys: &ProjectedSystem, f: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("projected_residual", sys.k(), f.len())?;
    let mut r = &sys.m * f;
    r[0] -= sys.beta1;
    Ok(r)
}

/// `tr(M_k C_k(λ, α))`.
pub fn influence_trace(sys: &ProjectedSystem, lambda: f64, alpha: f64) -> Result<f64> {
    Ok(evaluate(sys, lambda, alpha)?.trace)
}

/// Access to the solution bases of a Krylov process.
pub trait SolutionBasis {
    fn k(&self) -> usize;
    fn n(&self) -> usize;
    /// Projected system for the current iteration.
    fn projected(&self) -> ProjectedSystem;
    /// Columns mapping coefficients to `s₁ − μ₁`.
    fn smooth_basis(&self) -> DMatrix<f64>;
    /// Columns mapping coefficients to `s₂ − μ₂`.
    fn sparse_basis(&self) -> DMatrix<f64>;
}

impl SolutionBasis for FggkState {
    fn k(&self) -> usize {
        FggkState::k(self)
    }
    fn n(&self) -> usize {
        FggkState::n(self)
    }
    fn projected(&self) -> ProjectedSystem {
        ProjectedSystem {
            m: self.m_matrix(),
            smooth_factor: None,
            sparse_factor: self.rw().clone(),
            beta1: self.beta1(),
            m_obs: self.m_obs(),
        }
    }
    fn smooth_basis(&self) -> DMatrix<f64> {
        match self.mode() {
            Mode::SparseOnly => DMatrix::zeros(self.n(), FggkState::k(self)),
            _ => self.qv_matrix(),
        }
    }
    fn sparse_basis(&self) -> DMatrix<f64> {
        self.w_matrix()
    }
}

impl SolutionBasis for AltFggkState {
    fn k(&self) -> usize {
        AltFggkState::k(self)
    }
    fn n(&self) -> usize {
        AltFggkState::n(self)
    }
    fn projected(&self) -> ProjectedSystem {
        let k = AltFggkState::k(self);
        let n = AltFggkState::n(self);
        let z = self.z_matrix();
        let vx = z.rows(0, n).into_owned();
        let gram = vx.transpose() * self.q_vx_matrix();
        let gram = (&gram + gram.transpose()) * 0.5;
        let eig = SymmetricEigen::new(gram);
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let smooth = DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        let sparse = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            z.rows(n, n).into_owned().qr().r()
        };
        ProjectedSystem {
            m: self.g_matrix(),
            smooth_factor: Some(smooth),
            sparse_factor: sparse,
            beta1: self.beta1(),
            m_obs: self.m_obs(),
        }
    }
    fn smooth_basis(&self) -> DMatrix<f64> {
        self.q_vx_matrix()
    }
    fn sparse_basis(&self) -> DMatrix<f64> {
        let n = AltFggkState::n(self);
        self.z_matrix().rows(n, n).into_owned()
    }
}

/// Lifted solution components.
#[derive(Debug, Clone, PartialEq)]
pub struct Lifted {
    pub s1: DVector<f64>,
    pub s2: DVector<f64>,
    pub s: DVector<f64>,
}

/// `s₁ = μ₁ + Q V_k f`, `s₂ = μ₂ + W_k f`, `s = s₁ + s₂`.
///
/// Uses the `Q V_k` products stored by the process, so `Q` is not applied again.
pub fn lift_solution<B: SolutionBasis + ?Sized>(
    basis: &B,
    f: &DVector<f64>,
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
) -> Result<Lifted> {
    check_dim("lift coefficients", basis.k(), f.len())?;
    check_dim("lift mu1", basis.n(), mu1.len())?;
    check_dim("lift mu2", basis.n(), mu2.len())?;
    let s1 = mu1 + basis.smooth_basis() * f;
    let s2 = mu2 + basis.sparse_basis() * f;
    let s = &s1 + &s2;
    Ok(Lifted { s1, s2, s })
}
