//! Flexible generalized Golub–Kahan process.
//!
//! After `k` steps the state satisfies `Â Q̂ Z_k = U_{k+1} M_k` with
//! `Z_k = [V_k; W_k]`, `Â = [A A]`, `Q̂ = blkdiag(Q, I)`, and, once the solution
//! basis is extended by one vector, `Aᵀ R⁻¹ U_{k+1} = V_{k+1} T_{k+1}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::columns_to_matrix;
use crate::operators::{LinearMap, SpdMap};

/// Default breakdown threshold.
pub const DEFAULT_TAU_BREAK: f64 = 1e-12;

/// Which solution components the basis expansion carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    SmoothAndSparse,
    /// `w_k = 0`: the generalized Golub–Kahan process for the smooth part only.
    SmoothOnly,
    /// `Q` is treated as the identity and the `Q v_k` contribution is dropped:
    /// a flexible Golub–Kahan process for the sparse part only.
    SparseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FggkOptions {
    pub mode: Mode,
    pub reorthogonalize: bool,
    pub tau_break: f64,
}

impl Default for FggkOptions {
    fn default() -> Self {
        Self {
            mode: Mode::SmoothAndSparse,
            reorthogonalize: true,
            tau_break: DEFAULT_TAU_BREAK,
        }
    }
}

/// Operators driving the process. `rinv` applies `R⁻¹`.
#[derive(Clone, Copy)]
pub struct FggkOps<'a> {
    pub a: &'a dyn LinearMap,
    pub rinv: &'a dyn SpdMap,
    pub q: &'a dyn SpdMap,
}

impl FggkOps<'_> {
    fn check(&self) -> Result<()> {
        check_dim("R⁻¹ dimension", self.a.nrows(), self.rinv.dim())?;
        check_dim("Q dimension", self.a.ncols(), self.q.dim())
    }
}

/// Operator applications performed by the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    pub a_forward: usize,
    pub a_adjoint: usize,
    pub q: usize,
    pub rinv: usize,
    pub dinv: usize,
}

/// Result of one expansion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// `m_{k+1,k}` vanished: the data residual lies in the current subspace.
    Breakdown,
}

/// Thin QR factors after appending a column.
#[derive(Debug, Clone, PartialEq)]
pub struct QrUpdate {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub rank_deficient: bool,
}

/// Appends `w` to the thin QR factorization `QW RW` by Gram–Schmidt with one
/// reorthogonalization pass.
///
/// When the new column is numerically dependent (`β ≤ 1e-12‖w‖`) the `β` entry
/// is kept as computed, the new `Q` column is zero, and the flag is raised.
pub fn qr_update(qw: &DMatrix<f64>, rw: &DMatrix<f64>, w: &DVector<f64>) -> Result<QrUpdate> {
    let k = qw.ncols();
    check_dim(
        "qr_update rows",
        qw.nrows().max(if k == 0 { w.len() } else { 0 }),
        w.len(),
    )?;
    check_dim("qr_update R size", k, rw.nrows())?;
    let mut coeffs = DVector::zeros(k);
    let mut resid = w.clone();
    for _ in 0..2 {
        if k == 0 {
            break;
        }
        let c = qw.tr_mul(&resid);
        resid -= qw * &c;
        coeffs += c;
    }
    let beta = resid.norm();
    let rank_deficient = beta <= 1e-12 * w.norm();
    let new_col = if rank_deficient || beta == 0.0 {
        DVector::zeros(w.len())
    } else {
        resid / beta
    };
    let mut q = qw.clone().insert_column(k, 0.0);
    q.set_column(k, &new_col);
    let mut r = DMatrix::zeros(k + 1, k + 1);
    r.view_mut((0, 0), (k, k)).copy_from(rw);
    r.view_mut((0, k), (k, 1)).copy_from(&coeffs);
    r[(k, k)] = beta;
    Ok(QrUpdate {
        q,
        r,
        rank_deficient,
    })
}

/// Growing bases and factors of the process.
#[derive(Debug, Clone)]
pub struct FggkState {
    opts: FggkOptions,
    n: usize,
    m_obs: usize,
    beta1: f64,
    u: Vec<DVector<f64>>,
    rinv_u: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    qv: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    m_cols: Vec<Vec<f64>>,
    t_cols: Vec<Vec<f64>>,
    qw: DMatrix<f64>,
    rw: DMatrix<f64>,
    rank_deficient: bool,
    breakdown: bool,
    counts: OpCounts,
}

impl FggkState {
    /// Starts the process from `u₁ = c/‖c‖_{R⁻¹}`.
    ///
    /// The `R⁻¹ c` application made here is not included in [`FggkState::counts`].
    pub fn init(ops: FggkOps<'_>, c: &DVector<f64>, opts: FggkOptions) -> Result<Self> {
        ops.check()?;
        check_dim("c length", ops.a.nrows(), c.len())?;
        let rinv_c = ops.rinv.apply(c);
        let beta1_sq = c.dot(&rinv_c);
        if !(beta1_sq > 0.0) {
            if c.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroResidual);
            }
            return Err(Error::Definiteness(format!("‖c‖²_R⁻¹ = {beta1_sq:e}")));
        }
        let beta1 = beta1_sq.sqrt();
        let n = ops.a.ncols();
        Ok(Self {
            opts,
            n,
            m_obs: c.len(),
            beta1,
            u: vec![c / beta1],
            rinv_u: vec![rinv_c / beta1],
            v: Vec::new(),
            qv: Vec::new(),
            w: Vec::new(),
            m_cols: Vec::new(),
            t_cols: Vec::new(),
            qw: DMatrix::zeros(n, 0),
            rw: DMatrix::zeros(0, 0),
            rank_deficient: false,
            breakdown: false,
            counts: OpCounts::default(),
        })
    }

    /// Number of completed steps.
    pub fn k(&self) -> usize {
        self.m_cols.len()
    }
    pub fn beta1(&self) -> f64 {
        self.beta1
    }
    pub fn m_obs(&self) -> usize {
        self.m_obs
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn mode(&self) -> Mode {
        self.opts.mode
    }
    pub fn counts(&self) -> OpCounts {
        self.counts
    }
    pub fn is_broken_down(&self) -> bool {
        self.breakdown
    }
    /// Set when an appended `w` was numerically dependent on earlier ones.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// One step with the current preconditioner `D_k⁻¹`.
    pub fn step(&mut self, ops: FggkOps<'_>, dinv: &dyn SpdMap) -> Result<StepOutcome> {
        if self.breakdown {
            return Err(Error::InvalidParameter(
                "process already terminated by breakdown".into(),
            ));
        }
        check_dim("D⁻¹ dimension", self.n, dinv.dim())?;
        if self.v.len() == self.k() {
            self.extend_v(ops)?;
        }
        let k = self.k();
        let vk = &self.v[k];

        let wk = match self.opts.mode {
            Mode::SmoothOnly => DVector::zeros(self.n),
            _ => {
                self.counts.dinv += 1;
                dinv.apply(vk)
            }
        };
        let (qvk, dir) = match self.opts.mode {
            Mode::SparseOnly => (vk.clone(), wk.clone()),
            _ => {
                self.counts.q += 1;
                let qvk = ops.q.apply(vk);
                let dir = &qvk + &wk;
                (qvk, dir)
            }
        };
        self.counts.a_forward += 1;
        let mut h = ops.a.apply(&dir);

        let mut coeffs = vec![0.0; k + 2];
        let passes = if self.opts.reorthogonalize { 2 } else { 1 };
        for _ in 0..passes {
            for (j, (uj, ruj)) in self.u.iter().zip(self.rinv_u.iter()).enumerate() {
                let c = h.dot(ruj);
                h.axpy(-c, uj, 1.0);
                coeffs[j] += c;
            }
        }
        self.counts.rinv += 1;
        let rinv_h = ops.rinv.apply(&h);
        let norm = h.dot(&rinv_h).max(0.0).sqrt();

        let outcome = if norm <= self.opts.tau_break * self.beta1 {
            self.breakdown = true;
            coeffs[k + 1] = 0.0;
            StepOutcome::Breakdown
        } else {
            coeffs[k + 1] = norm;
            self.u.push(h / norm);
            self.rinv_u.push(rinv_h / norm);
            StepOutcome::Continue
        };
        self.m_cols.push(coeffs);

        if self.opts.mode != Mode::SmoothOnly {
            let upd = qr_update(&self.qw, &self.rw, &wk)?;
            self.rank_deficient |= upd.rank_deficient;
            self.qw = upd.q;
            self.rw = upd.r;
        } else {
            self.qw = self.qw.clone().insert_column(k, 0.0);
            self.rw = self.rw.clone().insert_row(k, 0.0).insert_column(k, 0.0);
        }
        self.qv.push(qvk);
        self.w.push(wk);
        Ok(outcome)
    }

    /// Computes the next solution-space vector `v` from the newest `u`,
    /// extending `V` and `T` by one.
    pub fn extend_v(&mut self, ops: FggkOps<'_>) -> Result<()> {
        if self.v.len() >= self.u.len() {
            return Err(Error::InvalidParameter(
                "no observation vector to extend from".into(),
            ));
        }
        let idx = self.v.len();
        self.counts.a_adjoint += 1;
        let mut h = ops.a.apply_adjoint(&self.rinv_u[idx]);
        let mut coeffs = vec![0.0; idx + 1];
        let passes = if self.opts.reorthogonalize { 2 } else { 1 };
        for _ in 0..passes {
            for (j, coeff) in coeffs.iter_mut().enumerate().take(idx) {
                let c = h.dot(&self.qv[j]);
                h.axpy(-c, &self.v[j], 1.0);
                *coeff += c;
            }
        }
        let norm = match self.opts.mode {
            Mode::SparseOnly => h.norm(),
            _ => {
                self.counts.q += 1;
                h.dot(&ops.q.apply(&h)).max(0.0).sqrt()
            }
        };
        let before = (coeffs[..idx].iter().map(|c| c * c).sum::<f64>() + norm * norm).sqrt();
        if !(norm > self.opts.tau_break * before) || norm == 0.0 {
            return Err(Error::VBreakdown {
                k: idx + 1,
                value: norm,
            });
        }
        coeffs[idx] = norm;
        self.v.push(h / norm);
        self.t_cols.push(coeffs);
        Ok(())
    }

    /// `U` with `k+1` columns, or `k` after a breakdown.
    pub fn u_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.u, self.m_obs)
    }
    /// `R⁻¹ U`.
    pub fn rinv_u_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.rinv_u, self.m_obs)
    }
    /// All computed solution vectors (`k`, or `k+1` after [`FggkState::extend_v`]).
    pub fn v_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.v, self.n)
    }
    /// `V_k` restricted to the first `k` columns.
    pub fn v_k(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.v[..self.k()], self.n)
    }
    /// `Q V_k` as stored during the steps.
    pub fn qv_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.qv, self.n)
    }
    pub fn w_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.w, self.n)
    }
    /// `Z_k = [V_k; W_k]`.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut z = DMatrix::zeros(2 * self.n, k);
        z.view_mut((0, 0), (self.n, k)).copy_from(&self.v_k());
        z.view_mut((self.n, 0), (self.n, k))
            .copy_from(&self.w_matrix());
        z
    }
    /// Hessenberg factor `M_k`, `(k+1) × k`.
    pub fn m_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k + 1, k, |i, j| {
            self.m_cols[j].get(i).copied().unwrap_or(0.0)
        })
    }
    /// Upper triangular `T`, square of size `V.ncols()`.
    pub fn t_matrix(&self) -> DMatrix<f64> {
        let s = self.t_cols.len();
        DMatrix::from_fn(s, s, |i, j| self.t_cols[j].get(i).copied().unwrap_or(0.0))
    }
    pub fn qw(&self) -> &DMatrix<f64> {
        &self.qw
    }
    pub fn rw(&self) -> &DMatrix<f64> {
        &self.rw
    }
}

/// Monomial Krylov basis `[c, Ec, …, E^{k−1}c]` with `E = A(Q + D̂⁻¹)AᵀR⁻¹`.
pub fn fixed_d_krylov_basis(
    ops: FggkOps<'_>,
    dhat_inv: &dyn SpdMap,
    c: &DVector<f64>,
    k: usize,
) -> Result<DMatrix<f64>> {
    ops.check()?;
    check_dim("D̂⁻¹ dimension", ops.a.ncols(), dhat_inv.dim())?;
    check_dim("c length", ops.a.nrows(), c.len())?;
    let mut basis = DMatrix::zeros(c.len(), k);
    let mut col = c.clone();
    for j in 0..k {
        basis.set_column(j, &col);
        let g = ops.a.apply_adjoint(&ops.rinv.apply(&col));
        col = ops.a.apply(&(ops.q.apply(&g) + dhat_inv.apply(&g)));
    }
    Ok(basis)
}

/// Alternative process on stacked vectors `v ∈ R^{2n}` with `z_k = blkdiag(I, D_k⁻¹) v_k`.
///
/// Satisfies `Â Q̂ Z_k = U_{k+1} G_k` and `Âᵀ R⁻¹ U_{k+1} = V_{k+1} H_{k+1}` with
/// `Uᵀ R⁻¹ U = I` and `Vᵀ Q̂ V = I`.
#[derive(Debug, Clone)]
pub struct AltFggkState {
    opts: FggkOptions,
    n: usize,
    m_obs: usize,
    beta1: f64,
    u: Vec<DVector<f64>>,
    rinv_u: Vec<DVector<f64>>,
    /// Stacked `v_j`.
    v: Vec<DVector<f64>>,
    /// Stacked `Q̂ v_j = [Q v^x; v^y]`.
    qhat_v: Vec<DVector<f64>>,
    /// Stacked `z_j`.
    z: Vec<DVector<f64>>,
    g_cols: Vec<Vec<f64>>,
    h_cols: Vec<Vec<f64>>,
    breakdown: bool,
    counts: OpCounts,
}

impl AltFggkState {
    pub fn init(ops: FggkOps<'_>, c: &DVector<f64>, opts: FggkOptions) -> Result<Self> {
        let base = FggkState::init(ops, c, opts)?;
        Ok(Self {
            opts,
            n: base.n,
            m_obs: base.m_obs,
            beta1: base.beta1,
            u: base.u,
            rinv_u: base.rinv_u,
            v: Vec::new(),
            qhat_v: Vec::new(),
            z: Vec::new(),
            g_cols: Vec::new(),
            h_cols: Vec::new(),
            breakdown: false,
            counts: OpCounts::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.g_cols.len()
    }
    pub fn beta1(&self) -> f64 {
        self.beta1
    }
    pub fn m_obs(&self) -> usize {
        self.m_obs
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn counts(&self) -> OpCounts {
        self.counts
    }
    pub fn is_broken_down(&self) -> bool {
        self.breakdown
    }

    pub fn step(&mut self, ops: FggkOps<'_>, dinv: &dyn SpdMap) -> Result<StepOutcome> {
        if self.breakdown {
            return Err(Error::InvalidParameter(
                "process already terminated by breakdown".into(),
            ));
        }
        check_dim("D⁻¹ dimension", self.n, dinv.dim())?;
        if self.v.len() == self.k() {
            self.extend_v(ops)?;
        }
        let n = self.n;
        let k = self.k();
        let vk = &self.v[k];
        let vx = vk.rows(0, n).into_owned();
        let vy = vk.rows(n, n).into_owned();
        self.counts.dinv += 1;
        let zy = dinv.apply(&vy);
        self.counts.q += 1;
        let qvx = ops.q.apply(&vx);
        self.counts.a_forward += 1;
        let mut h = ops.a.apply(&(&qvx + &zy));

        let mut coeffs = vec![0.0; k + 2];
        let passes = if self.opts.reorthogonalize { 2 } else { 1 };
        for _ in 0..passes {
            for (j, (uj, ruj)) in self.u.iter().zip(self.rinv_u.iter()).enumerate() {
                let c = h.dot(ruj);
                h.axpy(-c, uj, 1.0);
                coeffs[j] += c;
            }
        }
        self.counts.rinv += 1;
        let rinv_h = ops.rinv.apply(&h);
        let norm = h.dot(&rinv_h).max(0.0).sqrt();
        let outcome = if norm <= self.opts.tau_break * self.beta1 {
            self.breakdown = true;
            StepOutcome::Breakdown
        } else {
            coeffs[k + 1] = norm;
            self.u.push(h / norm);
            self.rinv_u.push(rinv_h / norm);
            StepOutcome::Continue
        };
        self.g_cols.push(coeffs);

        let mut qhat = DVector::zeros(2 * n);
        qhat.rows_mut(0, n).copy_from(&qvx);
        qhat.rows_mut(n, n).copy_from(&vy);
        self.qhat_v.push(qhat);
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(&vx);
        z.rows_mut(n, n).copy_from(&zy);
        self.z.push(z);
        Ok(outcome)
    }

    pub fn extend_v(&mut self, ops: FggkOps<'_>) -> Result<()> {
        if self.v.len() >= self.u.len() {
            return Err(Error::InvalidParameter(
                "no observation vector to extend from".into(),
            ));
        }
        let n = self.n;
        let idx = self.v.len();
        self.counts.a_adjoint += 1;
        let g = ops.a.apply_adjoint(&self.rinv_u[idx]);
        let mut h = DVector::zeros(2 * n);
        h.rows_mut(0, n).copy_from(&g);
        h.rows_mut(n, n).copy_from(&g);
        let mut coeffs = vec![0.0; idx + 1];
        let passes = if self.opts.reorthogonalize { 2 } else { 1 };
        for _ in 0..passes {
            for (j, coeff) in coeffs.iter_mut().enumerate().take(idx) {
                let c = h.dot(&self.qhat_v[j]);
                h.axpy(-c, &self.v[j], 1.0);
                *coeff += c;
            }
        }
        self.counts.q += 1;
        let hx = h.rows(0, n).into_owned();
        let hy = h.rows(n, n);
        let norm = (hx.dot(&ops.q.apply(&hx)) + hy.norm_squared())
            .max(0.0)
            .sqrt();
        let before = (coeffs[..idx].iter().map(|c| c * c).sum::<f64>() + norm * norm).sqrt();
        if !(norm > self.opts.tau_break * before) || norm == 0.0 {
            return Err(Error::VBreakdown {
                k: idx + 1,
                value: norm,
            });
        }
        coeffs[idx] = norm;
        self.v.push(h / norm);
        self.h_cols.push(coeffs);
        Ok(())
    }

    pub fn u_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.u, self.m_obs)
    }
    /// Stacked `V`, `2n` rows.
    pub fn v_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.v, 2 * self.n)
    }
    /// Stacked `Z_k`, `2n × k`.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(&self.z, 2 * self.n)
    }
    /// Top block of `Q̂ V_k`, i.e. `Q V^x_k`.
    pub fn q_vx_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut out = DMatrix::zeros(self.n, k);
        for (j, col) in self.qhat_v.iter().enumerate() {
            out.set_column(j, &col.rows(0, self.n));
        }
        out
    }
    pub fn g_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k + 1, k, |i, j| {
            self.g_cols[j].get(i).copied().unwrap_or(0.0)
        })
    }
    pub fn h_matrix(&self) -> DMatrix<f64> {
        let s = self.h_cols.len();
        DMatrix::from_fn(s, s, |i, j| self.h_cols[j].get(i).copied().unwrap_or(0.0))
    }
}
