//! Matrix-free linear operators and weighted inner products.
//!
//! Every solver in the crate talks to the forward model and to the
//! covariances only through [`LinearMap`] and [`SpdMap`]. Dense matrices are
//! one implementation among several.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

/// A linear map `R^ncols -> R^nrows` with its adjoint.
pub trait LinearMap: Send + Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64>;
}

/// A symmetric positive definite operator.
///
/// `apply_sqrt` applies some factor `L` with `L Lᵀ = M` (a Cholesky factor for
/// dense operators, the elementwise square root for diagonal ones). Optional
/// capabilities report [`Error::Unsupported`] when absent.
pub trait SpdMap: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;

    fn apply_inverse(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Err(Error::Unsupported("apply_inverse"))
    }

    /// Whether [`SpdMap::apply_inverse`] is available.
    fn has_inverse(&self) -> bool {
        false
    }

    fn apply_sqrt(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Err(Error::Unsupported("apply_sqrt"))
    }

    /// Diagonal entries, when the operator is diagonal.
    fn diagonal(&self) -> Option<DVector<f64>> {
        None
    }
}

impl<T: LinearMap + ?Sized> LinearMap for Arc<T> {
    fn nrows(&self) -> usize {
        (**self).nrows()
    }
    fn ncols(&self) -> usize {
        (**self).ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).apply(x)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        (**self).apply_adjoint(y)
    }
}

impl<T: LinearMap + ?Sized> LinearMap for &T {
    fn nrows(&self) -> usize {
        (**self).nrows()
    }
    fn ncols(&self) -> usize {
        (**self).ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).apply(x)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        (**self).apply_adjoint(y)
    }
}

impl<T: SpdMap + ?Sized> SpdMap for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).apply(x)
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).apply_inverse(x)
    }
    fn has_inverse(&self) -> bool {
        (**self).has_inverse()
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).apply_sqrt(x)
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        (**self).diagonal()
    }
}

impl<T: SpdMap + ?Sized> SpdMap for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).apply(x)
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).apply_inverse(x)
    }
    fn has_inverse(&self) -> bool {
        (**self).has_inverse()
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).apply_sqrt(x)
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        (**self).diagonal()
    }
}

/// Dense matrix as a linear map.
#[derive(Debug, Clone)]
pub struct DenseMap {
    mat: DMatrix<f64>,
}

impl DenseMap {
    pub fn new(mat: DMatrix<f64>) -> Self {
        Self { mat }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }
}

impl LinearMap for DenseMap {
    fn nrows(&self) -> usize {
        self.mat.nrows()
    }
    fn ncols(&self) -> usize {
        self.mat.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mat * x
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.mat.tr_mul(y)
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[(i, j)] += v;
            }
        }
        out
    }
}

impl LinearMap for CsrMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum::<f64>()),
        )
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                out[j] += v * yi;
            }
        }
        out
    }
}

/// Block-diagonal composition `blkdiag(A_1, ..., A_p)`.
pub struct BlockDiagMap {
    blocks: Vec<Arc<dyn LinearMap>>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
}

impl BlockDiagMap {
    pub fn new(blocks: Vec<Arc<dyn LinearMap>>) -> Self {
        let mut row_offsets = vec![0];
        let mut col_offsets = vec![0];
        for b in &blocks {
            row_offsets.push(row_offsets.last().unwrap() + b.nrows());
            col_offsets.push(col_offsets.last().unwrap() + b.ncols());
        }
        Self {
            blocks,
            row_offsets,
            col_offsets,
        }
    }

    pub fn blocks(&self) -> &[Arc<dyn LinearMap>] {
        &self.blocks
    }
}

impl LinearMap for BlockDiagMap {
    fn nrows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }
    fn ncols(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows());
        for (b, block) in self.blocks.iter().enumerate() {
            let (c0, c1) = (self.col_offsets[b], self.col_offsets[b + 1]);
            let xb = DVector::from_column_slice(&x.as_slice()[c0..c1]);
            let yb = block.apply(&xb);
            out.rows_mut(self.row_offsets[b], yb.len()).copy_from(&yb);
        }
        out
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols());
        for (b, block) in self.blocks.iter().enumerate() {
            let (r0, r1) = (self.row_offsets[b], self.row_offsets[b + 1]);
            let yb = DVector::from_column_slice(&y.as_slice()[r0..r1]);
            let xb = block.apply_adjoint(&yb);
            out.rows_mut(self.col_offsets[b], xb.len()).copy_from(&xb);
        }
        out
    }
}

/// The augmented map `[A A] : R^{2n} -> R^m`.
pub struct AugmentedMap<L> {
    inner: L,
}

impl<L: LinearMap> AugmentedMap<L> {
    pub fn new(inner: L) -> Self {
        Self { inner }
    }
}

impl<L: LinearMap> LinearMap for AugmentedMap<L> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        2 * self.inner.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.ncols();
        let sum = x.rows(0, n) + x.rows(n, n);
        self.inner.apply(&sum)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.ncols();
        let half = self.inner.apply_adjoint(y);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&half);
        out.rows_mut(n, n).copy_from(&half);
        out
    }
}

/// Identity operator of a given size.
#[derive(Debug, Clone, Copy)]
pub struct IdentitySpd(pub usize);

impl SpdMap for IdentitySpd {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.clone())
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.clone())
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(DVector::from_element(self.0, 1.0))
    }
}

/// Diagonal SPD operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagSpd {
    d: DVector<f64>,
}

impl DiagSpd {
    pub fn values(&self) -> &DVector<f64> {
        &self.d
    }

    /// The diagonal operator with reciprocal entries.
    pub fn inverse(&self) -> DiagSpd {
        DiagSpd {
            d: self.d.map(|v| 1.0 / v),
        }
    }
}

/// Diagonal operator from strictly positive entries.
pub fn diag_map(dvals: DVector<f64>) -> Result<DiagSpd> {
    if let Some((i, v)) = dvals
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
    {
        return Err(Error::Definiteness(format!(
            "diagonal entry {i} is {v}, expected a finite positive value"
        )));
    }
    Ok(DiagSpd { d: dvals })
}

impl SpdMap for DiagSpd {
    fn dim(&self) -> usize {
        self.d.len()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.d.component_mul(x)
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.component_div(&self.d))
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.d.map(f64::sqrt).component_mul(x))
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(self.d.clone())
    }
}

/// Dense SPD matrix with a cached Cholesky factor.
#[derive(Clone)]
pub struct DenseSpd {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for DenseSpd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseSpd")
            .field("dim", &self.mat.nrows())
            .finish()
    }
}

impl DenseSpd {
    /// Factorizes `mat`; fails with an eigenvalue estimate when it is not SPD.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::Dimension {
                context: "DenseSpd (square)",
                expected: mat.nrows(),
                got: mat.ncols(),
            });
        }
        match Cholesky::new(mat.clone()) {
            Some(chol) => Ok(Self { mat, chol }),
            None => {
                let sym = (&mat + mat.transpose()) * 0.5;
                let min_eigenvalue = sym.symmetric_eigenvalues().min();
                Err(Error::Factorization { min_eigenvalue })
            }
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = M`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

impl SpdMap for DenseSpd {
    fn dim(&self) -> usize {
        self.mat.nrows()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mat * x
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("DenseSpd::apply_inverse", self.dim(), x.len())?;
        Ok(self.chol.solve(x))
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("DenseSpd::apply_sqrt", self.dim(), x.len())?;
        Ok(self.chol.l_dirty().lower_triangle() * x)
    }
}

/// Applies the inverse of an SPD operator as an SPD operator (`R⁻¹` from `R`).
pub struct InverseSpd<S> {
    inner: S,
}

impl<S: SpdMap> InverseSpd<S> {
    /// Fails when `inner` cannot apply its inverse.
    pub fn new(inner: S) -> Result<Self> {
        if !inner.has_inverse() {
            return Err(Error::Unsupported("apply_inverse"));
        }
        Ok(Self { inner })
    }
}

impl<S: SpdMap> SpdMap for InverseSpd<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner
            .apply_inverse(x)
            .expect("inverse availability checked at construction")
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.apply(x))
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        self.inner.diagonal().map(|d| d.map(|v| 1.0 / v))
    }
}

/// `scale · M` for a positive scale.
pub struct ScaledSpd<S> {
    inner: S,
    scale: f64,
}

impl<S: SpdMap> ScaledSpd<S> {
    pub fn new(inner: S, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Definiteness(format!(
                "scale {scale} is not positive"
            )));
        }
        Ok(Self { inner, scale })
    }
}

impl<S: SpdMap> SpdMap for ScaledSpd<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.apply(x) * self.scale
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.apply_inverse(x)? / self.scale)
    }
    fn has_inverse(&self) -> bool {
        self.inner.has_inverse()
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.apply_sqrt(x)? * self.scale.sqrt())
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        self.inner.diagonal().map(|d| d * self.scale)
    }
}

/// `blkdiag(M_1, M_2)`; with `M_2 = I` this is the augmented weight `Q̂`.
pub struct BlockDiagSpd<A, B> {
    first: A,
    second: B,
}

impl<A: SpdMap, B: SpdMap> BlockDiagSpd<A, B> {
    pub fn new(first: A, second: B) -> Self {
        Self { first, second }
    }
}

impl<A: SpdMap, B: SpdMap> SpdMap for BlockDiagSpd<A, B> {
    fn dim(&self) -> usize {
        self.first.dim() + self.second.dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n1, n2) = (self.first.dim(), self.second.dim());
        let mut out = DVector::zeros(n1 + n2);
        out.rows_mut(0, n1)
            .copy_from(&self.first.apply(&x.rows(0, n1).into_owned()));
        out.rows_mut(n1, n2)
            .copy_from(&self.second.apply(&x.rows(n1, n2).into_owned()));
        out
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (n1, n2) = (self.first.dim(), self.second.dim());
        let mut out = DVector::zeros(n1 + n2);
        out.rows_mut(0, n1)
            .copy_from(&self.first.apply_inverse(&x.rows(0, n1).into_owned())?);
        out.rows_mut(n1, n2)
            .copy_from(&self.second.apply_inverse(&x.rows(n1, n2).into_owned())?);
        Ok(out)
    }
    fn has_inverse(&self) -> bool {
        self.first.has_inverse() && self.second.has_inverse()
    }
}

/// Kronecker-structured operator `scale · (Q_t ⊗ Q_s)`.
pub struct KroneckerSpd<T, S> {
    qt: T,
    qs: S,
    scale: f64,
}

impl<T: SpdMap, S: SpdMap> KroneckerSpd<T, S> {
    pub fn new(qt: T, qs: S, scale: f64) -> Self {
        Self { qt, qs, scale }
    }
}

impl<T: SpdMap, S: SpdMap> SpdMap for KroneckerSpd<T, S> {
    fn dim(&self) -> usize {
        self.qt.dim() * self.qs.dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        kron_apply(&self.qt, &self.qs, x).expect("dimension checked by caller") * self.scale
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        // (L_t ⊗ L_s)(L_t ⊗ L_s)ᵀ = Q_t ⊗ Q_s
        let (r, g) = (self.qt.dim(), self.qs.dim());
        check_dim("KroneckerSpd::apply_sqrt", r * g, x.len())?;
        let out = kron_columns(
            r,
            g,
            x,
            |v| self.qs.apply_sqrt(v),
            |v| self.qt.apply_sqrt(v),
        )?;
        Ok(out * self.scale.sqrt())
    }
}

/// `(Q_t ⊗ Q_s) x` as `vec(Q_s X Q_tᵀ)` with the spatial index fastest.
pub fn kron_apply(qt: &dyn SpdMap, qs: &dyn SpdMap, x: &DVector<f64>) -> Result<DVector<f64>> {
    let (r, g) = (qt.dim(), qs.dim());
    check_dim("kron_apply", r * g, x.len())?;
    kron_columns(r, g, x, |v| Ok(qs.apply(v)), |v| Ok(qt.apply(v)))
}

/// `vec(S · X · Tᵀ)` for `X` the g×r matricization of `x`.
fn kron_columns(
    r: usize,
    g: usize,
    x: &DVector<f64>,
    spatial: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    temporal: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DVector<f64>> {
    let xm = DMatrix::from_column_slice(g, r, x.as_slice());
    let mut sx = DMatrix::zeros(g, r);
    for j in 0..r {
        sx.set_column(j, &spatial(&xm.column(j).into_owned())?);
    }
    // (S X) Tᵀ: apply T to every row of S X.
    let mut out = DMatrix::zeros(g, r);
    for i in 0..g {
        let row = sx.row(i).transpose();
        out.set_row(i, &temporal(&row)?.transpose());
    }
    Ok(DVector::from_column_slice(out.as_slice()))
}

/// `‖x‖_M = sqrt(xᵀ M x)`.
pub fn weighted_norm(x: &DVector<f64>, m: &dyn SpdMap) -> Result<f64> {
    check_dim("weighted_norm", m.dim(), x.len())?;
    let q = x.dot(&m.apply(x));
    let scale = x.norm_squared();
    if q < -1e-12 * scale {
        return Err(Error::Definiteness(format!(
            "quadratic form {q:e} is negative for a vector of squared norm {scale:e}"
        )));
    }
    Ok(q.max(0.0).sqrt())
}

/// `xᵀ M y`.
pub fn weighted_inner(x: &DVector<f64>, y: &DVector<f64>, m: &dyn SpdMap) -> Result<f64> {
    check_dim("weighted_inner", m.dim(), x.len())?;
    check_dim("weighted_inner", m.dim(), y.len())?;
    Ok(x.dot(&m.apply(y)))
}

/// Materializes a linear map by applying it to the identity columns.
pub fn dense_from_map(a: &dyn LinearMap) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for j in 0..a.ncols() {
        let mut e = DVector::zeros(a.ncols());
        e[j] = 1.0;
        out.set_column(j, &a.apply(&e));
    }
    out
}

/// Materializes an SPD operator.
pub fn dense_from_spd(m: &dyn SpdMap) -> DMatrix<f64> {
    let n = m.dim();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &m.apply(&e));
    }
    out
}

/// Largest relative adjoint defect `|⟨Av, u⟩ − ⟨v, Aᵀu⟩| / (‖Av‖‖u‖)` over random probes.
pub fn adjoint_defect(a: &dyn LinearMap, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let v = DVector::from_fn(a.ncols(), |_, _| StandardNormal.sample(&mut rng));
        let u = DVector::from_fn(a.nrows(), |_, _| StandardNormal.sample(&mut rng));
        let av = a.apply(&v);
        let atu = a.apply_adjoint(&u);
        let lhs = av.dot(&u);
        let rhs = v.dot(&atu);
        let scale = (av.norm() * u.norm())
            .max(v.norm() * atu.norm())
            .max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    worst
}

/// Probe result of [`spd_probe`].
#[derive(Debug, Clone, Copy)]
pub struct SpdProbe {
    /// Largest relative symmetry defect.
    pub symmetry: f64,
    /// Smallest `⟨x, Mx⟩ / ‖x‖²` over the probes.
    pub min_rayleigh: f64,
}

/// Randomized symmetry and definiteness probe.
pub fn spd_probe(m: &dyn SpdMap, probes: usize, seed: u64) -> SpdProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut symmetry: f64 = 0.0;
    let mut min_rayleigh = f64::INFINITY;
    for _ in 0..probes {
        let x = DVector::from_fn(m.dim(), |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(m.dim(), |_, _| StandardNormal.sample(&mut rng));
        let mx = m.apply(&x);
        let my = m.apply(&y);
        let scale = (mx.norm() * y.norm())
            .max(my.norm() * x.norm())
            .max(f64::MIN_POSITIVE);
        symmetry = symmetry.max((mx.dot(&y) - x.dot(&my)).abs() / scale);
        min_rayleigh = min_rayleigh.min(x.dot(&mx) / x.norm_squared());
    }
    SpdProbe {
        symmetry,
        min_rayleigh,
    }
}

/// Shared application counter.
#[derive(Debug, Default)]
pub struct CallCounter {
    forward: AtomicUsize,
    adjoint: AtomicUsize,
}

impl CallCounter {
    pub fn forward(&self) -> usize {
        self.forward.load(Ordering::Relaxed)
    }
    pub fn adjoint(&self) -> usize {
        self.adjoint.load(Ordering::Relaxed)
    }
    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.adjoint.store(0, Ordering::Relaxed);
    }
}

/// Wraps an operator and counts its applications.
pub struct Counting<T> {
    inner: T,
    counter: Arc<CallCounter>,
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> (Self, Arc<CallCounter>) {
        let counter = Arc::new(CallCounter::default());
        (
            Self {
                inner,
                counter: counter.clone(),
            },
            counter,
        )
    }
}

impl<T: LinearMap> LinearMap for Counting<T> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counter.forward.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.counter.adjoint.fetch_add(1, Ordering::Relaxed);
        self.inner.apply_adjoint(y)
    }
}

/// For SPD operators `forward` counts `apply` and `adjoint` counts `apply_inverse`.
impl<T: SpdMap> SpdMap for Counting<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counter.forward.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }
    fn apply_inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.counter.adjoint.fetch_add(1, Ordering::Relaxed);
        self.inner.apply_inverse(x)
    }
    fn has_inverse(&self) -> bool {
        self.inner.has_inverse()
    }
    fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.apply_sqrt(x)
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        self.inner.diagonal()
    }
}
