//! Prior covariance construction: Matérn and cubic spherical kernels, grids,
//! Kronecker spatiotemporal composition, and sampling of smooth fields.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{check_dim, Error, Result};
use crate::operators::{dense_from_spd, DenseSpd, KroneckerSpd, SpdMap};

/// Mean Earth radius used for great-circle distances, in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Default diagonal jitter relative to the largest diagonal entry.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-10;

/// Covariance kernel family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// Matérn correlation with smoothness `nu` and length scale `ell`.
    Matern { nu: f64, ell: f64 },
    /// Compactly supported cubic ("spherical") correlation with support radius `theta`.
    CubicSpherical { theta: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Matern { nu, ell } => {
                positive("nu", nu)?;
                positive("ell", ell)
            }
            KernelSpec::CubicSpherical { theta } => positive("theta", theta),
        }
    }

    /// Correlation at distance `d`.
    pub fn correlation(&self, d: f64) -> Result<f64> {
        match *self {
            KernelSpec::Matern { nu, ell } => matern_kernel(d, nu, ell),
            KernelSpec::CubicSpherical { theta } => cubic_spherical_kernel(d, theta),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

/// Matérn correlation `2^{1-ν}/Γ(ν) (√(2ν) d/ℓ)^ν K_ν(√(2ν) d/ℓ)`.
///
/// Half-integer smoothness 1/2, 3/2 and 5/2 use the closed forms.
pub fn matern_kernel(d: f64, nu: f64, ell: f64) -> Result<f64> {
    positive("nu", nu)?;
    positive("ell", ell)?;
    if !(d >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance must be >= 0, got {d}"
        )));
    }
    if d == 0.0 {
        return Ok(1.0);
    }
    let r = d / ell;
    let half_integer = |target: f64| (nu - target).abs() < 1e-14;
    if half_integer(0.5) {
        return Ok((-r).exp());
    }
    if half_integer(1.5) {
        let z = 3f64.sqrt() * r;
        return Ok((1.0 + z) * (-z).exp());
    }
    if half_integer(2.5) {
        let z = 5f64.sqrt() * r;
        return Ok((1.0 + z + z * z / 3.0) * (-z).exp());
    }
    Ok(matern_bessel(r, nu))
}

/// General-ν Matérn through the modified Bessel function.
pub fn matern_bessel(r: f64, nu: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let z = (2.0 * nu).sqrt() * r;
    let k = bessel_k(nu, z);
    if k == 0.0 {
        return 0.0;
    }
    let log_val = (1.0 - nu) * 2f64.ln() - ln_gamma(nu) + nu * z.ln() + k.ln();
    log_val.exp().min(1.0)
}

/// Modified Bessel function of the second kind `K_ν(x)` for `ν ≥ 0`, `x > 0`.
///
/// Temme's series for `x < 2` and Steed's continued fraction otherwise, on the
/// reduced order `μ = ν − round(ν)`, followed by upward recurrence.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && nu >= 0.0, "bessel_k requires x > 0 and nu >= 0");
    const EPS: f64 = 1e-16;
    const MAXIT: usize = 10_000;
    let nl = (nu + 0.5).floor() as usize;
    let xmu = nu - nl as f64;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;
    let (mut rkmu, mut rk1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * xmu;
        let fact = if pimu.abs() < EPS {
            1.0
        } else {
            pimu / pimu.sin()
        };
        let mut d = -x2.ln();
        let mut e = xmu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(xmu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        e = e.exp();
        let mut p = 0.5 * e / gampl;
        let mut q = 0.5 / (e * gammi);
        let mut c = 1.0;
        d = x2 * x2;
        let mut sum1 = p;
        for i in 1..=MAXIT {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - xmu2);
            c *= d / fi;
            p /= fi - xmu;
            q /= fi + xmu;
            let del = c * ff;
            sum += del;
            let del1 = c * (p - fi * ff);
            sum1 += del1;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        rkmu = sum;
        rk1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=MAXIT {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        rkmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        rk1 = rkmu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (xmu + i as f64) * xi2 * rk1 + rkmu;
        rkmu = rk1;
        rk1 = next;
    }
    rkmu
}

/// `(Γ₁, Γ₂, 1/Γ(1+μ), 1/Γ(1−μ))` for `|μ| ≤ 1/2` by Chebyshev expansion.
fn temme_gammas(xmu: f64) -> (f64, f64, f64, f64) {
    const C1: [f64; 7] = [
        -1.142022680371168e0,
        6.5165112670737e-3,
        3.087090173086e-4,
        -3.4706269649e-6,
        6.9437664e-9,
        3.67795e-11,
        -1.356e-13,
    ];
    const C2: [f64; 8] = [
        1.843740587300905e0,
        -7.68528408447867e-2,
        1.2719271366546e-3,
        -4.9717367042e-6,
        -3.31261198e-8,
        2.423096e-10,
        -1.702e-13,
        -1.49e-15,
    ];
    let xx = 8.0 * xmu * xmu - 1.0;
    let gam1 = chebyshev(&C1, xx);
    let gam2 = chebyshev(&C2, xx);
    (gam1, gam2, gam2 - xmu * gam1, gam2 + xmu * gam1)
}

fn chebyshev(c: &[f64], y: f64) -> f64 {
    let y2 = 2.0 * y;
    let (mut d, mut dd) = (0.0, 0.0);
    for &cj in c[1..].iter().rev() {
        let sv = d;
        d = y2 * d - dd + cj;
        dd = sv;
    }
    y * d - dd + 0.5 * c[0]
}

/// Cubic compactly supported correlation `1 − 3/2 (d/θ) + 1/2 (d/θ)³` on `[0, θ]`.
pub fn cubic_spherical_kernel(d: f64, theta: f64) -> Result<f64> {
    positive("theta", theta)?;
    if !(d >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance must be >= 0, got {d}"
        )));
    }
    if d >= theta {
        return Ok(0.0);
    }
    let r = d / theta;
    Ok(1.0 - 1.5 * r + 0.5 * r * r * r)
}

/// Haversine distance in kilometers between `(lat, lon)` pairs in degrees.
pub fn great_circle_distance(p1: (f64, f64), p2: (f64, f64)) -> Result<f64> {
    for &(lat, lon) in &[p1, p2] {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..360.0).contains(&lon) {
            return Err(Error::InvalidParameter(format!(
                "coordinate ({lat}, {lon}) out of range"
            )));
        }
    }
    let (phi1, phi2) = (p1.0.to_radians(), p2.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (p2.1 - p1.1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let c = 2.0 * a.sqrt().min(1.0).asin();
    Ok(EARTH_RADIUS_KM * c)
}

/// Distance metric on grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// Coordinates are `(lat, lon)` in degrees; distances in km.
    GreatCircle,
}

/// How a grid was laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Points on `[0, 1]`.
    Line { n: usize },
    /// `nx × ny` pixel centers on `[0, 1]²`, x fastest.
    UnitSquare { nx: usize, ny: usize },
    /// Latitude/longitude cells, longitude fastest.
    LatLon { nlat: usize, nlon: usize },
    /// `nx × ny × nt` points, each axis scaled to `[0, 1]`, x fastest then y then t.
    UnitCubeSpacetime { nx: usize, ny: usize, nt: usize },
}

/// Grid points on which a field is represented.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub kind: GridKind,
    pub points: Vec<[f64; 3]>,
    pub metric: Metric,
}

fn axis(n: usize, i: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

impl GridGeometry {
    pub fn line(n: usize) -> Self {
        Self {
            kind: GridKind::Line { n },
            points: (0..n).map(|i| [axis(n, i), 0.0, 0.0]).collect(),
            metric: Metric::Euclidean,
        }
    }

    pub fn unit_square(nx: usize, ny: usize) -> Self {
        let points = (0..ny)
            .flat_map(|iy| (0..nx).map(move |ix| [axis(nx, ix), axis(ny, iy), 0.0]))
            .collect();
        Self {
            kind: GridKind::UnitSquare { nx, ny },
            points,
            metric: Metric::Euclidean,
        }
    }

    /// Cell centers of a regular lat/lon grid with the given corner and spacing in degrees.
    pub fn lat_lon(lat0: f64, lon0: f64, step: f64, nlat: usize, nlon: usize) -> Self {
        let points = (0..nlat)
            .flat_map(|i| {
                (0..nlon).map(move |j| [lat0 + step * i as f64, lon0 + step * j as f64, 0.0])
            })
            .collect();
        Self {
            kind: GridKind::LatLon { nlat, nlon },
            points,
            metric: Metric::GreatCircle,
        }
    }

    pub fn unit_cube_spacetime(nx: usize, ny: usize, nt: usize) -> Self {
        let mut points = Vec::with_capacity(nx * ny * nt);
        for it in 0..nt {
            for iy in 0..ny {
                for ix in 0..nx {
                    points.push([axis(nx, ix), axis(ny, iy), axis(nt, it)]);
                }
            }
        }
        Self {
            kind: GridKind::UnitCubeSpacetime { nx, ny, nt },
            points,
            metric: Metric::Euclidean,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.points[i], self.points[j]);
        match self.metric {
            Metric::Euclidean => p
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Metric::GreatCircle => great_circle_distance((p[0], p[1]), (q[0], q[1]))
                .expect("grid coordinates validated at construction"),
        }
    }
}

/// Dense covariance `Q_ij = κ(d(ζ_i, ζ_j)) + jitter·δ_ij`.
pub fn build_covariance(grid: &GridGeometry, spec: &KernelSpec, jitter: f64) -> Result<DenseSpd> {
    spec.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "jitter must be >= 0, got {jitter}"
        )));
    }
    let n = grid.len();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .map(|i| {
                    let k = spec
                        .correlation(grid.distance(i, j))
                        .expect("validated spec");
                    if i == j {
                        k + jitter
                    } else {
                        k
                    }
                })
                .collect()
        })
        .collect();
    let mut mat = DMatrix::zeros(n, n);
    for (j, col) in columns.into_iter().enumerate() {
        mat.set_column(j, &DVector::from_vec(col));
    }
    DenseSpd::new(mat)
}

/// Matrix-free stationary covariance on a regular `nx × ny × nt` grid.
///
/// The correlation depends only on the index offsets, so it is tabulated once
/// and every application is an `O(n²)` sweep over the table.
#[derive(Debug, Clone)]
pub struct GridStationaryCovariance {
    dims: [usize; 3],
    table: Vec<f64>,
    jitter: f64,
}

impl GridStationaryCovariance {
    /// Grid axes are scaled to `[0, 1]` as in [`GridGeometry::unit_cube_spacetime`].
    pub fn new(nx: usize, ny: usize, nt: usize, spec: &KernelSpec, jitter: f64) -> Result<Self> {
        spec.validate()?;
        if nx * ny * nt == 0 {
            return Err(Error::InvalidParameter("empty grid".into()));
        }
        let mut table = Vec::with_capacity(nx * ny * nt);
        for dt in 0..nt {
            for dy in 0..ny {
                for dx in 0..nx {
                    let (a, b, c) = (axis(nx, dx), axis(ny, dy), axis(nt, dt));
                    // axis() maps the offset index exactly like a coordinate difference
                    let dist = (a * a + b * b + c * c).sqrt();
                    table.push(spec.correlation(dist)?);
                }
            }
        }
        Ok(Self {
            dims: [nx, ny, nt],
            table,
            jitter,
        })
    }

    fn entry(&self, dx: usize, dy: usize, dt: usize) -> f64 {
        let [nx, ny, _] = self.dims;
        self.table[dx + nx * (dy + ny * dt)]
    }

    /// Applies the operator to every column of `x`.
    pub fn apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let [nx, ny, nt] = self.dims;
        let n = nx * ny * nt;
        assert_eq!(x.nrows(), n);
        let cols = x.ncols();
        let xt = x.transpose();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (ix, iy, it) = (i % nx, (i / nx) % ny, i / (nx * ny));
                let mut acc = vec![0.0; cols];
                for jt in 0..nt {
                    for jy in 0..ny {
                        let base = nx * (jy + ny * jt);
                        let trow = nx * (iy.abs_diff(jy) + ny * it.abs_diff(jt));
                        for jx in 0..nx {
                            let k = self.table[trow + ix.abs_diff(jx)];
                            let src = xt.column(base + jx);
                            for (a, s) in acc.iter_mut().zip(src.iter()) {
                                *a += k * s;
                            }
                        }
                    }
                }
                if self.jitter != 0.0 {
                    for (a, s) in acc.iter_mut().zip(xt.column(i).iter()) {
                        *a += self.jitter * s;
                    }
                }
                acc
            })
            .collect();
        DMatrix::from_fn(n, cols, |i, c| rows[i][c])
    }
}

impl SpdMap for GridStationaryCovariance {
    fn dim(&self) -> usize {
        self.dims.iter().product()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let [nx, ny, nt] = self.dims;
        let n = nx * ny * nt;
        let xs = x.as_slice();
        let out: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (ix, iy, it) = (i % nx, (i / nx) % ny, i / (nx * ny));
                let mut acc = 0.0;
                for jt in 0..nt {
                    for jy in 0..ny {
                        let base = nx * (jy + ny * jt);
                        let trow = nx * (iy.abs_diff(jy) + ny * it.abs_diff(jt));
                        let tab = &self.table[trow..trow + nx];
                        let src = &xs[base..base + nx];
                        for jx in 0..nx {
                            acc += tab[ix.abs_diff(jx)] * src[jx];
                        }
                    }
                }
                acc + self.jitter * xs[i]
            })
            .collect();
        DVector::from_vec(out)
    }
    fn diagonal(&self) -> Option<DVector<f64>> {
        None
    }
}

impl GridStationaryCovariance {
    /// Correlation between grid offsets; exposed for tests.
    pub fn offset_correlation(&self, dx: usize, dy: usize, dt: usize) -> f64 {
        self.entry(dx, dy, dt)
    }
}

/// `λ⁻² (Q_t ⊗ Q_s)`, applied through [`crate::operators::kron_apply`].
pub fn spatiotemporal_q<T: SpdMap, S: SpdMap>(
    qt: T,
    qs: S,
    lambda_scale: f64,
) -> Result<KroneckerSpd<T, S>> {
    if lambda_scale == 0.0 || !lambda_scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda_scale must be finite and nonzero, got {lambda_scale}"
        )));
    }
    Ok(KroneckerSpd::new(qt, qs, lambda_scale.powi(-2)))
}

/// Leading eigenpairs of an SPD operator, largest first.
///
/// Small operators are materialized and diagonalized exactly; larger ones use
/// randomized subspace iteration with a Rayleigh–Ritz step.
pub fn leading_eigenpairs(q: &dyn SpdMap, r: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
    let n = q.dim();
    let r = r.min(n);
    if n <= 1500 {
        let eig = SymmetricEigen::new(dense_from_spd(q));
        return sorted_leading(&eig.eigenvalues, &eig.eigenvectors, r);
    }
    let block = (r + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    let apply_block = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &q.apply(&x.column(j).into_owned()));
        }
        out
    };
    for _ in 0..12 {
        basis = apply_block(&basis).qr().q();
    }
    let qb = apply_block(&basis);
    let small = basis.transpose() * &qb;
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymmetricEigen::new(small);
    let (vals, vecs) = sorted_leading(&eig.eigenvalues, &eig.eigenvectors, r);
    (vals, basis * vecs)
}

/// Same as [`leading_eigenpairs`] but with block applications of a grid covariance.
pub fn leading_eigenpairs_grid(
    q: &GridStationaryCovariance,
    r: usize,
    seed: u64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = q.dim();
    let r = r.min(n);
    let block = (r + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    for _ in 0..12 {
        basis = q.apply_block(&basis).qr().q();
    }
    let qb = q.apply_block(&basis);
    let small = basis.transpose() * &qb;
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymmetricEigen::new(small);
    let (vals, vecs) = sorted_leading(&eig.eigenvalues, &eig.eigenvectors, r);
    (vals, basis * vecs)
}

fn sorted_leading(
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    r: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let top = &order[..r];
    let values = DVector::from_iterator(r, top.iter().map(|&i| vals[i].max(0.0)));
    let mut vectors = DMatrix::zeros(vecs.nrows(), r);
    for (c, &i) in top.iter().enumerate() {
        vectors.set_column(c, &vecs.column(i));
    }
    (values, vectors)
}

/// `mean + Q^{1/2} z` with `z` standard normal from a seeded generator.
pub fn sample_smooth_field(q: &dyn SpdMap, mean: &DVector<f64>, seed: u64) -> Result<DVector<f64>> {
    check_dim("sample_smooth_field", q.dim(), mean.len())?;
    let z = standard_normal(q.dim(), seed);
    Ok(mean + q.apply_sqrt(&z)?)
}

/// Truncated Karhunen–Loève draw `mean + Σ_{i<r} sqrt(λ_i) z_i φ_i`.
pub fn sample_truncated_field(
    eigenvalues: &DVector<f64>,
    eigenvectors: &DMatrix<f64>,
    mean: &DVector<f64>,
    seed: u64,
) -> Result<DVector<f64>> {
    check_dim("sample_truncated_field", eigenvectors.nrows(), mean.len())?;
    let z = standard_normal(eigenvalues.len(), seed);
    let coeffs = z.component_mul(&eigenvalues.map(f64::sqrt));
    Ok(mean + eigenvectors * coeffs)
}

/// Seeded standard-normal vector.
pub fn standard_normal(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
}
