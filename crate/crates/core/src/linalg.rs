//! Small dense helpers shared by the solvers and their tests.

use nalgebra::{DMatrix, DVector};

/// Stacks vectors as matrix columns; `rows` is used when the list is empty.
pub fn columns_to_matrix(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(rows, 0);
    }
    DMatrix::from_columns(cols)
}

/// Orthonormal basis of the column space (thin QR; assumes full column rank).
pub fn orthonormal_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return a.clone();
    }
    a.clone().qr().q()
}

/// Largest principal angle (radians) between the column spaces of `a` and `b`.
///
/// Both are orthonormalized first; the sine of the largest angle is
/// `‖(I − P_a) Q_b‖₂` when the spaces have equal dimension.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let resid = &qb - &qa * (qa.transpose() * &qb);
    let sa = resid.singular_values().max().min(1.0);
    let resid_back = &qa - &qb * (qb.transpose() * &qa);
    let sb = resid_back.singular_values().max().min(1.0);
    sa.max(sb).asin()
}

/// `‖X − Y‖_F / ‖X‖_F`, or the absolute difference when `X` vanishes.
pub fn rel_frobenius(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let scale = x.norm();
    let diff = (x - y).norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
