//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Least-squares solve of `a x ≈ b` (`a` tall or square) by Householder QR
/// with column pivoting. Returns `None` when `R` has a zero pivot.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = a.ncols();
    assert!(a.nrows() >= k, "lstsq needs at least as many rows as columns");
    let qr = a.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let mut x = q.transpose() * b;
    let r = r.view((0, 0), (k, k)).into_owned();
    if !r.solve_upper_triangular_mut(&mut x) {
        return None;
    }
    qr.p().inv_permute_rows(&mut x);
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

pub fn lstsq_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    lstsq(a, &bm).map(|x| DVector::from_column_slice(x.as_slice()))
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max.is_finite() && min.is_finite()) {
        return f64::INFINITY;
    }
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric diagonal scaling `D⁻¹ᐟ² A D⁻¹ᐟ²` with `D = |diag(A)|`. Zero
/// diagonal entries are left unscaled.
pub fn jacobi_scaling(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        a.nrows(),
        (0..a.nrows()).map(|i| {
            let v = a[(i, i)].abs();
            if v > 0.0 && v.is_finite() {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        }),
    )
}

fn scale(a: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s[i] * s[j])
}

/// Condition number after symmetric Jacobi scaling, so that parameters on
/// very different scales do not dominate the estimate.
pub fn scaled_condition(a: &DMatrix<f64>) -> f64 {
    let s = jacobi_scaling(a);
    condition_number(&scale(a, &s))
}

/// Solves the square system `a x = b` with Jacobi scaling applied first.
pub fn solve_scaled(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let s = jacobi_scaling(a);
    let sa = scale(a, &s);
    let sb = b.component_mul(&s);
    let y = lstsq_vec(&sa, &sb)?;
    Some(y.component_mul(&s))
}

/// Inverse of a square matrix through the scaled QR solve.
pub fn inverse_scaled(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = jacobi_scaling(a);
    let sa = scale(a, &s);
    let inv = lstsq(&sa, &DMatrix::identity(a.nrows(), a.ncols()))?;
    Some(scale(&inv, &s))
}
