//! Small dense linear-algebra helpers built on the SVD.

use nalgebra::{DMatrix, DVector};

/// Singular values of `m` in decreasing order (empty for an empty matrix).
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numeric rank: the number of singular values strictly above `tol`.
pub fn rank_with_tol(sv: &[f64], tol: f64) -> usize {
    sv.iter().filter(|&&s| s > tol).count()
}

/// Absolute cutoff `rel * sigma_max`.
pub fn relative_tol(sv: &[f64], rel: f64) -> f64 {
    sv.first().copied().unwrap_or(0.0) * rel
}

/// Orthonormal basis (as columns) of the column span of `m`, truncated at
/// singular values `<= rel * sigma_max`.
pub fn orthonormal_span(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let rows = m.nrows();
    if m.ncols() == 0 || rows == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(rows, 0);
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel * smax)
        .collect();
    let mut out = DMatrix::zeros(rows, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &u.column(i));
    }
    out
}

/// Moore–Penrose pseudo-inverse with relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (rel * smax).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(c, r))
}

/// Component of `v` orthogonal to the orthonormal columns of `q`.
pub fn residual_against(q: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if q.ncols() == 0 {
        return v.clone();
    }
    let mut r = v - q * (q.transpose() * v);
    // Second pass keeps the residual orthogonal to working precision.
    r -= q * (q.transpose() * &r);
    r
}

/// Symmetric positive-definite square root; `None` if `s` is not positive definite.
pub fn spd_sqrt(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return None;
    }
    let root = eig.eigenvalues.map(f64::sqrt);
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Horizontal concatenation of column blocks with a common row count.
pub fn hstack(blocks: &[DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((0, at), (rows, b.ncols())).copy_from(b);
        at += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_rank_one() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let sv = singular_values(&m);
        assert_eq!(rank_with_tol(&sv, relative_tol(&sv, 1e-10)), 1);
        assert_eq!(orthonormal_span(&m, 1e-10).ncols(), 1);
    }

    #[test]
    fn pinv_solves_min_norm() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let x = pinv(&m, 1e-12) * DVector::from_element(1, 2.0);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spd_sqrt_squares_back() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let r = spd_sqrt(&s).unwrap();
        assert!((&r * &r - &s).abs().max() < 1e-12);
        assert!(spd_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_none());
    }

    #[test]
    fn residual_is_orthogonal() {
        let q = orthonormal_span(&DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]), 1e-12);
        let r = residual_against(&q, &DVector::from_row_slice(&[1.0, 0.0, 0.0]));
        assert!((q.transpose() * r).norm() < 1e-15);
    }
}
