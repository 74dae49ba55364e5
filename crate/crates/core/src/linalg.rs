//! Small dense helpers on top of nalgebra used throughout the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn matrix_from_rows(name: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::InvalidMatrix {
            name,
            reason: "matrix has no rows".into(),
        });
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidMatrix {
            name,
            reason: "rows are empty or ragged".into(),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= rel_tol * m.norm().max(f64::MIN_POSITIVE)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NAN)
}

/// log det of a symmetric positive definite matrix via Cholesky.
pub fn logdet_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = symmetrize(m).cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Symmetric inverse square root `V^{-1/2}` via eigendecomposition.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::SingularPrecision(format!(
            "eigenvalues {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    let scale = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&scale) * v.transpose())
}

/// Symmetric square root of a PSD matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&scale) * v.transpose()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// `‖W^{1/2} D‖_F` computed as `sqrt(Tr(Dᵀ W D))`.
pub fn weighted_frobenius(weight: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    (d.transpose() * weight * d).trace().max(0.0).sqrt()
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn outer(z: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    z * w.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logdet_matches_eigen_product() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let by_eig: f64 = sym_eigenvalues(&m).iter().map(|l| l.ln()).sum();
        assert!((logdet_spd(&m).unwrap() - by_eig).abs() < 1e-12);
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = inv_sqrt_spd(&m).unwrap();
        let back = &s * &s * &m;
        assert!((back - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(inv_sqrt_spd(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matrix_from_rows("x", &[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(matrix_from_rows("x", &[]).is_err());
    }
}
