//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalue tolerance used by every PSD check in the crate.
pub const PSD_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Clips negative eigenvalues of a symmetric matrix at zero.
///
/// Returns the reassembled matrix and the magnitude of the most negative
/// eigenvalue that was removed (0 when nothing was clipped).
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = m.nrows();
    if n == 0 {
        return (m.clone(), 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut clipped = 0.0f64;
    let vals = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clipped = clipped.max(-l);
            0.0
        } else {
            l
        }
    });
    if clipped == 0.0 {
        return (m.clone(), 0.0);
    }
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (symmetrize(&out), clipped)
}

/// Factor `L` with `L Lᵀ = m` for a positive semidefinite `m`.
///
/// Eigenvalues in `[-tol, 0)` are treated as zero; anything more negative is
/// an error. Works for singular matrices, unlike a Cholesky factorization.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(m.clone());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = m.diagonal().iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol * scale {
        return Err(Error::NotPsd(min));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_keeps_psd_input() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (c, mag) = clip_psd(&m);
        assert_eq!(mag, 0.0);
        assert_eq!(c, m);
    }

    #[test]
    fn clip_removes_negative_direction() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (c, mag) = clip_psd(&m);
        assert!((mag - 1.0).abs() < 1e-12);
        assert!(min_eigenvalue(&c) > -1e-12);
    }

    #[test]
    fn factor_of_rank_one() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let l = psd_factor(&m, PSD_TOL).unwrap();
        let back = &l * l.transpose();
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_factor(&m, PSD_TOL).is_err());
    }
}
