//! Small dense linear-algebra helpers shared by the solver stages.
//!
//! The state and control dimensions in this problem class are small, so all
//! routines work on `DMatrix<f64>` directly: explicit inverses with a
//! reciprocal-condition estimate, symmetric eigenvalue bounds and a
//! pseudo-inverse solve for (possibly singular) symmetric systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// (M + Mᵀ)/2.
pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of M − Mᵀ.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// True when every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Induced 1-norm (maximum absolute column sum).
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Explicit inverse together with a reciprocal condition estimate
/// 1 / (‖M‖₁ ‖M⁻¹‖₁). Returns `None` when the LU factorization is singular.
pub fn invert_with_rcond(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let inv = m.clone().lu().try_inverse()?;
    if !all_finite(&inv) {
        return None;
    }
    let n1 = norm_1(m);
    let n2 = norm_1(&inv);
    let rcond = if n1 > 0.0 && n2 > 0.0 { 1.0 / (n1 * n2) } else { 0.0 };
    Some((inv, rcond))
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = symmetric_part(m);
    let mut ev: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn sym_eigmin(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Smallest singular value of a general square matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Solve the symmetric system `H x = b` through an eigendecomposition,
/// dropping directions whose eigenvalue is below `tol` in magnitude
/// (minimum-norm solution on the retained subspace).
///
/// Returns the solution together with the smallest eigenvalue of `H` and the
/// spectral condition number of the retained part.
pub fn sym_pinv_solve(h: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> (DVector<f64>, f64, f64) {
    let eig = symmetric_part(h).symmetric_eigen();
    let n = b.len();
    let mut x = DVector::<f64>::zeros(n);
    let mut min_ev = f64::INFINITY;
    let mut max_abs: f64 = 0.0;
    let mut min_abs_kept = f64::INFINITY;
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        min_ev = min_ev.min(ev);
        max_abs = max_abs.max(ev.abs());
        if ev.abs() > tol {
            min_abs_kept = min_abs_kept.min(ev.abs());
            let v = eig.eigenvectors.column(i);
            let coef = v.dot(b) / ev;
            x += v * coef;
        }
    }
    let cond = if min_abs_kept.is_finite() && min_abs_kept > 0.0 {
        max_abs / min_abs_kept
    } else {
        f64::INFINITY
    };
    (x, min_ev, cond)
}

/// Reject non-square shapes with a uniform error.
pub fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inverse_and_rcond_identity() {
        let id = DMatrix::<f64>::identity(3, 3);
        let (inv, rcond) = invert_with_rcond(&id).unwrap();
        assert_relative_eq!((inv - id).amax(), 0.0);
        assert_relative_eq!(rcond, 1.0);
    }

    #[test]
    fn singular_matrix_has_no_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(invert_with_rcond(&m).is_none() || invert_with_rcond(&m).unwrap().1 < 1e-14);
    }

    #[test]
    fn eigmin_of_indefinite_block() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -3.0]);
        assert_relative_eq!(sym_eigmin(&m), -3.0, epsilon = 1e-12);
    }

    #[test]
    fn pinv_solve_handles_singular_hessian() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let b = DVector::from_row_slice(&[4.0, 0.0]);
        let (x, min_ev, _) = sym_pinv_solve(&h, &b, 1e-12);
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(min_ev, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn min_singular_value_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5]);
        assert_relative_eq!(min_singular_value(&m), 0.5, epsilon = 1e-12);
    }
}
