//! Small dense linear algebra: Cholesky factorization and SPD solves for the
//! K x K Gram systems of the subspace projector. K is small (tens), so a
//! direct textbook factorization is all that is needed.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// stored row-major. Fails with a condition estimate when a pivot collapses.
pub fn cholesky<T: Scalar>(a: &[T], k: usize, op: &'static str) -> Result<Vec<T>> {
    debug_assert_eq!(a.len(), k * k);
    let mut l = vec![T::zero(); k * k];
    let mut max_pivot = T::zero();
    for j in 0..k {
        let mut diag = a[j * k + j];
        for p in 0..j {
            diag = diag - l[j * k + p] * l[j * k + p];
        }
        max_pivot = max_pivot.max(diag.abs());
        let floor = T::from_f64(1e-300).max(max_pivot * T::from_f64(1e-14));
        if diag <= floor {
            let cond = (max_pivot / diag.abs().max(T::from_f64(1e-300))).to_f64();
            return Err(Error::Singular { op, cond });
        }
        let dsqrt = diag.sqrt();
        l[j * k + j] = dsqrt;
        for i in (j + 1)..k {
            let mut v = a[i * k + j];
            for p in 0..j {
                v = v - l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = v / dsqrt;
        }
    }
    Ok(l)
}

/// Solve L L^T x = b in place for one right-hand side.
pub fn chol_solve<T: Scalar>(l: &[T], k: usize, b: &mut [T]) {
    debug_assert_eq!(b.len(), k);
    // forward: L y = b
    for i in 0..k {
        let mut v = b[i];
        for p in 0..i {
            v = v - l[i * k + p] * b[p];
        }
        b[i] = v / l[i * k + i];
    }
    // backward: L^T x = y
    for i in (0..k).rev() {
        let mut v = b[i];
        for p in (i + 1)..k {
            v = v - l[p * k + i] * b[p];
        }
        b[i] = v / l[i * k + i];
    }
}
