//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;

/// Solves a square system `A x = b` by LU with partial pivoting.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Solves the symmetric positive definite system `A x = b`, falling back to LU
/// when the Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(b));
    }
    solve_square(a, b)
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Indices of columns that make the normal matrix rank deficient, found by a
/// greedy Gram-Schmidt sweep. Used to name the offending set in error messages.
pub fn deficient_columns(normal: &DMatrix<f64>) -> Vec<usize> {
    let k = normal.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut offending = Vec::new();
    let scale = (0..k).map(|i| normal[(i, i)].abs()).fold(1.0_f64, f64::max);
    for j in 0..k {
        let mut v = normal.column(j).into_owned();
        for b in &basis {
            let coef = v.dot(b);
            v -= b * coef;
        }
        let norm = v.norm();
        if norm <= scale * 1e-12 * k as f64 {
            offending.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    offending
}

/// Rank-deficiency error for a normal matrix that failed to factor.
pub fn rank_deficiency_error(normal: &DMatrix<f64>) -> Error {
    Error::RankDeficient {
        columns: deficient_columns(normal),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = solve_square(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn condition_number_of_identity_is_one() {
        let a = DMatrix::<f64>::identity(4, 4);
        assert!((condition_number(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn names_deficient_columns() {
        // Third column duplicates the second.
        let d = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0]);
        let normal = d.transpose() * &d;
        let cols = deficient_columns(&normal);
        assert!(!cols.is_empty());
    }
}
