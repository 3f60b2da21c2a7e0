//! Small dense symmetric linear algebra for the fitting engines.
//!
//! Design matrices here have at most a few dozen columns, so an unblocked
//! Cholesky factorization is all that is needed. Rank deficiency is
//! flagged either by a failed factorization or by a 1-norm condition
//! estimate above [`COND_LIMIT`].

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::num::Scalar;

/// Condition-number ceiling for normal-equation solves.
pub const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("rank-deficient system: 1-norm condition estimate {cond:.3e} exceeds {limit:.1e}")]
    IllConditioned { cond: f64, limit: f64 },
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<F: Scalar>(a: &Array2<F>) -> Result<Array2<F>, LinalgError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let mut l = Array2::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= F::zero() || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                col: j,
                pivot: d.as_f64(),
            });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve<F: Scalar>(l: &Array2<F>, b: &Array1<F>) -> Array1<F> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = l[(i, k)] * y[k];
            y[i] -= t;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[(k, i)] * y[k];
            y[i] -= t;
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Inverse of a symmetric positive definite matrix from its Cholesky factor.
pub fn cholesky_inverse<F: Scalar>(l: &Array2<F>) -> Array2<F> {
    let n = l.nrows();
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = F::one();
        let col = cholesky_solve(l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    // Symmetrize to kill round-off drift between the two triangles.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = (inv[(i, j)] + inv[(j, i)]) / F::of(2.0);
            inv[(i, j)] = m;
            inv[(j, i)] = m;
        }
    }
    inv
}

fn norm1<F: Scalar>(a: &Array2<F>) -> F {
    let mut best = F::zero();
    for j in 0..a.ncols() {
        let s = (0..a.nrows()).map(|i| a[(i, j)].abs()).sum::<F>();
        if s > best {
            best = s;
        }
    }
    best
}

/// Solution of the SPD system `A x = b` together with `A^{-1}` and the
/// 1-norm condition estimate of `A`.
pub struct SpdSolve<F> {
    pub solution: Array1<F>,
    pub inverse: Array2<F>,
    pub condition: F,
}

/// Solves an SPD system, failing on non-positive pivots or a condition
/// estimate above [`COND_LIMIT`].
pub fn solve_spd<F: Scalar>(a: &Array2<F>, b: &Array1<F>) -> Result<SpdSolve<F>, LinalgError> {
    let l = cholesky(a)?;
    let inverse = cholesky_inverse(&l);
    let condition = norm1(a) * norm1(&inverse);
    if condition.as_f64() > COND_LIMIT {
        return Err(LinalgError::IllConditioned {
            cond: condition.as_f64(),
            limit: COND_LIMIT,
        });
    }
    Ok(SpdSolve {
        solution: cholesky_solve(&l, b),
        inverse,
        condition,
    })
}

/// `B^T M B` for symmetric `M`; the sandwich step of robust covariances.
pub fn sandwich<F: Scalar>(bread: &Array2<F>, meat: &Array2<F>) -> Array2<F> {
    bread.dot(meat).dot(bread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_a_known_system() {
        let a = array![[4.0f64, 2.0], [2.0, 3.0]];
        let b = array![10.0, 9.0];
        let s = solve_spd(&a, &b).unwrap();
        // Exact solution (1.5, 2).
        assert!((s.solution[0] - 1.5).abs() < 1e-12);
        assert!((s.solution[1] - 2.0).abs() < 1e-12);
        let id = a.dot(&s.inverse);
        assert!((id[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((id[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular_and_ill_conditioned() {
        let singular = array![[1.0f64, 1.0], [1.0, 1.0]];
        assert!(cholesky(&singular).is_err());
        let nearly = array![[1.0f64, 1.0 - 1e-14], [1.0 - 1e-14, 1.0]];
        assert!(solve_spd(&nearly, &array![1.0, 1.0]).is_err());
    }

    #[test]
    fn works_in_f32() {
        let a = array![[2.0f32, 0.0], [0.0, 8.0]];
        let s = solve_spd(&a, &array![2.0f32, 16.0]).unwrap();
        assert!((s.solution[0] - 1.0).abs() < 1e-6);
        assert!((s.solution[1] - 2.0).abs() < 1e-6);
    }
}
