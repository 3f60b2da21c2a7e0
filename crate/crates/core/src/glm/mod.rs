//! Fitting engines shared by both studies: ordinary least squares for the
//! linear outcome model, negative-binomial regression for the
//! difference-in-differences model, per-unit score matrices, and the Wald
//! tests used by the stability gate and the confirmation step.

mod negbin;
mod ols;

pub use negbin::{fit_negbin, NbOptions};
pub use ols::{fit_ols, fit_ols_xy, DesignInfo, OlsDesign};

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::num::Scalar;
use crate::special;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("empty data subset")]
    EmptySubset,
    #[error("need more observations ({n}) than coefficients ({k})")]
    TooFewObservations { n: usize, k: usize },
    #[error("rank-deficient design: {0}")]
    RankDeficient(#[from] LinalgError),
    #[error("unknown covariate `{name}` in design")]
    UnknownCovariate { name: String },
    #[error("count outcome must be a nonnegative integer (row {row}, value {value})")]
    NonIntegerOutcome { row: usize, value: f64 },
    #[error("all outcomes are zero; log-link intercept is unbounded")]
    AllZeroOutcomes,
    #[error("fit did not converge after {iterations} iterations (last deviance {deviance:.6e})")]
    NonConvergence { iterations: usize, deviance: f64 },
    #[error("standard error must be positive, got {se}")]
    NonpositiveStderr { se: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A fitted model: coefficients, covariance, residuals and the per-unit
/// score matrix whose columns sum to zero at the optimum.
#[derive(Clone, Debug)]
pub struct ModelFit<F> {
    pub names: Vec<String>,
    pub coefficients: Array1<F>,
    /// Covariance in effect for inference: model-based unless a clustered
    /// fit was requested, in which case it is the sandwich estimate.
    pub covariance: Array2<F>,
    /// Always the model-based covariance.
    pub model_covariance: Array2<F>,
    /// Response-scale residuals `y - fitted`.
    pub residuals: Array1<F>,
    /// N x K per-unit score contributions.
    pub score_matrix: Array2<F>,
    /// Negative-binomial dispersion; `None` for Gaussian fits.
    pub dispersion: Option<F>,
    pub loglik: F,
    pub n_obs: usize,
}

impl<F: Scalar> ModelFit<F> {
    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coef(&self, j: usize) -> F {
        self.coefficients[j]
    }

    pub fn se(&self, j: usize) -> F {
        self.covariance[(j, j)].max(F::zero()).sqrt()
    }

    /// Column sums of the score matrix; all near zero at a fitted optimum.
    pub fn score_column_sums(&self) -> Array1<F> {
        let mut sums = Array1::zeros(self.k());
        for i in 0..self.n_obs {
            for j in 0..self.k() {
                sums[j] += self.score_matrix[(i, j)];
            }
        }
        sums
    }
}

/// Result of a z-test.
#[derive(Clone, Copy, Debug)]
pub struct TestResult<F> {
    pub statistic: F,
    pub p_value: F,
    pub estimate: F,
    pub stderr: F,
}

/// Two-sided Wald test of `estimate` against `null_value`.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // negation also rejects NaN
pub fn wald_test<F: Scalar>(
    estimate: F,
    stderr: F,
    null_value: F,
) -> Result<TestResult<F>, GlmError> {
    if !(stderr > F::zero()) || !stderr.is_finite() {
        return Err(GlmError::NonpositiveStderr {
            se: stderr.as_f64(),
        });
    }
    let z = (estimate - null_value) / stderr;
    Ok(TestResult {
        statistic: z,
        p_value: special::two_sided_p(z),
        estimate,
        stderr,
    })
}

/// Two-sided test of `a - b = 0` for estimates from independent samples,
/// using the pooled standard error `sqrt(se_a^2 + se_b^2)`.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // negation also rejects NaN
pub fn difference_test<F: Scalar>(a: (F, F), b: (F, F)) -> Result<TestResult<F>, GlmError> {
    for se in [a.1, b.1] {
        if !(se > F::zero()) || !se.is_finite() {
            return Err(GlmError::NonpositiveStderr { se: se.as_f64() });
        }
    }
    let pooled = (a.1 * a.1 + b.1 * b.1).sqrt();
    let diff = a.0 - b.0;
    let z = diff / pooled;
    Ok(TestResult {
        statistic: z,
        p_value: special::two_sided_p(z),
        estimate: diff,
        stderr: pooled,
    })
}

/// Cluster-robust sandwich covariance. `clusters[i]` names observation
/// `i`'s cluster; ids are densified in first-appearance order. Applies the
/// finite-sample factor `G/(G-1) * (n-1)/(n-k)`, which reduces to the
/// heteroskedasticity-robust `n/(n-k)` when every cluster is a singleton.
pub fn cluster_robust_covariance<F: Scalar>(
    fit: &ModelFit<F>,
    clusters: &[usize],
) -> Result<Array2<F>, GlmError> {
    let n = fit.n_obs;
    let k = fit.k();
    if clusters.len() != n {
        return Err(GlmError::Dimension(format!(
            "{} cluster ids for {} observations",
            clusters.len(),
            n
        )));
    }
    let mut dense: Vec<usize> = Vec::with_capacity(n);
    let mut lookup = std::collections::HashMap::new();
    for &c in clusters {
        let next = lookup.len();
        let id = *lookup.entry(c).or_insert(next);
        dense.push(id);
    }
    let g = lookup.len();
    if g < 2 {
        return Err(GlmError::Dimension("need at least two clusters".into()));
    }

    let mut group_sums = Array2::<F>::zeros((g, k));
    for i in 0..n {
        for j in 0..k {
            group_sums[(dense[i], j)] += fit.score_matrix[(i, j)];
        }
    }
    let mut meat = Array2::<F>::zeros((k, k));
    for gi in 0..g {
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += group_sums[(gi, a)] * group_sums[(gi, b)];
            }
        }
    }
    let correction = F::of_usize(g) / F::of_usize(g - 1) * F::of_usize(n - 1) / F::of_usize(n - k);
    Ok(linalg::sandwich(&fit.model_covariance, &meat).mapv(|v| v * correction))
}

/// Heteroskedasticity-robust (HC1) covariance.
pub fn hc_robust_covariance<F: Scalar>(fit: &ModelFit<F>) -> Array2<F> {
    let n = fit.n_obs;
    let k = fit.k();
    let mut meat = Array2::<F>::zeros((k, k));
    for i in 0..n {
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += fit.score_matrix[(i, a)] * fit.score_matrix[(i, b)];
            }
        }
    }
    let correction = F::of_usize(n) / F::of_usize(n - k);
    linalg::sandwich(&fit.model_covariance, &meat).mapv(|v| v * correction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_null_exactly() {
        let t = wald_test(0.0f64, 0.3, 0.0).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wald_at_the_critical_point() {
        let t = wald_test(1.96f64, 1.0, 0.0).unwrap();
        assert!((t.p_value - 0.0500).abs() < 1e-4);
        assert!((t.p_value - 0.049_995_79).abs() < 1e-6);
    }

    #[test]
    fn wald_is_antisymmetric_in_sign() {
        let plus = wald_test(0.7f64, 0.2, 0.0).unwrap();
        let minus = wald_test(-0.7, 0.2, 0.0).unwrap();
        assert!((plus.p_value - minus.p_value).abs() < 1e-14);
        assert_eq!(plus.statistic, -minus.statistic);
        let shifted = wald_test(1.7, 0.2, 1.0).unwrap();
        assert!((plus.p_value - shifted.p_value).abs() < 1e-14);
    }

    #[test]
    fn wald_rejects_bad_se() {
        assert!(wald_test(1.0f64, 0.0, 0.0).is_err());
        assert!(wald_test(1.0f64, -0.5, 0.0).is_err());
    }

    #[test]
    fn difference_test_matches_hand_arithmetic() {
        let t = difference_test((-0.10f64, 0.02), (-0.12, 0.03)).unwrap();
        assert!((t.statistic - 0.5547).abs() < 1e-4);
        assert!((t.p_value - 0.579).abs() < 1e-3);
        assert!((t.estimate - 0.02).abs() < 1e-12);
    }
}
