//! Ordinary least squares over the intercept + treatment (+ optional
//! adjustment covariates) design, with per-unit Gaussian scores.

use ndarray::{Array1, Array2};

use crate::cohort::{CohortTable, CovariateKind, CovariateSchema};
use crate::linalg;
use crate::num::Scalar;

use super::{GlmError, ModelFit};

/// Design layout: intercept and treatment are always included;
/// `adjust` names extra schema covariates (categorical ones are expanded
/// into indicator columns, dropping the first level).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OlsDesign {
    pub adjust: Vec<String>,
}

enum DesignCol {
    Intercept,
    Treatment,
    Covariate(usize),
    LevelIndicator { col: usize, level: usize },
}

/// Resolved design-matrix layout for a schema.
pub struct DesignInfo {
    names: Vec<String>,
    cols: Vec<DesignCol>,
}

impl DesignInfo {
    pub fn new(schema: &CovariateSchema, design: &OlsDesign) -> Result<Self, GlmError> {
        let mut names = vec!["intercept".to_string(), "treatment".to_string()];
        let mut cols = vec![DesignCol::Intercept, DesignCol::Treatment];
        for name in &design.adjust {
            let idx = schema
                .index_of(name)
                .ok_or_else(|| GlmError::UnknownCovariate { name: name.clone() })?;
            match &schema.column(idx).kind {
                CovariateKind::Numeric | CovariateKind::Binary => {
                    names.push(name.clone());
                    cols.push(DesignCol::Covariate(idx));
                }
                CovariateKind::Categorical { levels } => {
                    for (li, level) in levels.iter().enumerate().skip(1) {
                        names.push(format!("{name}={level}"));
                        cols.push(DesignCol::LevelIndicator {
                            col: idx,
                            level: li,
                        });
                    }
                }
            }
        }
        Ok(Self { names, cols })
    }

    pub fn k(&self) -> usize {
        self.cols.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Fills one design row for a table record.
    pub fn fill_row<F: Scalar>(&self, table: &CohortTable<F>, row: usize, out: &mut [F]) {
        for (slot, col) in out.iter_mut().zip(&self.cols) {
            *slot = match *col {
                DesignCol::Intercept => F::one(),
                DesignCol::Treatment => table.treatment(row),
                DesignCol::Covariate(c) => table.covariate(row, c),
                DesignCol::LevelIndicator { col, level } => {
                    if table.covariate(row, col).as_f64() as usize == level {
                        F::one()
                    } else {
                        F::zero()
                    }
                }
            };
        }
    }

    /// Builds the dense design matrix for a row subset.
    pub fn matrix<F: Scalar>(&self, table: &CohortTable<F>, rows: &[usize]) -> Array2<F> {
        let mut x = Array2::zeros((rows.len(), self.k()));
        let mut buf = vec![F::zero(); self.k()];
        for (i, &row) in rows.iter().enumerate() {
            self.fill_row(table, row, &mut buf);
            for (j, &v) in buf.iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        x
    }
}

/// Fits the linear outcome model by least squares on a row subset.
pub fn fit_ols<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    design: &OlsDesign,
) -> Result<ModelFit<F>, GlmError> {
    let info = DesignInfo::new(table.schema(), design)?;
    let x = info.matrix(table, rows);
    let y = Array1::from_iter(rows.iter().map(|&r| table.outcome(r)));
    fit_ols_xy(&x, &y, info.names().to_vec())
}

/// Least squares on explicit arrays: coefficients minimize the residual sum
/// of squares, covariance is `sigma^2 (X'X)^{-1}` with `sigma^2 = RSS/(n-k)`,
/// and the score matrix holds `x_ij * r_i / sigma^2`.
pub fn fit_ols_xy<F: Scalar>(
    x: &Array2<F>,
    y: &Array1<F>,
    names: Vec<String>,
) -> Result<ModelFit<F>, GlmError> {
    let n = x.nrows();
    let k = x.ncols();
    if n == 0 {
        return Err(GlmError::EmptySubset);
    }
    if n <= k {
        return Err(GlmError::TooFewObservations { n, k });
    }

    let xtx = x.t().dot(x);
    let xty = x.t().dot(y);
    let solved = linalg::solve_spd(&xtx, &xty)?;
    let beta = solved.solution;

    let fitted = x.dot(&beta);
    let residuals = y - &fitted;
    let rss = residuals.iter().map(|&r| r * r).sum::<F>();
    let sigma2 = rss / F::of_usize(n - k);

    let covariance = solved.inverse.mapv(|v| v * sigma2);
    let mut score = Array2::zeros((n, k));
    if sigma2 > F::zero() {
        for i in 0..n {
            for j in 0..k {
                score[(i, j)] = x[(i, j)] * residuals[i] / sigma2;
            }
        }
    }

    let sigma2_mle = rss / F::of_usize(n);
    let loglik = if sigma2_mle > F::zero() {
        let two_pi = F::of(std::f64::consts::TAU);
        -F::of_usize(n) / F::of(2.0) * ((two_pi * sigma2_mle).ln() + F::one())
    } else {
        F::infinity()
    };

    Ok(ModelFit {
        names,
        coefficients: beta,
        covariance: covariance.clone(),
        model_covariance: covariance,
        residuals,
        score_matrix: score,
        dispersion: None,
        loglik,
        n_obs: n,
    })
}
