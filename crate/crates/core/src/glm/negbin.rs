//! NB2 negative-binomial regression with a log link.
//!
//! The mean model is `E[y] = exp(X beta)` with variance `mu + alpha mu^2`.
//! Fitting alternates IRLS for `beta` given the dispersion `alpha` with a
//! safeguarded one-dimensional Newton update of `alpha` on the profile
//! likelihood, stopping when no coefficient moves by more than `tol`.
//! Because outcomes are integers, every gamma-function ratio in the
//! likelihood and its derivatives collapses to a finite sum, so the code
//! below needs no special functions and stays exact as `alpha -> 0`
//! (the Poisson limit).

use ndarray::{Array1, Array2};

use crate::linalg;
use crate::num::Scalar;

use super::{cluster_robust_covariance, GlmError, ModelFit};

/// Dispersion below this is resolved to exactly zero (Poisson) when the
/// profile score at zero points further down.
const ALPHA_MIN: f64 = 1e-4;
const ALPHA_MAX: f64 = 1e4;
const ETA_CLAMP: f64 = 30.0;
const MAX_INNER: usize = 50;

#[derive(Clone, Debug)]
pub struct NbOptions<F> {
    pub max_outer: usize,
    pub tol: F,
    /// Fixes the dispersion instead of estimating it (0 = Poisson).
    pub fixed_dispersion: Option<F>,
}

impl<F: Scalar> Default for NbOptions<F> {
    fn default() -> Self {
        Self {
            max_outer: 100,
            tol: F::of(1e-8),
            fixed_dispersion: None,
        }
    }
}

/// Fits the NB2 model. When `clusters` is given, the returned covariance is
/// the cluster-robust sandwich grouped by those ids; the model-based
/// covariance stays available in `model_covariance`.
pub fn fit_negbin<F: Scalar>(
    y: &Array1<F>,
    x: &Array2<F>,
    names: Vec<String>,
    clusters: Option<&[usize]>,
    opts: &NbOptions<F>,
) -> Result<ModelFit<F>, GlmError> {
    let n = x.nrows();
    let k = x.ncols();
    if n == 0 {
        return Err(GlmError::EmptySubset);
    }
    if n <= k {
        return Err(GlmError::TooFewObservations { n, k });
    }

    let mut counts = Vec::with_capacity(n);
    for (i, &v) in y.iter().enumerate() {
        let vf = v.as_f64();
        if !vf.is_finite() || vf < 0.0 || (vf - vf.round()).abs() > 1e-8 {
            return Err(GlmError::NonIntegerOutcome { row: i, value: vf });
        }
        counts.push(vf.round());
    }
    if counts.iter().sum::<f64>() == 0.0 {
        return Err(GlmError::AllZeroOutcomes);
    }
    let max_y = counts.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
    let lnfact = ln_factorial_table(max_y);

    // Working-scale start: least squares of log(y + 0.5) on X.
    let init_y = y.mapv(|v| (v + F::of(0.5)).ln());
    let xtx = x.t().dot(x);
    let xty = x.t().dot(&init_y);
    let mut beta = linalg::solve_spd(&xtx, &xty)?.solution;

    let fixed = opts.fixed_dispersion.map(|a| a.as_f64());
    let tol = opts.tol.as_f64();

    // Poisson pass: either the final answer (alpha fixed at 0 or data
    // underdispersed) or the launch point for dispersion estimation.
    let mut alpha = fixed.unwrap_or(0.0);
    let mut mu = irls(x, y, &mut beta, alpha, tol * 1e-2)?;
    let mut converged = fixed.is_some();

    if fixed.is_none() {
        let mu64: Vec<f64> = mu.iter().map(|m| m.as_f64()).collect();
        if score_at_zero(&counts, &mu64) <= 0.0 {
            // No overdispersion signal: the Poisson fit is the MLE.
            alpha = 0.0;
            converged = true;
        } else {
            alpha = moment_alpha(&counts, &mu64).max(10.0 * ALPHA_MIN);
        }
    }

    let mut iterations = 0usize;
    if !converged {
        for _ in 0..opts.max_outer {
            iterations += 1;
            let beta_before = beta.clone();
            mu = irls(x, y, &mut beta, alpha, tol * 1e-2)?;
            let mu64: Vec<f64> = mu.iter().map(|m| m.as_f64()).collect();

            let (next_alpha, hit_zero) = newton_alpha(alpha, &counts, &mu64);
            let delta_beta = beta
                .iter()
                .zip(beta_before.iter())
                .map(|(a, b)| (*a - *b).abs().as_f64())
                .fold(0.0f64, f64::max);
            let delta_alpha = (next_alpha - alpha).abs();
            alpha = next_alpha;
            if hit_zero || delta_beta.max(delta_alpha) < tol {
                converged = true;
                break;
            }
        }
    }

    if !converged {
        let mu64: Vec<f64> = mu.iter().map(|m| m.as_f64()).collect();
        return Err(GlmError::NonConvergence {
            iterations,
            deviance: deviance(alpha, &counts, &mu64),
        });
    }

    // Polish the coefficients at the final dispersion so the score columns
    // sum to zero at the reported optimum.
    mu = irls(x, y, &mut beta, alpha, tol * 1e-2)?;

    // Final quantities at (beta, alpha).
    let alpha_f = F::of(alpha);
    let mut weights = Array1::zeros(n);
    let mut score = Array2::zeros((n, k));
    let mut residuals = Array1::zeros(n);
    for i in 0..n {
        let denom = F::one() + alpha_f * mu[i];
        weights[i] = mu[i] / denom;
        residuals[i] = y[i] - mu[i];
        let s = residuals[i] / denom;
        for j in 0..k {
            score[(i, j)] = x[(i, j)] * s;
        }
    }
    let mut xtwx = Array2::zeros((k, k));
    for i in 0..n {
        for a in 0..k {
            for b in a..k {
                let v = x[(i, a)] * x[(i, b)] * weights[i];
                xtwx[(a, b)] += v;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let model_covariance = {
        let l = linalg::cholesky(&xtwx)?;
        linalg::cholesky_inverse(&l)
    };

    let mu64: Vec<f64> = mu.iter().map(|m| m.as_f64()).collect();
    let loglik = F::of(loglik_nb(alpha, &counts, &mu64, &lnfact));

    let mut fit = ModelFit {
        names,
        coefficients: beta,
        covariance: model_covariance.clone(),
        model_covariance,
        residuals,
        score_matrix: score,
        dispersion: Some(F::of(alpha)),
        loglik,
        n_obs: n,
    };
    if let Some(ids) = clusters {
        fit.covariance = cluster_robust_covariance(&fit, ids)?;
    }
    Ok(fit)
}

/// IRLS for `beta` at fixed dispersion; returns the fitted means.
fn irls<F: Scalar>(
    x: &Array2<F>,
    y: &Array1<F>,
    beta: &mut Array1<F>,
    alpha: f64,
    tol: f64,
) -> Result<Array1<F>, GlmError> {
    let n = x.nrows();
    let k = x.ncols();
    let alpha_f = F::of(alpha);
    let clamp_lo = F::of(-ETA_CLAMP);
    let clamp_hi = F::of(ETA_CLAMP);

    let mut mu = Array1::zeros(n);
    for _ in 0..MAX_INNER {
        let mut xtwx = Array2::<F>::zeros((k, k));
        let mut xtwz = Array1::<F>::zeros(k);
        for i in 0..n {
            let mut eta = F::zero();
            for j in 0..k {
                eta += x[(i, j)] * beta[j];
            }
            eta = eta.max(clamp_lo).min(clamp_hi);
            let m = eta.exp();
            mu[i] = m;
            let w = m / (F::one() + alpha_f * m);
            let z = eta + (y[i] - m) / m;
            for a in 0..k {
                let xa_w = x[(i, a)] * w;
                xtwz[a] += xa_w * z;
                for b in a..k {
                    xtwx[(a, b)] += xa_w * x[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let l = linalg::cholesky(&xtwx)?;
        let new_beta = linalg::cholesky_solve(&l, &xtwz);
        let delta = new_beta
            .iter()
            .zip(beta.iter())
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0f64, f64::max);
        *beta = new_beta;
        if delta < tol {
            break;
        }
    }
    // Means at the final coefficients.
    for i in 0..n {
        let mut eta = F::zero();
        for j in 0..k {
            eta += x[(i, j)] * beta[j];
        }
        eta = eta.max(clamp_lo).min(clamp_hi);
        mu[i] = eta.exp();
    }
    Ok(mu)
}

/// One safeguarded Newton step for the dispersion. Returns the new alpha
/// and whether the boundary at zero was taken.
fn newton_alpha(alpha: f64, y: &[f64], mu: &[f64]) -> (f64, bool) {
    let (g, h) = profile_grad_hess(alpha, y, mu);
    let mut next = if h < 0.0 && g.is_finite() && h.is_finite() {
        alpha - g / h
    } else if g > 0.0 {
        alpha * 2.0
    } else {
        alpha * 0.5
    };
    // Multiplicative trust region keeps early steps sane.
    next = next
        .clamp(alpha / 5.0, alpha * 5.0)
        .clamp(ALPHA_MIN, ALPHA_MAX);
    if next <= ALPHA_MIN && g < 0.0 {
        // Pushing below the floor: decide between Poisson and the floor by
        // the profile score at zero.
        if score_at_zero(y, mu) <= 0.0 {
            return (0.0, true);
        }
        return (ALPHA_MIN, true);
    }
    (next, false)
}

/// Profile log-likelihood score at alpha = 0: `sum((y-mu)^2 - y) / 2`.
fn score_at_zero(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&yi, &mi)| ((yi - mi).powi(2) - yi) / 2.0)
        .sum()
}

/// Method-of-moments dispersion from `Var = mu + alpha mu^2`.
fn moment_alpha(y: &[f64], mu: &[f64]) -> f64 {
    let num: f64 = y
        .iter()
        .zip(mu)
        .map(|(&yi, &mi)| (yi - mi).powi(2) - mi)
        .sum();
    let den: f64 = mu.iter().map(|&mi| mi * mi).sum();
    (num / den).max(0.0)
}

/// First and second derivatives of the profile log-likelihood in alpha.
/// Gamma ratios are expanded as finite sums over the integer outcomes.
fn profile_grad_hess(alpha: f64, y: &[f64], mu: &[f64]) -> (f64, f64) {
    let mut g = 0.0;
    let mut h = 0.0;
    let a2 = alpha * alpha;
    let a3 = a2 * alpha;
    for (&yi, &mi) in y.iter().zip(mu) {
        let yk = yi as usize;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for k in 1..yk {
            let kf = k as f64;
            let d = 1.0 + alpha * kf;
            s1 += kf / d;
            s2 += kf * kf / (d * d);
        }
        let l1p = (alpha * mi).ln_1p();
        let denom = 1.0 + alpha * mi;
        g += s1 + l1p / a2 - (yi + 1.0 / alpha) * mi / denom;
        h += -s2 - 2.0 * l1p / a3
            + 2.0 * mi / (a2 * denom)
            + (yi + 1.0 / alpha) * mi * mi / (denom * denom);
    }
    (g, h)
}

/// NB2 log-likelihood; exact Poisson limit at alpha = 0.
fn loglik_nb(alpha: f64, y: &[f64], mu: &[f64], lnfact: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        let yk = yi as usize;
        ll -= lnfact[yk];
        if alpha == 0.0 {
            ll += yi * mi.ln() - mi;
        } else {
            for k in 1..yk {
                ll += (alpha * k as f64).ln_1p();
            }
            ll += yi * mi.ln() - (yi + 1.0 / alpha) * (alpha * mi).ln_1p();
        }
    }
    ll
}

/// Residual deviance, reported on non-convergence.
fn deviance(alpha: f64, y: &[f64], mu: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        let y_term = if yi > 0.0 { yi * (yi / mi).ln() } else { 0.0 };
        if alpha == 0.0 {
            d += y_term - (yi - mi);
        } else {
            let theta = 1.0 / alpha;
            d += y_term - (yi + theta) * ((yi + theta) / (mi + theta)).ln();
        }
    }
    2.0 * d
}

fn ln_factorial_table(max_y: usize) -> Vec<f64> {
    let mut t = vec![0.0; max_y + 1];
    for k in 2..=max_y {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::hc_robust_covariance;
    use crate::seed;
    use rand::Rng;
    use rand_distr::{Distribution, Gamma, Poisson};

    /// 2x2 difference-in-differences design row: [1, post*treat, post, treat].
    fn did_row(post: f64, treat: f64) -> [f64; 4] {
        [1.0, post * treat, post, treat]
    }

    fn did_names() -> Vec<String> {
        ["intercept", "post_x_treat", "post", "treat"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn build_xy(cells: &[(f64, f64, Vec<f64>)]) -> (Array2<f64>, Array1<f64>) {
        let n: usize = cells.iter().map(|(_, _, ys)| ys.len()).sum();
        let mut x = Array2::zeros((n, 4));
        let mut y = Array1::zeros(n);
        let mut i = 0;
        for (post, treat, ys) in cells {
            for &yi in ys {
                let row = did_row(*post, *treat);
                for j in 0..4 {
                    x[(i, j)] = row[j];
                }
                y[i] = yi;
                i += 1;
            }
        }
        (x, y)
    }

    #[test]
    fn saturated_design_recovers_log_ratio_of_ratios() {
        // Constant cells with means (10,10) control and (10,8) treated.
        let cells = vec![
            (0.0, 0.0, vec![10.0; 6]),
            (1.0, 0.0, vec![10.0; 6]),
            (0.0, 1.0, vec![10.0; 6]),
            (1.0, 1.0, vec![8.0; 6]),
        ];
        let (x, y) = build_xy(&cells);
        let fit = fit_negbin(&y, &x, did_names(), None, &NbOptions::default()).unwrap();
        let expected = (8.0f64 / 10.0).ln() - (10.0f64 / 10.0).ln();
        assert!((fit.coef(1) - expected).abs() < 1e-8);
        assert!((expected + 0.22314).abs() < 1e-5);
    }

    #[test]
    fn saturated_poisson_draws_match_cell_mean_closed_form() {
        let mut rng = seed::rng(11, &[99]);
        let mut cells = Vec::new();
        for (post, treat, lambda) in [
            (0.0, 0.0, 10.0),
            (1.0, 0.0, 10.0),
            (0.0, 1.0, 10.0),
            (1.0, 1.0, 8.0),
        ] {
            let pois = Poisson::new(lambda).unwrap();
            let ys: Vec<f64> = (0..60).map(|_| pois.sample(&mut rng)).collect();
            cells.push((post, treat, ys));
        }
        let (x, y) = build_xy(&cells);
        let fit = fit_negbin(&y, &x, did_names(), None, &NbOptions::default()).unwrap();
        // Saturated model: beta1 equals the log ratio of ratios of the
        // observed cell means, whatever the dispersion does.
        let mean = |c: &Vec<f64>| c.iter().sum::<f64>() / c.len() as f64;
        let expected = (mean(&cells[3].2) / mean(&cells[2].2)).ln()
            - (mean(&cells[1].2) / mean(&cells[0].2)).ln();
        assert!((fit.coef(1) - expected).abs() < 1e-6);
    }

    #[test]
    fn intercept_only_constant_outcome() {
        let n = 12;
        let x = Array2::from_elem((n, 1), 1.0);
        let y = Array1::from_elem(n, 7.0);
        let fit = fit_negbin(
            &y,
            &x,
            vec!["intercept".into()],
            None,
            &NbOptions::default(),
        )
        .unwrap();
        assert!((fit.coef(0) - 7.0f64.ln()).abs() < 1e-8);
        assert_eq!(fit.dispersion, Some(0.0));
    }

    /// Independent Poisson solver (Newton on the Poisson log-likelihood),
    /// used as the oracle for the alpha = 0 route.
    fn poisson_fit_oracle(y: &Array1<f64>, x: &Array2<f64>) -> Array1<f64> {
        let k = x.ncols();
        let n = x.nrows();
        let mut beta = Array1::zeros(k);
        beta[0] = (y.sum() / n as f64).ln();
        for _ in 0..200 {
            let mut grad = Array1::<f64>::zeros(k);
            let mut info = Array2::<f64>::zeros((k, k));
            for i in 0..n {
                let eta: f64 = (0..k).map(|j| x[(i, j)] * beta[j]).sum();
                let mu = eta.exp();
                for a in 0..k {
                    grad[a] += x[(i, a)] * (y[i] - mu);
                    for b in 0..k {
                        info[(a, b)] += x[(i, a)] * x[(i, b)] * mu;
                    }
                }
            }
            let l = crate::linalg::cholesky(&info).unwrap();
            let step = crate::linalg::cholesky_solve(&l, &grad);
            let delta = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            for j in 0..k {
                beta[j] += step[j];
            }
            if delta < 1e-12 {
                break;
            }
        }
        beta
    }

    #[test]
    fn fixed_zero_dispersion_matches_independent_poisson_fit() {
        let mut rng = seed::rng(5, &[17]);
        let n = 300;
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let a: f64 = rng.random_range(0.0..3.0);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = a;
            let mu = (0.8 + 0.4 * a).exp();
            y[i] = Poisson::new(mu).unwrap().sample(&mut rng);
        }
        let opts = NbOptions {
            fixed_dispersion: Some(0.0),
            ..NbOptions::default()
        };
        let fit = fit_negbin(&y, &x, vec!["b0".into(), "b1".into()], None, &opts).unwrap();
        let oracle = poisson_fit_oracle(&y, &x);
        for j in 0..2 {
            assert!(
                (fit.coef(j) - oracle[j]).abs() < 1e-6,
                "coef {j}: {} vs {}",
                fit.coef(j),
                oracle[j]
            );
        }
    }

    fn nb_draw(rng: &mut impl Rng, mu: f64, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            Poisson::new(mu).unwrap().sample(rng)
        } else {
            let gamma = Gamma::new(1.0 / alpha, alpha * mu).unwrap();
            let lambda: f64 = gamma.sample(rng).max(1e-12);
            Poisson::new(lambda).unwrap().sample(rng)
        }
    }

    #[test]
    fn recovers_overdispersed_coefficients_and_dispersion() {
        let mut rng = seed::rng(23, &[4]);
        let n = 4000;
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let a: f64 = rng.random_range(0.0..2.0);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = a;
            let mu = (1.2 + 0.5 * a).exp();
            y[i] = nb_draw(&mut rng, mu, 0.5);
        }
        let fit = fit_negbin(
            &y,
            &x,
            vec!["b0".into(), "b1".into()],
            None,
            &NbOptions::default(),
        )
        .unwrap();
        assert!((fit.coef(0) - 1.2).abs() < 0.1);
        assert!((fit.coef(1) - 0.5).abs() < 0.1);
        let alpha = fit.dispersion.unwrap();
        assert!((0.3..0.8).contains(&alpha), "alpha = {alpha}");
        // Scores vanish at the optimum.
        for s in fit.score_column_sums() {
            assert!(s.abs() < 1e-8 * n as f64);
        }
    }

    #[test]
    fn singleton_clusters_equal_hc_robust() {
        let mut rng = seed::rng(31, &[8]);
        let n = 200;
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let a: f64 = rng.random_range(0.0..2.0);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = a;
            y[i] = nb_draw(&mut rng, (1.0 + 0.3 * a).exp(), 0.4);
        }
        let ids: Vec<usize> = (0..n).collect();
        let fit = fit_negbin(
            &y,
            &x,
            vec!["b0".into(), "b1".into()],
            Some(&ids),
            &NbOptions::default(),
        )
        .unwrap();
        let hc = hc_robust_covariance(&fit);
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (fit.covariance[(a, b)] - hc[(a, b)]).abs() < 1e-10 * (1.0 + hc[(a, b)].abs())
                );
            }
        }
    }

    #[test]
    fn rejects_bad_outcomes() {
        let x = Array2::from_elem((5, 1), 1.0);
        let frac = Array1::from_vec(vec![1.0, 2.0, 2.5, 1.0, 0.0]);
        assert!(matches!(
            fit_negbin(&frac, &x, vec!["b0".into()], None, &NbOptions::default()).unwrap_err(),
            GlmError::NonIntegerOutcome { row: 2, .. }
        ));
        let zeros = Array1::from_vec(vec![0.0; 5]);
        assert!(matches!(
            fit_negbin(&zeros, &x, vec!["b0".into()], None, &NbOptions::default()).unwrap_err(),
            GlmError::AllZeroOutcomes
        ));
    }
}
