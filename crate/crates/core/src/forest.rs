//! Per-arm random forests: the non-parametric counterfactual models.
//!
//! Trees grow on bootstrap resamples with feature subsampling at every
//! split; the forest prediction is the plain mean over trees, summed in
//! tree order so results do not depend on the worker count. Each tree owns
//! a seed derived from `(seed, tree index)`, which makes growth
//! embarrassingly parallel and byte-reproducible.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cohort::CohortTable;
use crate::num::Scalar;
use crate::seed;
use crate::tree::{FeatureData, GrowthConfig, RegressionTree, TreeError};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no rows in this arm")]
    EmptyArm,
    #[error("rows span both arms; fit one forest per arm")]
    MixedArms,
    #[error("min_node_size {min_node_size} exceeds the number of rows {n}")]
    MinNodeTooLarge { min_node_size: usize, n: usize },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("need at least 2 folds, got {0}")]
    BadFolds(usize),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Forest knobs; `m_try = None` uses `ceil(sqrt(p))`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForestHyperparams {
    pub n_trees: usize,
    pub min_node_size: usize,
    pub max_depth: Option<usize>,
    pub m_try: Option<usize>,
    /// Grow each tree on a bootstrap resample (true for forests; turned
    /// off for single-tree diagnostics).
    pub bootstrap: bool,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        Self {
            n_trees: 300,
            min_node_size: 25,
            max_depth: None,
            m_try: None,
            bootstrap: true,
        }
    }
}

/// Which columns feed the trees.
#[derive(Clone, Debug, Default)]
pub struct FeatureSelection {
    /// Schema covariates to use; `None` means all of them.
    pub covariates: Option<Vec<String>>,
    /// Adds the continuous treatment as a feature (the continuous-exposure
    /// counterfactual variant).
    pub include_treatment: bool,
}

pub struct ForestModel<F> {
    pub trees: Vec<RegressionTree<F>>,
    pub hyperparams: ForestHyperparams,
    /// Arm this forest was fit on, when the rows carried arm flags.
    pub arm: Option<bool>,
    /// Out-of-bag mean squared error; `None` without bootstrap.
    pub oob_error: Option<F>,
    pub feature_names: Vec<String>,
    pub includes_treatment: bool,
}

impl<F: Scalar> ForestModel<F> {
    /// Mean prediction over trees for a feature vector in training layout.
    pub fn predict_features(&self, features: &[F]) -> F {
        let sum: F = self.trees.iter().map(|t| t.predict(features)).sum();
        sum / F::of_usize(self.trees.len())
    }

    /// Predictions for table rows, resolving features once.
    pub fn predict_rows(
        &self,
        table: &CohortTable<F>,
        rows: &[usize],
    ) -> Result<Vec<F>, ForestError> {
        let data = FeatureData::from_table(
            table,
            non_default_names(&self.feature_names, self.includes_treatment).as_deref(),
            self.includes_treatment,
        )?;
        let mut buf = Vec::new();
        Ok(rows
            .iter()
            .map(|&r| {
                data.gather_row(r, &mut buf);
                self.predict_features(&buf)
            })
            .collect())
    }

    /// Predictions with the treatment feature overridden, for the
    /// continuous-exposure contrast `E(Y|X, A = a + delta) - E(Y|X, A = a)`.
    pub fn predict_rows_at_exposure(
        &self,
        table: &CohortTable<F>,
        rows: &[usize],
        shift: F,
    ) -> Result<Vec<F>, ForestError> {
        if !self.includes_treatment {
            return Err(ForestError::Tree(TreeError::UnknownCovariate {
                name: "treatment".into(),
            }));
        }
        let data = FeatureData::from_table(
            table,
            non_default_names(&self.feature_names, true).as_deref(),
            true,
        )?;
        let exposure_col = data.n_features() - 1;
        let mut buf = Vec::new();
        Ok(rows
            .iter()
            .map(|&r| {
                data.gather_row(r, &mut buf);
                buf[exposure_col] += shift;
                self.predict_features(&buf)
            })
            .collect())
    }
}

/// The covariate list passed back to `FeatureData`: `None` when the model
/// was fit on every schema covariate.
fn non_default_names(names: &[String], includes_treatment: bool) -> Option<Vec<String>> {
    let n = names.len() - usize::from(includes_treatment);
    Some(names[..n].to_vec())
}

/// Fits a forest on `rows`. When arm flags are present the rows must all
/// be in one arm, matching the per-arm counterfactual design.
pub fn fit_forest<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    features: &FeatureSelection,
    hyperparams: ForestHyperparams,
    seed_value: u64,
) -> Result<ForestModel<F>, ForestError> {
    if rows.is_empty() {
        return Err(ForestError::EmptyArm);
    }
    if hyperparams.min_node_size > rows.len() {
        return Err(ForestError::MinNodeTooLarge {
            min_node_size: hyperparams.min_node_size,
            n: rows.len(),
        });
    }
    let mut arm: Option<bool> = None;
    for &r in rows {
        if let Some(a) = table.record(r).arm {
            match arm {
                None => arm = Some(a),
                Some(prev) if prev != a => return Err(ForestError::MixedArms),
                _ => {}
            }
        }
    }

    let data = FeatureData::from_table(
        table,
        features.covariates.as_deref(),
        features.include_treatment,
    )?;
    let targets: Vec<F> = (0..table.n_records()).map(|r| table.outcome(r)).collect();
    let p = data.n_features();
    let m_try = hyperparams
        .m_try
        .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
        .min(p);
    let cfg = GrowthConfig {
        min_leaf: hyperparams.min_node_size,
        max_depth: hyperparams.max_depth,
        m_try: Some(m_try),
    };

    let grown: Vec<(RegressionTree<F>, Vec<bool>)> = (0..hyperparams.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed_value, &[seed::STREAM_FOREST, t as u64]);
            let (bag, in_bag) = if hyperparams.bootstrap {
                let mut in_bag = vec![false; rows.len()];
                let bag: Vec<usize> = (0..rows.len())
                    .map(|_| {
                        let ix = rng.random_range(0..rows.len());
                        in_bag[ix] = true;
                        rows[ix]
                    })
                    .collect();
                (bag, in_bag)
            } else {
                (rows.to_vec(), vec![true; rows.len()])
            };
            let tree =
                RegressionTree::fit(&data, &targets, &bag, cfg, &mut rng).expect("non-empty bag");
            (tree, in_bag)
        })
        .collect();

    // Out-of-bag error, aggregated in fixed row/tree order.
    let oob_error = if hyperparams.bootstrap {
        let mut buf = Vec::new();
        let mut total = F::zero();
        let mut used = 0usize;
        for (i, &row) in rows.iter().enumerate() {
            data.gather_row(row, &mut buf);
            let mut sum = F::zero();
            let mut count = 0usize;
            for (tree, in_bag) in &grown {
                if !in_bag[i] {
                    sum += tree.predict(&buf);
                    count += 1;
                }
            }
            if count > 0 {
                let err = sum / F::of_usize(count) - targets[row];
                total += err * err;
                used += 1;
            }
        }
        (used > 0).then(|| total / F::of_usize(used))
    } else {
        None
    };

    Ok(ForestModel {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        hyperparams,
        arm,
        oob_error,
        feature_names: data.names.clone(),
        includes_treatment: features.include_treatment,
    })
}

/// Grid search by k-fold cross-validated mean squared error.
pub struct ForestTuneResult<F> {
    pub chosen: usize,
    pub cv_mse: Vec<F>,
}

/// Picks the grid point with minimal CV error; ties prefer fewer trees,
/// then larger node size, then earlier grid position.
pub fn tune_forest<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    features: &FeatureSelection,
    grid: &[ForestHyperparams],
    k_folds: usize,
    seed_value: u64,
) -> Result<ForestTuneResult<F>, ForestError> {
    if grid.is_empty() {
        return Err(ForestError::EmptyGrid);
    }
    if k_folds < 2 || k_folds > rows.len() {
        return Err(ForestError::BadFolds(k_folds));
    }
    let folds = make_folds(rows, k_folds, seed_value);

    let mut cv_mse = Vec::with_capacity(grid.len());
    for (gi, hp) in grid.iter().enumerate() {
        let mut total = F::zero();
        let mut count = 0usize;
        for (fi, fold) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != fi)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let model = fit_forest(
                table,
                &train,
                features,
                *hp,
                seed::derive(seed_value, &[seed::STREAM_CV, gi as u64, fi as u64]),
            )?;
            let preds = model.predict_rows(table, fold)?;
            for (&row, pred) in fold.iter().zip(preds) {
                let err = pred - table.outcome(row);
                total += err * err;
                count += 1;
            }
        }
        cv_mse.push(total / F::of_usize(count));
    }

    let mut chosen = 0usize;
    for gi in 1..grid.len() {
        let better = cv_mse[gi] < cv_mse[chosen];
        let tie = cv_mse[gi] == cv_mse[chosen];
        let prefer = grid[gi].n_trees < grid[chosen].n_trees
            || (grid[gi].n_trees == grid[chosen].n_trees
                && grid[gi].min_node_size > grid[chosen].min_node_size);
        if better || (tie && prefer) {
            chosen = gi;
        }
    }
    Ok(ForestTuneResult { chosen, cv_mse })
}

/// Seeded shuffle, then contiguous chunks as folds.
pub(crate) fn make_folds(rows: &[usize], k: usize, seed_value: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut shuffled = rows.to_vec();
    let mut rng = seed::rng(seed_value, &[seed::STREAM_CV]);
    shuffled.shuffle(&mut rng);
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(shuffled[cursor..cursor + size].to_vec());
        cursor += size;
    }
    folds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CovariateKind, CovariateSchema, SchemaColumn, UnitRecord};
    use rand::Rng;

    fn smooth_table(n: usize, seed_value: u64) -> CohortTable<f64> {
        let schema = CovariateSchema::new(vec![
            SchemaColumn {
                name: "x1".into(),
                kind: CovariateKind::Numeric,
            },
            SchemaColumn {
                name: "x2".into(),
                kind: CovariateKind::Numeric,
            },
        ])
        .unwrap();
        let mut rng = seed::rng(seed_value, &[77]);
        let records = (0..n)
            .map(|i| {
                let x1: f64 = rng.random_range(0.0..1.0);
                let x2: f64 = rng.random_range(0.0..1.0);
                let noise: f64 = rng.random_range(-0.1..0.1);
                UnitRecord {
                    unit_id: format!("u{i}"),
                    outcome: (x1 * 6.0).sin() + x2 * x2 + noise,
                    treatment: 0.0,
                    arm: None,
                    covariates: vec![x1, x2],
                    period: None,
                    firm_group: None,
                }
            })
            .collect();
        CohortTable::from_records(schema, records).unwrap()
    }

    #[test]
    fn single_stump_without_bootstrap_predicts_the_training_mean() {
        let t = smooth_table(50, 1);
        let rows: Vec<usize> = (0..50).collect();
        let hp = ForestHyperparams {
            n_trees: 1,
            min_node_size: 1,
            max_depth: Some(0),
            m_try: None,
            bootstrap: false,
        };
        let model = fit_forest(&t, &rows, &FeatureSelection::default(), hp, 9).unwrap();
        let mean: f64 = rows.iter().map(|&r| t.outcome(r)).sum::<f64>() / 50.0;
        let preds = model.predict_rows(&t, &rows).unwrap();
        for p in preds {
            assert!((p - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn forest_prediction_is_the_mean_over_enumerated_trees() {
        let t = smooth_table(120, 2);
        let rows: Vec<usize> = (0..120).collect();
        let hp = ForestHyperparams {
            n_trees: 7,
            min_node_size: 10,
            max_depth: Some(1),
            m_try: None,
            bootstrap: true,
        };
        let model = fit_forest(&t, &rows, &FeatureSelection::default(), hp, 4).unwrap();
        assert_eq!(model.trees.len(), 7);
        // Re-average the individual trees by hand.
        let data = FeatureData::from_table(&t, None, false).unwrap();
        let mut buf = Vec::new();
        for &row in &[0usize, 17, 63, 119] {
            data.gather_row(row, &mut buf);
            let hand: f64 = model.trees.iter().map(|tr| tr.predict(&buf)).sum::<f64>() / 7.0;
            assert!((model.predict_features(&buf) - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn forest_beats_a_single_tree_out_of_bag() {
        let t = smooth_table(600, 3);
        let rows: Vec<usize> = (0..600).collect();
        let forest = fit_forest(
            &t,
            &rows,
            &FeatureSelection::default(),
            ForestHyperparams {
                n_trees: 120,
                min_node_size: 5,
                ..Default::default()
            },
            11,
        )
        .unwrap();
        let single = fit_forest(
            &t,
            &rows,
            &FeatureSelection::default(),
            ForestHyperparams {
                n_trees: 1,
                min_node_size: 5,
                ..Default::default()
            },
            11,
        )
        .unwrap();
        assert!(forest.oob_error.unwrap() < single.oob_error.unwrap());
    }

    #[test]
    fn deterministic_under_seed_and_invariant_to_tree_order() {
        let t = smooth_table(200, 4);
        let rows: Vec<usize> = (0..200).collect();
        let hp = ForestHyperparams {
            n_trees: 20,
            min_node_size: 10,
            ..Default::default()
        };
        let a = fit_forest(&t, &rows, &FeatureSelection::default(), hp, 5).unwrap();
        let b = fit_forest(&t, &rows, &FeatureSelection::default(), hp, 5).unwrap();
        let pa = a.predict_rows(&t, &rows).unwrap();
        let pb = b.predict_rows(&t, &rows).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a.oob_error, b.oob_error);
    }

    #[test]
    fn mixed_arms_are_rejected() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(UnitRecord {
                unit_id: format!("u{i}"),
                outcome: i as f64,
                treatment: 0.0,
                arm: Some(i % 2 == 0),
                covariates: vec![i as f64],
                period: None,
                firm_group: None,
            });
        }
        let schema = CovariateSchema::new(vec![SchemaColumn {
            name: "x".into(),
            kind: CovariateKind::Numeric,
        }])
        .unwrap();
        let t = CohortTable::from_records(schema, records).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let hp = ForestHyperparams {
            n_trees: 3,
            min_node_size: 2,
            ..Default::default()
        };
        assert!(matches!(
            fit_forest(&t, &rows, &FeatureSelection::default(), hp, 1),
            Err(ForestError::MixedArms)
        ));
    }

    #[test]
    fn tuning_prefers_depth_on_an_interactive_response() {
        // Response is a two-way interaction a stump cannot represent.
        let schema = CovariateSchema::new(vec![
            SchemaColumn {
                name: "x1".into(),
                kind: CovariateKind::Binary,
            },
            SchemaColumn {
                name: "x2".into(),
                kind: CovariateKind::Binary,
            },
        ])
        .unwrap();
        let mut rng = seed::rng(6, &[78]);
        let records: Vec<UnitRecord<f64>> = (0..400)
            .map(|i| {
                let x1 = f64::from(rng.random_bool(0.5));
                let x2 = f64::from(rng.random_bool(0.5));
                let y = if x1 == x2 { 2.0 } else { -2.0 };
                UnitRecord {
                    unit_id: format!("u{i}"),
                    outcome: y + rng.random_range(-0.2..0.2),
                    treatment: 0.0,
                    arm: None,
                    covariates: vec![x1, x2],
                    period: None,
                    firm_group: None,
                }
            })
            .collect();
        let t = CohortTable::from_records(schema, records).unwrap();
        let rows: Vec<usize> = (0..400).collect();
        let shallow = ForestHyperparams {
            n_trees: 40,
            min_node_size: 20,
            max_depth: Some(1),
            m_try: None,
            bootstrap: true,
        };
        let deep = ForestHyperparams {
            max_depth: Some(8),
            ..shallow
        };
        let result = tune_forest(
            &t,
            &rows,
            &FeatureSelection::default(),
            &[shallow, deep],
            4,
            13,
        )
        .unwrap();
        assert_eq!(result.chosen, 1);
        assert!(result.cv_mse[1] < result.cv_mse[0]);
    }

    #[test]
    fn single_grid_point_is_returned_and_matches_manual_refit() {
        let t = smooth_table(150, 7);
        let rows: Vec<usize> = (0..150).collect();
        let hp = ForestHyperparams {
            n_trees: 10,
            min_node_size: 10,
            ..Default::default()
        };
        let result = tune_forest(&t, &rows, &FeatureSelection::default(), &[hp], 3, 21).unwrap();
        assert_eq!(result.chosen, 0);
        // Recompute fold CV by hand with the same derivations.
        let folds = make_folds(&rows, 3, 21);
        let mut total = 0.0;
        let mut count = 0usize;
        for (fi, fold) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != fi)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let model = fit_forest(
                &t,
                &train,
                &FeatureSelection::default(),
                hp,
                seed::derive(21, &[seed::STREAM_CV, 0, fi as u64]),
            )
            .unwrap();
            for (&row, pred) in fold.iter().zip(model.predict_rows(&t, fold).unwrap()) {
                total += (pred - t.outcome(row)).powi(2);
                count += 1;
            }
        }
        assert!((result.cv_mse[0] - total / count as f64).abs() < 1e-12);
    }
}
