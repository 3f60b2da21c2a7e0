//! Treatment-control differences (TCD) and the CART over them.
//!
//! For a treated unit the TCD is the observed outcome minus the control
//! forest's prediction; for a control unit it is the treated forest's
//! prediction minus the observed outcome. A cost-complexity-pruned
//! regression tree over prediction-set TCDs proposes the subgroups; leaf
//! means with within-leaf bootstrap standard errors feed the stability
//! gate.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::cohort::CohortTable;
use crate::forest::{make_folds, ForestError, ForestModel};
use crate::num::Scalar;
use crate::rules::{PartitionRuleTree, RulesError};
use crate::seed;
use crate::stability::SourceSet;
use crate::tree::{FeatureData, GrowthConfig, RegressionTree, TreeError};

#[derive(Debug, Error)]
pub enum TcdError {
    #[error("unit `{unit_id}` has no arm flag; band-filter the table first")]
    MissingArm { unit_id: String },
    #[error("no TCD records")]
    EmptyRecords,
    #[error("need at least 2 bootstrap replicates, got {0}")]
    BadBootstrap(usize),
    #[error("need at least 2 cross-validation folds, got {0}")]
    BadFolds(usize),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Rules(#[from] RulesError),
}

/// One unit's treatment-control difference.
#[derive(Clone, Debug)]
pub struct TcdRecord<F> {
    pub unit_id: String,
    /// Row of the source table this record came from.
    pub row: usize,
    pub arm: Option<bool>,
    pub observed: F,
    pub counterfactual: F,
    pub gamma: F,
    pub source: SourceSet,
}

/// Per-unit TCDs for a row set, using the opposite arm's forest as the
/// counterfactual model.
pub fn compute_tcd<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    forest_control: &ForestModel<F>,
    forest_treated: &ForestModel<F>,
    source: SourceSet,
) -> Result<Vec<TcdRecord<F>>, TcdError> {
    let mut treated_rows = Vec::new();
    let mut control_rows = Vec::new();
    for &r in rows {
        match table.record(r).arm {
            Some(true) => treated_rows.push(r),
            Some(false) => control_rows.push(r),
            None => {
                return Err(TcdError::MissingArm {
                    unit_id: table.record(r).unit_id.clone(),
                })
            }
        }
    }
    let mu0_for_treated = forest_control.predict_rows(table, &treated_rows)?;
    let mu1_for_control = forest_treated.predict_rows(table, &control_rows)?;

    let mut by_row: std::collections::HashMap<usize, (F, bool)> = std::collections::HashMap::new();
    for (&r, &cf) in treated_rows.iter().zip(&mu0_for_treated) {
        by_row.insert(r, (cf, true));
    }
    for (&r, &cf) in control_rows.iter().zip(&mu1_for_control) {
        by_row.insert(r, (cf, false));
    }

    Ok(rows
        .iter()
        .map(|&r| {
            let (counterfactual, treated) = by_row[&r];
            let observed = table.outcome(r);
            let gamma = if treated {
                observed - counterfactual
            } else {
                counterfactual - observed
            };
            TcdRecord {
                unit_id: table.record(r).unit_id.clone(),
                row: r,
                arm: Some(treated),
                observed,
                counterfactual,
                gamma,
                source,
            }
        })
        .collect())
}

/// Continuous-exposure variant: `gamma(x) = E(Y|X, A=a+delta) - E(Y|X, A=a)`
/// from one forest that includes the exposure as a feature. With
/// `delta = 0` every difference is exactly zero.
pub fn compute_tcd_continuous<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    forest: &ForestModel<F>,
    delta: F,
    source: SourceSet,
) -> Result<Vec<TcdRecord<F>>, TcdError> {
    let base = forest.predict_rows(table, rows)?;
    let shifted = forest.predict_rows_at_exposure(table, rows, delta)?;
    Ok(rows
        .iter()
        .zip(base.iter().zip(&shifted))
        .map(|(&r, (&b, &s))| TcdRecord {
            unit_id: table.record(r).unit_id.clone(),
            row: r,
            arm: table.record(r).arm,
            observed: table.outcome(r),
            counterfactual: s,
            gamma: s - b,
            source,
        })
        .collect())
}

/// CART settings for subgroup learning over TCDs.
#[derive(Clone, Debug)]
pub struct CartConfig<F> {
    pub cv_folds: usize,
    pub min_leaf: usize,
    /// Override for the complexity values evaluated by cross-validation;
    /// `None` derives them from the fitted tree's pruning schedule.
    pub complexity_grid: Option<Vec<F>>,
    pub max_depth: Option<usize>,
}

impl<F: Scalar> Default for CartConfig<F> {
    fn default() -> Self {
        Self {
            cv_folds: 10,
            min_leaf: 50,
            complexity_grid: None,
            max_depth: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CvPoint<F> {
    pub alpha: F,
    pub cv_mse: F,
    pub cv_se: F,
}

pub struct CartOutput<F> {
    pub tree: PartitionRuleTree<F>,
    pub chosen_alpha: F,
    pub cv_curve: Vec<CvPoint<F>>,
    pub full_tree_leaves: usize,
}

/// Grows the full CART on prediction-set TCDs, derives its cost-complexity
/// schedule, selects the complexity by k-fold cross-validation with the
/// one-standard-error rule, and returns the pruned partition as rules.
pub fn grow_tcd_tree<F: Scalar>(
    table: &CohortTable<F>,
    records: &[TcdRecord<F>],
    config: &CartConfig<F>,
    seed_value: u64,
) -> Result<CartOutput<F>, TcdError> {
    if records.is_empty() {
        return Err(TcdError::EmptyRecords);
    }
    if config.cv_folds < 2 {
        return Err(TcdError::BadFolds(config.cv_folds));
    }
    let data = FeatureData::from_table(table, None, false)?;
    let mut targets = vec![F::zero(); table.n_records()];
    for rec in records {
        targets[rec.row] = rec.gamma;
    }
    let rows: Vec<usize> = records.iter().map(|r| r.row).collect();
    let cfg = GrowthConfig {
        min_leaf: config.min_leaf,
        max_depth: config.max_depth,
        m_try: None,
    };

    let mut full = {
        let mut rng = seed::rng(seed_value, &[seed::STREAM_CART, 0]);
        RegressionTree::fit(&data, &targets, &rows, cfg, &mut rng)?
    };
    let criticals = full.annotate_pruning();

    let candidates: Vec<F> = match &config.complexity_grid {
        Some(grid) => grid.clone(),
        None => candidate_alphas(&criticals),
    };

    // A stump (or a single-point grid) leaves nothing to select; skip
    // cross-validation outright.
    if full.n_leaves() == 1 || candidates.len() == 1 {
        let alpha = candidates.first().copied().unwrap_or_else(F::zero);
        let full_tree_leaves = full.n_leaves();
        let tree = full.to_rule_tree(alpha, &data, table.schema())?;
        return Ok(CartOutput {
            tree,
            chosen_alpha: alpha,
            cv_curve: vec![CvPoint {
                alpha,
                cv_mse: F::zero(),
                cv_se: F::zero(),
            }],
            full_tree_leaves,
        });
    }

    // Fold trees are grown once; every candidate is evaluated on each.
    let folds = make_folds(&rows, config.cv_folds.min(rows.len()), seed_value);
    let fold_results: Vec<Vec<(F, usize)>> = folds
        .par_iter()
        .enumerate()
        .map(|(fi, fold)| {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != fi)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let mut rng = seed::rng(seed_value, &[seed::STREAM_CART, 1 + fi as u64]);
            let mut tree = RegressionTree::fit(&data, &targets, &train, cfg, &mut rng)
                .expect("folds are non-empty");
            tree.annotate_pruning();
            let mut buf = Vec::new();
            candidates
                .iter()
                .map(|&alpha| {
                    let mut sse = F::zero();
                    for &row in fold {
                        data.gather_row(row, &mut buf);
                        let err = tree.predict_pruned(&buf, alpha) - targets[row];
                        sse += err * err;
                    }
                    (sse, fold.len())
                })
                .collect()
        })
        .collect();

    let mut cv_curve = Vec::with_capacity(candidates.len());
    for (ci, &alpha) in candidates.iter().enumerate() {
        let fold_mses: Vec<F> = fold_results
            .iter()
            .map(|f| f[ci].0 / F::of_usize(f[ci].1.max(1)))
            .collect();
        let k = F::of_usize(fold_mses.len());
        let mean = fold_mses.iter().copied().sum::<F>() / k;
        let var = fold_mses
            .iter()
            .map(|&m| (m - mean) * (m - mean))
            .sum::<F>()
            / k.max(F::of(1.0));
        let cv_se = (var / k).sqrt();
        cv_curve.push(CvPoint {
            alpha,
            cv_mse: mean,
            cv_se,
        });
    }

    // One-standard-error rule: smallest tree within one SE of the best.
    let best = cv_curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cv_mse.partial_cmp(&b.1.cv_mse).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let threshold = cv_curve[best].cv_mse + cv_curve[best].cv_se;
    let chosen_alpha = cv_curve
        .iter()
        .filter(|p| p.cv_mse <= threshold)
        .map(|p| p.alpha)
        .fold(cv_curve[best].alpha, |a, b| a.max(b));

    let full_tree_leaves = full.n_leaves();
    let tree = full.to_rule_tree(chosen_alpha, &data, table.schema())?;
    Ok(CartOutput {
        tree,
        chosen_alpha,
        cv_curve,
        full_tree_leaves,
    })
}

/// Evaluation grid from the critical complexities: zero, geometric
/// midpoints, and one value past the end (the stump).
fn candidate_alphas<F: Scalar>(criticals: &[F]) -> Vec<F> {
    let mut out = vec![F::zero()];
    for w in criticals.windows(2) {
        if w[0] > F::zero() {
            out.push((w[0] * w[1]).sqrt());
        } else {
            out.push(w[1] / F::of(2.0));
        }
    }
    if let Some(&last) = criticals.last() {
        out.push(last * F::of(1.5) + F::of(1e-12));
    }
    out.dedup();
    out
}

/// Leaf-level mean TCD with a within-leaf bootstrap standard error.
#[derive(Clone, Copy, Debug)]
pub struct TcdNodeStat<F> {
    pub leaf_id: u32,
    pub mean_gamma: F,
    pub bootstrap_se: F,
    pub n_units: usize,
    pub source: SourceSet,
}

pub struct NodeStatsOutput<F> {
    pub stats: Vec<TcdNodeStat<F>>,
    /// Leaves with no records in this source set; excluded from the stats
    /// and destined to be gated as noisy.
    pub empty_leaves: Vec<u32>,
}

/// Classifies records through the tree and computes per-leaf means and
/// bootstrap SEs (standard deviation of resampled means, `n_bootstrap`
/// within-leaf resamples with replacement).
pub fn node_stats<F: Scalar>(
    table: &CohortTable<F>,
    records: &[TcdRecord<F>],
    tree: &PartitionRuleTree<F>,
    n_bootstrap: usize,
    seed_value: u64,
) -> Result<NodeStatsOutput<F>, TcdError> {
    if records.is_empty() {
        return Err(TcdError::EmptyRecords);
    }
    if n_bootstrap < 2 {
        return Err(TcdError::BadBootstrap(n_bootstrap));
    }
    let rows: Vec<usize> = records.iter().map(|r| r.row).collect();
    let leaf_ids = tree.classify_rows(table, &rows)?;
    let source = records[0].source;

    let mut groups: Vec<Vec<F>> = vec![Vec::new(); tree.n_leaves() as usize];
    for (rec, &leaf) in records.iter().zip(&leaf_ids) {
        groups[leaf as usize].push(rec.gamma);
    }

    let mut stats = Vec::new();
    let mut empty_leaves = Vec::new();
    for (leaf, gammas) in groups.iter().enumerate() {
        if gammas.is_empty() {
            empty_leaves.push(leaf as u32);
            continue;
        }
        let n = gammas.len();
        let mean = gammas.iter().copied().sum::<F>() / F::of_usize(n);
        let bootstrap_se = bootstrap_se_of_mean(
            gammas,
            n_bootstrap,
            seed::derive(seed_value, &[seed::STREAM_BOOTSTRAP, leaf as u64]),
        );
        stats.push(TcdNodeStat {
            leaf_id: leaf as u32,
            mean_gamma: mean,
            bootstrap_se,
            n_units: n,
            source,
        });
    }
    Ok(NodeStatsOutput {
        stats,
        empty_leaves,
    })
}

fn bootstrap_se_of_mean<F: Scalar>(values: &[F], n_bootstrap: usize, seed_value: u64) -> F {
    use rand::Rng;
    let n = values.len();
    let means: Vec<F> = (0..n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(seed_value, &[b as u64]);
            let mut sum = F::zero();
            for _ in 0..n {
                sum += values[rng.random_range(0..n)];
            }
            sum / F::of_usize(n)
        })
        .collect();
    let k = F::of_usize(n_bootstrap);
    let grand = means.iter().copied().sum::<F>() / k;
    let var = means.iter().map(|&m| (m - grand) * (m - grand)).sum::<F>() / (k - F::one());
    var.sqrt()
}

/// TCD records CSV: `unit_id,arm,gamma_hat,leaf_id,source_set`.
pub fn write_records_csv<F: Scalar>(
    records: &[TcdRecord<F>],
    leaf_ids: &[u32],
    writer: impl Write,
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "arm", "gamma_hat", "leaf_id", "source_set"])?;
    for (rec, leaf) in records.iter().zip(leaf_ids) {
        w.write_record([
            rec.unit_id.clone(),
            rec.arm
                .map(|a| if a { "1".into() } else { "0".into() })
                .unwrap_or_default(),
            format!("{}", rec.gamma),
            leaf.to_string(),
            rec.source.token().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Node stats CSV: `leaf_id,source_set,n_units,mean_gamma,bootstrap_se`.
pub fn write_node_stats_csv<F: Scalar>(
    stats: &[TcdNodeStat<F>],
    writer: impl Write,
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "leaf_id",
        "source_set",
        "n_units",
        "mean_gamma",
        "bootstrap_se",
    ])?;
    for s in stats {
        w.write_record([
            s.leaf_id.to_string(),
            s.source.token().to_string(),
            s.n_units.to_string(),
            format!("{}", s.mean_gamma),
            format!("{}", s.bootstrap_se),
        ])?;
    }
    w.flush()?;
    Ok(())
}
