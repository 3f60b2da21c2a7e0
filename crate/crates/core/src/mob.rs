//! Model-based recursive partitioning over the linear outcome model.
//!
//! At each node the pooled model is fit, the per-unit score columns for
//! the intercept and treatment coefficients are tested for association
//! with every candidate partitioning variable (permutation test of the
//! max-correlation statistic, Bonferroni-corrected across the 2J
//! hypotheses), and, when some variable rejects, the node splits at the
//! cut-point minimizing the summed residual sum of squares of the two
//! child fits. Recursion stops when no deviation from independence is
//! detectable, when a node is too small, or at the depth cap.

use ndarray::Array1;
use rayon::prelude::*;
use thiserror::Error;

use crate::cohort::{CohortTable, CovariateKind};
use crate::glm::{fit_ols, DesignInfo, GlmError, ModelFit, OlsDesign};
use crate::linalg;
use crate::num::Scalar;
use crate::rules::{
    LeafMetadata, PartitionRuleTree, Predicate, PredicateTest, RuleNode, RulesError,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum MobError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown candidate variable `{name}`")]
    UnknownVariable { name: String },
    #[error("empty training set")]
    EmptyTraining,
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Rules(#[from] RulesError),
}

/// Knobs for tree growth. `n_permutations` must allow rejection after the
/// Bonferroni correction: with J variables the smallest achievable
/// adjusted p-value is `2J / (n_permutations + 1)`.
#[derive(Clone, Debug)]
pub struct MobConfig<F> {
    pub alpha: F,
    pub min_cluster_size: usize,
    pub max_depth: Option<usize>,
    pub n_permutations: usize,
    /// Partitioning variables; `None` uses every schema covariate.
    pub candidate_variables: Option<Vec<String>>,
    pub seed: u64,
    pub design: OlsDesign,
    /// Cut-point scan is subsampled to at most this many candidates.
    pub max_cutpoint_candidates: usize,
}

impl<F: Scalar> Default for MobConfig<F> {
    fn default() -> Self {
        Self {
            alpha: F::of(0.05),
            min_cluster_size: 1000,
            max_depth: Some(6),
            n_permutations: 999,
            candidate_variables: None,
            seed: 0,
            design: OlsDesign::default(),
            max_cutpoint_candidates: 512,
        }
    }
}

impl<F: Scalar> MobConfig<F> {
    pub fn validate(&self, table: &CohortTable<F>) -> Result<(), MobError> {
        if !(self.alpha > F::zero() && self.alpha < F::one()) {
            return Err(MobError::Config(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.n_permutations < 199 {
            return Err(MobError::Config(format!(
                "n_permutations {} below the minimum of 199",
                self.n_permutations
            )));
        }
        let k = DesignInfo::new(table.schema(), &self.design)?.k();
        if self.min_cluster_size < 2 * k {
            return Err(MobError::Config(format!(
                "min_cluster_size {} below twice the coefficient count {k}",
                self.min_cluster_size
            )));
        }
        if let Some(names) = &self.candidate_variables {
            if names.is_empty() {
                return Err(MobError::Config("candidate variable set is empty".into()));
            }
            for n in names {
                if table.schema().index_of(n).is_none() {
                    return Err(MobError::UnknownVariable { name: n.clone() });
                }
            }
        }
        Ok(())
    }

    fn candidate_columns(&self, table: &CohortTable<F>) -> Result<Vec<usize>, MobError> {
        match &self.candidate_variables {
            None => Ok((0..table.schema().len()).collect()),
            Some(names) => names
                .iter()
                .map(|n| {
                    table
                        .schema()
                        .index_of(n)
                        .ok_or_else(|| MobError::UnknownVariable { name: n.clone() })
                })
                .collect(),
        }
    }
}

/// One (variable, score column) pair of the instability test.
#[derive(Clone, Debug)]
pub struct InstabilityEntry<F> {
    pub variable: String,
    /// 0 = intercept score, 1 = treatment score.
    pub score_column: usize,
    pub statistic: F,
    pub p_adjusted: F,
}

#[derive(Clone, Debug)]
pub struct InstabilityReport<F> {
    /// False when the node was too small to test.
    pub tested: bool,
    pub entries: Vec<InstabilityEntry<F>>,
    pub selected: Option<String>,
}

impl<F: Scalar> InstabilityReport<F> {
    fn untested() -> Self {
        Self {
            tested: false,
            entries: Vec::new(),
            selected: None,
        }
    }
}

/// Parameter-instability test at one node. The public entry point seeds
/// the permutations from the config; `grow` derives per-node seeds.
pub fn instability_test<F: Scalar>(
    fit: &ModelFit<F>,
    table: &CohortTable<F>,
    rows: &[usize],
    config: &MobConfig<F>,
) -> Result<InstabilityReport<F>, MobError> {
    instability_test_seeded(
        fit,
        table,
        rows,
        config,
        seed::derive(config.seed, &[seed::STREAM_MOB, 0]),
    )
}

fn instability_test_seeded<F: Scalar>(
    fit: &ModelFit<F>,
    table: &CohortTable<F>,
    rows: &[usize],
    config: &MobConfig<F>,
    node_seed: u64,
) -> Result<InstabilityReport<F>, MobError> {
    let n = rows.len();
    if n < 2 * config.min_cluster_size {
        return Ok(InstabilityReport::untested());
    }
    let columns = config.candidate_columns(table)?;
    let j_vars = columns.len();

    // Centered score columns for the intercept and treatment coefficients.
    let mut scores = [vec![F::zero(); n], vec![F::zero(); n]];
    let mut norms = [F::zero(); 2];
    for k in 0..2 {
        let mean = (0..n).map(|i| fit.score_matrix[(i, k)]).sum::<F>() / F::of_usize(n);
        for (i, slot) in scores[k].iter_mut().enumerate() {
            *slot = fit.score_matrix[(i, k)] - mean;
        }
        norms[k] = scores[k].iter().map(|&s| s * s).sum::<F>().sqrt();
    }

    enum VarData<F> {
        // Centered numeric values and their norm; `None` when constant.
        Numeric(Option<(Vec<F>, F)>),
        // Level index per row, inverse norms per level (0 for absent or
        // constant levels).
        Categorical { levels: Vec<u32>, inv_norm: Vec<F> },
    }

    let vars: Vec<VarData<F>> = columns
        .iter()
        .map(|&c| match table.schema().column(c).kind {
            CovariateKind::Categorical { .. } => {
                let n_levels = table.schema().n_levels(c);
                let levels: Vec<u32> = rows
                    .iter()
                    .map(|&r| table.covariate(r, c).as_f64() as u32)
                    .collect();
                let mut count = vec![0usize; n_levels];
                for &l in &levels {
                    count[l as usize] += 1;
                }
                let inv_norm = count
                    .iter()
                    .map(|&cnt| {
                        if cnt == 0 || cnt == n {
                            F::zero()
                        } else {
                            let nf = F::of_usize(n);
                            let c_f = F::of_usize(cnt);
                            F::one() / (c_f * (nf - c_f) / nf).sqrt()
                        }
                    })
                    .collect();
                VarData::Categorical { levels, inv_norm }
            }
            _ => {
                let raw: Vec<F> = rows.iter().map(|&r| table.covariate(r, c)).collect();
                let mean = raw.iter().copied().sum::<F>() / F::of_usize(n);
                let centered: Vec<F> = raw.iter().map(|&v| v - mean).collect();
                let norm = centered.iter().map(|&v| v * v).sum::<F>().sqrt();
                VarData::Numeric((norm > F::zero()).then_some((centered, norm)))
            }
        })
        .collect();

    // Unnormalized pair statistics for one row alignment. Returns, per
    // variable, the two score-column statistics on a scale where the
    // observed and permuted values are directly comparable.
    let pair_stats = |order: Option<&[usize]>| -> Vec<[F; 2]> {
        vars.iter()
            .map(|var| match var {
                VarData::Numeric(None) => [F::zero(); 2],
                VarData::Numeric(Some((v, norm))) => {
                    let mut dot = [F::zero(); 2];
                    for i in 0..n {
                        let vi = match order {
                            Some(p) => v[p[i]],
                            None => v[i],
                        };
                        dot[0] += scores[0][i] * vi;
                        dot[1] += scores[1][i] * vi;
                    }
                    [dot[0].abs() / *norm, dot[1].abs() / *norm]
                }
                VarData::Categorical { levels, inv_norm } => {
                    let mut sums = vec![[F::zero(); 2]; inv_norm.len()];
                    for i in 0..n {
                        let l = match order {
                            Some(p) => levels[p[i]],
                            None => levels[i],
                        } as usize;
                        sums[l][0] += scores[0][i];
                        sums[l][1] += scores[1][i];
                    }
                    let mut best = [F::zero(); 2];
                    for (l, s) in sums.iter().enumerate() {
                        for k in 0..2 {
                            let stat = s[k].abs() * inv_norm[l];
                            if stat > best[k] {
                                best[k] = stat;
                            }
                        }
                    }
                    best
                }
            })
            .collect()
    };

    let observed = pair_stats(None);

    // Permutation replicates share one shuffled row order across all
    // variables; exceedance counts are integers, so parallel summation is
    // deterministic.
    let b_total = config.n_permutations;
    let exceed: Vec<[u32; 2]> = (0..b_total)
        .into_par_iter()
        .map(|b| {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = seed::rng(node_seed, &[b as u64]);
            perm.shuffle(&mut rng);
            let stats = pair_stats(Some(&perm));
            stats
                .iter()
                .zip(&observed)
                .map(|(s, o)| [u32::from(s[0] >= o[0]), u32::from(s[1] >= o[1])])
                .collect::<Vec<_>>()
        })
        .reduce(
            || vec![[0u32; 2]; j_vars],
            |mut acc, item| {
                for (a, i) in acc.iter_mut().zip(item) {
                    a[0] += i[0];
                    a[1] += i[1];
                }
                acc
            },
        );

    let bonferroni = F::of_usize(2 * j_vars);
    let mut entries = Vec::with_capacity(2 * j_vars);
    for (vi, &c) in columns.iter().enumerate() {
        let name = table.schema().column(c).name.clone();
        for k in 0..2 {
            // Correlation-scale statistic for reporting and selection.
            let statistic = if norms[k] > F::zero() {
                observed[vi][k] / norms[k]
            } else {
                F::zero()
            };
            let constant = match &vars[vi] {
                VarData::Numeric(None) => true,
                VarData::Numeric(Some(_)) => false,
                VarData::Categorical { inv_norm, .. } => inv_norm.iter().all(|&x| x == F::zero()),
            };
            let p_adjusted = if constant || norms[k] == F::zero() {
                F::one()
            } else {
                let p_raw = (F::one() + F::of_usize(exceed[vi][k] as usize))
                    / (F::one() + F::of_usize(b_total));
                (p_raw * bonferroni).min(F::one())
            };
            entries.push(InstabilityEntry {
                variable: name.clone(),
                score_column: k,
                statistic,
                p_adjusted,
            });
        }
    }

    let selected = entries
        .iter()
        .filter(|e| e.p_adjusted < config.alpha)
        .max_by(|a, b| a.statistic.partial_cmp(&b.statistic).unwrap())
        .map(|e| e.variable.clone());

    Ok(InstabilityReport {
        tested: true,
        entries,
        selected,
    })
}

/// Chosen cut for a node split.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitChoice<F> {
    Threshold(F),
    LevelSubset(Vec<String>),
}

/// Minimizes `RSS(left fit) + RSS(right fit)` over admissible cut-points of
/// `variable`. Numeric candidates are midpoints between consecutive
/// distinct values (subsampled when abundant); categorical candidates are
/// level partitions ordered by mean residual, exhaustive up to 10 levels.
/// Returns `None` when no candidate leaves both children at or above the
/// minimum cluster size with fittable models.
pub fn find_cutpoint<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    variable: &str,
    residuals: &Array1<F>,
    config: &MobConfig<F>,
) -> Result<Option<(SplitChoice<F>, F)>, MobError> {
    let col = table
        .schema()
        .index_of(variable)
        .ok_or_else(|| MobError::UnknownVariable {
            name: variable.to_string(),
        })?;
    let info = DesignInfo::new(table.schema(), &config.design)?;
    let k = info.k();
    let n = rows.len();
    let m = config.min_cluster_size;
    if n < 2 * m {
        return Ok(None);
    }

    // Per-row design rows and outcomes, materialized once.
    let mut design_rows = vec![F::zero(); n * k];
    let mut outcomes = vec![F::zero(); n];
    for (i, &r) in rows.iter().enumerate() {
        info.fill_row(table, r, &mut design_rows[i * k..(i + 1) * k]);
        outcomes[i] = table.outcome(r);
    }

    let stats_of = |positions: &[usize]| -> NormalStats<F> {
        let mut s = NormalStats::zeros(k);
        for &i in positions {
            s.add(&design_rows[i * k..(i + 1) * k], outcomes[i]);
        }
        s
    };

    match &table.schema().column(col).kind {
        CovariateKind::Categorical {
            levels: level_names,
        } => {
            let n_levels = level_names.len();
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_levels];
            let mut resid_sum = vec![F::zero(); n_levels];
            for (i, &r) in rows.iter().enumerate() {
                let l = table.covariate(r, col).as_f64() as usize;
                members[l].push(i);
                resid_sum[l] += residuals[i];
            }
            let mut present: Vec<usize> =
                (0..n_levels).filter(|&l| !members[l].is_empty()).collect();
            if present.len() < 2 {
                return Ok(None);
            }
            present.sort_by(|&a, &b| {
                let ma = resid_sum[a] / F::of_usize(members[a].len());
                let mb = resid_sum[b] / F::of_usize(members[b].len());
                ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
            });
            let level_stats: Vec<NormalStats<F>> =
                present.iter().map(|&l| stats_of(&members[l])).collect();
            let total = level_stats
                .iter()
                .fold(NormalStats::zeros(k), |acc, s| acc.plus(s));

            let lp = present.len();
            // Candidate subsets over the present levels: exhaustive when
            // small, prefix splits in residual-mean order otherwise.
            // Every binary partition once: the first present level is
            // pinned to the left side, the remaining lp-1 levels toggle.
            // The all-ones mask is the degenerate full set and is dropped.
            let subsets: Vec<Vec<usize>> = if lp <= 10 {
                (0..(1usize << (lp - 1)))
                    .map(|mask| {
                        let mut s = vec![0usize];
                        for bit in 1..lp {
                            if mask & (1 << (bit - 1)) != 0 {
                                s.push(bit);
                            }
                        }
                        s
                    })
                    .filter(|s| s.len() < lp)
                    .collect()
            } else {
                (1..lp).map(|cut| (0..cut).collect()).collect()
            };

            let mut best: Option<(Vec<usize>, F)> = None;
            for subset in subsets {
                let left = subset
                    .iter()
                    .fold(NormalStats::zeros(k), |acc, &ix| acc.plus(&level_stats[ix]));
                let right = total.minus(&left);
                if left.n < m || right.n < m {
                    continue;
                }
                let (Some(rl), Some(rr)) = (left.rss(), right.rss()) else {
                    continue;
                };
                let objective = rl + rr;
                let improves = best
                    .as_ref()
                    .is_none_or(|(_, b)| objective < *b - tie_tolerance(*b));
                if improves {
                    best = Some((subset, objective));
                }
            }
            Ok(best.map(|(subset, obj)| {
                let mut labels: Vec<String> = subset
                    .iter()
                    .map(|&ix| level_names[present[ix]].clone())
                    .collect();
                labels.sort_unstable();
                (SplitChoice::LevelSubset(labels), obj)
            }))
        }
        _ => {
            let mut order: Vec<usize> = (0..n).collect();
            let zvals: Vec<F> = rows.iter().map(|&r| table.covariate(r, col)).collect();
            order.sort_unstable_by(|&a, &b| zvals[a].partial_cmp(&zvals[b]).unwrap());

            // Admissible boundaries between distinct neighbors.
            let mut boundaries = Vec::new();
            for i in (m - 1)..(n - m) {
                if zvals[order[i]] != zvals[order[i + 1]] {
                    boundaries.push(i);
                }
            }
            if boundaries.is_empty() {
                return Ok(None);
            }
            let picked: Vec<usize> = if boundaries.len() > config.max_cutpoint_candidates {
                let last = boundaries.len() - 1;
                let target = config.max_cutpoint_candidates;
                let mut p: Vec<usize> = (0..target)
                    .map(|j| boundaries[j * last / (target - 1)])
                    .collect();
                p.dedup();
                p
            } else {
                boundaries
            };

            let total = stats_of(&order);
            let mut running = NormalStats::zeros(k);
            let mut cursor = 0usize;
            let mut best: Option<(F, F)> = None; // (threshold, objective)
            for &b in &picked {
                while cursor <= b {
                    let i = order[cursor];
                    running.add(&design_rows[i * k..(i + 1) * k], outcomes[i]);
                    cursor += 1;
                }
                let right = total.minus(&running);
                let (Some(rl), Some(rr)) = (running.rss(), right.rss()) else {
                    continue;
                };
                let objective = rl + rr;
                let improves = best.is_none_or(|(_, o)| objective < o - tie_tolerance(o));
                if improves {
                    let threshold = (zvals[order[b]] + zvals[order[b + 1]]) / F::of(2.0);
                    best = Some((threshold, objective));
                }
            }
            Ok(best.map(|(t, o)| (SplitChoice::Threshold(t), o)))
        }
    }
}

/// Round-off guard for objective comparisons: candidates within this of
/// the incumbent count as ties, which the earlier candidate wins.
fn tie_tolerance<F: Scalar>(scale: F) -> F {
    (scale.abs() + F::one()) * F::of(1e-10)
}

/// Sufficient statistics for one least-squares subproblem.
#[derive(Clone)]
struct NormalStats<F> {
    n: usize,
    xtx: ndarray::Array2<F>,
    xty: Array1<F>,
    yty: F,
}

impl<F: Scalar> NormalStats<F> {
    fn zeros(k: usize) -> Self {
        Self {
            n: 0,
            xtx: ndarray::Array2::zeros((k, k)),
            xty: Array1::zeros(k),
            yty: F::zero(),
        }
    }

    fn add(&mut self, x: &[F], y: F) {
        let k = x.len();
        self.n += 1;
        for a in 0..k {
            self.xty[a] += x[a] * y;
            for b in a..k {
                self.xtx[(a, b)] += x[a] * x[b];
            }
        }
        self.yty += y * y;
    }

    fn plus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.n += other.n;
        out.xtx = &out.xtx + &other.xtx;
        out.xty = &out.xty + &other.xty;
        out.yty += other.yty;
        out
    }

    fn minus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.n -= other.n;
        out.xtx = &out.xtx - &other.xtx;
        out.xty = &out.xty - &other.xty;
        out.yty -= other.yty;
        out
    }

    /// Residual sum of squares of the least-squares fit, `None` when the
    /// subproblem is rank-deficient.
    fn rss(&self) -> Option<F> {
        let k = self.xty.len();
        if self.n <= k {
            return None;
        }
        let mut sym = self.xtx.clone();
        for a in 0..k {
            for b in 0..a {
                sym[(a, b)] = sym[(b, a)];
            }
        }
        let solved = linalg::solve_spd(&sym, &self.xty).ok()?;
        let fitted = self.xty.dot(&solved.solution);
        Some((self.yty - fitted).max(F::zero()))
    }
}

/// Per-node diagnostics emitted by `grow`.
#[derive(Clone, Debug)]
pub struct NodeReport<F> {
    pub node_id: u64,
    pub n_rows: usize,
    pub depth: usize,
    pub report: InstabilityReport<F>,
}

/// Full coefficient vector of one leaf's fit, for leaf-wise prediction.
#[derive(Clone, Debug)]
pub struct LeafModel<F> {
    pub leaf_id: u32,
    pub names: Vec<String>,
    pub coefficients: Array1<F>,
}

pub struct MobOutput<F> {
    pub tree: PartitionRuleTree<F>,
    pub reports: Vec<NodeReport<F>>,
    pub leaf_models: Vec<LeafModel<F>>,
}

/// Grows the partition tree on a training row set.
pub fn grow<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    config: &MobConfig<F>,
) -> Result<MobOutput<F>, MobError> {
    config.validate(table)?;
    if rows.is_empty() {
        return Err(MobError::EmptyTraining);
    }
    let grown = grow_node(table, rows, config, 0, 0)?;
    let tree = PartitionRuleTree::new(table.schema().hash(), grown.node)?;
    let mut reports = grown.reports;
    reports.sort_by_key(|r| r.node_id);
    // Leaf coefficient vectors were collected left-to-right, matching the
    // canonical leaf numbering.
    let leaf_models = grown
        .leaf_fits
        .into_iter()
        .enumerate()
        .map(|(i, (names, coefficients))| LeafModel {
            leaf_id: i as u32,
            names,
            coefficients,
        })
        .collect();
    Ok(MobOutput {
        tree,
        reports,
        leaf_models,
    })
}

struct Grown<F> {
    node: RuleNode<F>,
    reports: Vec<NodeReport<F>>,
    leaf_fits: Vec<(Vec<String>, Array1<F>)>,
}

fn grow_node<F: Scalar>(
    table: &CohortTable<F>,
    rows: &[usize],
    config: &MobConfig<F>,
    node_id: u64,
    depth: usize,
) -> Result<Grown<F>, MobError> {
    let fit = fit_ols(table, rows, &config.design)?;
    let as_leaf = |report: InstabilityReport<F>| -> Grown<F> {
        let meta = LeafMetadata {
            train_estimate: Some(fit.coef(1)),
            train_se: Some(fit.se(1)),
            ..LeafMetadata::default()
        };
        Grown {
            node: RuleNode::leaf(meta),
            reports: vec![NodeReport {
                node_id,
                n_rows: rows.len(),
                depth,
                report,
            }],
            leaf_fits: vec![(fit.names.clone(), fit.coefficients.clone())],
        }
    };

    let depth_capped = config.max_depth.is_some_and(|d| depth >= d);
    if depth_capped {
        return Ok(as_leaf(InstabilityReport::untested()));
    }
    let report = instability_test_seeded(
        &fit,
        table,
        rows,
        config,
        seed::derive(config.seed, &[seed::STREAM_MOB, node_id]),
    )?;
    let Some(variable) = report.selected.clone() else {
        return Ok(as_leaf(report));
    };
    let Some((choice, _objective)) = find_cutpoint(table, rows, &variable, &fit.residuals, config)?
    else {
        return Ok(as_leaf(report));
    };

    let col = table
        .schema()
        .index_of(&variable)
        .expect("selected variable exists");
    let predicate = match &choice {
        SplitChoice::Threshold(t) => Predicate {
            variable: variable.clone(),
            test: PredicateTest::NumericLe { threshold: *t },
        },
        SplitChoice::LevelSubset(labels) => Predicate {
            variable: variable.clone(),
            test: PredicateTest::InLevels {
                levels: labels.clone(),
            },
        },
    };
    let goes_left = |r: usize| -> bool {
        let v = table.covariate(r, col);
        match &choice {
            SplitChoice::Threshold(t) => v <= *t,
            SplitChoice::LevelSubset(labels) => {
                let CovariateKind::Categorical { levels } = &table.schema().column(col).kind else {
                    unreachable!()
                };
                labels.contains(&levels[v.as_f64() as usize])
            }
        }
    };
    let left_rows: Vec<usize> = rows.iter().copied().filter(|&r| goes_left(r)).collect();
    let right_rows: Vec<usize> = rows.iter().copied().filter(|&r| !goes_left(r)).collect();
    debug_assert!(left_rows.len() >= config.min_cluster_size);
    debug_assert!(right_rows.len() >= config.min_cluster_size);

    let (left, right) = rayon::join(
        || grow_node(table, &left_rows, config, 2 * node_id + 1, depth + 1),
        || grow_node(table, &right_rows, config, 2 * node_id + 2, depth + 1),
    );
    let (left, right) = (left?, right?);

    let mut reports = vec![NodeReport {
        node_id,
        n_rows: rows.len(),
        depth,
        report,
    }];
    reports.extend(left.reports);
    reports.extend(right.reports);
    let mut leaf_fits = left.leaf_fits;
    leaf_fits.extend(right.leaf_fits);
    Ok(Grown {
        node: RuleNode::split(predicate, left.node, right.node),
        reports,
        leaf_fits,
    })
}

/// One candidate of the feature-set / cluster-size grid.
#[derive(Clone, Debug)]
pub struct TuneCandidate {
    pub feature_set: Vec<String>,
    pub min_cluster_size: usize,
}

pub struct TuneResult<F> {
    pub chosen: usize,
    pub validation_mse: Vec<F>,
}

/// Grows one tree per candidate on the training rows and scores each by
/// validation-set MSE of leaf-wise predictions. Ties prefer the smaller
/// feature set, then the larger cluster size.
pub fn tune<F: Scalar>(
    table: &CohortTable<F>,
    train_rows: &[usize],
    val_rows: &[usize],
    base: &MobConfig<F>,
    candidates: &[TuneCandidate],
) -> Result<TuneResult<F>, MobError> {
    if candidates.is_empty() {
        return Err(MobError::Config("no tuning candidates".into()));
    }
    let info = DesignInfo::new(table.schema(), &base.design)?;
    let mut validation_mse = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let config = MobConfig {
            candidate_variables: Some(cand.feature_set.clone()),
            min_cluster_size: cand.min_cluster_size,
            ..base.clone()
        };
        let output = grow(table, train_rows, &config)?;
        let leaf_ids = output.tree.classify_rows(table, val_rows)?;
        let mut buf = vec![F::zero(); info.k()];
        let mut total = F::zero();
        for (&row, &leaf) in val_rows.iter().zip(&leaf_ids) {
            info.fill_row(table, row, &mut buf);
            let coefs = &output.leaf_models[leaf as usize].coefficients;
            let pred = buf.iter().zip(coefs).map(|(&x, &b)| x * b).sum::<F>();
            let err = pred - table.outcome(row);
            total += err * err;
        }
        validation_mse.push(total / F::of_usize(val_rows.len().max(1)));
    }

    let mut chosen = 0usize;
    for i in 1..candidates.len() {
        let better = validation_mse[i] < validation_mse[chosen];
        let tie = validation_mse[i] == validation_mse[chosen];
        let prefer = candidates[i].feature_set.len() < candidates[chosen].feature_set.len()
            || (candidates[i].feature_set.len() == candidates[chosen].feature_set.len()
                && candidates[i].min_cluster_size > candidates[chosen].min_cluster_size);
        if better || (tie && prefer) {
            chosen = i;
        }
    }
    Ok(TuneResult {
        chosen,
        validation_mse,
    })
}

/// Instability diagnostics CSV: one row per (node, variable, score column).
pub fn write_diagnostics_csv<F: Scalar>(
    reports: &[NodeReport<F>],
    writer: impl std::io::Write,
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "node_id",
        "depth",
        "n_rows",
        "tested",
        "variable",
        "score_column",
        "statistic",
        "p_adjusted",
        "selected",
    ])?;
    for r in reports {
        if r.report.entries.is_empty() {
            w.write_record([
                r.node_id.to_string(),
                r.depth.to_string(),
                r.n_rows.to_string(),
                r.report.tested.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for e in &r.report.entries {
            w.write_record([
                r.node_id.to_string(),
                r.depth.to_string(),
                r.n_rows.to_string(),
                r.report.tested.to_string(),
                e.variable.clone(),
                e.score_column.to_string(),
                format!("{}", e.statistic),
                format!("{}", e.p_adjusted),
                (r.report.selected.as_deref() == Some(e.variable.as_str())).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CovariateSchema, SchemaColumn, UnitRecord};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn schema(j_noise: usize) -> CovariateSchema {
        let mut cols = vec![SchemaColumn {
            name: "z1".into(),
            kind: CovariateKind::Numeric,
        }];
        for j in 0..j_noise {
            cols.push(SchemaColumn {
                name: format!("noise{j}"),
                kind: if j % 2 == 0 {
                    CovariateKind::Numeric
                } else {
                    CovariateKind::Binary
                },
            });
        }
        CovariateSchema::new(cols).unwrap()
    }

    /// Two-regime data: slope = `slope_low` when z1 <= cut, else
    /// `slope_high`; slopes act on a standard-normal treatment.
    fn planted_table(
        n: usize,
        cut: f64,
        slope_low: f64,
        slope_high: f64,
        sigma: f64,
        j_noise: usize,
        seed_val: u64,
    ) -> CohortTable<f64> {
        let mut rng = seed::rng(seed_val, &[600]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let records = (0..n)
            .map(|i| {
                let z1: f64 = rng.random_range(0.0..1.0);
                let a: f64 = normal.sample(&mut rng);
                let slope = if z1 <= cut { slope_low } else { slope_high };
                let y = 1.0 + slope * a + sigma * normal.sample(&mut rng);
                let mut covs = vec![z1];
                for j in 0..j_noise {
                    if j % 2 == 0 {
                        covs.push(rng.random_range(0.0..1.0));
                    } else {
                        covs.push(f64::from(rng.random_bool(0.5)));
                    }
                }
                UnitRecord {
                    unit_id: format!("u{i:05}"),
                    outcome: y,
                    treatment: a,
                    arm: None,
                    covariates: covs,
                    period: None,
                    firm_group: None,
                }
            })
            .collect();
        CohortTable::from_records(schema(j_noise), records).unwrap()
    }

    fn base_config(min_cluster: usize, seed_val: u64) -> MobConfig<f64> {
        MobConfig {
            min_cluster_size: min_cluster,
            n_permutations: 499,
            seed: seed_val,
            ..MobConfig::default()
        }
    }

    #[test]
    fn perfect_fit_selects_nothing() {
        // Constant outcome: residuals vanish, so every score is zero.
        let n = 400;
        let mut rng = seed::rng(3, &[601]);
        let records: Vec<UnitRecord<f64>> = (0..n)
            .map(|i| UnitRecord {
                unit_id: format!("u{i}"),
                outcome: 2.0,
                treatment: rng.random_range(-1.0..1.0),
                arm: None,
                covariates: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0],
                period: None,
                firm_group: None,
            })
            .collect();
        let table = CohortTable::from_records(schema(2), records).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let fit = fit_ols(&table, &rows, &OlsDesign::default()).unwrap();
        let report = instability_test(&fit, &table, &rows, &base_config(50, 1)).unwrap();
        assert!(report.tested);
        assert!(report.selected.is_none());
        assert!(report.entries.iter().all(|e| e.statistic == 0.0));
    }

    #[test]
    fn planted_heterogeneity_selects_the_planted_variable() {
        // Slope -0.5 vs 0 split by z1; four noise covariates.
        let table = planted_table(5000, 0.5, -0.5, 0.0, 1.0, 4, 11);
        let rows: Vec<usize> = (0..5000).collect();
        let fit = fit_ols(&table, &rows, &OlsDesign::default()).unwrap();
        let report = instability_test(&fit, &table, &rows, &base_config(200, 2)).unwrap();
        assert_eq!(report.selected.as_deref(), Some("z1"));
        assert_eq!(report.entries.len(), 2 * 5);
        // Oracle: the treatment-score correlation with z1 dominates.
        let z1: Vec<f64> = rows.iter().map(|&r| table.covariate(r, 0)).collect();
        let psi1: Vec<f64> = (0..5000).map(|i| fit.score_matrix[(i, 1)]).collect();
        let corr = {
            let mz = z1.iter().sum::<f64>() / 5000.0;
            let mp = psi1.iter().sum::<f64>() / 5000.0;
            let num: f64 = z1.iter().zip(&psi1).map(|(z, p)| (z - mz) * (p - mp)).sum();
            let dz: f64 = z1.iter().map(|z| (z - mz).powi(2)).sum::<f64>().sqrt();
            let dp: f64 = psi1.iter().map(|p| (p - mp).powi(2)).sum::<f64>().sqrt();
            (num / (dz * dp)).abs()
        };
        let reported = report
            .entries
            .iter()
            .find(|e| e.variable == "z1" && e.score_column == 1)
            .unwrap()
            .statistic;
        assert!((reported - corr).abs() < 1e-10);
        let max_stat = report
            .entries
            .iter()
            .map(|e| e.statistic)
            .fold(0.0f64, f64::max);
        assert_eq!(reported, max_stat);
    }

    #[test]
    fn small_nodes_are_not_tested() {
        let table = planted_table(100, 0.5, -0.5, 0.0, 1.0, 1, 4);
        let rows: Vec<usize> = (0..100).collect();
        let fit = fit_ols(&table, &rows, &OlsDesign::default()).unwrap();
        let report = instability_test(&fit, &table, &rows, &base_config(60, 3)).unwrap();
        assert!(!report.tested);
        assert!(report.selected.is_none());
    }

    #[test]
    fn cutpoint_matches_an_exhaustive_scan_oracle() {
        let table = planted_table(2000, 0.5, -1.0, 1.0, 0.3, 0, 21);
        let rows: Vec<usize> = (0..2000).collect();
        let fit = fit_ols(&table, &rows, &OlsDesign::default()).unwrap();
        // Scan every boundary so the oracle comparison is exact.
        let cfg = MobConfig {
            max_cutpoint_candidates: 4000,
            ..base_config(100, 5)
        };
        let (choice, objective) = find_cutpoint(&table, &rows, "z1", &fit.residuals, &cfg)
            .unwrap()
            .unwrap();
        let SplitChoice::Threshold(t) = choice else {
            panic!("numeric expected")
        };
        assert!((t - 0.5).abs() < 0.05, "cutpoint {t}");

        // Independent oracle: brute-force scan with closed-form simple
        // regressions on each side.
        let mut pts: Vec<(f64, f64, f64)> = rows
            .iter()
            .map(|&r| (table.covariate(r, 0), table.treatment(r), table.outcome(r)))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let rss = |s: &[(f64, f64, f64)]| -> f64 {
            let n = s.len() as f64;
            let (sa, sy, saa, say, syy) =
                s.iter().fold((0.0, 0.0, 0.0, 0.0, 0.0), |acc, &(_, a, y)| {
                    (
                        acc.0 + a,
                        acc.1 + y,
                        acc.2 + a * a,
                        acc.3 + a * y,
                        acc.4 + y * y,
                    )
                });
            let da = saa - sa * sa / n;
            let day = say - sa * sy / n;
            let dyy = syy - sy * sy / n;
            dyy - day * day / da
        };
        let mut best = f64::INFINITY;
        let mut best_t = f64::NAN;
        for i in 99..(2000 - 100) {
            if pts[i].0 == pts[i + 1].0 {
                continue;
            }
            let o = rss(&pts[..=i]) + rss(&pts[i + 1..]);
            if o < best {
                best = o;
                best_t = (pts[i].0 + pts[i + 1].0) / 2.0;
            }
        }
        assert!((t - best_t).abs() < 0.02, "scan {t} vs oracle {best_t}");
        // Objective at the scan's own cut agrees with the oracle's
        // brute-force evaluation of the same cut.
        let cut_ix = pts.partition_point(|p| p.0 <= t);
        let oracle_objective = rss(&pts[..cut_ix]) + rss(&pts[cut_ix..]);
        assert!(
            (objective - oracle_objective).abs() / oracle_objective < 1e-9,
            "objective {objective} vs oracle {oracle_objective}"
        );
        assert!((objective - best).abs() / best < 5e-3);
    }

    #[test]
    fn flat_objective_breaks_ties_to_the_smallest_cutpoint() {
        // Constant outcome: every admissible split has zero RSS, so the
        // earliest candidate must win.
        let records: Vec<UnitRecord<f64>> = (0..16)
            .map(|i| UnitRecord {
                unit_id: format!("u{i}"),
                outcome: 3.0,
                treatment: (i % 3) as f64 - 1.0,
                arm: None,
                covariates: vec![(i / 2) as f64],
                period: None,
                firm_group: None,
            })
            .collect();
        let table = CohortTable::from_records(
            CovariateSchema::new(vec![SchemaColumn {
                name: "z1".into(),
                kind: CovariateKind::Numeric,
            }])
            .unwrap(),
            records,
        )
        .unwrap();
        let rows: Vec<usize> = (0..16).collect();
        let residuals = Array1::zeros(16);
        let cfg = MobConfig {
            min_cluster_size: 4,
            n_permutations: 199,
            ..MobConfig::default()
        };
        let (choice, obj) = find_cutpoint(&table, &rows, "z1", &residuals, &cfg)
            .unwrap()
            .unwrap();
        // Admissible thresholds are 1.5, 2.5, ..., 5.5; ties resolve to the
        // smallest.
        assert_eq!(choice, SplitChoice::Threshold(1.5));
        assert!(obj.abs() < 1e-9);
    }

    #[test]
    fn exactly_double_minimum_size_admits_only_the_median_split() {
        let n = 8;
        let records: Vec<UnitRecord<f64>> = (0..n)
            .map(|i| UnitRecord {
                unit_id: format!("u{i}"),
                outcome: i as f64 + ((i * 7) % 3) as f64,
                treatment: ((i * 5) % 4) as f64,
                arm: None,
                covariates: vec![i as f64],
                period: None,
                firm_group: None,
            })
            .collect();
        let table = CohortTable::from_records(
            CovariateSchema::new(vec![SchemaColumn {
                name: "z1".into(),
                kind: CovariateKind::Numeric,
            }])
            .unwrap(),
            records,
        )
        .unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let residuals = Array1::zeros(n);
        let cfg = MobConfig {
            min_cluster_size: 4,
            n_permutations: 199,
            ..MobConfig::default()
        };
        let (choice, _) = find_cutpoint(&table, &rows, "z1", &residuals, &cfg)
            .unwrap()
            .unwrap();
        // Only the boundary between sorted positions 3 and 4 is admissible.
        assert_eq!(choice, SplitChoice::Threshold(3.5));
    }

    #[test]
    fn homogeneous_data_grows_a_single_leaf() {
        let table = planted_table(2000, 0.5, -0.3, -0.3, 1.0, 3, 31);
        let rows: Vec<usize> = (0..2000).collect();
        let out = grow(&table, &rows, &base_config(200, 7)).unwrap();
        assert_eq!(out.tree.n_leaves(), 1);
        let (_, meta) = out.tree.leaves()[0];
        assert!((meta.train_estimate.unwrap() + 0.3).abs() < 0.1);
    }

    #[test]
    fn two_regime_data_grows_a_depth_one_tree_on_the_planted_variable() {
        let table = planted_table(4000, 0.5, -0.8, 0.2, 0.5, 3, 41);
        let rows: Vec<usize> = (0..4000).collect();
        let out = grow(&table, &rows, &base_config(400, 13)).unwrap();
        assert_eq!(out.tree.n_leaves(), 2, "tree {}", out.tree.to_json());
        let json = out.tree.to_json();
        assert!(json.contains("\"variable\": \"z1\""));
        // Leaf estimates land near the planted slopes, left leaf first.
        let leaves = out.tree.leaves();
        let lo = leaves[0].1.train_estimate.unwrap();
        let hi = leaves[1].1.train_estimate.unwrap();
        assert!((lo + 0.8).abs() < 0.1, "low-side slope {lo}");
        assert!((hi - 0.2).abs() < 0.1, "high-side slope {hi}");
        // Splitting strictly decreased the summed RSS versus the parent.
        let fit = fit_ols(&table, &rows, &OlsDesign::default()).unwrap();
        let parent_rss: f64 = fit.residuals.iter().map(|r| r * r).sum();
        let (_, child_obj) =
            find_cutpoint(&table, &rows, "z1", &fit.residuals, &base_config(400, 13))
                .unwrap()
                .unwrap();
        assert!(child_obj < parent_rss);
    }

    #[test]
    fn min_cluster_size_equal_to_n_forces_a_single_leaf() {
        let table = planted_table(1200, 0.5, -0.8, 0.2, 0.5, 1, 51);
        let rows: Vec<usize> = (0..1200).collect();
        let out = grow(&table, &rows, &base_config(1200, 3)).unwrap();
        assert_eq!(out.tree.n_leaves(), 1);
    }

    #[test]
    fn growth_is_deterministic_byte_for_byte() {
        let table = planted_table(3000, 0.5, -0.8, 0.2, 0.5, 2, 61);
        let rows: Vec<usize> = (0..3000).collect();
        let a = grow(&table, &rows, &base_config(300, 17)).unwrap();
        let b = grow(&table, &rows, &base_config(300, 17)).unwrap();
        assert_eq!(a.tree.to_json(), b.tree.to_json());
        let c = grow(&table, &rows, &base_config(300, 18)).unwrap();
        let _ = c; // different seed may or may not differ; only check a == b
    }

    #[test]
    fn predicates_use_only_candidate_variables() {
        // Signal lives in z1, but only noise variables are candidates.
        let table = planted_table(3000, 0.5, -0.8, 0.2, 0.5, 2, 71);
        let rows: Vec<usize> = (0..3000).collect();
        let cfg = MobConfig {
            candidate_variables: Some(vec!["noise0".into(), "noise1".into()]),
            ..base_config(300, 19)
        };
        let out = grow(&table, &rows, &cfg).unwrap();
        assert!(!out.tree.to_json().contains("\"variable\": \"z1\""));
    }

    #[test]
    fn leaf_sizes_respect_the_minimum() {
        let table = planted_table(3000, 0.5, -0.8, 0.2, 0.5, 2, 81);
        let rows: Vec<usize> = (0..3000).collect();
        let out = grow(&table, &rows, &base_config(300, 23)).unwrap();
        let ids = out.tree.classify_rows(&table, &rows).unwrap();
        let mut counts = vec![0usize; out.tree.n_leaves() as usize];
        for id in ids {
            counts[id as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 300));
        assert_eq!(counts.iter().sum::<usize>(), 3000);
    }

    #[test]
    fn tune_prefers_the_candidate_that_recovers_structure() {
        let table = planted_table(4500, 0.5, -0.8, 0.2, 0.5, 2, 91);
        let rows: Vec<usize> = (0..4500).collect();
        let (train, val): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| r < 3000);
        let base = base_config(300, 29);
        let with_signal = TuneCandidate {
            feature_set: vec!["z1".into(), "noise0".into()],
            min_cluster_size: 300,
        };
        let noise_only = TuneCandidate {
            feature_set: vec!["noise0".into(), "noise1".into()],
            min_cluster_size: 300,
        };
        let result = tune(&table, &train, &val, &base, &[noise_only, with_signal]).unwrap();
        assert_eq!(result.chosen, 1);
        assert!(result.validation_mse[1] < result.validation_mse[0]);

        let single = tune(
            &table,
            &train,
            &val,
            &base,
            &[TuneCandidate {
                feature_set: vec!["z1".into()],
                min_cluster_size: 1000,
            }],
        )
        .unwrap();
        assert_eq!(single.chosen, 0);
    }

    #[test]
    fn categorical_heterogeneity_selects_and_splits_on_levels() {
        // Slope shifts only for the "high" stratum of a categorical
        // variable; one numeric noise covariate rides along.
        let schema = CovariateSchema::new(vec![
            SchemaColumn {
                name: "strata".into(),
                kind: CovariateKind::Categorical {
                    levels: vec!["low".into(), "medium".into(), "high".into()],
                },
            },
            SchemaColumn {
                name: "noise".into(),
                kind: CovariateKind::Numeric,
            },
        ])
        .unwrap();
        let mut rng = seed::rng(7, &[602]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let records: Vec<UnitRecord<f64>> = (0..4000)
            .map(|i| {
                let level = match rng.random_range(0..3u8) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => 2.0,
                };
                let a: f64 = normal.sample(&mut rng);
                let slope = if level == 2.0 { -1.0 } else { 0.1 };
                UnitRecord {
                    unit_id: format!("u{i}"),
                    outcome: 0.5 + slope * a + 0.5 * normal.sample(&mut rng),
                    treatment: a,
                    arm: None,
                    covariates: vec![level, rng.random_range(0.0..1.0)],
                    period: None,
                    firm_group: None,
                }
            })
            .collect();
        let table = CohortTable::from_records(schema, records).unwrap();
        let rows: Vec<usize> = (0..4000).collect();
        let fit = fit_ols(&table, &rows, &OlsDesign::default()).unwrap();
        let cfg = base_config(300, 9);

        let report = instability_test(&fit, &table, &rows, &cfg).unwrap();
        assert_eq!(report.selected.as_deref(), Some("strata"));

        let (choice, _) = find_cutpoint(&table, &rows, "strata", &fit.residuals, &cfg)
            .unwrap()
            .unwrap();
        // The exhaustive level search must isolate the shifted stratum.
        let SplitChoice::LevelSubset(levels) = choice else {
            panic!("expected a level-subset split")
        };
        let complement_ok = levels == vec!["high".to_string()]
            || levels == vec!["low".to_string(), "medium".to_string()];
        assert!(complement_ok, "levels {levels:?}");

        // Growing places the categorical predicate at the root.
        let out = grow(&table, &rows, &cfg).unwrap();
        assert_eq!(out.tree.n_leaves(), 2, "tree {}", out.tree.to_json());
        assert!(out.tree.to_json().contains("in_levels"));
    }

    #[test]
    fn config_accepts_the_reference_cluster_size_grid() {
        let table = planted_table(100, 0.5, 0.0, 0.0, 1.0, 1, 99);
        for min_size in [1000usize, 1500, 2000, 3000] {
            let cfg = MobConfig {
                min_cluster_size: min_size,
                ..base_config(min_size, 1)
            };
            assert!(cfg.validate(&table).is_ok());
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let table = planted_table(100, 0.5, 0.0, 0.0, 1.0, 1, 98);
        let bad_alpha = MobConfig {
            alpha: 1.5,
            ..base_config(100, 1)
        };
        assert!(bad_alpha.validate(&table).is_err());
        let bad_perms = MobConfig {
            n_permutations: 50,
            ..base_config(100, 1)
        };
        assert!(bad_perms.validate(&table).is_err());
        let tiny_cluster = MobConfig {
            min_cluster_size: 3,
            ..base_config(3, 1)
        };
        assert!(tiny_cluster.validate(&table).is_err());
        let unknown = MobConfig {
            candidate_variables: Some(vec!["nope".into()]),
            ..base_config(100, 1)
        };
        assert!(unknown.validate(&table).is_err());
    }
}
