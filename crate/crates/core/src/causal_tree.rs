//! Honest causal tree baseline, trained on experimental data alone.
//!
//! Units are split 50/50 into a structure half and an estimation half.
//! Splits maximize the variance-penalized squared-effect criterion
//! (leaf-size-weighted sum of squared effect estimates minus the
//! `S_t^2/p + S_c^2/(1-p)` penalty scaled by `1/N_split + 1/N_est`), with
//! every candidate child required to keep at least `min_leaf` units per
//! arm in both halves. The grown tree is cost-complexity pruned by
//! cross-validation on a matched honest criterion, and leaf effects come
//! exclusively from the estimation half.

use thiserror::Error;

use crate::cohort::{CohortTable, CovariateKind};
use crate::num::Scalar;
use crate::rules::{
    LeafMetadata, PartitionRuleTree, Predicate, PredicateTest, RuleNode, RulesError,
};
use crate::seed;
use crate::stability::{classify_subgroup, StabilityError, StabilityVerdict};
use crate::tree::{weakest_link_schedule, FeatureData, FeatureKind, SplitRule, TreeError};
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum CausalTreeError {
    #[error("unit `{unit_id}` has no arm flag")]
    MissingArm { unit_id: String },
    #[error("an arm is empty in the training data")]
    EmptyArm,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

#[derive(Clone, Debug)]
pub struct CausalTreeConfig<F> {
    /// Minimum units per arm per honest half in every leaf.
    pub min_leaf: usize,
    pub honest_fraction: F,
    pub cv_folds: usize,
    pub max_depth: Option<usize>,
}

impl<F: Scalar> Default for CausalTreeConfig<F> {
    fn default() -> Self {
        Self {
            min_leaf: 25,
            honest_fraction: F::of(0.5),
            cv_folds: 5,
            max_depth: Some(8),
        }
    }
}

/// Leaf effect estimated on the held-out (estimation) half.
#[derive(Clone, Copy, Debug)]
pub struct CausalLeafEffect<F> {
    pub leaf_id: u32,
    pub tau: F,
    pub se: F,
    pub n_treated: usize,
    pub n_control: usize,
}

pub struct CausalTreeModel<F> {
    pub tree: PartitionRuleTree<F>,
    pub split_rows: Vec<usize>,
    pub estimation_rows: Vec<usize>,
    pub leaf_effects: Vec<CausalLeafEffect<F>>,
}

/// Arm-wise running statistics of one sample within a node.
#[derive(Clone, Copy, Default)]
struct ArmStats<F> {
    n_t: usize,
    sum_t: F,
    sumsq_t: F,
    n_c: usize,
    sum_c: F,
    sumsq_c: F,
}

impl<F: Scalar> ArmStats<F> {
    fn zero() -> Self {
        Self {
            n_t: 0,
            sum_t: F::zero(),
            sumsq_t: F::zero(),
            n_c: 0,
            sum_c: F::zero(),
            sumsq_c: F::zero(),
        }
    }

    fn add(&mut self, y: F, treated: bool) {
        if treated {
            self.n_t += 1;
            self.sum_t += y;
            self.sumsq_t += y * y;
        } else {
            self.n_c += 1;
            self.sum_c += y;
            self.sumsq_c += y * y;
        }
    }

    fn minus(&self, other: &Self) -> Self {
        Self {
            n_t: self.n_t - other.n_t,
            sum_t: self.sum_t - other.sum_t,
            sumsq_t: self.sumsq_t - other.sumsq_t,
            n_c: self.n_c - other.n_c,
            sum_c: self.sum_c - other.sum_c,
            sumsq_c: self.sumsq_c - other.sumsq_c,
        }
    }

    fn tau(&self) -> Option<F> {
        if self.n_t == 0 || self.n_c == 0 {
            return None;
        }
        Some(self.sum_t / F::of_usize(self.n_t) - self.sum_c / F::of_usize(self.n_c))
    }

    fn arm_variance(sum: F, sumsq: F, n: usize) -> F {
        if n < 2 {
            return F::zero();
        }
        let nf = F::of_usize(n);
        ((sumsq - sum * sum / nf) / (nf - F::one())).max(F::zero())
    }

    /// Penalized node value: `n tau^2 - kappa n (S_t^2/p + S_c^2/(1-p))`.
    fn value(&self, kappa: F) -> Option<F> {
        let tau = self.tau()?;
        let n = self.n_t + self.n_c;
        let nf = F::of_usize(n);
        let p = F::of_usize(self.n_t) / nf;
        let s2t = Self::arm_variance(self.sum_t, self.sumsq_t, self.n_t);
        let s2c = Self::arm_variance(self.sum_c, self.sumsq_c, self.n_c);
        Some(nf * tau * tau - kappa * nf * (s2t / p + s2c / (F::one() - p)))
    }
}

struct CtNode<F> {
    feature: usize,
    rule: Option<SplitRule<F>>,
    left: usize,
    right: usize,
    /// Split-sample effect estimate at this node.
    tau: F,
    /// Penalized value of this node treated as a leaf.
    value: F,
    collapse_alpha: F,
}

struct CtGrower<'a, F> {
    data: &'a FeatureData<F>,
    outcomes: &'a [F],
    treated: &'a [bool],
    cfg: &'a CausalTreeConfig<F>,
    kappa: F,
    nodes: Vec<CtNode<F>>,
}

impl<F: Scalar> CtGrower<'_, F> {
    fn stats_of(&self, rows: &[usize]) -> ArmStats<F> {
        let mut s = ArmStats::zero();
        for &r in rows {
            s.add(self.outcomes[r], self.treated[r]);
        }
        s
    }

    fn admissible(&self, s: &ArmStats<F>) -> bool {
        s.n_t >= self.cfg.min_leaf && s.n_c >= self.cfg.min_leaf
    }

    fn grow(&mut self, split_rows: &[usize], est_rows: &[usize], depth: usize) -> usize {
        let stats = self.stats_of(split_rows);
        // An arm can be empty in degenerate fold subsamples; such nodes
        // stay leaves with a zero effect and never win a split.
        let tau = stats.tau().unwrap_or_else(F::zero);
        let value = stats.value(self.kappa).unwrap_or_else(F::zero);
        let ix = self.nodes.len();
        self.nodes.push(CtNode {
            feature: 0,
            rule: None,
            left: 0,
            right: 0,
            tau,
            value,
            collapse_alpha: F::infinity(),
        });
        if self.cfg.max_depth.is_some_and(|d| depth >= d) {
            return ix;
        }

        let mut best: Option<(F, usize, SplitRule<F>)> = None;
        for f in 0..self.data.n_features() {
            let candidate = match self.data.columns[f].kind {
                FeatureKind::Numeric => self.best_numeric(split_rows, est_rows, f),
                FeatureKind::Categorical { .. } => self.best_categorical(split_rows, est_rows, f),
            };
            if let Some((gain, rule)) = candidate {
                if best.as_ref().is_none_or(|(b, _, _)| gain > *b) {
                    best = Some((gain, f, rule));
                }
            }
        }
        let Some((gain, feature, rule)) = best else {
            return ix;
        };
        if gain <= F::zero() {
            return ix;
        }

        let goes_left = |r: usize| match rule {
            SplitRule::Le(t) => self.data.columns[feature].values[r] <= t,
            SplitRule::InSet(mask) => {
                mask & (1u64 << (self.data.columns[feature].values[r].as_f64() as usize)) != 0
            }
        };
        let (sl, sr): (Vec<usize>, Vec<usize>) = split_rows.iter().partition(|&&r| goes_left(r));
        let (el, er): (Vec<usize>, Vec<usize>) = est_rows.iter().partition(|&&r| goes_left(r));
        let left = self.grow(&sl, &el, depth + 1);
        let right = self.grow(&sr, &er, depth + 1);
        let node = &mut self.nodes[ix];
        node.feature = feature;
        node.rule = Some(rule);
        node.left = left;
        node.right = right;
        ix
    }

    /// Best numeric split by penalized-value gain, requiring `min_leaf`
    /// units per arm per child in both honest halves.
    fn best_numeric(
        &self,
        split_rows: &[usize],
        est_rows: &[usize],
        f: usize,
    ) -> Option<(F, SplitRule<F>)> {
        let col = &self.data.columns[f].values;
        let mut ordered: Vec<usize> = split_rows.to_vec();
        ordered.sort_unstable_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap());
        let total = self.stats_of(split_rows);
        let parent_value = total.value(self.kappa)?;

        // Estimation-half values sorted per arm for admissibility counts.
        let mut est_t: Vec<F> = Vec::new();
        let mut est_c: Vec<F> = Vec::new();
        for &r in est_rows {
            if self.treated[r] {
                est_t.push(col[r]);
            } else {
                est_c.push(col[r]);
            }
        }
        est_t.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        est_c.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let count_le = |sorted: &[F], t: F| sorted.partition_point(|&v| v <= t);

        let mut running = ArmStats::zero();
        let mut best: Option<(F, F)> = None;
        for i in 0..ordered.len().saturating_sub(1) {
            let r = ordered[i];
            running.add(self.outcomes[r], self.treated[r]);
            if col[r] == col[ordered[i + 1]] {
                continue;
            }
            let right = total.minus(&running);
            if !self.admissible(&running) || !self.admissible(&right) {
                continue;
            }
            let threshold = (col[r] + col[ordered[i + 1]]) / F::of(2.0);
            let elt = count_le(&est_t, threshold);
            let elc = count_le(&est_c, threshold);
            let est_ok = elt >= self.cfg.min_leaf
                && elc >= self.cfg.min_leaf
                && est_t.len() - elt >= self.cfg.min_leaf
                && est_c.len() - elc >= self.cfg.min_leaf;
            if !est_ok {
                continue;
            }
            let (Some(vl), Some(vr)) = (running.value(self.kappa), right.value(self.kappa)) else {
                continue;
            };
            let gain = vl + vr - parent_value;
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, threshold));
            }
        }
        best.map(|(g, t)| (g, SplitRule::Le(t)))
    }

    /// Categorical splits: levels ordered by within-level effect estimate
    /// (falling back to mean outcome where an arm is absent), prefix cuts.
    fn best_categorical(
        &self,
        split_rows: &[usize],
        est_rows: &[usize],
        f: usize,
    ) -> Option<(F, SplitRule<F>)> {
        let FeatureKind::Categorical { n_levels } = self.data.columns[f].kind else {
            unreachable!()
        };
        let col = &self.data.columns[f].values;
        let mut level_stats = vec![ArmStats::<F>::zero(); n_levels];
        for &r in split_rows {
            level_stats[col[r].as_f64() as usize].add(self.outcomes[r], self.treated[r]);
        }
        let mut est_stats = vec![(0usize, 0usize); n_levels];
        for &r in est_rows {
            let l = col[r].as_f64() as usize;
            if self.treated[r] {
                est_stats[l].0 += 1;
            } else {
                est_stats[l].1 += 1;
            }
        }
        let mut present: Vec<usize> = (0..n_levels)
            .filter(|&l| level_stats[l].n_t + level_stats[l].n_c > 0)
            .collect();
        if present.len() < 2 {
            return None;
        }
        present.sort_by(|&a, &b| {
            let key = |l: usize| {
                let s = &level_stats[l];
                s.tau().unwrap_or_else(|| {
                    let n = s.n_t + s.n_c;
                    (s.sum_t + s.sum_c) / F::of_usize(n.max(1))
                })
            };
            key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b))
        });

        let total = self.stats_of(split_rows);
        let parent_value = total.value(self.kappa)?;
        let mut left = ArmStats::zero();
        let mut left_est = (0usize, 0usize);
        let mut mask = 0u64;
        let mut best: Option<(F, u64)> = None;
        let est_totals = est_stats
            .iter()
            .fold((0, 0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
        for &level in present.iter().take(present.len() - 1) {
            let s = &level_stats[level];
            left.n_t += s.n_t;
            left.sum_t += s.sum_t;
            left.sumsq_t += s.sumsq_t;
            left.n_c += s.n_c;
            left.sum_c += s.sum_c;
            left.sumsq_c += s.sumsq_c;
            left_est.0 += est_stats[level].0;
            left_est.1 += est_stats[level].1;
            mask |= 1u64 << level;
            let right = total.minus(&left);
            if !self.admissible(&left) || !self.admissible(&right) {
                continue;
            }
            let m = self.cfg.min_leaf;
            let est_ok = left_est.0 >= m
                && left_est.1 >= m
                && est_totals.0 - left_est.0 >= m
                && est_totals.1 - left_est.1 >= m;
            if !est_ok {
                continue;
            }
            let (Some(vl), Some(vr)) = (left.value(self.kappa), right.value(self.kappa)) else {
                continue;
            };
            let gain = vl + vr - parent_value;
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, mask));
            }
        }
        best.map(|(g, m)| (g, SplitRule::InSet(m)))
    }
}

/// Assigns a row set to the leaves of a grown arena pruned at `alpha`.
fn classify_arena<F: Scalar>(
    nodes: &[CtNode<F>],
    data: &FeatureData<F>,
    row: usize,
    alpha: F,
) -> usize {
    let mut ix = 0usize;
    loop {
        let node = &nodes[ix];
        match node.rule {
            None => return ix,
            Some(_) if node.collapse_alpha <= alpha => return ix,
            Some(SplitRule::Le(t)) => {
                ix = if data.columns[node.feature].values[row] <= t {
                    node.left
                } else {
                    node.right
                };
            }
            Some(SplitRule::InSet(mask)) => {
                let level = data.columns[node.feature].values[row].as_f64() as usize;
                ix = if mask & (1u64 << level) != 0 {
                    node.left
                } else {
                    node.right
                };
            }
        }
    }
}

fn annotate_arena<F: Scalar>(nodes: &mut [CtNode<F>]) -> Vec<F> {
    let risks: Vec<F> = nodes.iter().map(|n| -n.value).collect();
    let children: Vec<Option<(usize, usize)>> = nodes
        .iter()
        .map(|n| n.rule.map(|_| (n.left, n.right)))
        .collect();
    let (collapse, criticals) = weakest_link_schedule(&risks, &children);
    for (node, alpha) in nodes.iter_mut().zip(collapse) {
        node.collapse_alpha = alpha;
    }
    criticals
}

/// Fits the honest causal tree on a one-row-per-unit table with arm flags
/// (the pipeline reduces the two-period panel to per-unit outcome changes
/// beforehand).
pub fn fit_causal_tree<F: Scalar>(
    table: &CohortTable<F>,
    config: &CausalTreeConfig<F>,
    seed_value: u64,
) -> Result<CausalTreeModel<F>, CausalTreeError> {
    let hf = config.honest_fraction.as_f64();
    if !(0.0 < hf && hf < 1.0) {
        return Err(CausalTreeError::Config(
            "honest_fraction must be in (0, 1)".into(),
        ));
    }
    if config.cv_folds < 2 {
        return Err(CausalTreeError::Config(
            "cv_folds must be at least 2".into(),
        ));
    }
    let n = table.n_records();
    let mut treated = Vec::with_capacity(n);
    for r in 0..n {
        match table.record(r).arm {
            Some(a) => treated.push(a),
            None => {
                return Err(CausalTreeError::MissingArm {
                    unit_id: table.record(r).unit_id.clone(),
                })
            }
        }
    }
    let outcomes: Vec<F> = (0..n).map(|r| table.outcome(r)).collect();
    let data = FeatureData::from_table(table, None, false)?;

    // Honest split.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed_value, &[seed::STREAM_CAUSAL_TREE, 0]);
    order.shuffle(&mut rng);
    let cut = ((n as f64) * hf).floor() as usize;
    let split_rows: Vec<usize> = order[..cut].to_vec();
    let estimation_rows: Vec<usize> = order[cut..].to_vec();

    let root_split = {
        let mut s = ArmStats::<F>::zero();
        for &r in &split_rows {
            s.add(outcomes[r], treated[r]);
        }
        s
    };
    let root_est_t = estimation_rows.iter().filter(|&&r| treated[r]).count();
    if root_split.n_t == 0
        || root_split.n_c == 0
        || root_est_t == 0
        || root_est_t == estimation_rows.len()
    {
        return Err(CausalTreeError::EmptyArm);
    }

    let kappa =
        F::one() / F::of_usize(split_rows.len()) + F::one() / F::of_usize(estimation_rows.len());
    let grow_on = |rows: &[usize]| -> Vec<CtNode<F>> {
        let mut grower = CtGrower {
            data: &data,
            outcomes: &outcomes,
            treated: &treated,
            cfg: config,
            kappa,
            nodes: Vec::new(),
        };
        grower.grow(rows, &estimation_rows, 0);
        grower.nodes
    };

    let mut main = grow_on(&split_rows);
    let criticals = annotate_arena(&mut main);

    // Complexity selection: maximize the honest criterion
    // sum_leaf n_fold (2 tau_tr tau_fold - tau_tr^2) over held-out folds.
    let chosen_alpha = if criticals.is_empty() {
        F::zero()
    } else {
        let mut candidates = vec![F::zero()];
        for w in criticals.windows(2) {
            candidates.push(if w[0] > F::zero() {
                (w[0] * w[1]).sqrt()
            } else {
                w[1] / F::of(2.0)
            });
        }
        candidates.push(*criticals.last().unwrap() * F::of(1.5) + F::of(1e-12));

        let folds = crate::forest::make_folds(
            &split_rows,
            config.cv_folds.min(split_rows.len()),
            seed_value,
        );
        let mut fold_scores = vec![Vec::with_capacity(folds.len()); candidates.len()];
        for (fi, fold) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != fi)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let fold_stats = |nodes: &[CtNode<F>], alpha: F| -> F {
                // Group fold units by pruned leaf, then score.
                let mut groups: std::collections::BTreeMap<usize, ArmStats<F>> = Default::default();
                for &r in fold {
                    let leaf = classify_arena(nodes, &data, r, alpha);
                    groups
                        .entry(leaf)
                        .or_insert_with(ArmStats::zero)
                        .add(outcomes[r], treated[r]);
                }
                let mut score = F::zero();
                for (leaf, s) in groups {
                    if let Some(tau_fold) = s.tau() {
                        let tau_tr = nodes[leaf].tau;
                        let nf = F::of_usize(s.n_t + s.n_c);
                        score += nf * (F::of(2.0) * tau_tr * tau_fold - tau_tr * tau_tr);
                    }
                }
                score
            };
            let mut fold_nodes = grow_on(&train);
            annotate_arena(&mut fold_nodes);
            for (ci, &alpha) in candidates.iter().enumerate() {
                fold_scores[ci].push(fold_stats(&fold_nodes, alpha));
            }
        }
        // Mean score with a one-SE-style conservatism: take the largest
        // alpha (smallest tree) whose score is within one fold standard
        // error of the best.
        let k = F::of_usize(folds.len());
        let summary: Vec<(F, F)> = fold_scores
            .iter()
            .map(|fs| {
                let mean = fs.iter().copied().sum::<F>() / k;
                let var = fs.iter().map(|&s| (s - mean) * (s - mean)).sum::<F>() / k;
                (mean, (var / k).sqrt())
            })
            .collect();
        let best = summary
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let floor = summary[best].0 - summary[best].1;
        candidates
            .iter()
            .zip(&summary)
            .filter(|(_, (mean, _))| *mean >= floor)
            .map(|(&a, _)| a)
            .fold(candidates[best], |acc, a| acc.max(a))
    };

    // Convert the pruned arena to a rule tree.
    fn convert<F: Scalar>(
        nodes: &[CtNode<F>],
        ix: usize,
        alpha: F,
        data: &FeatureData<F>,
        schema: &crate::cohort::CovariateSchema,
    ) -> RuleNode<F> {
        let node = &nodes[ix];
        if node.rule.is_none() || node.collapse_alpha <= alpha {
            return RuleNode::leaf(LeafMetadata::default());
        }
        let name = data.names[node.feature].clone();
        let test = match node.rule.unwrap() {
            SplitRule::Le(t) => PredicateTest::NumericLe { threshold: t },
            SplitRule::InSet(mask) => {
                let col = schema.index_of(&name).expect("feature resolves");
                let CovariateKind::Categorical { levels } = &schema.column(col).kind else {
                    unreachable!()
                };
                let mut selected: Vec<String> = levels
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1u64 << i) != 0)
                    .map(|(_, l)| l.clone())
                    .collect();
                selected.sort_unstable();
                PredicateTest::InLevels { levels: selected }
            }
        };
        RuleNode::split(
            Predicate {
                variable: name,
                test,
            },
            convert(nodes, node.left, alpha, data, schema),
            convert(nodes, node.right, alpha, data, schema),
        )
    }
    let root = convert(&main, 0, chosen_alpha, &data, table.schema());
    let tree = PartitionRuleTree::new(table.schema().hash(), root)?;

    // Honest leaf effects from the estimation half only.
    let leaf_effects = estimate_effects(table, &tree, &estimation_rows)?;
    let tree = tree.map_leaf_metadata(|leaf_id, meta| {
        let e = leaf_effects.iter().find(|e| e.leaf_id == leaf_id);
        LeafMetadata {
            train_estimate: e.map(|e| e.tau),
            train_se: e.map(|e| e.se),
            ..meta.clone()
        }
    });

    Ok(CausalTreeModel {
        tree,
        split_rows,
        estimation_rows,
        leaf_effects,
    })
}

/// Difference-in-means effects with `s_t^2/n_t + s_c^2/n_c` variances for
/// a row set classified through the tree.
pub fn estimate_effects<F: Scalar>(
    table: &CohortTable<F>,
    tree: &PartitionRuleTree<F>,
    rows: &[usize],
) -> Result<Vec<CausalLeafEffect<F>>, CausalTreeError> {
    let leaf_ids = tree.classify_rows(table, rows)?;
    let mut groups: Vec<ArmStats<F>> = vec![ArmStats::zero(); tree.n_leaves() as usize];
    for (&r, &leaf) in rows.iter().zip(&leaf_ids) {
        let treated = table
            .record(r)
            .arm
            .ok_or_else(|| CausalTreeError::MissingArm {
                unit_id: table.record(r).unit_id.clone(),
            })?;
        groups[leaf as usize].add(table.outcome(r), treated);
    }
    let mut out = Vec::new();
    for (leaf, s) in groups.iter().enumerate() {
        let Some(tau) = s.tau() else { continue };
        let s2t = ArmStats::<F>::arm_variance(s.sum_t, s.sumsq_t, s.n_t);
        let s2c = ArmStats::<F>::arm_variance(s.sum_c, s.sumsq_c, s.n_c);
        let se = (s2t / F::of_usize(s.n_t) + s2c / F::of_usize(s.n_c)).sqrt();
        out.push(CausalLeafEffect {
            leaf_id: leaf as u32,
            tau,
            se,
            n_treated: s.n_t,
            n_control: s.n_c,
        });
    }
    Ok(out)
}

/// Validation: estimates every leaf on held-out data and applies the
/// stability rule against the honest (estimation-half) effects. Leaves
/// with an empty arm or degenerate variance in the validation set are
/// noisy.
pub fn validate_causal_tree<F: Scalar>(
    model: &CausalTreeModel<F>,
    validation: &CohortTable<F>,
    alpha: F,
) -> Result<Vec<StabilityVerdict<F>>, CausalTreeError> {
    let val_effects = estimate_effects(
        validation,
        &model.tree,
        &(0..validation.n_records()).collect::<Vec<_>>(),
    )?;
    let mut verdicts = Vec::with_capacity(model.tree.n_leaves() as usize);
    for leaf_id in 0..model.tree.n_leaves() {
        let train = model.leaf_effects.iter().find(|e| e.leaf_id == leaf_id);
        let val = val_effects.iter().find(|e| e.leaf_id == leaf_id);
        let verdict = match (train, val) {
            (Some(t), Some(v)) if t.se > F::zero() && v.se > F::zero() => {
                classify_subgroup(leaf_id, (t.tau, t.se), (v.tau, v.se), alpha)?
            }
            (Some(t), maybe_v) => StabilityVerdict {
                leaf_id,
                label: crate::rules::StabilityLabel::Noisy,
                train: (t.tau, t.se),
                val: maybe_v.map(|v| (v.tau, v.se)),
                tests: None,
                alpha,
            },
            (None, _) => StabilityVerdict {
                leaf_id,
                label: crate::rules::StabilityLabel::Noisy,
                train: (F::zero(), F::infinity()),
                val: None,
                tests: None,
                alpha,
            },
        };
        verdicts.push(verdict);
    }
    Ok(verdicts)
}
