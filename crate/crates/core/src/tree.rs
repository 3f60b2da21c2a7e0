//! Axis-aligned regression trees: the shared engine behind the per-arm
//! forests and the CART over treatment-control differences.
//!
//! Numeric features split on midpoints between consecutive distinct values;
//! categorical features order their levels by within-node mean target and
//! scan prefix splits, which is exact for squared error. Fitted trees carry
//! per-node sums so a cost-complexity pruning schedule can be annotated in
//! place and applied at prediction time for any complexity value.

use thiserror::Error;

use crate::cohort::{CohortTable, CovariateKind, CovariateSchema};
use crate::num::Scalar;
use crate::rules::{
    LeafMetadata, PartitionRuleTree, Predicate, PredicateTest, RuleNode, RulesError,
};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("unknown covariate `{name}`")]
    UnknownCovariate { name: String },
    #[error("categorical `{name}` has {levels} levels; trees support at most 64")]
    TooManyLevels { name: String, levels: usize },
    #[error("no rows to fit on")]
    EmptyData,
    #[error(transparent)]
    Rules(#[from] RulesError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Categorical { n_levels: usize },
}

pub struct FeatureColumn<F> {
    pub values: Vec<F>,
    pub kind: FeatureKind,
}

/// Column-major feature view over a table, optionally appending the
/// continuous treatment as the last feature.
pub struct FeatureData<F> {
    pub columns: Vec<FeatureColumn<F>>,
    pub names: Vec<String>,
    pub n_rows: usize,
    pub includes_treatment: bool,
}

impl<F: Scalar> FeatureData<F> {
    pub fn from_table(
        table: &CohortTable<F>,
        covariates: Option<&[String]>,
        include_treatment: bool,
    ) -> Result<Self, TreeError> {
        let schema = table.schema();
        let cols: Vec<usize> = match covariates {
            None => (0..schema.len()).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    schema
                        .index_of(n)
                        .ok_or_else(|| TreeError::UnknownCovariate { name: n.clone() })
                })
                .collect::<Result<_, _>>()?,
        };
        let n_rows = table.n_records();
        let mut columns = Vec::with_capacity(cols.len() + usize::from(include_treatment));
        let mut names = Vec::with_capacity(cols.len() + usize::from(include_treatment));
        for &c in &cols {
            let col = schema.column(c);
            let kind = match &col.kind {
                CovariateKind::Numeric | CovariateKind::Binary => FeatureKind::Numeric,
                CovariateKind::Categorical { levels } => {
                    if levels.len() > 64 {
                        return Err(TreeError::TooManyLevels {
                            name: col.name.clone(),
                            levels: levels.len(),
                        });
                    }
                    FeatureKind::Categorical {
                        n_levels: levels.len(),
                    }
                }
            };
            let values = (0..n_rows).map(|r| table.covariate(r, c)).collect();
            columns.push(FeatureColumn { values, kind });
            names.push(col.name.clone());
        }
        if include_treatment {
            columns.push(FeatureColumn {
                values: (0..n_rows).map(|r| table.treatment(r)).collect(),
                kind: FeatureKind::Numeric,
            });
            names.push("treatment".to_string());
        }
        Ok(Self {
            columns,
            names,
            n_rows,
            includes_treatment: include_treatment,
        })
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    /// Copies one row into a feature vector (the layout `predict` expects).
    pub fn gather_row(&self, row: usize, out: &mut Vec<F>) {
        out.clear();
        out.extend(self.columns.iter().map(|c| c.values[row]));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitRule<F> {
    /// `value <= threshold` routes left.
    Le(F),
    /// Level-index bitmask; member levels route left.
    InSet(u64),
}

#[derive(Clone, Debug)]
pub struct TreeNode<F> {
    pub feature: usize,
    pub rule: Option<SplitRule<F>>,
    pub left: usize,
    pub right: usize,
    pub n: usize,
    pub mean: F,
    pub sse: F,
    /// Complexity at which this internal node collapses to a leaf; set by
    /// `annotate_pruning`. Infinity means "never".
    pub collapse_alpha: F,
}

impl<F: Scalar> TreeNode<F> {
    fn leaf(n: usize, mean: F, sse: F) -> Self {
        Self {
            feature: 0,
            rule: None,
            left: 0,
            right: 0,
            n,
            mean,
            sse,
            collapse_alpha: F::infinity(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.rule.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GrowthConfig {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Features sampled per split; `None` tries all.
    pub m_try: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RegressionTree<F> {
    pub nodes: Vec<TreeNode<F>>,
}

struct Grower<'a, F, R> {
    data: &'a FeatureData<F>,
    targets: &'a [F],
    cfg: GrowthConfig,
    rng: &'a mut R,
    nodes: Vec<TreeNode<F>>,
}

impl<F: Scalar> RegressionTree<F> {
    /// A stump predicting a constant; handy as a degenerate model.
    pub fn constant(mean: F) -> Self {
        Self {
            nodes: vec![TreeNode::leaf(0, mean, F::zero())],
        }
    }

    /// Grows a tree on `rows`, reading `targets[row]` for each row.
    pub fn fit<R: Rng>(
        data: &FeatureData<F>,
        targets: &[F],
        rows: &[usize],
        cfg: GrowthConfig,
        rng: &mut R,
    ) -> Result<Self, TreeError> {
        if rows.is_empty() {
            return Err(TreeError::EmptyData);
        }
        let mut grower = Grower {
            data,
            targets,
            cfg,
            rng,
            nodes: Vec::new(),
        };
        let mut work: Vec<usize> = rows.to_vec();
        grower.grow(&mut work, 0);
        Ok(Self {
            nodes: grower.nodes,
        })
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        fn walk<F>(nodes: &[TreeNode<F>], ix: usize) -> usize {
            let n = &nodes[ix];
            if n.rule.is_none() {
                0
            } else {
                1 + walk(nodes, n.left).max(walk(nodes, n.right))
            }
        }
        walk(&self.nodes, 0)
    }

    /// Prediction for a feature vector in `FeatureData` column order.
    pub fn predict(&self, features: &[F]) -> F {
        self.predict_pruned(features, F::zero())
    }

    /// Prediction treating nodes with `collapse_alpha <= alpha` as leaves.
    pub fn predict_pruned(&self, features: &[F], alpha: F) -> F {
        let mut ix = 0usize;
        loop {
            let node = &self.nodes[ix];
            match node.rule {
                None => return node.mean,
                Some(_) if node.collapse_alpha <= alpha => return node.mean,
                Some(SplitRule::Le(t)) => {
                    ix = if features[node.feature] <= t {
                        node.left
                    } else {
                        node.right
                    };
                }
                Some(SplitRule::InSet(mask)) => {
                    let level = features[node.feature].as_f64() as usize;
                    ix = if mask & (1u64 << level) != 0 {
                        node.left
                    } else {
                        node.right
                    };
                }
            }
        }
    }

    /// Number of leaves of the subtree pruned at `alpha`.
    pub fn n_leaves_pruned(&self, alpha: F) -> usize {
        fn walk<F: Scalar>(nodes: &[TreeNode<F>], ix: usize, alpha: F) -> usize {
            let n = &nodes[ix];
            if n.rule.is_none() || n.collapse_alpha <= alpha {
                1
            } else {
                walk(nodes, n.left, alpha) + walk(nodes, n.right, alpha)
            }
        }
        walk(&self.nodes, 0, alpha)
    }

    /// Weakest-link cost-complexity schedule. Annotates every internal node
    /// with the complexity at which it collapses and returns the ascending
    /// critical complexities (empty for a stump).
    pub fn annotate_pruning(&mut self) -> Vec<F> {
        let risks: Vec<F> = self.nodes.iter().map(|n| n.sse).collect();
        let children: Vec<Option<(usize, usize)>> = self
            .nodes
            .iter()
            .map(|n| (!n.is_leaf()).then_some((n.left, n.right)))
            .collect();
        let (collapse, criticals) = weakest_link_schedule(&risks, &children);
        for (node, alpha) in self.nodes.iter_mut().zip(collapse) {
            node.collapse_alpha = alpha;
        }
        criticals
    }

    /// Converts the subtree pruned at `alpha` into a partition rule tree.
    pub fn to_rule_tree(
        &self,
        alpha: F,
        data: &FeatureData<F>,
        schema: &CovariateSchema,
    ) -> Result<PartitionRuleTree<F>, TreeError> {
        fn convert<F: Scalar>(
            nodes: &[TreeNode<F>],
            ix: usize,
            alpha: F,
            data: &FeatureData<F>,
            schema: &CovariateSchema,
        ) -> RuleNode<F> {
            let node = &nodes[ix];
            if node.rule.is_none() || node.collapse_alpha <= alpha {
                return RuleNode::leaf(LeafMetadata::default());
            }
            let name = data.names[node.feature].clone();
            let test = match node.rule.unwrap() {
                SplitRule::Le(t) => PredicateTest::NumericLe { threshold: t },
                SplitRule::InSet(mask) => {
                    let col = schema.index_of(&name).expect("feature name resolves");
                    let CovariateKind::Categorical { levels } = &schema.column(col).kind else {
                        unreachable!("set split on non-categorical feature")
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
        let root = convert(&self.nodes, 0, alpha, data, schema);
        Ok(PartitionRuleTree::new(schema.hash(), root)?)
    }
}

impl<F: Scalar, R: Rng> Grower<'_, F, R> {
    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let n = rows.len();
        let (sum, sumsq) = rows.iter().fold((F::zero(), F::zero()), |(s, q), &r| {
            let y = self.targets[r];
            (s + y, q + y * y)
        });
        let mean = sum / F::of_usize(n);
        let sse = (sumsq - sum * sum / F::of_usize(n)).max(F::zero());

        let ix = self.nodes.len();
        self.nodes.push(TreeNode::leaf(n, mean, sse));

        if n < 2 * self.cfg.min_leaf {
            return ix;
        }
        if let Some(d) = self.cfg.max_depth {
            if depth >= d {
                return ix;
            }
        }
        let (ymin, ymax) = rows
            .iter()
            .fold((F::infinity(), F::neg_infinity()), |(lo, hi), &r| {
                let y = self.targets[r];
                (lo.min(y), hi.max(y))
            });
        if ymin == ymax {
            return ix;
        }

        let p = self.data.n_features();
        let tried: Vec<usize> = match self.cfg.m_try {
            Some(m) if m < p => {
                let mut picked: Vec<usize> = sample_indices(self.rng, p, m).into_iter().collect();
                picked.sort_unstable();
                picked
            }
            _ => (0..p).collect(),
        };

        let node_score = sum * sum / F::of_usize(n);
        let mut best: Option<(F, usize, SplitRule<F>)> = None;
        for &f in &tried {
            let candidate = match self.data.columns[f].kind {
                FeatureKind::Numeric => self.best_numeric_split(rows, f),
                FeatureKind::Categorical { .. } => self.best_categorical_split(rows, f),
            };
            if let Some((score, rule)) = candidate {
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, f, rule));
                }
            }
        }
        let Some((score, feature, rule)) = best else {
            return ix;
        };
        // Require a gain clearly above round-off.
        let gain = score - node_score;
        if gain <= (sumsq.abs() + F::one()) * F::of(1e-12) {
            return ix;
        }

        let mid = partition_stable(rows, |r| {
            rule_goes_left(&rule, self.data.columns[feature].values[r])
        });
        let (left_rows, right_rows) = rows.split_at_mut(mid);
        debug_assert!(
            left_rows.len() >= self.cfg.min_leaf && right_rows.len() >= self.cfg.min_leaf
        );

        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        let node = &mut self.nodes[ix];
        node.feature = feature;
        node.rule = Some(rule);
        node.left = left;
        node.right = right;
        ix
    }

    /// Best split score `S_L^2/n_L + S_R^2/n_R` over admissible thresholds.
    fn best_numeric_split(&self, rows: &[usize], f: usize) -> Option<(F, SplitRule<F>)> {
        let col = &self.data.columns[f].values;
        let mut pairs: Vec<(F, F)> = rows.iter().map(|&r| (col[r], self.targets[r])).collect();
        pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite feature values"));
        let n = pairs.len();
        let total: F = pairs.iter().map(|&(_, y)| y).sum();
        let min_leaf = self.cfg.min_leaf;

        let mut left_sum = F::zero();
        let mut best: Option<(F, F)> = None; // (score, threshold)
        for i in 0..n - 1 {
            left_sum += pairs[i].1;
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let score =
                left_sum * left_sum / F::of_usize(nl) + right_sum * right_sum / F::of_usize(nr);
            if best.is_none_or(|(b, _)| score > b) {
                let threshold = (pairs[i].0 + pairs[i + 1].0) / F::of(2.0);
                best = Some((score, threshold));
            }
        }
        best.map(|(s, t)| (s, SplitRule::Le(t)))
    }

    /// Levels ordered by within-node mean target, then prefix splits.
    fn best_categorical_split(&self, rows: &[usize], f: usize) -> Option<(F, SplitRule<F>)> {
        let FeatureKind::Categorical { n_levels } = self.data.columns[f].kind else {
            unreachable!()
        };
        let col = &self.data.columns[f].values;
        let mut count = vec![0usize; n_levels];
        let mut sum = vec![F::zero(); n_levels];
        for &r in rows {
            let level = col[r].as_f64() as usize;
            count[level] += 1;
            sum[level] += self.targets[r];
        }
        let mut present: Vec<usize> = (0..n_levels).filter(|&l| count[l] > 0).collect();
        if present.len() < 2 {
            return None;
        }
        present.sort_by(|&a, &b| {
            let ma = sum[a] / F::of_usize(count[a]);
            let mb = sum[b] / F::of_usize(count[b]);
            ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
        });

        let n = rows.len();
        let total: F = sum.iter().copied().sum();
        let mut left_n = 0usize;
        let mut left_sum = F::zero();
        let mut mask = 0u64;
        let mut best: Option<(F, u64)> = None;
        for &level in present.iter().take(present.len() - 1) {
            left_n += count[level];
            left_sum += sum[level];
            mask |= 1u64 << level;
            let nr = n - left_n;
            if left_n < self.cfg.min_leaf || nr < self.cfg.min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let score =
                left_sum * left_sum / F::of_usize(left_n) + right_sum * right_sum / F::of_usize(nr);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, mask));
            }
        }
        best.map(|(s, m)| (s, SplitRule::InSet(m)))
    }
}

/// Weakest-link pruning over an arena of nodes with additive risks.
/// `risks[i]` is node i's own risk as a leaf; `children[i]` is `None` for
/// leaves. Returns the collapse complexity per node (infinity for leaves
/// and never-collapsed nodes) and the ascending critical complexities.
pub fn weakest_link_schedule<F: Scalar>(
    risks: &[F],
    children: &[Option<(usize, usize)>],
) -> (Vec<F>, Vec<F>) {
    let m = risks.len();
    let mut collapse = vec![F::infinity(); m];
    if m <= 1 {
        return (collapse, Vec::new());
    }
    let mut parent = vec![usize::MAX; m];
    for (i, ch) in children.iter().enumerate() {
        if let Some((l, r)) = ch {
            parent[*l] = i;
            parent[*r] = i;
        }
    }
    // Subtree risk and leaf counts; children always have larger indices
    // than their parent, so one reverse pass initializes both.
    let mut r_sub = vec![F::zero(); m];
    let mut leaves = vec![0usize; m];
    for i in (0..m).rev() {
        match children[i] {
            None => {
                r_sub[i] = risks[i];
                leaves[i] = 1;
            }
            Some((l, r)) => {
                r_sub[i] = r_sub[l] + r_sub[r];
                leaves[i] = leaves[l] + leaves[r];
            }
        }
    }
    let mut alive: Vec<bool> = children.iter().map(|c| c.is_some()).collect();
    let mut criticals = Vec::new();
    loop {
        let mut g_min = F::infinity();
        for i in 0..m {
            if alive[i] && leaves[i] > 1 {
                let g = (risks[i] - r_sub[i]) / F::of_usize(leaves[i] - 1);
                if g < g_min {
                    g_min = g;
                }
            }
        }
        if !g_min.is_finite() {
            break;
        }
        criticals.push(g_min);
        // Collapse every node attaining the minimum, children before
        // parents so sub-collapses fold into their ancestors' updates. A
        // collapsed node removes its entire subtree from the schedule.
        for i in (0..m).rev() {
            if alive[i] && leaves[i] > 1 {
                let g = (risks[i] - r_sub[i]) / F::of_usize(leaves[i] - 1);
                if g <= g_min {
                    collapse[i] = g_min;
                    let dr = risks[i] - r_sub[i];
                    let dl = leaves[i] - 1;
                    r_sub[i] = risks[i];
                    leaves[i] = 1;
                    let mut stack = vec![i];
                    while let Some(s) = stack.pop() {
                        alive[s] = false;
                        if let Some((l, r)) = children[s] {
                            stack.push(l);
                            stack.push(r);
                        }
                    }
                    let mut p = parent[i];
                    while p != usize::MAX {
                        r_sub[p] += dr;
                        leaves[p] -= dl;
                        p = parent[p];
                    }
                }
            }
        }
        if !alive.iter().any(|&a| a) {
            break;
        }
    }
    criticals.dedup();
    (collapse, criticals)
}

fn rule_goes_left<F: Scalar>(rule: &SplitRule<F>, value: F) -> bool {
    match rule {
        SplitRule::Le(t) => value <= *t,
        SplitRule::InSet(mask) => mask & (1u64 << (value.as_f64() as usize)) != 0,
    }
}

/// Stable partition: keeps relative order on both sides, returns the cut.
fn partition_stable<T: Copy>(items: &mut [T], pred: impl Fn(T) -> bool) -> usize {
    let kept: Vec<T> = items.iter().copied().filter(|&x| pred(x)).collect();
    let dropped: Vec<T> = items.iter().copied().filter(|&x| !pred(x)).collect();
    let mid = kept.len();
    items[..mid].copy_from_slice(&kept);
    items[mid..].copy_from_slice(&dropped);
    mid
}
