//! The sample-splitting stability gate.
//!
//! A learned subgroup is kept as a hypothesis only if its estimates persist
//! across disjoint sets: stable high-impact when both sets reject zero at
//! level alpha, agree in sign, and the between-set difference does not
//! reject; stable low-impact when both sets fail to reject zero; noisy
//! otherwise (including sign flips, one-sided rejections, and subgroups
//! empty in the comparison set).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{difference_test, wald_test, TestResult};
use crate::num::Scalar;
use crate::rules::{Direction, LeafMetadata, PartitionRuleTree, StabilityLabel};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("standard error must be positive, got {se}")]
    NonpositiveSe { se: f64 },
    #[error("no {set:?} estimate for leaf {leaf_id}")]
    MissingStat { leaf_id: u32, set: SourceSet },
    #[error("duplicate {set:?} estimate for leaf {leaf_id}")]
    DuplicateStat { leaf_id: u32, set: SourceSet },
    #[error("estimate for leaf {leaf_id} outside the tree's leaf range")]
    UnknownLeaf { leaf_id: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Which analysis set an estimate came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSet {
    Train,
    Prediction,
    Validation,
    Study2,
}

impl SourceSet {
    pub fn token(self) -> &'static str {
        match self {
            SourceSet::Train => "train",
            SourceSet::Prediction => "prediction",
            SourceSet::Validation => "validation",
            SourceSet::Study2 => "study2",
        }
    }
}

/// Per-subgroup effect estimate with its origin tag.
#[derive(Clone, Copy, Debug)]
pub struct SubgroupEstimate<F> {
    pub leaf_id: u32,
    pub estimate: F,
    pub se: F,
    pub n_units: usize,
    pub source: SourceSet,
}

#[derive(Clone, Copy, Debug)]
pub struct StabilityTests<F> {
    pub train_vs_zero: TestResult<F>,
    pub val_vs_zero: TestResult<F>,
    pub difference: TestResult<F>,
}

/// Classification of one subgroup, with the three underlying tests.
#[derive(Clone, Debug)]
pub struct StabilityVerdict<F> {
    pub leaf_id: u32,
    pub label: StabilityLabel,
    pub train: (F, F),
    /// `None` when the subgroup was empty (or degenerate) in the
    /// comparison set, which forces the noisy label.
    pub val: Option<(F, F)>,
    pub tests: Option<StabilityTests<F>>,
    pub alpha: F,
}

impl<F: Scalar> StabilityVerdict<F> {
    /// Direction the verdict transports: the sign of the training estimate
    /// for stable-high subgroups, null otherwise.
    pub fn direction(&self) -> Direction {
        if self.label != StabilityLabel::StableHigh {
            return Direction::Null;
        }
        if self.train.0 > F::zero() {
            Direction::Positive
        } else {
            Direction::Negative
        }
    }
}

/// Applies the three-test rule to one subgroup's train/validation pair.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // negation also rejects NaN
pub fn classify_subgroup<F: Scalar>(
    leaf_id: u32,
    train: (F, F),
    val: (F, F),
    alpha: F,
) -> Result<StabilityVerdict<F>, StabilityError> {
    for se in [train.1, val.1] {
        if !(se > F::zero()) || !se.is_finite() {
            return Err(StabilityError::NonpositiveSe { se: se.as_f64() });
        }
    }
    let train_vs_zero = wald_test(train.0, train.1, F::zero()).expect("se checked");
    let val_vs_zero = wald_test(val.0, val.1, F::zero()).expect("se checked");
    let difference = difference_test(train, val).expect("se checked");

    let both_reject = train_vs_zero.p_value < alpha && val_vs_zero.p_value < alpha;
    let both_fail = train_vs_zero.p_value >= alpha && val_vs_zero.p_value >= alpha;
    let same_direction =
        (train.0 > F::zero() && val.0 > F::zero()) || (train.0 < F::zero() && val.0 < F::zero());
    let label = if both_reject && same_direction && difference.p_value >= alpha {
        StabilityLabel::StableHigh
    } else if both_fail {
        StabilityLabel::StableLow
    } else {
        StabilityLabel::Noisy
    };

    Ok(StabilityVerdict {
        leaf_id,
        label,
        train,
        val: Some(val),
        tests: Some(StabilityTests {
            train_vs_zero,
            val_vs_zero,
            difference,
        }),
        alpha,
    })
}

/// A gated tree plus its verdict table.
#[derive(Debug)]
pub struct GateOutput<F> {
    pub tree: PartitionRuleTree<F>,
    pub verdicts: Vec<StabilityVerdict<F>>,
}

/// Classifies every leaf of a tree from per-set estimate tables and
/// annotates the leaves. Leaves missing (or degenerate) in the validation
/// table become noisy; a missing training estimate is an error since the
/// tree was grown on that set.
pub fn gate_tree<F: Scalar>(
    tree: &PartitionRuleTree<F>,
    train_stats: &[SubgroupEstimate<F>],
    val_stats: &[SubgroupEstimate<F>],
    alpha: F,
) -> Result<GateOutput<F>, StabilityError> {
    let train = index_stats(tree, train_stats)?;
    let val = index_stats(tree, val_stats)?;

    let mut verdicts = Vec::with_capacity(tree.n_leaves() as usize);
    for leaf_id in 0..tree.n_leaves() {
        let t = train.get(&leaf_id).ok_or(StabilityError::MissingStat {
            leaf_id,
            set: SourceSet::Train,
        })?;
        let verdict = match val.get(&leaf_id) {
            Some(v) if usable(t) && usable(v) => {
                classify_subgroup(leaf_id, (t.estimate, t.se), (v.estimate, v.se), alpha)?
            }
            maybe => StabilityVerdict {
                leaf_id,
                label: StabilityLabel::Noisy,
                train: (t.estimate, t.se),
                val: maybe.map(|v| (v.estimate, v.se)),
                tests: None,
                alpha,
            },
        };
        verdicts.push(verdict);
    }

    let by_leaf: BTreeMap<u32, &StabilityVerdict<F>> =
        verdicts.iter().map(|v| (v.leaf_id, v)).collect();
    let tree = tree.map_leaf_metadata(|leaf_id, meta| {
        let v = by_leaf[&leaf_id];
        let _ = meta;
        LeafMetadata {
            train_estimate: Some(v.train.0),
            train_se: Some(v.train.1),
            val_estimate: v.val.map(|x| x.0),
            val_se: v.val.map(|x| x.1),
            hypothesis_direction: v.direction(),
            stability_label: Some(v.label),
        }
    });
    Ok(GateOutput { tree, verdicts })
}

fn usable<F: Scalar>(s: &SubgroupEstimate<F>) -> bool {
    s.se > F::zero() && s.se.is_finite() && s.estimate.is_finite()
}

fn index_stats<'a, F: Scalar>(
    tree: &PartitionRuleTree<F>,
    stats: &'a [SubgroupEstimate<F>],
) -> Result<BTreeMap<u32, &'a SubgroupEstimate<F>>, StabilityError> {
    let mut map = BTreeMap::new();
    for s in stats {
        if s.leaf_id >= tree.n_leaves() {
            return Err(StabilityError::UnknownLeaf { leaf_id: s.leaf_id });
        }
        if map.insert(s.leaf_id, s).is_some() {
            return Err(StabilityError::DuplicateStat {
                leaf_id: s.leaf_id,
                set: s.source,
            });
        }
    }
    Ok(map)
}

/// Verdict table CSV: `leaf_id,label,train_est,train_se,val_est,val_se,
/// p_train,p_val,p_diff`.
pub fn write_verdict_csv<F: Scalar>(
    verdicts: &[StabilityVerdict<F>],
    writer: impl Write,
) -> Result<(), StabilityError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "leaf_id",
        "label",
        "train_est",
        "train_se",
        "val_est",
        "val_se",
        "p_train",
        "p_val",
        "p_diff",
    ])?;
    for v in verdicts {
        let opt = |x: Option<F>| x.map(|v| format!("{v}")).unwrap_or_default();
        w.write_record([
            v.leaf_id.to_string(),
            v.label.token().to_string(),
            format!("{}", v.train.0),
            format!("{}", v.train.1),
            opt(v.val.map(|x| x.0)),
            opt(v.val.map(|x| x.1)),
            opt(v.tests.as_ref().map(|t| t.train_vs_zero.p_value)),
            opt(v.tests.as_ref().map(|t| t.val_vs_zero.p_value)),
            opt(v.tests.as_ref().map(|t| t.difference.p_value)),
        ])?;
    }
    w.flush()?;
    Ok(())
}
