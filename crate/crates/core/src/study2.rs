//! Experimental-stage testing: treatment-indicator construction, transport
//! of Study 1 rules onto the two-period panel, per-subgroup
//! negative-binomial difference-in-differences estimation with
//! unit-clustered standard errors, and hypothesis confirmation.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2};
use serde::Serialize;
use thiserror::Error;

use crate::cohort::CohortTable;
use crate::glm::{fit_negbin, wald_test, GlmError, NbOptions};
use crate::num::Scalar;
use crate::rules::{Direction, PartitionRuleTree, RulesError, StabilityLabel};
use crate::special;

#[derive(Debug, Error)]
pub enum Study2Error {
    #[error("unit `{unit_id}` does not appear in exactly two periods")]
    BadPanelUnit { unit_id: String },
    #[error("panel needs exactly two periods, found {0:?}")]
    BadPeriods(Vec<i32>),
    #[error("no units have a defined treatment indicator (b in {{0, 1}})")]
    NoEligibleUnits,
    #[error("pooled difference-in-differences fit failed: {0}")]
    PooledFit(GlmError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Three-case treatment indicator over pre/post exposure and a threshold:
/// 1 when the exposure crosses the threshold upward (A2 >= t >= A1),
/// 0 when it stays below in both periods, -1 otherwise.
pub fn indicator_case<F: Scalar>(a1: F, a2: F, t: F) -> i8 {
    if a2 >= t && t >= a1 {
        1
    } else if a1 < t && a2 < t {
        0
    } else {
        -1
    }
}

/// Per-unit treatment indicator for a two-period panel.
#[derive(Clone, Debug)]
pub struct TreatmentIndicator<F> {
    pub threshold: F,
    pub by_unit: BTreeMap<String, i8>,
}

/// Computes the indicator from each unit's pre- and post-period exposure.
pub fn build_indicator<F: Scalar>(
    panel: &CohortTable<F>,
    threshold: F,
) -> Result<TreatmentIndicator<F>, Study2Error> {
    let mut by_unit = BTreeMap::new();
    for (unit_id, rows) in panel.rows_by_unit() {
        if rows.len() != 2 {
            return Err(Study2Error::BadPanelUnit { unit_id });
        }
        let (a, b) = (rows[0], rows[1]);
        let (pre, post) = match (panel.record(a).period, panel.record(b).period) {
            (Some(pa), Some(pb)) if pa < pb => (a, b),
            (Some(pa), Some(pb)) if pb < pa => (b, a),
            _ => return Err(Study2Error::BadPanelUnit { unit_id }),
        };
        let b_case = indicator_case(panel.treatment(pre), panel.treatment(post), threshold);
        by_unit.insert(unit_id, b_case);
    }
    Ok(TreatmentIndicator { threshold, by_unit })
}

#[derive(Clone, Debug)]
pub struct Study2Config<F> {
    pub threshold: F,
    pub alpha: F,
    /// Smallest unit count a subgroup needs before fitting is attempted.
    pub min_fit_size: usize,
    /// Bonferroni-correct the confirmation threshold across tested leaves.
    pub bonferroni: bool,
    pub nb: NbOptions<F>,
}

impl<F: Scalar> Default for Study2Config<F> {
    fn default() -> Self {
        Self {
            threshold: F::of(30.0),
            alpha: F::of(0.05),
            min_fit_size: 50,
            bonferroni: false,
            nb: NbOptions::default(),
        }
    }
}

/// Fitted difference-in-differences summary for one subgroup.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DidFitSummary<F> {
    /// Post x Treatment interaction on the log scale.
    pub beta1: F,
    pub se_cluster: F,
    pub ci95: (F, F),
    pub p_value: F,
    pub dispersion: F,
}

/// One row of the Study 2 estimate table. `cluster_id` 0 is the pooled
/// all-units reference; leaf `l` of the rule tree reports as cluster
/// `l + 1`.
#[derive(Clone, Debug)]
pub struct SubgroupDid<F> {
    pub cluster_id: u32,
    pub leaf_id: Option<u32>,
    pub label: Option<StabilityLabel>,
    pub hypothesis: Direction,
    pub n_units: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub result: Option<DidFitSummary<F>>,
    /// Why `result` is absent (subgroup too small, fit failure, skipped).
    pub note: Option<String>,
}

/// Classifies panel units by their pre-period covariates, then fits the
/// negative-binomial DiD model pooled and per transported subgroup.
/// Noisy leaves are skipped (reported without an estimate); subgroups with
/// fewer than `min_fit_size` units are reported unestimable.
pub fn estimate_subgroups<F: Scalar>(
    panel: &CohortTable<F>,
    tree: &PartitionRuleTree<F>,
    config: &Study2Config<F>,
) -> Result<Vec<SubgroupDid<F>>, Study2Error> {
    let periods = panel.periods();
    if periods.len() != 2 {
        return Err(Study2Error::BadPeriods(periods));
    }
    let post_period = periods[1];
    let indicator = build_indicator(panel, config.threshold)?;
    let compiled = tree.compile(panel.schema())?;

    // Pre-period classification and eligibility per unit.
    struct Unit {
        rows: Vec<usize>,
        leaf: u32,
        treated: bool,
    }
    let mut units = Vec::new();
    for (unit_id, rows) in panel.rows_by_unit() {
        let b = indicator.by_unit[&unit_id];
        if b == -1 {
            continue;
        }
        let pre_row = *rows
            .iter()
            .min_by_key(|&&r| panel.record(r).period.unwrap_or(i32::MAX))
            .expect("two rows per unit");
        let leaf = compiled.classify(&panel.record(pre_row).covariates, panel.schema())?;
        units.push(Unit {
            rows,
            leaf,
            treated: b == 1,
        });
    }
    if units.is_empty() {
        return Err(Study2Error::NoEligibleUnits);
    }

    let fit_group = |members: &[&Unit]| -> Result<DidFitSummary<F>, GlmError> {
        let n_rows: usize = members.iter().map(|u| u.rows.len()).sum();
        let mut y = Array1::zeros(n_rows);
        let mut x = Array2::zeros((n_rows, 4));
        let mut clusters = Vec::with_capacity(n_rows);
        let mut i = 0;
        for (ui, unit) in members.iter().enumerate() {
            for &r in &unit.rows {
                let post = panel.record(r).period == Some(post_period);
                let treat = unit.treated;
                y[i] = panel.outcome(r);
                x[(i, 0)] = F::one();
                x[(i, 1)] = if post && treat { F::one() } else { F::zero() };
                x[(i, 2)] = if post { F::one() } else { F::zero() };
                x[(i, 3)] = if treat { F::one() } else { F::zero() };
                clusters.push(ui);
                i += 1;
            }
        }
        let names = ["intercept", "post_x_treat", "post", "treat"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let fit = fit_negbin(&y, &x, names, Some(&clusters), &config.nb)?;
        let beta1 = fit.coef(1);
        let se = fit.se(1);
        let test = wald_test(beta1, se, F::zero())?;
        let margin = F::of(1.96) * se;
        Ok(DidFitSummary {
            beta1,
            se_cluster: se,
            ci95: (beta1 - margin, beta1 + margin),
            p_value: test.p_value,
            dispersion: fit.dispersion.unwrap_or(F::zero()),
        })
    };

    let mut out = Vec::new();
    let all: Vec<&Unit> = units.iter().collect();
    let pooled = fit_group(&all).map_err(Study2Error::PooledFit)?;
    out.push(SubgroupDid {
        cluster_id: 0,
        leaf_id: None,
        label: None,
        hypothesis: Direction::Null,
        n_units: all.len(),
        n_treated: all.iter().filter(|u| u.treated).count(),
        n_control: all.iter().filter(|u| !u.treated).count(),
        result: Some(pooled),
        note: None,
    });

    for (leaf_id, meta) in tree.leaves() {
        let members: Vec<&Unit> = units.iter().filter(|u| u.leaf == leaf_id).collect();
        let n_treated = members.iter().filter(|u| u.treated).count();
        let n_control = members.len() - n_treated;
        let mut row = SubgroupDid {
            cluster_id: leaf_id + 1,
            leaf_id: Some(leaf_id),
            label: meta.stability_label,
            hypothesis: meta.hypothesis_direction,
            n_units: members.len(),
            n_treated,
            n_control,
            result: None,
            note: None,
        };
        if meta.stability_label == Some(StabilityLabel::Noisy) {
            row.note = Some("skipped: noisy in study 1".into());
        } else if members.len() < config.min_fit_size {
            row.note = Some(format!(
                "unestimable: {} units below the minimum of {}",
                members.len(),
                config.min_fit_size
            ));
        } else {
            match fit_group(&members) {
                Ok(summary) => row.result = Some(summary),
                Err(e) => row.note = Some(format!("unestimable: {e}")),
            }
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfirmationVerdict {
    Confirmed,
    FailToReject,
}

#[derive(Clone, Debug, Serialize)]
pub struct Confirmation<F> {
    pub cluster_id: u32,
    pub leaf_id: u32,
    pub hypothesis: Direction,
    pub beta1: Option<F>,
    pub p_value: Option<F>,
    pub verdict: ConfirmationVerdict,
}

/// Confirmation summary in the shape of the method-comparison table:
/// confirmed count out of transported high-impact hypotheses.
#[derive(Clone, Debug, Serialize)]
pub struct ConfirmationTable<F> {
    /// The decision rule applied to each transported hypothesis.
    pub rule: &'static str,
    pub alpha: F,
    pub bonferroni: bool,
    pub confirmed: usize,
    pub total: usize,
    pub rows: Vec<Confirmation<F>>,
}

/// Tests every transported stable-high hypothesis: confirmed when the DiD
/// interaction rejects zero at the (optionally Bonferroni-corrected) level
/// and its sign matches the transported direction.
pub fn confirm_hypotheses<F: Scalar>(
    estimates: &[SubgroupDid<F>],
    alpha: F,
    bonferroni: bool,
) -> ConfirmationTable<F> {
    let tested: Vec<&SubgroupDid<F>> = estimates
        .iter()
        .filter(|e| e.label == Some(StabilityLabel::StableHigh))
        .collect();
    let total = tested.len();
    let level = if bonferroni && total > 0 {
        alpha / F::of_usize(total)
    } else {
        alpha
    };

    let mut rows = Vec::with_capacity(total);
    let mut confirmed = 0usize;
    for e in tested {
        let verdict = match (&e.result, e.hypothesis) {
            (Some(r), Direction::Negative) if r.p_value < level && r.beta1 < F::zero() => {
                ConfirmationVerdict::Confirmed
            }
            (Some(r), Direction::Positive) if r.p_value < level && r.beta1 > F::zero() => {
                ConfirmationVerdict::Confirmed
            }
            _ => ConfirmationVerdict::FailToReject,
        };
        if verdict == ConfirmationVerdict::Confirmed {
            confirmed += 1;
        }
        rows.push(Confirmation {
            cluster_id: e.cluster_id,
            leaf_id: e.leaf_id.expect("tested rows are leaves"),
            hypothesis: e.hypothesis,
            beta1: e.result.map(|r| r.beta1),
            p_value: e.result.map(|r| r.p_value),
            verdict,
        });
    }
    ConfirmationTable {
        rule:
            "confirmed iff p(beta1 vs 0) < level and sign(beta1) matches the transported direction",
        alpha,
        bonferroni,
        confirmed,
        total,
        rows,
    }
}

/// Estimates CSV, one row per cluster (0 = pooled).
pub fn write_estimates_csv<F: Scalar>(
    estimates: &[SubgroupDid<F>],
    writer: impl Write,
) -> Result<(), Study2Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "cluster_id",
        "leaf_id",
        "label",
        "hypothesis",
        "n_units",
        "n_treated",
        "n_control",
        "beta1",
        "se_cluster",
        "ci_lo",
        "ci_hi",
        "p_value",
        "note",
    ])?;
    for e in estimates {
        let fmt = |x: Option<F>| x.map(|v| format!("{v}")).unwrap_or_default();
        w.write_record([
            e.cluster_id.to_string(),
            e.leaf_id.map(|l| l.to_string()).unwrap_or_default(),
            e.label.map(|l| l.token().to_string()).unwrap_or_default(),
            format!("{:?}", e.hypothesis).to_lowercase(),
            e.n_units.to_string(),
            e.n_treated.to_string(),
            e.n_control.to_string(),
            fmt(e.result.map(|r| r.beta1)),
            fmt(e.result.map(|r| r.se_cluster)),
            fmt(e.result.map(|r| r.ci95.0)),
            fmt(e.result.map(|r| r.ci95.1)),
            fmt(e.result.map(|r| r.p_value)),
            e.note.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Forest-plot CSV: `leaf_id,beta1,lo,hi` with the pooled reference in row
/// `leaf_id = 0` and subgroups shifted up by one, matching the report
/// figures' cluster numbering.
pub fn write_forest_plot_csv<F: Scalar>(
    estimates: &[SubgroupDid<F>],
    writer: impl Write,
) -> Result<(), Study2Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["leaf_id", "beta1", "lo", "hi"])?;
    for e in estimates {
        if let Some(r) = e.result {
            w.write_record([
                e.cluster_id.to_string(),
                format!("{}", r.beta1),
                format!("{}", r.ci95.0),
                format!("{}", r.ci95.1),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Confirmation table CSV.
pub fn write_confirmations_csv<F: Scalar>(
    table: &ConfirmationTable<F>,
    writer: impl Write,
) -> Result<(), Study2Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "cluster_id",
        "leaf_id",
        "hypothesis",
        "beta1",
        "p_value",
        "verdict",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.cluster_id.to_string(),
            r.leaf_id.to_string(),
            format!("{:?}", r.hypothesis).to_lowercase(),
            r.beta1.map(|b| format!("{b}")).unwrap_or_default(),
            r.p_value.map(|p| format!("{p}")).unwrap_or_default(),
            match r.verdict {
                ConfirmationVerdict::Confirmed => "confirmed".to_string(),
                ConfirmationVerdict::FailToReject => "fail-to-reject".to_string(),
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Confirmation table JSON, including the decision-rule metadata.
pub fn confirmations_json<F: Scalar>(table: &ConfirmationTable<F>) -> Result<String, Study2Error> {
    Ok(serde_json::to_string_pretty(table)?)
}

/// Normal two-sided p-value helper re-exported for report code.
pub fn p_from_z<F: Scalar>(z: F) -> F {
    special::two_sided_p(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CovariateKind, CovariateSchema, FirmGroup, SchemaColumn, UnitRecord};
    use crate::rules::{LeafMetadata, Predicate, PredicateTest, RuleNode};
    use crate::seed;
    use rand::Rng;

    #[test]
    fn indicator_three_cases() {
        assert_eq!(indicator_case(10.0, 50.0, 30.0), 1);
        assert_eq!(indicator_case(10.0, 20.0, 30.0), 0);
        assert_eq!(indicator_case(50.0, 10.0, 30.0), -1);
        // Boundary: threshold equal to both endpoints counts as treated.
        assert_eq!(indicator_case(30.0, 30.0, 30.0), 1);
    }

    #[test]
    fn indicator_cases_are_exhaustive_and_exclusive() {
        let mut rng = seed::rng(77, &[1]);
        for _ in 0..10_000 {
            let a1: f64 = rng.random_range(-100.0..100.0);
            let a2: f64 = rng.random_range(-100.0..100.0);
            let t: f64 = rng.random_range(-100.0..100.0);
            let case1 = a2 >= t && t >= a1;
            let case0 = a1 < t && a2 < t;
            let case_neg = !(case1 || case0);
            let truths = [case1, case0, case_neg];
            assert_eq!(truths.iter().filter(|&&x| x).count(), 1);
            let expected = if case1 {
                1
            } else if case0 {
                0
            } else {
                -1
            };
            assert_eq!(indicator_case(a1, a2, t), expected);
        }
    }

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![SchemaColumn {
            name: "z".into(),
            kind: CovariateKind::Numeric,
        }])
        .unwrap()
    }

    /// Panel unit: two periods with given exposures, outcomes and covariate.
    fn panel_unit(
        id: &str,
        z: f64,
        exposures: (f64, f64),
        outcomes: (f64, f64),
        firm: FirmGroup,
    ) -> [UnitRecord<f64>; 2] {
        let mk = |period, a, y| UnitRecord {
            unit_id: id.to_string(),
            outcome: y,
            treatment: a,
            arm: None,
            covariates: vec![z],
            period: Some(period),
            firm_group: Some(firm),
        };
        [
            mk(2011, exposures.0, outcomes.0),
            mk(2012, exposures.1, outcomes.1),
        ]
    }

    fn single_leaf_tree() -> PartitionRuleTree<f64> {
        PartitionRuleTree::single_leaf(
            schema().hash(),
            LeafMetadata {
                stability_label: Some(StabilityLabel::StableHigh),
                hypothesis_direction: Direction::Negative,
                ..LeafMetadata::default()
            },
        )
    }

    #[test]
    fn build_indicator_requires_two_periods() {
        let mut records: Vec<UnitRecord<f64>> =
            panel_unit("a", 0.0, (10.0, 50.0), (5.0, 4.0), FirmGroup::TreatmentFirm).into();
        records.push(UnitRecord {
            unit_id: "b".into(),
            outcome: 3.0,
            treatment: 10.0,
            arm: None,
            covariates: vec![0.0],
            period: Some(2011),
            firm_group: Some(FirmGroup::ComparisonFirm),
        });
        let panel = CohortTable::from_records(schema(), records).unwrap();
        assert!(matches!(
            build_indicator(&panel, 30.0).unwrap_err(),
            Study2Error::BadPanelUnit { unit_id } if unit_id == "b"
        ));
    }

    /// Saturated 2x2 cells with constant outcomes: the DiD interaction is
    /// the log ratio of ratios of the cell means.
    #[test]
    fn saturated_cells_recover_the_closed_form() {
        let mut records = Vec::new();
        for i in 0..40 {
            let rs = panel_unit(
                &format!("c{i}"),
                0.0,
                (10.0, 10.0),
                (10.0, 10.0),
                FirmGroup::ComparisonFirm,
            );
            records.extend(rs);
        }
        for i in 0..40 {
            let rs = panel_unit(
                &format!("t{i}"),
                0.0,
                (10.0, 50.0),
                (10.0, 8.0),
                FirmGroup::TreatmentFirm,
            );
            records.extend(rs);
        }
        let panel = CohortTable::from_records(schema(), records).unwrap();
        let estimates =
            estimate_subgroups(&panel, &single_leaf_tree(), &Study2Config::default()).unwrap();
        assert_eq!(estimates.len(), 2); // pooled + single leaf
        let pooled = estimates[0].result.unwrap();
        let expected = (8.0f64 / 10.0).ln();
        assert!(
            (pooled.beta1 - expected).abs() < 1e-6,
            "beta1 {}",
            pooled.beta1
        );
        assert!((expected + 0.22314).abs() < 1e-5);
        // Pooled and leaf cluster ids follow the report numbering.
        assert_eq!(estimates[0].cluster_id, 0);
        assert_eq!(estimates[1].cluster_id, 1);
        assert_eq!(estimates[1].leaf_id, Some(0));
    }

    fn two_leaf_tree() -> PartitionRuleTree<f64> {
        PartitionRuleTree::new(
            schema().hash(),
            RuleNode::split(
                Predicate {
                    variable: "z".into(),
                    test: PredicateTest::NumericLe { threshold: 0.5 },
                },
                RuleNode::leaf(LeafMetadata {
                    stability_label: Some(StabilityLabel::StableHigh),
                    hypothesis_direction: Direction::Negative,
                    ..LeafMetadata::default()
                }),
                RuleNode::leaf(LeafMetadata {
                    stability_label: Some(StabilityLabel::Noisy),
                    ..LeafMetadata::default()
                }),
            ),
        )
        .unwrap()
    }

    fn mixed_panel(n_per_leaf: usize, seed_val: u64) -> CohortTable<f64> {
        let mut rng = seed::rng(seed_val, &[9]);
        let mut records = Vec::new();
        for i in 0..n_per_leaf * 2 {
            let z = if i % 2 == 0 { 0.0 } else { 1.0 };
            let treated = rng.random_bool(0.5);
            let (exposures, firm) = if treated {
                ((10.0, 50.0), FirmGroup::TreatmentFirm)
            } else {
                ((10.0, 12.0), FirmGroup::ComparisonFirm)
            };
            let y1 = rng.random_range(4.0..16.0_f64).round();
            let y2 = (y1 * if treated { 0.8 } else { 1.0 }).round().max(0.0);
            records.extend(panel_unit(&format!("u{i}"), z, exposures, (y1, y2), firm));
        }
        CohortTable::from_records(schema(), records).unwrap()
    }

    #[test]
    fn noisy_leaves_are_skipped_and_counts_partition() {
        let panel = mixed_panel(60, 3);
        let estimates =
            estimate_subgroups(&panel, &two_leaf_tree(), &Study2Config::default()).unwrap();
        assert_eq!(estimates.len(), 3);
        let pooled_n = estimates[0].n_units;
        assert_eq!(estimates[1].n_units + estimates[2].n_units, pooled_n);
        // The noisy leaf is reported but not fitted.
        assert!(estimates[2].result.is_none());
        assert!(estimates[2].note.as_deref().unwrap().contains("noisy"));
        assert!(estimates[1].result.is_some());
    }

    #[test]
    fn too_small_subgroups_are_unestimable() {
        let panel = mixed_panel(30, 4);
        let cfg = Study2Config {
            min_fit_size: 1000,
            ..Study2Config::default()
        };
        let estimates = estimate_subgroups(&panel, &two_leaf_tree(), &cfg).unwrap();
        assert!(estimates[1].result.is_none());
        assert!(estimates[1]
            .note
            .as_deref()
            .unwrap()
            .contains("unestimable"));
    }

    #[test]
    fn classification_uses_only_pre_period_covariates() {
        let panel = mixed_panel(40, 5);
        let tree = two_leaf_tree();
        let a = estimate_subgroups(&panel, &tree, &Study2Config::default()).unwrap();
        // Permute post-period covariate values: nothing changes.
        let periods = panel.periods();
        let post = periods[1];
        let mut records: Vec<UnitRecord<f64>> = panel.records().to_vec();
        let mut post_rows: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].period == Some(post))
            .collect();
        post_rows.rotate_left(7);
        let shuffled_covs: Vec<Vec<f64>> = post_rows
            .iter()
            .map(|&i| records[i].covariates.clone())
            .collect();
        let targets: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].period == Some(post))
            .collect();
        for (i, covs) in targets.into_iter().zip(shuffled_covs) {
            records[i].covariates = covs;
        }
        let permuted = CohortTable::from_records(panel.schema().clone(), records).unwrap();
        let b = estimate_subgroups(&permuted, &tree, &Study2Config::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.n_units, y.n_units);
            assert_eq!(x.n_treated, y.n_treated);
        }
    }

    fn nine_leaf_tree() -> PartitionRuleTree<f64> {
        fn chain(depth: usize) -> RuleNode<f64> {
            if depth == 8 {
                return RuleNode::leaf(LeafMetadata {
                    stability_label: Some(StabilityLabel::StableHigh),
                    hypothesis_direction: Direction::Negative,
                    ..LeafMetadata::default()
                });
            }
            RuleNode::split(
                Predicate {
                    variable: "z".into(),
                    test: PredicateTest::NumericLe {
                        threshold: depth as f64 + 0.5,
                    },
                },
                RuleNode::leaf(LeafMetadata {
                    stability_label: Some(StabilityLabel::StableHigh),
                    hypothesis_direction: Direction::Negative,
                    ..LeafMetadata::default()
                }),
                chain(depth + 1),
            )
        }
        PartitionRuleTree::new(schema().hash(), chain(0)).unwrap()
    }

    #[test]
    fn nine_hypotheses_in_nine_estimates_out_plus_pooled() {
        let mut rng = seed::rng(8, &[10]);
        let mut records = Vec::new();
        for i in 0..360 {
            let z = (i % 9) as f64;
            let treated = rng.random_bool(0.5);
            let (exposures, firm) = if treated {
                ((10.0, 50.0), FirmGroup::TreatmentFirm)
            } else {
                ((10.0, 12.0), FirmGroup::ComparisonFirm)
            };
            let y1 = rng.random_range(4.0..16.0_f64).round();
            let y2 = (y1 * if treated { 0.8 } else { 1.0 }).round().max(0.0);
            records.extend(panel_unit(&format!("u{i}"), z, exposures, (y1, y2), firm));
        }
        let panel = CohortTable::from_records(schema(), records).unwrap();
        let cfg = Study2Config {
            min_fit_size: 10,
            ..Study2Config::default()
        };
        let estimates = estimate_subgroups(&panel, &nine_leaf_tree(), &cfg).unwrap();
        assert_eq!(estimates.len(), 10); // pooled + 9 leaves
        let table = confirm_hypotheses(&estimates, 0.05, false);
        assert_eq!(table.total, 9);
        let mut buf = Vec::new();
        write_forest_plot_csv(&estimates, &mut buf).unwrap();
        let lines = String::from_utf8(buf).unwrap().lines().count();
        assert_eq!(
            lines,
            1 + estimates.iter().filter(|e| e.result.is_some()).count()
        );
    }

    #[test]
    fn confirmation_rule_is_significance_plus_direction() {
        let row = |beta1: f64, se: f64, hyp: Direction| SubgroupDid {
            cluster_id: 1,
            leaf_id: Some(0),
            label: Some(StabilityLabel::StableHigh),
            hypothesis: hyp,
            n_units: 100,
            n_treated: 50,
            n_control: 50,
            result: Some(DidFitSummary {
                beta1,
                se_cluster: se,
                ci95: (beta1 - 1.96 * se, beta1 + 1.96 * se),
                p_value: p_from_z(beta1 / se),
                dispersion: 0.1,
            }),
            note: None,
        };
        let confirmed = confirm_hypotheses(&[row(-0.2, 0.05, Direction::Negative)], 0.05, false);
        assert_eq!(confirmed.confirmed, 1);
        let weak = confirm_hypotheses(&[row(-0.2, 0.5, Direction::Negative)], 0.05, false);
        assert_eq!(weak.confirmed, 0);
        assert_eq!(weak.rows[0].verdict, ConfirmationVerdict::FailToReject);
        // Significant but wrong-signed: not a confirmation.
        let flipped = confirm_hypotheses(&[row(0.2, 0.05, Direction::Negative)], 0.05, false);
        assert_eq!(flipped.confirmed, 0);
        // Bonferroni tightens the level.
        let rows = vec![row(-0.2, 0.09, Direction::Negative); 10];
        let plain = confirm_hypotheses(&rows, 0.05, false);
        let corrected = confirm_hypotheses(&rows, 0.05, true);
        assert_eq!(plain.confirmed, 10);
        assert_eq!(corrected.confirmed, 0);
    }
}
