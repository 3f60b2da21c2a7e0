//! Calibration of the prediction-set TCD leaf means: on confound-free
//! synthetic data the leaf mean estimates the planted effect within two
//! bootstrap standard errors in at least 90% of draws.
//!
//! The within-leaf bootstrap cannot see the counterfactual-model noise
//! shared across a leaf, which scales with the prediction/training size
//! ratio, so this check uses a training-heavy 80/10/10 split where that
//! component is small. See the README's design notes.

use rayon::prelude::*;

use hte_core::cohort::CohortTable;
use hte_core::forest::{fit_forest, FeatureSelection, ForestHyperparams};
use hte_core::rules::{LeafMetadata, PartitionRuleTree, Predicate, PredicateTest, RuleNode};
use hte_core::seed;
use hte_core::stability::SourceSet;
use hte_core::syndata::{
    generate_observational, CovariateGen, CovariateGenKind, ExposureGen, LeafEffect, OutcomeFamily,
    Scenario, StudyDesign,
};
use hte_core::tcd::{compute_tcd, node_stats};

fn scenario(seed: u64) -> Scenario<f64> {
    let covariates = vec![
        CovariateGen {
            name: "z1".into(),
            kind: CovariateGenKind::Bernoulli { p: 0.5 },
        },
        CovariateGen {
            name: "z2".into(),
            kind: CovariateGenKind::Bernoulli { p: 0.5 },
        },
        CovariateGen {
            name: "n0".into(),
            kind: CovariateGenKind::Uniform { lo: 0.0, hi: 1.0 },
        },
        CovariateGen {
            name: "b0".into(),
            kind: CovariateGenKind::Bernoulli { p: 0.5 },
        },
    ];
    let scratch = Scenario::<f64> {
        n_units: 4000,
        covariates: covariates.clone(),
        partition: PartitionRuleTree::single_leaf("x", LeafMetadata::default()),
        leaf_effects: vec![LeafEffect {
            beta0: 10.0,
            tau: 0.0,
        }],
        outcome: OutcomeFamily::Gaussian { sigma: 1.0 },
        design: StudyDesign::Observational {
            exposure: ExposureGen::TwoBands {
                low: (0.0, 0.0),
                high: (1.0, 1.0),
                p_high: 0.5,
            },
            confounding_strength: 0.0,
            confounder: None,
        },
        seed,
    };
    let schema = scratch.schema().unwrap();
    let mut s = scratch;
    s.partition = PartitionRuleTree::new(
        schema.hash(),
        RuleNode::split(
            Predicate {
                variable: "z1".into(),
                test: PredicateTest::NumericLe { threshold: 0.5 },
            },
            RuleNode::split(
                Predicate {
                    variable: "z2".into(),
                    test: PredicateTest::NumericLe { threshold: 0.5 },
                },
                RuleNode::leaf(LeafMetadata::default()),
                RuleNode::leaf(LeafMetadata::default()),
            ),
            RuleNode::leaf(LeafMetadata::default()),
        ),
    )
    .unwrap();
    s.leaf_effects = vec![
        LeafEffect {
            beta0: 10.0,
            tau: -3.0,
        },
        LeafEffect {
            beta0: 10.0,
            tau: 0.0,
        },
        LeafEffect {
            beta0: 10.0,
            tau: 2.0,
        },
    ];
    s
}

#[test]
fn leaf_means_cover_planted_effects_within_two_bootstrap_ses() {
    let reps = 60u64;
    let taus = [-3.0, 0.0, 2.0];
    let (hits, total): (usize, usize) = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let s = scenario(seed::derive(7305, &[rep]));
            let (table, _) = generate_observational(&s).unwrap();
            let banded: CohortTable<f64> = table
                .filter_treatment_bands((-0.5, 0.4), (0.6, 1.5))
                .unwrap();
            let split = banded
                .split(
                    &[
                        ("train".into(), 0.8),
                        ("prediction".into(), 0.1),
                        ("validation".into(), 0.1),
                    ],
                    seed::derive(7306, &[rep]),
                )
                .unwrap();
            let arm_rows = |label: &str, arm: bool| {
                split
                    .rows_with_label(label)
                    .unwrap()
                    .into_iter()
                    .filter(|&r| split.record(r).arm == Some(arm))
                    .collect::<Vec<_>>()
            };
            // Bagged trees with every feature available per split: the
            // planted cells are learned essentially without smoothing
            // bias, leaving sampling noise as the only error source.
            let hp = ForestHyperparams {
                n_trees: 150,
                min_node_size: 15,
                max_depth: Some(10),
                m_try: Some(4),
                bootstrap: true,
            };
            let features = FeatureSelection::default();
            let f_c = fit_forest(
                &split,
                &arm_rows("train", false),
                &features,
                hp,
                seed::derive(7307, &[rep, 0]),
            )
            .unwrap();
            let f_t = fit_forest(
                &split,
                &arm_rows("train", true),
                &features,
                hp,
                seed::derive(7307, &[rep, 1]),
            )
            .unwrap();
            let pred_rows = split.rows_with_label("prediction").unwrap();
            let records =
                compute_tcd(&split, &pred_rows, &f_c, &f_t, SourceSet::Prediction).unwrap();
            let stats = node_stats(
                &split,
                &records,
                &s.partition,
                500,
                seed::derive(7308, &[rep]),
            )
            .unwrap();
            let mut hits = 0usize;
            let mut total = 0usize;
            for stat in &stats.stats {
                total += 1;
                let truth = taus[stat.leaf_id as usize];
                if (stat.mean_gamma - truth).abs() <= 2.0 * stat.bootstrap_se {
                    hits += 1;
                }
            }
            (hits, total)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    let rate = hits as f64 / total as f64;
    assert!(
        rate >= 0.90,
        "planted effect within 2 bootstrap SEs in {hits}/{total} leaf draws ({rate:.3})"
    );
    println!("tcd calibration: {hits}/{total} leaf draws within 2 SEs ({rate:.3})");
}
