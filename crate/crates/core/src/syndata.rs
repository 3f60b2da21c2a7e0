//! Synthetic cohorts with planted subgroup structure.
//!
//! Every scenario carries a planted partition tree with per-leaf
//! parameters `(beta0, tau)`, where `tau` is the effect per unit of
//! exposure: on the log scale for count outcomes, on the outcome scale for
//! Gaussian ones. Observational scenarios draw a cross-section with
//! optionally confounded exposure; experimental scenarios draw a
//! two-period panel where the treatment firm's exposure jumps by `delta`
//! in the second period. The emitted truth records give every unit's
//! planted leaf and effect, so each pipeline stage can be checked against
//! ground truth.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    CohortError, CohortTable, CovariateKind, CovariateSchema, FirmGroup, SchemaColumn, UnitRecord,
};
use crate::num::Scalar;
use crate::rules::{PartitionRuleTree, RulesError};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynError {
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Covariate generator; the schema kind is derived from the variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum CovariateGenKind {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    Bernoulli {
        p: f64,
    },
    Categorical {
        levels: Vec<String>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovariateGen {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateGenKind,
}

/// Planted per-leaf parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LeafEffect<F> {
    pub beta0: F,
    /// Effect per unit of exposure (log scale for counts).
    pub tau: F,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeFamily<F> {
    Gaussian {
        sigma: F,
    },
    /// NB2 counts; `dispersion = 0` draws Poisson.
    NegBinomial {
        dispersion: F,
    },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ExposureGen<F> {
    Uniform {
        lo: F,
        hi: F,
    },
    Normal {
        mean: F,
        sd: F,
    },
    /// Bimodal plan-level exposure: a low band and a high band.
    TwoBands {
        low: (F, F),
        high: (F, F),
        p_high: f64,
    },
    Fixed {
        value: F,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudyDesign<F> {
    Observational {
        exposure: ExposureGen<F>,
        /// Strength of exposure selection on the confounder covariate;
        /// zero disables confounding.
        confounding_strength: F,
        confounder: Option<String>,
    },
    Experimental {
        /// Exposure shock applied to the treatment firm in period two.
        delta: F,
        treated_fraction: f64,
        baseline: ExposureGen<F>,
        /// Log-scale (or level, for Gaussian) common period-two shift.
        period_effect: F,
        /// Unit-level random effect standard deviation.
        unit_effect_sd: F,
        periods: (i32, i32),
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Scenario<F: Scalar> {
    pub n_units: usize,
    pub covariates: Vec<CovariateGen>,
    pub partition: PartitionRuleTree<F>,
    pub leaf_effects: Vec<LeafEffect<F>>,
    pub outcome: OutcomeFamily<F>,
    pub design: StudyDesign<F>,
    pub seed: u64,
}

/// Ground truth for one generated unit.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRecord<F> {
    pub unit_id: String,
    pub true_leaf: u32,
    pub true_tau: F,
}

impl<F: Scalar> Scenario<F> {
    /// Schema implied by the covariate generators.
    pub fn schema(&self) -> Result<CovariateSchema, SynError> {
        let columns = self
            .covariates
            .iter()
            .map(|c| SchemaColumn {
                name: c.name.clone(),
                kind: match &c.kind {
                    CovariateGenKind::Uniform { .. } | CovariateGenKind::Normal { .. } => {
                        CovariateKind::Numeric
                    }
                    CovariateGenKind::Bernoulli { .. } => CovariateKind::Binary,
                    CovariateGenKind::Categorical { levels, .. } => CovariateKind::Categorical {
                        levels: levels.clone(),
                    },
                },
            })
            .collect();
        Ok(CovariateSchema::new(columns)?)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negation also rejects NaN
    pub fn validate(&self) -> Result<(), SynError> {
        if self.n_units == 0 {
            return Err(SynError::Invalid("n_units must be positive".into()));
        }
        if self.leaf_effects.len() != self.partition.n_leaves() as usize {
            return Err(SynError::Invalid(format!(
                "{} leaf effects for a partition with {} leaves",
                self.leaf_effects.len(),
                self.partition.n_leaves()
            )));
        }
        for c in &self.covariates {
            match &c.kind {
                CovariateGenKind::Uniform { lo, hi } if lo >= hi => {
                    return Err(SynError::Invalid(format!(
                        "uniform `{}` has lo >= hi",
                        c.name
                    )))
                }
                CovariateGenKind::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                    return Err(SynError::Invalid(format!(
                        "bernoulli `{}` p outside [0,1]",
                        c.name
                    )))
                }
                CovariateGenKind::Categorical { levels, probs } => {
                    if levels.len() != probs.len() || levels.is_empty() {
                        return Err(SynError::Invalid(format!(
                            "categorical `{}` needs matching levels and probs",
                            c.name
                        )));
                    }
                    if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(SynError::Invalid(format!(
                            "categorical `{}` probs must sum to 1",
                            c.name
                        )));
                    }
                }
                _ => {}
            }
        }
        if let StudyDesign::Experimental {
            delta,
            treated_fraction,
            ..
        } = &self.design
        {
            if !(*delta > F::zero()) {
                return Err(SynError::Invalid(
                    "experimental delta must be positive".into(),
                ));
            }
            if !(0.0..1.0).contains(treated_fraction) || *treated_fraction == 0.0 {
                return Err(SynError::Invalid(
                    "treated_fraction must be in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    /// A small two-study demo: three planted subgroups over binary
    /// covariates, count outcomes, bimodal observational exposure, and a
    /// $45 experimental shock.
    pub fn demo(n_units: usize, seed: u64) -> Scenario<f64> {
        use crate::rules::{LeafMetadata, Predicate, PredicateTest, RuleNode};
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
                name: "age".into(),
                kind: CovariateGenKind::Uniform { lo: 18.0, hi: 64.0 },
            },
            CovariateGen {
                name: "strata".into(),
                kind: CovariateGenKind::Categorical {
                    levels: vec!["low".into(), "medium".into(), "high".into()],
                    probs: vec![0.4, 0.35, 0.25],
                },
            },
        ];
        let schema = CovariateSchema::new(vec![
            SchemaColumn {
                name: "z1".into(),
                kind: CovariateKind::Binary,
            },
            SchemaColumn {
                name: "z2".into(),
                kind: CovariateKind::Binary,
            },
            SchemaColumn {
                name: "age".into(),
                kind: CovariateKind::Numeric,
            },
            SchemaColumn {
                name: "strata".into(),
                kind: CovariateKind::Categorical {
                    levels: vec!["low".into(), "medium".into(), "high".into()],
                },
            },
        ])
        .expect("demo schema is valid");
        let partition = PartitionRuleTree::new(
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
        .expect("demo partition is valid");
        Scenario {
            n_units,
            covariates,
            partition,
            leaf_effects: vec![
                LeafEffect {
                    beta0: 2.3,
                    tau: -0.004,
                },
                LeafEffect {
                    beta0: 2.3,
                    tau: 0.0,
                },
                LeafEffect {
                    beta0: 2.3,
                    tau: -0.002,
                },
            ],
            outcome: OutcomeFamily::NegBinomial { dispersion: 0.2 },
            design: StudyDesign::Observational {
                exposure: ExposureGen::TwoBands {
                    low: (0.0, 15.0),
                    high: (40.0, 70.0),
                    p_high: 0.5,
                },
                confounding_strength: 0.0,
                confounder: None,
            },
            seed,
        }
    }
}

fn draw_covariates<F: Scalar>(gens: &[CovariateGen], rng: &mut ChaCha8Rng) -> Vec<F> {
    gens.iter()
        .map(|g| {
            let v = match &g.kind {
                CovariateGenKind::Uniform { lo, hi } => rng.random_range(*lo..*hi),
                CovariateGenKind::Normal { mean, sd } => {
                    Normal::new(*mean, *sd).expect("valid normal").sample(rng)
                }
                CovariateGenKind::Bernoulli { p } => f64::from(rng.random_bool(*p)),
                CovariateGenKind::Categorical { probs, .. } => {
                    let u: f64 = rng.random_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut pick = probs.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick as f64
                }
            };
            F::of(v)
        })
        .collect()
}

fn draw_exposure<F: Scalar>(gen: &ExposureGen<F>, p_high_shift: f64, rng: &mut ChaCha8Rng) -> F {
    let uniform = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    match gen {
        ExposureGen::Fixed { value } => *value,
        ExposureGen::Uniform { lo, hi } => F::of(uniform(lo.as_f64(), hi.as_f64(), rng)),
        ExposureGen::Normal { mean, sd } => F::of(
            Normal::new(mean.as_f64(), sd.as_f64().max(0.0))
                .map(|d| d.sample(rng))
                .unwrap_or(mean.as_f64()),
        ),
        ExposureGen::TwoBands { low, high, p_high } => {
            let logit = (p_high / (1.0 - p_high)).ln() + p_high_shift;
            let p = 1.0 / (1.0 + (-logit).exp());
            let (lo, hi) = if rng.random_bool(p) { *high } else { *low };
            F::of(uniform(lo.as_f64(), hi.as_f64(), rng))
        }
    }
}

fn draw_outcome<F: Scalar>(family: &OutcomeFamily<F>, linear: F, rng: &mut ChaCha8Rng) -> F {
    match family {
        OutcomeFamily::Gaussian { sigma } => {
            let eps = Normal::new(0.0, sigma.as_f64().max(0.0))
                .map(|d| d.sample(rng))
                .unwrap_or(0.0);
            linear + F::of(eps)
        }
        OutcomeFamily::NegBinomial { dispersion } => {
            let mu = linear.as_f64().clamp(-30.0, 20.0).exp();
            let d = dispersion.as_f64();
            let lambda = if d > 0.0 {
                Gamma::new(1.0 / d, d * mu)
                    .expect("valid gamma")
                    .sample(rng)
                    .max(1e-12)
            } else {
                mu
            };
            F::of(
                Poisson::new(lambda.max(1e-12))
                    .expect("valid poisson")
                    .sample(rng),
            )
        }
    }
}

/// Draws the observational cross-section.
pub fn generate_observational<F: Scalar>(
    scenario: &Scenario<F>,
) -> Result<(CohortTable<F>, Vec<TruthRecord<F>>), SynError> {
    scenario.validate()?;
    let StudyDesign::Observational {
        exposure,
        confounding_strength,
        confounder,
    } = &scenario.design
    else {
        return Err(SynError::Invalid(
            "scenario design is not observational".into(),
        ));
    };
    let schema = scenario.schema()?;
    let compiled = scenario.partition.compile(&schema)?;
    let confounder_col = match confounder {
        Some(name) => Some(schema.index_of(name).ok_or_else(|| {
            SynError::Invalid(format!("confounder `{name}` not among covariates"))
        })?),
        None => None,
    };
    if confounder_col.is_some() && !matches!(exposure, ExposureGen::TwoBands { .. }) {
        return Err(SynError::Invalid(
            "confounding requires the two-band exposure model".into(),
        ));
    }

    let mut rng = seed::rng(scenario.seed, &[seed::STREAM_SYNDATA, 0]);
    let mut records = Vec::with_capacity(scenario.n_units);
    let mut truth = Vec::with_capacity(scenario.n_units);
    for i in 0..scenario.n_units {
        let unit_id = format!("u{i:06}");
        let covariates = draw_covariates::<F>(&scenario.covariates, &mut rng);
        let leaf = compiled.classify(&covariates, &schema)?;
        let effect = scenario.leaf_effects[leaf as usize];

        let shift = match confounder_col {
            Some(c) if *confounding_strength != F::zero() => {
                // Centered covariate drives band choice through a logit
                // shift; uniform and bernoulli draws center near 0.5.
                confounding_strength.as_f64() * (covariates[c].as_f64() - 0.5) * 2.0
            }
            _ => 0.0,
        };
        let a = draw_exposure(exposure, shift, &mut rng);
        let linear = effect.beta0 + effect.tau * a;
        let y = draw_outcome(&scenario.outcome, linear, &mut rng);

        records.push(UnitRecord {
            unit_id: unit_id.clone(),
            outcome: y,
            treatment: a,
            arm: None,
            covariates,
            period: None,
            firm_group: Some(FirmGroup::Observational),
        });
        truth.push(TruthRecord {
            unit_id,
            true_leaf: leaf,
            true_tau: effect.tau,
        });
    }
    Ok((CohortTable::from_records(schema, records)?, truth))
}

/// Draws the experimental two-period panel: the treatment firm's exposure
/// shifts by `delta` in period two, comparison firms stay put.
pub fn generate_experimental<F: Scalar>(
    scenario: &Scenario<F>,
) -> Result<(CohortTable<F>, Vec<TruthRecord<F>>), SynError> {
    scenario.validate()?;
    let StudyDesign::Experimental {
        delta,
        treated_fraction,
        baseline,
        period_effect,
        unit_effect_sd,
        periods,
    } = &scenario.design
    else {
        return Err(SynError::Invalid(
            "scenario design is not experimental".into(),
        ));
    };
    let schema = scenario.schema()?;
    let compiled = scenario.partition.compile(&schema)?;

    let mut rng = seed::rng(scenario.seed, &[seed::STREAM_SYNDATA, 1]);
    let mut records = Vec::with_capacity(2 * scenario.n_units);
    let mut truth = Vec::with_capacity(scenario.n_units);
    let unit_noise = Normal::new(0.0, unit_effect_sd.as_f64().max(0.0)).expect("valid normal");
    for i in 0..scenario.n_units {
        let unit_id = format!("u{i:06}");
        let covariates = draw_covariates::<F>(&scenario.covariates, &mut rng);
        let leaf = compiled.classify(&covariates, &schema)?;
        let effect = scenario.leaf_effects[leaf as usize];

        let treated = rng.random_bool(*treated_fraction);
        let firm = if treated {
            FirmGroup::TreatmentFirm
        } else {
            FirmGroup::ComparisonFirm
        };
        let a1 = draw_exposure(baseline, 0.0, &mut rng);
        let a2 = if treated { a1 + *delta } else { a1 };
        let u = F::of(unit_noise.sample(&mut rng));

        for (period, a, post) in [(periods.0, a1, false), (periods.1, a2, true)] {
            let mut linear = effect.beta0 + effect.tau * a + u;
            if post {
                linear += *period_effect;
            }
            let y = draw_outcome(&scenario.outcome, linear, &mut rng);
            records.push(UnitRecord {
                unit_id: unit_id.clone(),
                outcome: y,
                treatment: a,
                arm: None,
                covariates: covariates.clone(),
                period: Some(period),
                firm_group: Some(firm),
            });
        }
        truth.push(TruthRecord {
            unit_id,
            true_leaf: leaf,
            true_tau: effect.tau,
        });
    }
    Ok((CohortTable::from_records(schema, records)?, truth))
}

/// Truth CSV: `unit_id,true_leaf,true_tau`.
pub fn write_truth_csv<F: Scalar>(
    truth: &[TruthRecord<F>],
    writer: impl Write,
) -> Result<(), SynError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "true_leaf", "true_tau"])?;
    for t in truth {
        w.write_record([
            t.unit_id.clone(),
            t.true_leaf.to_string(),
            format!("{}", t.true_tau),
        ])?;
    }
    w.flush()?;
    Ok(())
}
