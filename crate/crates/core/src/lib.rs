//! Two-study pipeline for proposing and testing heterogeneous treatment
//! effect subgroups.
//!
//! Study 1 learns candidate subgroups on large observational data, either
//! parametrically (model-based recursive partitioning over a linear
//! outcome model, [`mob`]) or non-parametrically (per-arm random forests,
//! per-unit treatment-control differences and a CART over them,
//! [`forest`] / [`tcd`]). Sample-splitting and the [`stability`] gate keep
//! only subgroups whose estimates persist across disjoint sets. The
//! surviving partitioning rules ([`rules`]) are transported to Study 2,
//! where [`study2`] estimates a negative-binomial difference-in-differences
//! effect per subgroup with unit-clustered standard errors and tests
//! the transported hypotheses. [`causal_tree`] is a single-study baseline
//! for comparison, and [`syndata`] generates synthetic cohorts with known
//! ground truth.
//!
//! All numeric kernels are generic over the [`num::Scalar`] floating-point
//! type; the aliases at the crate root fix `f64`, which is what the CLI
//! uses.

pub mod causal_tree;
pub mod cohort;
pub mod forest;
pub mod glm;
pub mod linalg;
pub mod mob;
pub mod num;
pub mod rules;
pub mod seed;
pub mod special;
pub mod stability;
pub mod study2;
pub mod syndata;
pub mod tcd;
pub mod tree;

/// Double-precision cohort table.
pub type CohortTable64 = cohort::CohortTable<f64>;
/// Double-precision fitted model.
pub type ModelFit64 = glm::ModelFit<f64>;
/// Double-precision forest model.
pub type ForestModel64 = forest::ForestModel<f64>;
/// Double-precision stability verdict.
pub type StabilityVerdict64 = stability::StabilityVerdict<f64>;
/// Double-precision synthetic scenario.
pub type Scenario64 = syndata::Scenario<f64>;
/// Double-precision rule tree.
pub type RuleTree64 = rules::PartitionRuleTree<f64>;
