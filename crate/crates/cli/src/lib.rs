//! Orchestration for the two-study pipeline: config handling, stage
//! wiring, artifact emission, and the report.

pub mod config;
pub mod report;
pub mod runner;

use thiserror::Error;

pub use config::{Mode, RunConfig};
pub use runner::run;

/// Errors carry their exit-code category: configuration problems exit 2,
/// data problems 3, numerical failures 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<hte_core::cohort::CohortError> for CliError {
    fn from(e: hte_core::cohort::CohortError) -> Self {
        CliError::Data(format!("cohort: {e}"))
    }
}

impl From<hte_core::rules::RulesError> for CliError {
    fn from(e: hte_core::rules::RulesError) -> Self {
        CliError::Data(format!("rules: {e}"))
    }
}

impl From<hte_core::glm::GlmError> for CliError {
    fn from(e: hte_core::glm::GlmError) -> Self {
        use hte_core::glm::GlmError;
        match e {
            GlmError::NonIntegerOutcome { .. } | GlmError::EmptySubset => {
                CliError::Data(format!("glm: {e}"))
            }
            other => CliError::Numeric(format!("glm: {other}")),
        }
    }
}

impl From<hte_core::mob::MobError> for CliError {
    fn from(e: hte_core::mob::MobError) -> Self {
        use hte_core::mob::MobError;
        match e {
            MobError::Config(_) | MobError::UnknownVariable { .. } => {
                CliError::Config(format!("mob: {e}"))
            }
            MobError::EmptyTraining => CliError::Data(format!("mob: {e}")),
            MobError::Glm(inner) => CliError::from(inner),
            MobError::Rules(inner) => CliError::from(inner),
        }
    }
}

impl From<hte_core::forest::ForestError> for CliError {
    fn from(e: hte_core::forest::ForestError) -> Self {
        use hte_core::forest::ForestError;
        match e {
            ForestError::EmptyGrid
            | ForestError::BadFolds(_)
            | ForestError::MinNodeTooLarge { .. } => CliError::Config(format!("forest: {e}")),
            other => CliError::Data(format!("forest: {other}")),
        }
    }
}

impl From<hte_core::tcd::TcdError> for CliError {
    fn from(e: hte_core::tcd::TcdError) -> Self {
        use hte_core::tcd::TcdError;
        match e {
            TcdError::BadBootstrap(_) | TcdError::BadFolds(_) => {
                CliError::Config(format!("tcd: {e}"))
            }
            other => CliError::Data(format!("tcd: {other}")),
        }
    }
}

impl From<hte_core::stability::StabilityError> for CliError {
    fn from(e: hte_core::stability::StabilityError) -> Self {
        CliError::Data(format!("stability: {e}"))
    }
}

impl From<hte_core::study2::Study2Error> for CliError {
    fn from(e: hte_core::study2::Study2Error) -> Self {
        use hte_core::study2::Study2Error;
        match e {
            Study2Error::PooledFit(inner) => CliError::from(inner),
            other => CliError::Data(format!("study2: {other}")),
        }
    }
}

impl From<hte_core::causal_tree::CausalTreeError> for CliError {
    fn from(e: hte_core::causal_tree::CausalTreeError) -> Self {
        use hte_core::causal_tree::CausalTreeError;
        match e {
            CausalTreeError::Config(_) => CliError::Config(format!("causal-tree: {e}")),
            other => CliError::Data(format!("causal-tree: {other}")),
        }
    }
}

impl From<hte_core::syndata::SynError> for CliError {
    fn from(e: hte_core::syndata::SynError) -> Self {
        use hte_core::syndata::SynError;
        match e {
            SynError::Invalid(msg) => CliError::Config(format!("scenario: {msg}")),
            other => CliError::Data(format!("scenario: {other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("i/o: {e}"))
    }
}
