//! Run configuration: a flat JSON document, every field optional with a
//! default, overridable from the command line (command line wins).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use hte_core::cohort::OutcomeTransform;
use hte_core::syndata::Scenario;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Study1Param,
    Study1Nonparam,
    Study2,
    CausalTree,
    Pipeline,
    Report,
}

/// Gamma construction for the non-parametric stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcdGamma {
    /// Observed outcome minus predicted counterfactual (per arm).
    Observed,
    /// Plug-in contrast of the two forests, ignoring observed outcomes.
    Plugin,
    /// Single exposure-feature forest contrast at `a + delta` vs `a`.
    Continuous,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobSettings {
    pub min_cluster_size: usize,
    pub n_permutations: usize,
    pub max_depth: Option<usize>,
    pub adjust: Vec<String>,
    pub candidate_variables: Option<Vec<String>>,
    /// Optional tuning grid: every feature set is crossed with every
    /// cluster size and the winner is chosen by validation MSE.
    pub tune_feature_sets: Option<Vec<Vec<String>>>,
    pub tune_min_sizes: Option<Vec<usize>>,
    pub max_cutpoint_candidates: usize,
}

impl Default for MobSettings {
    fn default() -> Self {
        Self {
            min_cluster_size: 1000,
            n_permutations: 999,
            max_depth: Some(6),
            adjust: Vec::new(),
            candidate_variables: None,
            tune_feature_sets: None,
            tune_min_sizes: None,
            max_cutpoint_candidates: 512,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSettings {
    pub n_trees: usize,
    pub min_node_size: usize,
    pub max_depth: Option<usize>,
    pub m_try: Option<usize>,
    /// Cross-validate over the default hyperparameter grid before fitting.
    pub tune: bool,
    pub tune_folds: usize,
}

impl Default for ForestSettings {
    fn default() -> Self {
        Self {
            n_trees: 300,
            min_node_size: 25,
            max_depth: None,
            m_try: None,
            tune: false,
            tune_folds: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartSettings {
    pub cv_folds: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl Default for CartSettings {
    fn default() -> Self {
        Self {
            cv_folds: 10,
            min_leaf: 50,
            max_depth: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Study2Settings {
    pub min_fit_size: usize,
    pub bonferroni: bool,
}

impl Default for Study2Settings {
    fn default() -> Self {
        Self {
            min_fit_size: 50,
            bonferroni: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalTreeSettings {
    pub min_leaf: usize,
    pub honest_fraction: f64,
    pub cv_folds: usize,
    pub max_depth: Option<usize>,
    /// Share of panel units used for training (rest validate).
    pub train_fraction: f64,
}

impl Default for CausalTreeSettings {
    fn default() -> Self {
        Self {
            min_leaf: 25,
            honest_fraction: 0.5,
            cv_folds: 5,
            max_depth: Some(8),
            train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub input_csv: Option<PathBuf>,
    pub panel_csv: Option<PathBuf>,
    pub schema_json: Option<PathBuf>,
    pub rules_json: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub alpha: f64,
    /// Worker threads; 0 uses every core. Results never depend on it, so
    /// it is left out of the config echo in `run_meta.json`.
    #[serde(skip_serializing)]
    pub workers: usize,
    /// Outcome transform for the parametric (linear-model) stage.
    pub outcome_transform: OutcomeTransform,
    /// Training share of the parametric train/validation split.
    pub param_train_fraction: f64,
    pub control_band: (f64, f64),
    pub treated_band: (f64, f64),
    /// Treatment-indicator threshold for the panel.
    pub threshold_t: f64,
    /// Exposure shock used by the continuous-gamma variant.
    pub delta: f64,
    pub tcd_gamma: TcdGamma,
    pub n_bootstrap: usize,
    pub mob: MobSettings,
    pub forest: ForestSettings,
    pub cart: CartSettings,
    pub study2: Study2Settings,
    pub causal_tree: CausalTreeSettings,
    /// Scenario for `simulate` (observational side); panels reuse its
    /// covariates and planted partition.
    pub scenario_observational: Option<Scenario<f64>>,
    pub scenario_experimental: Option<Scenario<f64>>,
    /// Demo-scenario sizes used when no scenario is given.
    pub n_units_observational: usize,
    pub n_units_panel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pipeline,
            input_csv: None,
            panel_csv: None,
            schema_json: None,
            rules_json: None,
            out_dir: PathBuf::from("hte-out"),
            seed: 42,
            alpha: 0.05,
            workers: 0,
            outcome_transform: OutcomeTransform::Log1p,
            param_train_fraction: 0.5,
            control_band: (0.0, 15.0),
            treated_band: (40.0, 70.0),
            threshold_t: 30.0,
            delta: 45.0,
            tcd_gamma: TcdGamma::Observed,
            n_bootstrap: 1000,
            mob: MobSettings::default(),
            forest: ForestSettings::default(),
            cart: CartSettings::default(),
            study2: Study2Settings::default(),
            causal_tree: CausalTreeSettings::default(),
            scenario_observational: None,
            scenario_experimental: None,
            n_units_observational: 30_000,
            n_units_panel: 8_500,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if !(self.param_train_fraction > 0.0 && self.param_train_fraction < 1.0) {
            return Err(CliError::Config(
                "param_train_fraction outside (0, 1)".into(),
            ));
        }
        if self.n_bootstrap < 2 {
            return Err(CliError::Config("n_bootstrap must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_the_reference_analysis() {
        let c = RunConfig::default();
        assert_eq!(c.control_band, (0.0, 15.0));
        assert_eq!(c.treated_band, (40.0, 70.0));
        assert_eq!(c.threshold_t, 30.0);
        assert_eq!(c.delta, 45.0);
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.mob.min_cluster_size, 1000);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_values_are_rejected() {
        let c = RunConfig {
            alpha: 1.2,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            n_bootstrap: 1,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trips_without_workers() {
        let c = RunConfig {
            workers: 7,
            ..RunConfig::default()
        };
        let json = serde_json::to_string(&c).unwrap();
        assert!(!json.contains("workers"));
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.workers, 0);
        assert_eq!(back.seed, c.seed);
    }
}
