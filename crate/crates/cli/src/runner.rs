//! Stage wiring. Every mode writes its artifacts under the output
//! directory plus a `run_meta.json` echoing the configuration; the full
//! pipeline chains simulate, both Study 1 variants, Study 2 on each rule
//! set, the causal-tree baseline, and the report into subdirectories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use hte_core::causal_tree::{fit_causal_tree, validate_causal_tree, CausalTreeConfig};
use hte_core::cohort::{CohortTable, CovariateSchema, UnitRecord};
use hte_core::forest::{fit_forest, tune_forest, FeatureSelection, ForestHyperparams, ForestModel};
use hte_core::glm::{fit_ols, NbOptions, OlsDesign};
use hte_core::mob::{self, MobConfig};
use hte_core::rules::PartitionRuleTree;
use hte_core::seed;
use hte_core::stability::{
    gate_tree, write_verdict_csv, SourceSet, StabilityVerdict, SubgroupEstimate,
};
use hte_core::study2::{
    build_indicator, confirm_hypotheses, confirmations_json, estimate_subgroups,
    write_confirmations_csv, write_estimates_csv, write_forest_plot_csv, Study2Config,
};
use hte_core::syndata::{
    generate_experimental, generate_observational, write_truth_csv, ExposureGen, Scenario,
    StudyDesign,
};
use hte_core::tcd::{
    compute_tcd, compute_tcd_continuous, grow_tcd_tree, node_stats, write_node_stats_csv,
    write_records_csv, CartConfig, TcdRecord,
};

use crate::config::{Mode, RunConfig, TcdGamma};
use crate::{report, CliError};

type Table = CohortTable<f64>;
type Tree = PartitionRuleTree<f64>;

/// Seed-stream tags for the pipeline stages.
const STAGE_SPLIT_PARAM: u64 = 101;
const STAGE_SPLIT_NONPARAM: u64 = 102;
const STAGE_MOB: u64 = 103;
const STAGE_FOREST_TRAIN_C: u64 = 104;
const STAGE_FOREST_TRAIN_T: u64 = 105;
const STAGE_FOREST_VAL_C: u64 = 106;
const STAGE_FOREST_VAL_T: u64 = 107;
const STAGE_CART: u64 = 108;
const STAGE_BOOT_PRED: u64 = 109;
const STAGE_BOOT_VAL: u64 = 110;
const STAGE_CT_SPLIT: u64 = 111;
const STAGE_CT_FIT: u64 = 112;
const STAGE_FOREST_TUNE: u64 = 113;

/// Runs the configured mode inside a worker pool of the requested size.
/// All parallel reductions are order-fixed, so results are identical for
/// any worker count.
pub fn run(config: &RunConfig) -> Result<(), CliError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if config.workers > 0 {
        builder = builder.num_threads(config.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_inner(config))
}

fn run_inner(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out_dir)?;
    match config.mode {
        Mode::Simulate => {
            let out = config.out_dir.clone();
            simulate(config, &out)?;
            write_meta(config, &out)?;
        }
        Mode::Study1Param => {
            let table = load_observational(config)?;
            let out = config.out_dir.clone();
            study1_param(config, &table, &out)?;
            write_meta(config, &out)?;
        }
        Mode::Study1Nonparam => {
            let table = load_observational(config)?;
            let out = config.out_dir.clone();
            study1_nonparam(config, &table, &out)?;
            write_meta(config, &out)?;
        }
        Mode::Study2 => {
            let rules_path = config.rules_json.as_ref().ok_or_else(|| {
                CliError::Config("study2 requires `rules_json` (the Study 1 rule file)".into())
            })?;
            let tree = Tree::load(rules_path)?;
            let panel = load_panel(config)?;
            let out = config.out_dir.clone();
            study2(config, &panel, &tree, &out)?;
            write_meta(config, &out)?;
        }
        Mode::CausalTree => {
            let panel = load_panel(config)?;
            let out = config.out_dir.clone();
            causal_tree_stage(config, &panel, &out)?;
            write_meta(config, &out)?;
        }
        Mode::Report => {
            report::report(&config.out_dir)?;
        }
        Mode::Pipeline => {
            pipeline(config)?;
        }
    }
    Ok(())
}

fn pipeline(config: &RunConfig) -> Result<(), CliError> {
    let out = &config.out_dir;
    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir)?;

    let (observational, panel) = match (&config.input_csv, &config.panel_csv) {
        (Some(_), Some(_)) => (load_observational(config)?, load_panel(config)?),
        (None, None) => {
            let (obs, panel) = simulate(config, &data_dir)?;
            (obs, panel)
        }
        _ => {
            return Err(CliError::Config(
                "pipeline needs both `input_csv` and `panel_csv`, or neither (simulate)".into(),
            ))
        }
    };

    let param_dir = out.join("study1_param");
    fs::create_dir_all(&param_dir)?;
    let param_tree = study1_param(config, &observational, &param_dir)?;

    let study2_param_dir = out.join("study2_param");
    fs::create_dir_all(&study2_param_dir)?;
    study2(config, &panel, &param_tree, &study2_param_dir)?;

    let nonparam_dir = out.join("study1_nonparam");
    fs::create_dir_all(&nonparam_dir)?;
    let nonparam_tree = study1_nonparam(config, &observational, &nonparam_dir)?;

    let study2_nonparam_dir = out.join("study2_nonparam");
    fs::create_dir_all(&study2_nonparam_dir)?;
    study2(config, &panel, &nonparam_tree, &study2_nonparam_dir)?;

    let ct_dir = out.join("causal_tree");
    fs::create_dir_all(&ct_dir)?;
    causal_tree_stage(config, &panel, &ct_dir)?;

    write_meta(config, out)?;
    report::report(out)?;
    Ok(())
}

// --- data -------------------------------------------------------------------

fn load_schema(config: &RunConfig) -> Result<CovariateSchema, CliError> {
    let path = config
        .schema_json
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `schema_json`".into()))?;
    Ok(CovariateSchema::load_json(path)?)
}

fn load_observational(config: &RunConfig) -> Result<Table, CliError> {
    let path = config
        .input_csv
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `input_csv`".into()))?;
    let schema = load_schema(config)?;
    Ok(Table::load_csv(path, &schema, false)?)
}

fn load_panel(config: &RunConfig) -> Result<Table, CliError> {
    let path = config
        .panel_csv
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `panel_csv`".into()))?;
    let schema = load_schema(config)?;
    Ok(Table::load_csv(path, &schema, true)?)
}

/// Demo scenario pair used when `simulate` runs without explicit scenarios.
pub fn demo_scenarios(config: &RunConfig) -> (Scenario<f64>, Scenario<f64>) {
    let obs = Scenario::<f64>::demo(config.n_units_observational, config.seed);
    let mut exp = obs.clone();
    exp.n_units = config.n_units_panel;
    exp.design = StudyDesign::Experimental {
        delta: config.delta,
        treated_fraction: 0.35,
        baseline: ExposureGen::Uniform { lo: 5.0, hi: 20.0 },
        period_effect: 0.02,
        unit_effect_sd: 0.25,
        periods: (2011, 2012),
    };
    (obs, exp)
}

fn simulate(config: &RunConfig, out: &Path) -> Result<(Table, Table), CliError> {
    let (demo_obs, demo_exp) = demo_scenarios(config);
    let obs_scenario = config.scenario_observational.clone().unwrap_or(demo_obs);
    let exp_scenario = config.scenario_experimental.clone().unwrap_or(demo_exp);

    let (observational, obs_truth) = generate_observational(&obs_scenario)?;
    let (panel, panel_truth) = generate_experimental(&exp_scenario)?;

    observational.emit_csv(out.join("observational.csv"))?;
    panel.emit_csv(out.join("panel.csv"))?;
    fs::write(out.join("schema.json"), obs_scenario.schema()?.to_json())?;
    write_truth_csv(
        &obs_truth,
        fs::File::create(out.join("truth_observational.csv"))?,
    )?;
    write_truth_csv(&panel_truth, fs::File::create(out.join("truth_panel.csv"))?)?;
    Ok((observational, panel))
}

// --- study 1, parametric ------------------------------------------------------

/// Per-leaf treatment-coefficient estimates from a fresh OLS on each
/// leaf's rows; leaves that cannot be fit are simply absent (the gate
/// turns them noisy).
fn leaf_ols_estimates(
    table: &Table,
    rows: &[usize],
    tree: &Tree,
    design: &OlsDesign,
    source: SourceSet,
) -> Result<Vec<SubgroupEstimate<f64>>, CliError> {
    let leaf_ids = tree.classify_rows(table, rows)?;
    let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); tree.n_leaves() as usize];
    for (&row, &leaf) in rows.iter().zip(&leaf_ids) {
        grouped[leaf as usize].push(row);
    }
    let mut out = Vec::new();
    for (leaf, members) in grouped.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        match fit_ols(table, members, design) {
            Ok(fit) => out.push(SubgroupEstimate {
                leaf_id: leaf as u32,
                estimate: fit.coef(1),
                se: fit.se(1),
                n_units: members.len(),
                source,
            }),
            Err(_) => continue,
        }
    }
    Ok(out)
}

pub fn study1_param(config: &RunConfig, raw: &Table, out: &Path) -> Result<Tree, CliError> {
    let table = raw.transform_outcome(config.outcome_transform);
    let split = table.split(
        &[
            ("train".to_string(), config.param_train_fraction),
            ("validation".to_string(), 1.0 - config.param_train_fraction),
        ],
        seed::derive(config.seed, &[STAGE_SPLIT_PARAM]),
    )?;
    let train_rows = split.rows_with_label("train")?;
    let val_rows = split.rows_with_label("validation")?;

    let design = OlsDesign {
        adjust: config.mob.adjust.clone(),
    };
    let mut mob_config = MobConfig::<f64> {
        alpha: config.alpha,
        min_cluster_size: config.mob.min_cluster_size,
        max_depth: config.mob.max_depth,
        n_permutations: config.mob.n_permutations,
        candidate_variables: config.mob.candidate_variables.clone(),
        seed: seed::derive(config.seed, &[STAGE_MOB]),
        design,
        max_cutpoint_candidates: config.mob.max_cutpoint_candidates,
    };

    // Feature-set / cluster-size selection by validation MSE, when a grid
    // is configured.
    if let (Some(feature_sets), Some(min_sizes)) =
        (&config.mob.tune_feature_sets, &config.mob.tune_min_sizes)
    {
        let mut candidates = Vec::new();
        for fs in feature_sets {
            for &ms in min_sizes {
                candidates.push(mob::TuneCandidate {
                    feature_set: fs.clone(),
                    min_cluster_size: ms,
                });
            }
        }
        let tuned = mob::tune(&split, &train_rows, &val_rows, &mob_config, &candidates)?;
        let chosen = &candidates[tuned.chosen];
        mob_config.candidate_variables = Some(chosen.feature_set.clone());
        mob_config.min_cluster_size = chosen.min_cluster_size;
    }

    let grown = mob::grow(&split, &train_rows, &mob_config)?;
    mob::write_diagnostics_csv(
        &grown.reports,
        fs::File::create(out.join("instability.csv"))?,
    )?;

    let design = OlsDesign {
        adjust: config.mob.adjust.clone(),
    };
    let train_stats =
        leaf_ols_estimates(&split, &train_rows, &grown.tree, &design, SourceSet::Train)?;
    let val_stats = leaf_ols_estimates(
        &split,
        &val_rows,
        &grown.tree,
        &design,
        SourceSet::Validation,
    )?;
    let gated = gate_tree(&grown.tree, &train_stats, &val_stats, config.alpha)?;

    gated.tree.save(out.join("rules.json"))?;
    write_verdict_csv(&gated.verdicts, fs::File::create(out.join("verdicts.csv"))?)?;
    write_study1_plot(&gated.verdicts, out)?;
    Ok(gated.tree)
}

// --- study 1, non-parametric --------------------------------------------------

fn forest_hp(config: &RunConfig) -> ForestHyperparams {
    ForestHyperparams {
        n_trees: config.forest.n_trees,
        min_node_size: config.forest.min_node_size,
        max_depth: config.forest.max_depth,
        m_try: config.forest.m_try,
        bootstrap: true,
    }
}

/// Default tuning grid when `forest.tune` is on.
fn forest_grid(base: ForestHyperparams) -> Vec<ForestHyperparams> {
    let mut grid = Vec::new();
    for &min_node_size in &[5usize, 25, 100] {
        for &max_depth in &[Some(8), None] {
            grid.push(ForestHyperparams {
                min_node_size,
                max_depth,
                ..base
            });
        }
    }
    grid
}

fn fit_arm_forest(
    config: &RunConfig,
    table: &Table,
    rows: &[usize],
    features: &FeatureSelection,
    stage: u64,
) -> Result<ForestModel<f64>, CliError> {
    let base = forest_hp(config);
    let hp = if config.forest.tune {
        let grid = forest_grid(base);
        let tuned = tune_forest(
            table,
            rows,
            features,
            &grid,
            config.forest.tune_folds,
            seed::derive(config.seed, &[STAGE_FOREST_TUNE, stage]),
        )?;
        grid[tuned.chosen]
    } else {
        base
    };
    Ok(fit_forest(
        table,
        rows,
        features,
        hp,
        seed::derive(config.seed, &[stage]),
    )?)
}

pub fn study1_nonparam(config: &RunConfig, raw: &Table, out: &Path) -> Result<Tree, CliError> {
    let split = raw.split(
        &[
            ("train".to_string(), 1.0 / 3.0),
            ("prediction".to_string(), 1.0 / 3.0),
            ("validation".to_string(), 1.0 / 3.0),
        ],
        seed::derive(config.seed, &[STAGE_SPLIT_NONPARAM]),
    )?;

    let (pred_records, val_records, banded) = match config.tcd_gamma {
        TcdGamma::Continuous => {
            // Single forest with the exposure as a feature, per set.
            let features = FeatureSelection {
                covariates: None,
                include_treatment: true,
            };
            let train_rows = split.rows_with_label("train")?;
            let pred_rows = split.rows_with_label("prediction")?;
            let val_rows = split.rows_with_label("validation")?;
            let train_forest =
                fit_arm_forest(config, &split, &train_rows, &features, STAGE_FOREST_TRAIN_C)?;
            let val_forest =
                fit_arm_forest(config, &split, &val_rows, &features, STAGE_FOREST_VAL_C)?;
            let delta = config.delta;
            let pred = compute_tcd_continuous(
                &split,
                &pred_rows,
                &train_forest,
                delta,
                SourceSet::Prediction,
            )?;
            let val = compute_tcd_continuous(
                &split,
                &val_rows,
                &val_forest,
                delta,
                SourceSet::Validation,
            )?;
            (pred, val, split.clone())
        }
        TcdGamma::Observed | TcdGamma::Plugin => {
            let banded = split.filter_treatment_bands(
                (config.control_band.0, config.control_band.1),
                (config.treated_band.0, config.treated_band.1),
            )?;
            let rows_of = |label: &str, arm: bool| -> Result<Vec<usize>, CliError> {
                Ok(banded
                    .rows_with_label(label)?
                    .into_iter()
                    .filter(|&r| banded.record(r).arm == Some(arm))
                    .collect())
            };
            let features = FeatureSelection::default();
            let train_c = rows_of("train", false)?;
            let train_t = rows_of("train", true)?;
            let val_c = rows_of("validation", false)?;
            let val_t = rows_of("validation", true)?;
            let f_train_c =
                fit_arm_forest(config, &banded, &train_c, &features, STAGE_FOREST_TRAIN_C)?;
            let f_train_t =
                fit_arm_forest(config, &banded, &train_t, &features, STAGE_FOREST_TRAIN_T)?;
            let f_val_c = fit_arm_forest(config, &banded, &val_c, &features, STAGE_FOREST_VAL_C)?;
            let f_val_t = fit_arm_forest(config, &banded, &val_t, &features, STAGE_FOREST_VAL_T)?;

            let pred_rows = banded.rows_with_label("prediction")?;
            let val_rows = banded.rows_with_label("validation")?;
            let mut pred = compute_tcd(
                &banded,
                &pred_rows,
                &f_train_c,
                &f_train_t,
                SourceSet::Prediction,
            )?;
            let mut val = compute_tcd(
                &banded,
                &val_rows,
                &f_val_c,
                &f_val_t,
                SourceSet::Validation,
            )?;
            if config.tcd_gamma == TcdGamma::Plugin {
                // Plug-in contrast: both counterfactual models, ignore the
                // observed outcome.
                let plugin = |records: &mut Vec<TcdRecord<f64>>,
                              fc: &ForestModel<f64>,
                              ft: &ForestModel<f64>|
                 -> Result<(), CliError> {
                    let rows: Vec<usize> = records.iter().map(|r| r.row).collect();
                    let mu0 = fc.predict_rows(&banded, &rows)?;
                    let mu1 = ft.predict_rows(&banded, &rows)?;
                    for ((rec, m0), m1) in records.iter_mut().zip(mu0).zip(mu1) {
                        rec.gamma = m1 - m0;
                    }
                    Ok(())
                };
                plugin(&mut pred, &f_train_c, &f_train_t)?;
                plugin(&mut val, &f_val_c, &f_val_t)?;
            }
            (pred, val, banded)
        }
    };

    let cart = CartConfig {
        cv_folds: config.cart.cv_folds,
        min_leaf: config.cart.min_leaf,
        complexity_grid: None,
        max_depth: config.cart.max_depth,
    };
    let cart_out = grow_tcd_tree(
        &banded,
        &pred_records,
        &cart,
        seed::derive(config.seed, &[STAGE_CART]),
    )?;

    let pred_stats = node_stats(
        &banded,
        &pred_records,
        &cart_out.tree,
        config.n_bootstrap,
        seed::derive(config.seed, &[STAGE_BOOT_PRED]),
    )?;
    let val_stats = node_stats(
        &banded,
        &val_records,
        &cart_out.tree,
        config.n_bootstrap,
        seed::derive(config.seed, &[STAGE_BOOT_VAL]),
    )?;

    let to_estimates = |stats: &hte_core::tcd::NodeStatsOutput<f64>, source| {
        stats
            .stats
            .iter()
            .map(|s| SubgroupEstimate {
                leaf_id: s.leaf_id,
                estimate: s.mean_gamma,
                se: s.bootstrap_se,
                n_units: s.n_units,
                source,
            })
            .collect::<Vec<_>>()
    };
    let gated = gate_tree(
        &cart_out.tree,
        &to_estimates(&pred_stats, SourceSet::Prediction),
        &to_estimates(&val_stats, SourceSet::Validation),
        config.alpha,
    )?;

    gated.tree.save(out.join("rules.json"))?;
    write_verdict_csv(&gated.verdicts, fs::File::create(out.join("verdicts.csv"))?)?;
    write_study1_plot(&gated.verdicts, out)?;
    {
        let pred_leaves = gated.tree.classify_rows(
            &banded,
            &pred_records.iter().map(|r| r.row).collect::<Vec<_>>(),
        )?;
        let val_leaves = gated.tree.classify_rows(
            &banded,
            &val_records.iter().map(|r| r.row).collect::<Vec<_>>(),
        )?;
        let file = fs::File::create(out.join("tcd_records.csv"))?;
        let mut all_records = pred_records.clone();
        let mut all_leaves = pred_leaves;
        all_records.extend(val_records.iter().cloned());
        all_leaves.extend(val_leaves);
        write_records_csv(&all_records, &all_leaves, file)?;
    }
    {
        let mut all = pred_stats.stats.clone();
        all.extend(val_stats.stats.iter().copied());
        write_node_stats_csv(&all, fs::File::create(out.join("node_stats.csv"))?)?;
    }
    Ok(gated.tree)
}

// --- study 2 -----------------------------------------------------------------

pub fn study2(config: &RunConfig, panel: &Table, tree: &Tree, out: &Path) -> Result<(), CliError> {
    let s2 = Study2Config::<f64> {
        threshold: config.threshold_t,
        alpha: config.alpha,
        min_fit_size: config.study2.min_fit_size,
        bonferroni: config.study2.bonferroni,
        nb: NbOptions::default(),
    };
    let estimates = estimate_subgroups(panel, tree, &s2)?;
    let table = confirm_hypotheses(&estimates, config.alpha, config.study2.bonferroni);

    write_estimates_csv(&estimates, fs::File::create(out.join("estimates.csv"))?)?;
    write_confirmations_csv(&table, fs::File::create(out.join("confirmations.csv"))?)?;
    fs::write(out.join("confirmations.json"), confirmations_json(&table)?)?;
    write_forest_plot_csv(
        &estimates,
        fs::File::create(out.join("study2_forest_plot.csv"))?,
    )?;
    Ok(())
}

// --- causal tree ---------------------------------------------------------------

/// Reduces the two-period panel to one change-score row per unit with a
/// designed arm flag, the input the causal tree expects.
pub fn panel_to_changes(config: &RunConfig, panel: &Table) -> Result<Table, CliError> {
    let periods = panel.periods();
    if periods.len() != 2 {
        return Err(CliError::Data(format!(
            "panel needs exactly two periods, found {periods:?}"
        )));
    }
    let indicator = build_indicator(panel, config.threshold_t)?;
    let mut records = Vec::new();
    for (unit_id, rows) in panel.rows_by_unit() {
        let b = indicator.by_unit[&unit_id];
        if b == -1 {
            continue;
        }
        let pre = *rows
            .iter()
            .min_by_key(|&&r| panel.record(r).period.unwrap_or(i32::MAX))
            .expect("panel units have rows");
        let post = *rows
            .iter()
            .max_by_key(|&&r| panel.record(r).period.unwrap_or(i32::MIN))
            .expect("panel units have rows");
        let pre_rec = panel.record(pre);
        records.push(UnitRecord {
            unit_id,
            outcome: panel.outcome(post) - panel.outcome(pre),
            treatment: f64::from(b == 1),
            arm: Some(b == 1),
            covariates: pre_rec.covariates.clone(),
            period: None,
            firm_group: pre_rec.firm_group,
        });
    }
    Ok(Table::from_records(panel.schema().clone(), records)?)
}

pub fn causal_tree_stage(
    config: &RunConfig,
    panel: &Table,
    out: &Path,
) -> Result<Vec<StabilityVerdict<f64>>, CliError> {
    let changes = panel_to_changes(config, panel)?;
    let split = changes.split(
        &[
            ("train".to_string(), config.causal_tree.train_fraction),
            (
                "validation".to_string(),
                1.0 - config.causal_tree.train_fraction,
            ),
        ],
        seed::derive(config.seed, &[STAGE_CT_SPLIT]),
    )?;
    let train_rows = split.rows_with_label("train")?;
    let val_rows = split.rows_with_label("validation")?;
    let train_records: Vec<UnitRecord<f64>> = train_rows
        .iter()
        .map(|&r| split.record(r).clone())
        .collect();
    let val_records: Vec<UnitRecord<f64>> =
        val_rows.iter().map(|&r| split.record(r).clone()).collect();
    let train = Table::from_records(split.schema().clone(), train_records)?;
    let validation = Table::from_records(split.schema().clone(), val_records)?;

    let ct_config = CausalTreeConfig::<f64> {
        min_leaf: config.causal_tree.min_leaf,
        honest_fraction: config.causal_tree.honest_fraction,
        cv_folds: config.causal_tree.cv_folds,
        max_depth: config.causal_tree.max_depth,
    };
    let model = fit_causal_tree(
        &train,
        &ct_config,
        seed::derive(config.seed, &[STAGE_CT_FIT]),
    )?;
    let verdicts = validate_causal_tree(&model, &validation, config.alpha)?;

    model.tree.save(out.join("rules.json"))?;
    write_verdict_csv(&verdicts, fs::File::create(out.join("verdicts.csv"))?)?;
    Ok(verdicts)
}

// --- shared artifact helpers ----------------------------------------------------

/// Training-vs-validation forest plot data: one row per leaf with 95%
/// intervals on both sides, plus the gate label.
fn write_study1_plot(verdicts: &[StabilityVerdict<f64>], out: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(fs::File::create(out.join("study1_forest_plot.csv"))?);
    w.write_record([
        "leaf_id",
        "train_est",
        "train_lo",
        "train_hi",
        "val_est",
        "val_lo",
        "val_hi",
        "label",
    ])
    .map_err(|e| CliError::Data(format!("csv: {e}")))?;
    for v in verdicts {
        let (t_est, t_se) = v.train;
        let margin = 1.96 * t_se;
        let (v_est, v_lo, v_hi) = match v.val {
            Some((e, se)) => (
                format!("{e}"),
                format!("{}", e - 1.96 * se),
                format!("{}", e + 1.96 * se),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            v.leaf_id.to_string(),
            format!("{t_est}"),
            format!("{}", t_est - margin),
            format!("{}", t_est + margin),
            v_est,
            v_lo,
            v_hi,
            v.label.token().to_string(),
        ])
        .map_err(|e| CliError::Data(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'static str,
    mode: Mode,
    seed: u64,
    alpha: f64,
    config: &'a RunConfig,
}

fn write_meta(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION"),
        mode: config.mode,
        seed: config.seed,
        alpha: config.alpha,
        config,
    };
    let text =
        serde_json::to_string_pretty(&meta).map_err(|e| CliError::Data(format!("meta: {e}")))?;
    fs::write(out.join("run_meta.json"), text)?;
    Ok(())
}

/// Recursive file listing with contents hashed, for determinism checks.
pub fn directory_digest(dir: &Path) -> Result<Vec<(PathBuf, u64)>, CliError> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(PathBuf, u64)>) -> Result<(), CliError> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else {
                let bytes = fs::read(&path)?;
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in &bytes {
                    h ^= u64::from(*b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                out.push((path.strip_prefix(base).unwrap_or(&path).to_path_buf(), h));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
