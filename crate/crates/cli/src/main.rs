use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hte_cli::config::{Mode, RunConfig};
use hte_cli::{run, CliError};

/// Two-study heterogeneous treatment effect pipeline: propose subgroups on
/// observational data, test them causally on experimental data.
#[derive(Parser)]
#[command(name = "hte", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed fanning out to all randomized stages.
    #[arg(long)]
    seed: Option<u64>,
    /// Significance level for every test.
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores); never changes results.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Observational cohort CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Two-period panel CSV.
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Covariate schema sidecar JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Rule file from a Study 1 run.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic observational and panel data with known truth.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Study 1A: model-based recursive partitioning with the stability gate.
    Study1Param {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Study 1B: forests, treatment-control differences, CART, gate.
    Study1Nonparam {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Study 2: transport rules and test hypotheses with DiD.
    Study2 {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Causal-tree baseline on the panel alone.
    CausalTree {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Full chain: simulate (or load), both Study 1 variants, Study 2,
    /// baseline, report.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Summarize artifacts in an output directory.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn build_config(
    mode: Mode,
    common: &CommonArgs,
    data: Option<&DataArgs>,
) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.mode = mode;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(alpha) = common.alpha {
        config.alpha = alpha;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    if let Some(data) = data {
        if let Some(p) = &data.input {
            config.input_csv = Some(p.clone());
        }
        if let Some(p) = &data.panel {
            config.panel_csv = Some(p.clone());
        }
        if let Some(p) = &data.schema {
            config.schema_json = Some(p.clone());
        }
        if let Some(p) = &data.rules {
            config.rules_json = Some(p.clone());
        }
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.command {
        Command::Simulate { common } => build_config(Mode::Simulate, common, None),
        Command::Study1Param { common, data } => {
            build_config(Mode::Study1Param, common, Some(data))
        }
        Command::Study1Nonparam { common, data } => {
            build_config(Mode::Study1Nonparam, common, Some(data))
        }
        Command::Study2 { common, data } => build_config(Mode::Study2, common, Some(data)),
        Command::CausalTree { common, data } => build_config(Mode::CausalTree, common, Some(data)),
        Command::Pipeline { common, data } => build_config(Mode::Pipeline, common, Some(data)),
        Command::Report { common } => build_config(Mode::Report, common, None),
    };
    let result = config.and_then(|c| run(&c));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
