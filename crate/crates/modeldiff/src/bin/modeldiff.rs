//! Stage-oriented CLI over the modeldiff library.
//!
//! Each subcommand runs one pipeline stage against a run directory;
//! `pipeline` runs every stage listed in the config. `--mock FIXTURE`
//! switches the run onto a bundled deterministic fixture, writing its input
//! files next to the run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modeldiff::runner::{self, config::RunConfig, Runner, Stage};

#[derive(Parser)]
#[command(name = "modeldiff", version, about = "Behavioral diffing for chat models")]
struct Cli {
    /// TOML config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory for artifacts and the manifest.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Base seed for splits and judge order randomization.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Target models as A=<id> B=<id> (repeatable).
    #[arg(long, global = true, value_parser = parse_model, num_args = 1..)]
    models: Vec<(char, String)>,

    /// Use a bundled mock fixture ("table" or "length") instead of a
    /// configured gateway; fixture inputs are materialized automatically.
    #[arg(long, global = true, value_name = "FIXTURE")]
    mock: Option<String>,

    /// HDBSCAN minimum cluster size for diff-llm.
    #[arg(long, global = true)]
    min_cluster_size: Option<usize>,

    /// Majority fraction below which a cluster is discarded.
    #[arg(long, global = true)]
    direction_threshold: Option<f64>,

    /// Cap on SAE hypotheses after summarization.
    #[arg(long, global = true)]
    n_hypotheses: Option<usize>,

    /// Number of fork tokens to pursue in kl-fork.
    #[arg(long, global = true)]
    top_n_forks: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect paired responses and split into generation/held-out sets.
    Collect,
    /// Run the LLM-based diffing pipeline over the generation set.
    DiffLlm,
    /// Run the SAE-based diffing pipeline over activation dumps.
    DiffSae,
    /// Judge hypotheses on generation data and compute acceptance.
    JudgeGen,
    /// Judge accepted hypotheses on held-out data.
    JudgeHeldout,
    /// Score accepted hypotheses with the interestingness and abstraction
    /// autoraters.
    Rate,
    /// Locate fork tokens, resample completions, and generate hypotheses.
    KlFork,
    /// Emit the evaluation tables, summary CSV, and filtered report.
    Report,
    /// Run every stage listed in the config, in order.
    Pipeline,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Collect => Some(Stage::Collect),
            Command::DiffLlm => Some(Stage::DiffLlm),
            Command::DiffSae => Some(Stage::DiffSae),
            Command::JudgeGen => Some(Stage::JudgeGen),
            Command::JudgeHeldout => Some(Stage::JudgeHeldout),
            Command::Rate => Some(Stage::Rate),
            Command::KlFork => Some(Stage::KlFork),
            Command::Report => Some(Stage::Report),
            Command::Pipeline => None,
        }
    }
}

fn parse_model(arg: &str) -> Result<(char, String), String> {
    let (side, id) = arg
        .split_once('=')
        .ok_or_else(|| format!("expected A=<id> or B=<id>, got {arg:?}"))?;
    match side {
        "A" | "a" => Ok(('A', id.to_string())),
        "B" | "b" => Ok(('B', id.to_string())),
        other => Err(format!("model side must be A or B, got {other:?}")),
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, runner::RunnerError> {
    let mut config = match (&cli.mock, &cli.config) {
        (Some(fixture), _) => {
            let base_dir = cli
                .run_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("modeldiff-{fixture}")));
            let seed = cli.seed.unwrap_or(12);
            let mut config = runner::fixture_run_config(fixture, seed, &base_dir)?;
            // run artifacts directly under the requested directory
            config.run_dir = base_dir.join("run");
            config
        }
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => {
            return Err(runner::RunnerError::Config {
                message: "pass --config PATH or --mock FIXTURE".into(),
            })
        }
    };

    if let Some(run_dir) = &cli.run_dir {
        if cli.mock.is_none() {
            config.run_dir = run_dir.clone();
        }
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    for (side, id) in &cli.models {
        match side {
            'A' => config.models.a = id.clone(),
            _ => config.models.b = id.clone(),
        }
    }
    if let Some(v) = cli.min_cluster_size {
        config.diff_llm.min_cluster_size = v;
    }
    if let Some(v) = cli.direction_threshold {
        config.diff_llm.direction_threshold = v;
    }
    if let Some(v) = cli.n_hypotheses {
        config.diff_sae.n_hypotheses = v;
    }
    if let Some(v) = cli.top_n_forks {
        config.kl_fork.top_n_forks = v;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match build_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let run_dir = config.run_dir.clone();
    let result = (|| -> Result<(), runner::RunnerError> {
        let mut runner = Runner::new(config)?;
        match cli.command.stage() {
            Some(stage) => runner.run(stage)?,
            None => runner.run_pipeline()?,
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            println!("done; artifacts in {}", run_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
