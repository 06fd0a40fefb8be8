use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifact;
mod commands;
mod config;
mod report;

use artifact::{CliError, CliResult};
use config::PipelineConfig;

/// Regime-change detection and epoch inference for engagement-count panels.
#[derive(Parser)]
#[command(name = "engshift", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(short, long, env = "ENGSHIFT_CONFIG", default_value = "engshift.toml")]
    config: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, env = "ENGSHIFT_SEED")]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,

    /// Overrides the number of sampler runs in `detect`.
    #[arg(long)]
    k: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw a synthetic post and outlet table from the [simulate] section.
    Simulate,
    /// Parse, deduplicate, filter and impute the post table.
    Ingest,
    /// Fit the preliminary count model.
    FitPreliminary,
    /// Aggregate fitted moments into the weekly two-dimensional signal.
    BuildSignal,
    /// Run the changepoint sampler k times and form the consensus.
    Detect,
    /// Fit the epoch model on the detected partition.
    FitEpochs,
    /// Marginal means, contrasts, DiD ratios and the parallel-trends test.
    Infer,
    /// Render the report tables and plot-ready traces.
    Report,
    /// Every stage in order.
    Run,
}

fn load(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    if let Some(k) = cli.k {
        cfg.detect.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Ingest => commands::ingest(&cfg),
        Command::FitPreliminary => commands::fit_preliminary(&cfg),
        Command::BuildSignal => commands::build_signal(&cfg),
        Command::Detect => commands::detect(&cfg),
        Command::FitEpochs => commands::fit_epochs(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Run => commands::run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "class": e.class(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for missing or mismatched upstream artifacts, 1 for everything else.
fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Dependency { .. } | CliError::HashMismatch { .. } => 3,
        _ => 1,
    }
}
