//! Pipeline CLI: run one stage or the whole run against a JSON config.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use toolforge_core::pipeline::{run_stage, PipelineConfig, PipelineError, Stage, StageManifest};

#[derive(Parser)]
#[command(
    name = "toolforge",
    about = "Synthesizes multi-turn tool-use training data: function graph, random-walk chains, three-agent simulation, judge filtering, sample splitting."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Skip completed work recorded in stage manifests and progress logs.
    #[arg(long)]
    resume: bool,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the stage's primary item count.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, dedupe, and complete raw tool definitions.
    Normalize(StageArgs),
    /// Embed every input/output parameter.
    Embed(StageArgs),
    /// Build the directed function graph.
    Graph(StageArgs),
    /// Sample function chains by random walk.
    Chains(StageArgs),
    /// Synthesize one user intent per chain.
    Intents(StageArgs),
    /// Run the three-agent conversation simulations.
    Simulate(StageArgs),
    /// Trajectory- and turn-level judge filtering.
    Filter(StageArgs),
    /// Split survivors into loss-masked training samples.
    Split(StageArgs),
    /// Distribution statistics and domain classification.
    Stats(StageArgs),
    /// All stages in order.
    RunAll(StageArgs),
}

impl Command {
    fn stage_args(&self) -> (&StageArgs, Option<Stage>) {
        match self {
            Command::Normalize(a) => (a, Some(Stage::Normalize)),
            Command::Embed(a) => (a, Some(Stage::Embed)),
            Command::Graph(a) => (a, Some(Stage::Graph)),
            Command::Chains(a) => (a, Some(Stage::Chains)),
            Command::Intents(a) => (a, Some(Stage::Intents)),
            Command::Simulate(a) => (a, Some(Stage::Simulate)),
            Command::Filter(a) => (a, Some(Stage::Filter)),
            Command::Split(a) => (a, Some(Stage::Split)),
            Command::Stats(a) => (a, Some(Stage::Stats)),
            Command::RunAll(a) => (a, None),
        }
    }
}

fn print_manifest(manifest: &StageManifest) {
    let flags = if manifest.flags.is_empty() {
        String::new()
    } else {
        format!(" [{}]", manifest.flags.join(", "))
    };
    println!(
        "stage {:<9} items {} -> {} ({} ms){}",
        manifest.stage, manifest.items_in, manifest.items_out, manifest.duration_ms, flags
    );
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let (args, stage) = cli.command.stage_args();
    let mut cfg = PipelineConfig::load(&args.config).map_err(|e| (2u8, e.to_string()))?;
    cfg.resume |= args.resume;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    if let Some(limit) = args.limit {
        cfg.limit = Some(limit);
    }

    let stages: Vec<Stage> = match stage {
        Some(stage) => vec![stage],
        None => Stage::ALL.to_vec(),
    };
    for stage in stages {
        match run_stage(stage, &cfg) {
            Ok(manifest) => print_manifest(&manifest),
            Err(e @ PipelineError::Config(_)) => return Err((2, e.to_string())),
            Err(e) => return Err((3, format!("stage {} failed: {e}", stage.name()))),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
