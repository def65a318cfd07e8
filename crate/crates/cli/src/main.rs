use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use causeway_core::pipeline::{run_stage, RunConfig, Stage, StageSummary};
use clap::Parser;

/// Runs the event prediction pipeline one stage at a time, or all of it.
///
/// Stages: train-base, propose, abduce, retrieve, train-ranker, predict,
/// evaluate, report. `all` runs them in that order.
#[derive(Parser)]
#[command(name = "engine", version)]
struct Cli {
    /// Stage name or `all`.
    #[arg(value_parser = parse_target)]
    stage: Target,
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Overrides the run seed and both training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum Target {
    One(Stage),
    All,
}

fn parse_target(s: &str) -> Result<Target, String> {
    if s == "all" {
        return Ok(Target::All);
    }
    s.parse::<Stage>().map(Target::One).map_err(|_| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("expected one of: {}, all", names.join(", "))
    })
}

fn load(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config =
        RunConfig::load(&cli.config).with_context(|| format!("reading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.base.train.seed = seed;
        config.ranker.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn print_summary(stage: Stage, summary: &StageSummary, secs: f64) {
    println!("{stage}: done in {secs:.1}s");
    if let Some(n) = summary.backend_calls {
        println!("  backend calls: {n}");
    }
    for note in &summary.notes {
        println!("  {note}");
    }
    for a in &summary.artifacts {
        println!("  wrote {}", a.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let stages: Vec<Stage> = match cli.stage {
        Target::One(s) => vec![s],
        Target::All => Stage::ALL.to_vec(),
    };
    for stage in stages {
        let start = Instant::now();
        match run_stage(&config, stage) {
            Ok(summary) => print_summary(stage, &summary, start.elapsed().as_secs_f64()),
            Err(e) => {
                eprintln!("error in stage {stage}: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    ExitCode::SUCCESS
}
