//! `stsg`: run the video-to-QRA pipeline stage by stage or end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stsg_core::dataset;
use stsg_core::pipeline::{run_pipeline, PipelineConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(
    name = "stsg",
    version,
    about = "Build reasoning QRA datasets from videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect cuts and pick keyframes.
    Split(RunArgs),
    /// Parse keyframes into frame scene graphs.
    Parse(RunArgs),
    /// Merge frames and bridge clips into scene graphs.
    Induct(RunArgs),
    /// Sample reasoning paths.
    Sample(RunArgs),
    /// Render and refine QRA samples.
    Synth(RunArgs),
    /// Export the supervision dataset.
    Export(RunArgs),
    /// Run every stage.
    Run(RunArgs),
    /// Summarize an exported dataset.
    Stats {
        /// Path to a dataset JSONL file.
        dataset: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker bound for model calls and per-item work.
    #[arg(long)]
    workers: Option<usize>,
    /// Abort on the first keyframe that cannot be parsed.
    #[arg(long)]
    strict: bool,
    #[arg(long, overrides_with = "no_resume")]
    resume: bool,
    /// Recompute every stage.
    #[arg(long = "no-resume", overrides_with = "resume")]
    no_resume: bool,
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn run(args: &RunArgs, until: Stage) -> ExitCode {
    let config = match PipelineConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let mut options = RunOptions::new(&args.out);
    options.resume = args.resume || !args.no_resume;
    options.workers = args.workers;
    options.strict = args.strict;
    options.until = until;
    match run_pipeline(&config, &options) {
        Ok(report) => {
            for s in &report.stages {
                eprintln!("{:<7} {:?} {:>8.1?}", s.stage.name(), s.status, s.duration);
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Split(a) => run(a, Stage::Split),
        Command::Parse(a) => run(a, Stage::Parse),
        Command::Induct(a) => run(a, Stage::Induct),
        Command::Sample(a) => run(a, Stage::Sample),
        Command::Synth(a) => run(a, Stage::Synth),
        Command::Export(a) => run(a, Stage::Export),
        Command::Run(a) => run(a, Stage::Export),
        Command::Stats { dataset: path } => match dataset::stats(path) {
            Ok(stats) => {
                print!("{stats}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                let code = match e {
                    dataset::DatasetError::Io(..) => 4,
                    _ => 3,
                };
                ExitCode::from(code)
            }
        },
    }
}
