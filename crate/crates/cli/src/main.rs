use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynpatch::harness::config::DEFAULT_CONFIG_TOML;
use dynpatch::harness::{Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "dynpatch", version, about = "Simulate, train, attack and evaluate pose-conditioned screen patches")]
struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the detector, attack, similar and unseen datasets.
    Simulate,
    /// Train the detector on the simulated frames.
    TrainDetector,
    /// Train the screen transformation network.
    TrainSitnet,
    /// Cluster attack frames by relative pose.
    Cluster,
    /// Optimize per-cluster and static patches.
    Optimize,
    /// Measure attack success and write reports.
    Evaluate,
    /// Render Eigen-CAM heat maps with and without the patch.
    Heatmap,
    /// Run every stage, reusing cached results.
    All,
    /// Print the default configuration.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = match cli.command {
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG_TOML}");
            return ExitCode::SUCCESS;
        }
        Command::Simulate => Stage::Simulate,
        Command::TrainDetector => Stage::TrainDetector,
        Command::TrainSitnet => Stage::TrainSitnet,
        Command::Cluster => Stage::Cluster,
        Command::Optimize => Stage::Optimize,
        Command::Evaluate => Stage::Evaluate,
        Command::Heatmap => Stage::Heatmap,
        Command::All => Stage::All,
    };
    let result = (|| {
        let mut config = match &cli.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.run.seed = seed;
        }
        if let Some(out) = &cli.out {
            config.run.out = out.clone();
        }
        let mut pipeline = Pipeline::new(config)?;
        pipeline.verbose = !cli.quiet;
        if cli.sequential {
            pipeline.exec = dynpatch::par::Exec::Sequential;
        }
        pipeline.run(stage)
    })();
    match result {
        Ok(manifest) => {
            if !cli.quiet {
                let executed: Vec<&str> = manifest.executed.iter().map(|s| s.name()).collect();
                eprintln!("[dynpatch] executed: {}", executed.join(", "));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category_code() as u8)
        }
    }
}
