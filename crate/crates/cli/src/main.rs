use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cpls_core::math::RngSeed;
use cpls_core::runner::{self, ExperimentConfig};

/// Label-smoothing experiments: hard labels, vanilla LS, online LS and
/// confusion-penalty LS on small feed-forward classifiers.
#[derive(Debug, Parser)]
#[command(name = "cpls", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (`section.key = value` lines). Built-in defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/val/test CSVs and a manifest.
    Generate(Common),
    /// Train one strategy under one seed and write its artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        /// Strategy entry such as `cpls` or `cpls:beta=0.3`; defaults to the
        /// first configured strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Train every strategy under every seed and write a comparison table.
    Compare(Common),
    /// Summarize the runs found under a directory.
    Report {
        /// Directory holding run summaries; defaults to `--out` or `output.dir`.
        dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![RngSeed(seed)];
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let config = load(&common)?;
            let seed = config.seeds[0];
            let m = runner::cmd_generate(&config, seed, &config.output_dir)?;
            println!(
                "wrote {} / {} / {} rows to {}",
                m.rows[0],
                m.rows[1],
                m.rows[2],
                config.output_dir.display()
            );
        }
        Command::Train { common, strategy } => {
            let config = load(&common)?;
            let spec = match strategy {
                Some(label) => config.strategy(&label)?,
                None => config.strategies[0].clone(),
            };
            let seed = config.seeds[0];
            let record = runner::cmd_train(&config, &spec, seed, &config.output_dir)?;
            println!(
                "{} seed {}: test accuracy {:.4}, ECE x100 {:.2} ({})",
                record.strategy,
                record.seed,
                record.test_accuracy,
                100.0 * record.test_ece,
                config.output_dir.display()
            );
        }
        Command::Compare(common) => {
            let config = load(&common)?;
            let cmp = runner::cmd_compare(&config, &config.output_dir)?;
            print!("{}", cmp.table);
            println!("comparison table: {}", cmp.csv_path.display());
        }
        Command::Report { dir, common } => {
            let dir = match dir {
                Some(d) => d,
                None => load(&common)?.output_dir,
            };
            print!("{}", report(&dir)?);
        }
    }
    Ok(())
}

fn report(dir: &Path) -> Result<String> {
    runner::cmd_report(dir).with_context(|| format!("reporting on {}", dir.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
