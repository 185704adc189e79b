use std::path::PathBuf;
use std::process::ExitCode;

use apts_core::harness::{compare, inspect_partition, run_experiment, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

/// Train small networks with APTS, trust region or first-order baselines.
#[derive(Parser)]
#[command(name = "apts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of one experiment and write its CSVs.
    Train {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several experiments and merge their summaries into one table.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print which subdomain owns each parameter segment.
    InspectPartition {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    /// Master seed; trial t uses seed + t.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn load(&self, path: &PathBuf) -> Result<ExperimentConfig, apts_core::Error> {
        let mut cfg = ExperimentConfig::from_file(path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), apts_core::Error> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = overrides.load(&config)?;
            let report = run_experiment(&cfg)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            if let Some(last) = report.summary.last() {
                println!(
                    "{}: epoch {} mean train loss {:.6}{}",
                    report.label,
                    last.epoch,
                    last.train_loss.mean,
                    last.test_accuracy
                        .map(|a| format!(", mean test accuracy {:.4}", a.mean))
                        .unwrap_or_default()
                );
            }
        }
        Command::Compare { configs, overrides } => {
            let cfgs = configs
                .iter()
                .map(|p| overrides.load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let (table, _) = compare(&cfgs)?;
            let dir = &cfgs[0].out_dir;
            std::fs::create_dir_all(dir).map_err(|source| apts_core::Error::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let path = dir.join("comparison.csv");
            std::fs::write(&path, table).map_err(|source| apts_core::Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            println!("{}", path.display());
        }
        Command::InspectPartition { config, overrides } => {
            print!("{}", inspect_partition(&overrides.load(&config)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
