use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedprune::config::{ExperimentConfig, Method};
use fedprune_cli::{cmd_compare, cmd_gen_data, cmd_run, exit_code, RunOptions};

/// Federated training with per-client magnitude pruning.
///
/// Set FEDPRUNE_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "fedprune", version)]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; override the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Method override.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Compare result JSON files against FedAvg.
    Compare {
        #[arg(required = true, num_args = 2..)]
        results: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic silos as CSV.
    GenData {
        /// Experiment config whose synthetic data section is used; defaults apply without it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file, or directory with --per-silo.
        #[arg(long)]
        out: PathBuf,
        /// One CSV file per silo.
        #[arg(long)]
        per_silo: bool,
        /// Data seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FEDPRUNE_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("FEDPRUNE_THREADS must be a positive integer"))?;
        if n == 0 {
            anyhow::bail!("FEDPRUNE_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> fedprune::Result<()> {
    match cli.command {
        Command::Run { config, out, seeds, method } => {
            let opts = RunOptions { out, seeds, method, quiet: cli.quiet };
            let output = cmd_run(&config, &opts)?;
            if !cli.quiet {
                println!("results in {}", output.out_dir.display());
            }
        }
        Command::Compare { results, out } => {
            let cmp = cmd_compare(&results, out.as_deref())?;
            print!("{}", cmp.to_text());
        }
        Command::GenData { config, out, per_silo, seed } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::new(Method::Fedavg),
            };
            if let (Some(seed), fedprune::DataSource::Synthetic(s)) = (seed, &mut cfg.data) {
                s.seed = seed;
            }
            let files = cmd_gen_data(&cfg, &out, per_silo)?;
            if !cli.quiet {
                for f in files {
                    println!("{}", f.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
