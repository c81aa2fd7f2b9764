use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairwell_cli::{commands, exit_code, Method, Pooling};

/// Subject-aware self-supervised pretraining with group-fairness evaluation.
#[derive(Debug, Parser)]
#[command(name = "fairwell", version)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSONL dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and FAIRWELL_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the encoders into a run directory.
    Pretrain {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// vicreg, m1, m2, m3 or m4.
        #[arg(long)]
        method: Option<Method>,
        /// none, single or double.
        #[arg(long)]
        pooling: Option<Pooling>,
    },
    /// Fit the probe and write predictions and fairness metrics.
    Evaluate {
        run_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Mark the performance/fairness front across evaluated runs.
    Pareto {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth { config, out, seed } => {
            let summary = commands::synth(&commands::SynthArgs { config, out, seed, quiet })?;
            print!("{}", summary.render());
        }
        Command::Pretrain { config, data, out, seed, method, pooling } => {
            let s = commands::pretrain(&commands::PretrainArgs { config, data, out, seed, method, pooling, quiet })?;
            println!("run {} seed {}: {} steps", s.run_id, s.config.train.seed, s.steps);
        }
        Command::Evaluate { run_dir, data } => {
            let s = commands::evaluate(&commands::EvaluateArgs { run_dir, data, quiet })?;
            let r = &s.report;
            println!(
                "run {}: acc {:.4} f1 {:.4} | sp {:.4} eopp {:.4} eodd {:.4} eacc {:.4} | agg_f {:.4} (numerator {}, flags {})",
                s.run_id, r.acc, r.f1, r.sp, r.eopp, r.eodd, r.eacc, r.agg_f, r.numerator_group, r.flags.describe()
            );
        }
        Command::Pareto { run_dirs, out } => {
            let rows = commands::pareto(&commands::ParetoArgs { run_dirs, out, quiet })?;
            for r in rows.iter().filter(|r| r.on_front) {
                println!("front: {} f1 {:.4} agg_f {:.4}", r.run_id, r.f1, r.agg_f);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
