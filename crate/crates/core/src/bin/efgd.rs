//! Command-line front end. All work happens in `efgd::run`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use efgd::run::{self, Overrides, RunConfig};
use efgd::trainer::parse_modes;

#[derive(Parser)]
#[command(name = "efgd", version, about = "Train and cost sign-symmetric, pruned-error networks")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Stratified training subset size (sample count for synthetic data).
    #[arg(long, global = true)]
    subset: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train,
    /// Train once per mode and tabulate validation accuracy.
    Compare {
        /// Comma-separated: bp, fa, signsym, binarysign, signsym_prune.
        #[arg(long, default_value = "bp,signsym,binarysign,signsym_prune")]
        modes: String,
    },
    /// Analytic training cost relative to backpropagation.
    Cost {
        /// Use the sparsity measured in this run directory.
        #[arg(long)]
        from_run: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn execute(cli: Cli) -> efgd::Result<()> {
    let path = cli.config.ok_or_else(|| efgd::Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    cfg.apply(&Overrides { seed: cli.seed, threads: cli.threads, out_dir: cli.out_dir, subset: cli.subset })?;
    match cli.command {
        Command::Train => {
            let report = run::cmd_train(&cfg)?;
            for e in &report.epochs {
                let val = e.val_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("epoch {:>3}  loss {:.4}  train {:.4}  val {val}", e.epoch, e.train_loss, e.train_acc);
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Compare { modes } => {
            let modes = parse_modes(&modes)?;
            print!("{}", run::cmd_compare(&cfg, &modes)?.to_csv());
        }
        Command::Cost { from_run } => {
            println!("{}", run::cmd_cost(&cfg, from_run.as_deref())?.to_json()?);
        }
        Command::Eval { checkpoint } => {
            let r = run::cmd_eval(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
