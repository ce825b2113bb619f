//! Command-line driver: dataset generation, training runs, the oracle
//! verification suite and the method comparison matrix.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqtrain::harness::{
    self, compare, default_method_matrix, generate_task, read_run_config, save_dataset,
    verification, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "seqtrain",
    about = "Lattice-based sequence-discriminative training testbed: SGD, HF, DSAG-HF and NG on MMI/MPE/sMBR criteria",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as lattice/feature files.
    Generate {
        /// Run config file; the [task] section drives generation.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (train/ and validation/ subdirectories).
        #[arg(long)]
        out: PathBuf,
        /// Override the task seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training configuration; writes metrics.csv, summary.json
    /// and checkpoint.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle property suite and report one line per check.
    Verify {
        /// Acceptance-scale check sizes (slower).
        #[arg(long)]
        full: bool,
    },
    /// Train the default method matrix (SGD, HF, DSAG-HF, NG) over several
    /// seeds and emit a combined summary table.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
}

fn load_config(path: &Option<PathBuf>) -> seqtrain::Result<RunConfig> {
    match path {
        Some(p) => read_run_config(p),
        None => Ok(RunConfig::default_desk()),
    }
}

fn run() -> seqtrain::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut run = load_config(&config)?;
            if let Some(seed) = seed {
                run.task.seed = seed;
            }
            let dataset = generate_task(&run.task)?;
            save_dataset(&out, &dataset)?;
            println!(
                "wrote {} train and {} validation utterances to {}",
                dataset.train.len(),
                dataset.validation.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Train { config, out, seed } => {
            let mut run = load_config(&config)?;
            if let Some(seed) = seed {
                run.seed = seed;
            }
            let result = harness::train_to_dir(&run, &out)?;
            let s = &result.metrics.summary;
            println!(
                "method {} criterion {} epochs {} updates {}: train acc {:.4}, val acc {:.4}, val TER {:.4}",
                s.method, s.criterion, s.epochs, s.updates, s.train_accuracy, s.val_accuracy,
                s.val_token_error_rate
            );
            println!("metrics: {}", out.join("metrics.csv").display());
            Ok(true)
        }
        Command::Verify { full } => {
            let cfg = if full {
                verification::VerificationConfig::full()
            } else {
                verification::VerificationConfig::quick()
            };
            let results = verification::run_verification(&cfg);
            let mut all_passed = true;
            for check in &results {
                println!(
                    "{}: {} — {}",
                    check.name,
                    if check.passed { "PASS" } else { "FAIL" },
                    check.detail
                );
                all_passed &= check.passed;
            }
            Ok(all_passed)
        }
        Command::Compare { config, out, seeds } => {
            let base = load_config(&config)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| seqtrain::Error::Config(format!("bad seed `{s}`")))
                })
                .collect::<seqtrain::Result<_>>()?;
            let methods = default_method_matrix(base.task.train_utterances);
            let report = compare(&base, &methods, &seeds)?;
            std::fs::create_dir_all(&out)?;
            print!("{}", report.render_table());
            std::fs::write(out.join("table.txt"), report.render_table())?;
            let json =
                serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
            std::fs::write(out.join("report.json"), json)?;
            // Per-run summary CSV: the CE baseline plus every (method, seed).
            let mut csv = String::from(
                "method,seed,epochs,updates,train_criterion,train_accuracy,val_criterion,val_accuracy,val_token_error_rate\n",
            );
            for (seed, row) in report.seeds.iter().zip(&report.ce_rows) {
                csv.push_str(&format!(
                    "ce,{seed},0,0,{},{},{},{},{}\n",
                    row.train_criterion,
                    row.train_accuracy,
                    row.val_criterion,
                    row.val_accuracy,
                    row.val_token_error_rate
                ));
            }
            for outcome in &report.outcomes {
                let s = &outcome.summary;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    outcome.method,
                    outcome.seed,
                    s.epochs,
                    s.updates,
                    s.train_criterion,
                    s.train_accuracy,
                    s.val_criterion,
                    s.val_accuracy,
                    s.val_token_error_rate
                ));
            }
            std::fs::write(out.join("summary.csv"), csv)?;
            println!("report: {}", out.join("report.json").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
