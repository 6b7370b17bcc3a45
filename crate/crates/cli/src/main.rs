use std::path::PathBuf;
use std::process::ExitCode;

use brainmerge::commands::{self, InspectOptions};
use brainmerge::recipe::MergeRecipe;
use clap::{Parser, Subcommand};
use serde::Serialize;

/// Merge fine-tuned checkpoints that share a base model.
#[derive(Debug, Parser)]
#[command(name = "brainmerge", version)]
struct Cli {
    /// Override the recipe seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the task vector `tuned - base`.
    Diff {
        tuned: PathBuf,
        base: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Collect activation statistics for a model over a calibration set.
    Calibrate {
        model: PathBuf,
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Maximum number of records to use.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run a merge recipe.
    Merge { recipe: PathBuf },
    /// Report density, sign conflicts and saliency/magnitude rank overlap.
    Inspect {
        path: PathBuf,
        /// Second delta to count sign conflicts against.
        #[arg(long)]
        against: Option<PathBuf>,
        /// Activation statistics for the rank-overlap column.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Top-k fraction used for the rank overlap.
        #[arg(long)]
        density: Option<f64>,
    },
    /// Check a recipe without running it.
    Validate { recipe: PathBuf },
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
    } else {
        print!("{}", text());
    }
}

fn run(cli: Cli) -> brainmerge::Result<()> {
    if let Some(n) = cli.threads {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let json = cli.json;
    match cli.command {
        Command::Diff { tuned, base, out } => {
            let s = commands::diff(&tuned, &base, &out)?;
            for key in &s.excluded {
                eprintln!("warning: '{key}' has no base counterpart and was left out");
            }
            emit(json, &s, || {
                format!(
                    "wrote {} tensors ({} of {} entries nonzero) to {}\n",
                    s.tensors,
                    s.nonzero,
                    s.numel,
                    out.display()
                )
            });
        }
        Command::Calibrate { model, data, out, budget } => {
            let s = commands::calibrate(&model, &data, &out, budget)?;
            emit(json, &s, || {
                let mut t = format!(
                    "used {} of {} records (budget {})\n",
                    s.records_used, s.records_available, s.budget
                );
                for (layer, n) in &s.layers {
                    t.push_str(&format!("{layer}: {n} tokens\n"));
                }
                t
            });
        }
        Command::Merge { recipe } => {
            let mut r = MergeRecipe::load(&recipe)?;
            if let Some(seed) = cli.seed {
                r.seed = seed;
            }
            let report = commands::merge(&r)?;
            for key in &report.skipped {
                eprintln!("warning: '{key}' exists only in a donor and no copy_from rule covers it");
            }
            emit(json, &report, || {
                let mut t = format!(
                    "merged {} tensors into {}\n",
                    report.provenance.len(),
                    r.output.display()
                );
                t.push_str(&format!("output sha256 {}\n", report.output_sha256));
                t
            });
        }
        Command::Inspect { path, against, stats, density } => {
            let opts = InspectOptions { other: against, stats, density };
            let report = commands::inspect(&path, &opts)?;
            emit(json, &report, || report.to_text());
        }
        Command::Validate { recipe } => {
            let r = commands::validate(&recipe)?;
            emit(json, &r, || format!("{}: ok\n", recipe.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
