//! Batch command-line interface: dataset creation, training,
//! reconstruction, prior sampling, evaluation, and gradient self-checks.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! numeric failures (aborted training or failed gradient checks).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objvid::data::GeneratorConfig;
use objvid::pipeline::{self, RunConfig};
use objvid::Error;

#[derive(Parser)]
#[command(name = "objvid", version, about = "Object-centric 3D video modeling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonOut {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with exact ground truth.
    MakeDataset {
        #[command(flatten)]
        out: CommonOut,
        /// Generator config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of sequences (overrides the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on a dataset's train split.
    Train {
        /// Run config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optimizer steps (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct sequences and write the panel dumps.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sequence indices; the first --count sequences when omitted.
        #[arg(long, num_args = 1..)]
        indices: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Decode prior samples and write the panel dumps.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: CommonOut,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Compute the evaluation metrics on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient self-checks.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_generator_config(path: &Option<PathBuf>) -> Result<GeneratorConfig, Error> {
    match path {
        None => Ok(GeneratorConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::MakeDataset { out, config, count } => {
            let mut cfg = load_generator_config(&config)?;
            if let Some(c) = count {
                cfg.count = c;
            }
            let seed = out.seed.unwrap_or(0);
            let manifest = pipeline::make_dataset(&cfg, seed, &out.out)?;
            println!(
                "dataset: {} sequences ({} train / {} val / {} test) at {}",
                manifest.sequences.len(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len(),
                out.out.display()
            );
            Ok(())
        }
        Cmd::Train { config, dataset, out, steps, seed, resume } => {
            let mut cfg = match &config {
                None => RunConfig::default(),
                Some(p) => RunConfig::from_json_file(p)?,
            };
            if let Some(d) = dataset {
                cfg.dataset = d.display().to_string();
            }
            if let Some(o) = out {
                cfg.out_dir = o.display().to_string();
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = resume {
                cfg.resume = Some(r.display().to_string());
            }
            let summary = pipeline::train(&cfg)?;
            println!(
                "trained {} steps ({} skipped); final total loss {:.4}; checkpoint at {}",
                summary.steps_done,
                summary.skipped_steps,
                summary.last.total,
                summary.checkpoint.display()
            );
            Ok(())
        }
        Cmd::Reconstruct { checkpoint, dataset, out, indices, count } => {
            let indices = if indices.is_empty() { (0..count).collect() } else { indices };
            pipeline::reconstruct(&checkpoint, &dataset, &indices, &out)?;
            println!("wrote {} reconstructions to {}", indices.len(), out.display());
            Ok(())
        }
        Cmd::Generate { checkpoint, out, count } => {
            let seed = out.seed.unwrap_or(0);
            let presences = pipeline::generate(&checkpoint, seed, count, &out.out)?;
            let confident = presences.iter().filter(|p| p.iter().any(|&v| v > 0.5)).count();
            println!(
                "generated {count} samples at {} ({confident} with a confident object)",
                out.out.display()
            );
            Ok(())
        }
        Cmd::Evaluate { checkpoint, dataset, split, out } => {
            let eval = pipeline::evaluate(&checkpoint, &dataset, &split, out.as_deref())?;
            let r = &eval.report;
            println!(
                "fg_iou {:.4}  sc {:.4}  msc {:.4}  sc_track {:.4}  msc_track {:.4}  mre {:.4}  frac125 {:.4}  ap_3d {:.4}",
                r.fg_iou, r.sc, r.msc, r.sc_track, r.msc_track, r.mre, r.frac125, r.ap_3d
            );
            Ok(())
        }
        Cmd::GradCheck { seed } => {
            let report = pipeline::grad_check_all(seed.unwrap_or(0));
            for e in &report.entries {
                println!(
                    "{} {:<24} max rel err {:.3e} (tol {:.0e})",
                    if e.passed() { "PASS" } else { "FAIL" },
                    e.name,
                    e.max_rel_err,
                    e.tol
                );
            }
            println!("{} checks in {:.1}s", report.entries.len(), report.runtime.as_secs_f64());
            if report.all_passed() {
                Ok(())
            } else {
                Err(Error::Numeric("gradient self-check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print normally; usage problems exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
