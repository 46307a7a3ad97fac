//! `hyperpatch`: train and evaluate patch-level hyperspectral classifiers.
//!
//! Exit codes: 0 success; 1 invalid configuration or input; 2 runtime
//! failure (I/O, or a sweep with failed runs); 3 failed gradient check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperpatch_core::experiment::{
    cmd_eval, cmd_sample, cmd_sweep, cmd_synth, cmd_train, gradcheck_suite,
    load_experiment_config, EvalOptions, EvalReport, TrainedRun,
};
use hyperpatch_core::patch::SamplingMode;
use hyperpatch_core::train::Scheme;
use hyperpatch_core::Error;

#[derive(Parser)]
#[command(
    name = "hyperpatch",
    version,
    about = "Patch-level hyperspectral scene classification",
    after_help = "Exit codes: 0 success, 1 invalid configuration or input, \
                  2 runtime failure, 3 failed gradient check."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scene from a TOML recipe
    Synth {
        /// Recipe file (height, width, bands, class_count, noise_sigma,
        /// background_fraction, region_size, seed)
        spec: PathBuf,
        /// Directory for scene.json (+ .cube, .labels)
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a scene into labeled patches and write the patch manifest
    Sample {
        /// Scene header file
        scene: PathBuf,
        /// Labeling protocol: multi (all classes present) or single
        /// (center pixel's class)
        #[arg(long, default_value = "multi")]
        mode: SamplingMode,
        /// Patch edge length in pixels
        #[arg(long, default_value_t = 3)]
        patch_size: usize,
        /// Split seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for patches.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from an experiment config and write all
    /// artifacts
    Train {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the sampling mode (and with it the task)
        #[arg(long)]
        mode: Option<SamplingMode>,
    },
    /// Evaluate a checkpoint against a patch manifest
    Eval {
        /// Checkpoint stem (the run's `model` artifact)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patch manifest (patches.json)
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for eval.json
        #[arg(long)]
        out: PathBuf,
        /// Keep only single-class patches; with a single-label checkpoint
        /// on a multi-label manifest this is the uniform-subset protocol
        #[arg(long)]
        filter_uniform: bool,
        /// Score a single-label checkpoint against multi-label truth by its
        /// top-k logits, k being each patch's true label count
        #[arg(long)]
        topk: bool,
        /// Drop the background class from multi-label truth and predictions
        #[arg(long)]
        exclude_background: bool,
    },
    /// Train every scheme on one shared split and write a comparison table
    Sweep {
        /// Experiment config (TOML); its scheme is overridden per run
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the sampling mode (and with it the task)
        #[arg(long)]
        mode: Option<SamplingMode>,
    },
    /// Verify every analytic gradient against finite differences
    Gradcheck {
        /// Corrupt one gradient on purpose to prove the suite catches it
        #[arg(long, hide = true)]
        self_test_corrupt: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::GradCheck(_) => 3,
        Error::Io { .. } => 2,
        _ => 1,
    }
}

fn print_train_summary(run: &TrainedRun) {
    let r = &run.report;
    println!(
        "run {} ({} scheme, {}-label task, seed {})",
        r.config_hash,
        r.config.train.scheme.name(),
        r.config.train.task.name(),
        r.seed
    );
    println!(
        "dataset: {} ({}x{}x{}), {} patches kept of {} (train {} / valid {} / test {})",
        r.dataset.scene_name,
        r.dataset.height,
        r.dataset.width,
        r.dataset.bands,
        r.dataset.kept_patches,
        r.dataset.grid_patches,
        r.dataset.train_patches,
        r.dataset.valid_patches,
        r.dataset.test_patches
    );
    println!("model: {} parameters", r.model_parameters);
    println!("  train: {}", r.metrics.train.headline());
    println!("  valid: {}", r.metrics.valid.headline());
    println!("  test:  {}", r.metrics.test.headline());
    println!("report: {}", run.report_path.display());
}

fn print_eval_report(report: &EvalReport, path: &std::path::Path) {
    println!(
        "evaluated {} ({}-label) on {} ({}-label manifest)",
        report.checkpoint,
        report.checkpoint_task.name(),
        report.manifest,
        report.manifest_mode.name()
    );
    for subset in &report.subsets {
        if let Some(metrics) = &subset.standard {
            println!(
                "  {:<5} ({:>5} patches): {}",
                subset.subset,
                subset.n_evaluated,
                metrics.headline()
            );
        }
        if let Some(topk) = &subset.topk {
            println!(
                "  {:<5} ({:>5} patches): top-k accuracy {:.4} | precision {:.4} | recall {:.4} (k from {}, {} skipped)",
                subset.subset,
                subset.n_evaluated,
                topk.report.accuracy,
                topk.report.precision,
                topk.report.recall,
                topk.k_source,
                topk.skipped
            );
        }
    }
    println!("report: {}", path.display());
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Synth { spec, out } => {
            let path = cmd_synth(&spec, &out)?;
            println!("scene written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample {
            scene,
            mode,
            patch_size,
            seed,
            out,
        } => {
            let summary = cmd_sample(&scene, mode, patch_size, seed, &out)?;
            print!("{}", summary.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            seed,
            out,
            mode,
        } => {
            let mut config = load_experiment_config(&config)?;
            config.apply_overrides(seed, out, mode);
            let run = cmd_train(&config)?;
            print_train_summary(&run);
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            filter_uniform,
            topk,
            exclude_background,
        } => {
            let options = EvalOptions {
                filter_uniform,
                topk,
                exclude_background,
            };
            let (report, path) = cmd_eval(&checkpoint, &manifest, &options, &out)?;
            print_eval_report(&report, &path);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            seed,
            out,
            mode,
        } => {
            let mut config = load_experiment_config(&config)?;
            config.apply_overrides(seed, out, mode);
            let outcome = cmd_sweep(&config, &Scheme::ALL)?;
            print!("{}", outcome.csv);
            println!("table: {}", outcome.csv_path.display());
            if outcome.failures > 0 {
                for run in outcome.runs.iter().filter(|r| !r.ok) {
                    eprintln!(
                        "error: {} run failed: {}",
                        run.scheme,
                        run.error.as_deref().unwrap_or("unknown")
                    );
                }
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Gradcheck { self_test_corrupt } => {
            let outcome = gradcheck_suite(self_test_corrupt)?;
            print!("{}", outcome.render());
            if outcome.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
