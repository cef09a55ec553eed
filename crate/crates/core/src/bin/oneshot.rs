use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oneshot_core::faultlab::{realize_faulty_model, reference_model, FaultConfig};
use oneshot_core::gradcheck::run_gradcheck;
use oneshot_core::harness::{make_toy_model, run_coverage, threshold_sweep, Arch};
use oneshot_core::netgraph::{load_model, save_model, save_weights};
use oneshot_core::oneshot::{
    detect, generate_test_vector, load_test_vector, save_test_vector, GenConfig, GroundTruthMode,
    InitMode, LossKind, Verdict, DEFAULT_THRESHOLD,
};
use oneshot_core::Result;

#[derive(Parser)]
#[command(
    name = "oneshot",
    version,
    about = "One-shot functional testing of crossbar-mapped networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Moment,
    PointwiseKl,
    Mse,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Gaussian,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    StandardizedSelf,
    GaussianSample,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a test vector for the quantized model.
    Gen {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "moment")]
        loss: LossArg,
        #[arg(long, value_enum, default_value = "standardized-self")]
        ground_truth: TargetArg,
        #[arg(long, default_value_t = 0.1)]
        alpha0: f64,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 100)]
        decay_every: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "gaussian")]
        init: InitArg,
        #[arg(long, required_if_eq("init", "file"))]
        init_file: Option<PathBuf>,
        /// Replace existing output files.
        #[arg(long)]
        force: bool,
    },
    /// Run the test vector once; exits 0 when clean and 1 when faulty.
    Check {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        tv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Inject this fault into the mapped weights before testing.
        #[arg(long)]
        fault: Option<PathBuf>,
        /// Overrides the seed in the fault file.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the weights exactly as stored instead of mapping them to int8.
        #[arg(long, conflicts_with = "fault")]
        as_is: bool,
    },
    /// Write the weights of one seeded fault instance.
    Inject {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        fault: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Monte Carlo fault coverage over a campaign grid.
    Coverage {
        #[arg(long)]
        campaign: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a fixture model.
    MakeModel {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train: bool,
        #[arg(long)]
        out_spec: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare reverse-mode input gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen {
            model,
            weights,
            out,
            loss,
            ground_truth,
            alpha0,
            iters,
            decay_every,
            seed,
            init,
            init_file,
            force,
        } => {
            let (spec, params) = load_model(&model, &weights)?;
            let cfg = GenConfig {
                loss: match loss {
                    LossArg::Moment => LossKind::Moment,
                    LossArg::PointwiseKl => LossKind::PointwiseKl,
                    LossArg::Mse => LossKind::Mse,
                },
                ground_truth: match ground_truth {
                    TargetArg::StandardizedSelf => GroundTruthMode::StandardizedSelf,
                    TargetArg::GaussianSample => GroundTruthMode::GaussianSample,
                },
                alpha0,
                iters,
                decay_every,
                seed,
                init: match init {
                    InitArg::Gaussian => InitMode::Gaussian,
                    InitArg::File => InitMode::File {
                        path: init_file.expect("clap requires --init-file"),
                    },
                },
                ..GenConfig::default()
            };
            let tv = generate_test_vector(&spec, &reference_model(&params)?, &cfg)?;
            save_test_vector(&tv, &out, force)?;
            print_json(&serde_json::json!({
                "out": out,
                "baseline": tv.baseline,
                "converged": tv.converged,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Check {
            model,
            weights,
            tv,
            threshold,
            fault,
            seed,
            as_is,
        } => {
            let (spec, params) = load_model(&model, &weights)?;
            let tv = load_test_vector(&tv)?;
            let device = match (fault, as_is) {
                (Some(path), _) => realize_faulty_model(&params, &FaultConfig::load(&path, seed)?)?,
                (None, true) => params,
                (None, false) => reference_model(&params)?,
            };
            let result = detect(&spec, &device, &tv, threshold)?;
            print_json(&result)?;
            Ok(match result.verdict {
                Verdict::Clean => ExitCode::SUCCESS,
                Verdict::Faulty => ExitCode::from(1),
            })
        }
        Command::Inject {
            model,
            weights,
            fault,
            seed,
            out,
            force,
        } => {
            let (spec, params) = load_model(&model, &weights)?;
            let fault = FaultConfig::load(&fault, seed)?;
            let faulty = realize_faulty_model(&params, &fault)?;
            save_weights(&spec, &faulty, &out, force)?;
            print_json(&serde_json::json!({ "out": out, "fault": fault }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Coverage { campaign, out } => {
            let report = run_coverage(&campaign)?;
            let json = report.write(&out)?;
            print!("{}", threshold_sweep(&report));
            println!("wrote {} and {}", out.display(), json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeModel {
            arch,
            classes,
            seed,
            train,
            out_spec,
            out_weights,
            force,
        } => {
            let m = make_toy_model(arch, classes, seed, train)?;
            save_model(&m.spec, &m.params, &out_spec, &out_weights, force)?;
            print_json(&serde_json::json!({
                "arch": arch.name(),
                "classes": classes,
                "seed": seed,
                "train_accuracy": m.train_accuracy,
                "warnings": m.warnings,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { trials, seed } => {
            let report = run_gradcheck(trials, seed)?;
            println!(
                "{} trials, {} redraws, max relative error {:e}, {} failures",
                report.trials,
                report.redraws,
                report.max_rel_error,
                report.failures.len()
            );
            for f in report.failures.iter().take(10) {
                println!(
                    "  trial {} [{}] x[{}]: analytic {:e} numeric {:e}",
                    f.trial,
                    f.layers.join(" "),
                    f.index,
                    f.analytic,
                    f.numeric
                );
            }
            Ok(if report.passed(trials) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
