use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pathcv::families::{FamilyKind, FamilySpec};
use pathcv::models::{synth, ModelKind};
use pathcv::rng::{stream, Purpose};
use pathcv::runner::{
    build_model, measure_variance_ratio, read_checkpoint, run_experiment_detailed, EstimatorKind, RawConfig, RunConfig,
    SYNTH_A1A_ROWS, SYNTH_REDWINE_ROWS,
};
use pathcv::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pathcv",
    version,
    about = "Stochastic VI with control-variate gradient estimators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its trace CSV and λ checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        family: Option<FamilyKind>,
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        num_samples: Option<usize>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and report model dimensions.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Measure the variance ratio at a checkpointed λ.
    Variance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        /// QuadCV warm-up iterations for `v` and β at the fixed λ.
        #[arg(long, default_value_t = 200)]
        warmup: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic dataset in the loader's input format.
    Synth {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        rows: Option<usize>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut raw = RawConfig::from_path(path)?;
    if seed.is_some() {
        raw.seed = seed;
    }
    raw.resolve()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            model,
            family,
            estimator,
            num_samples,
            iters,
            reps,
            seed,
            out,
        } => {
            let mut raw = RawConfig::from_path(&config)?;
            raw.model = model.or(raw.model);
            raw.family = family.or(raw.family);
            if let Some(e) = estimator {
                raw.estimator = Some(e.parse::<EstimatorKind>()?);
            }
            raw.num_samples = num_samples.or(raw.num_samples);
            raw.iterations = iters.or(raw.iterations);
            raw.repetitions = reps.or(raw.repetitions);
            raw.seed = seed.or(raw.seed);
            raw.output_dir = out.or(raw.output_dir);
            let cfg = raw.resolve()?;
            let art = run_experiment_detailed(&cfg)?;
            println!("trace: {}", art.trace.display());
            for (rep, msg) in &art.failures {
                eprintln!("repetition {rep} failed: {msg}");
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            let model = build_model(&cfg)?;
            let family = FamilySpec::new(cfg.family, model.d_z());
            println!(
                "ok: model={} family={} estimator={} d_z={} d_lambda={} train={} test={}",
                cfg.model,
                cfg.family,
                cfg.estimator_label(),
                model.d_z(),
                family.d_lambda(),
                model.train().len(),
                model.test().len()
            );
            Ok(())
        }
        Command::Variance {
            config,
            checkpoint,
            replicates,
            warmup,
            seed,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(r) = replicates {
                cfg.vr_replicates = r;
            }
            let (kind, lam) = read_checkpoint(&checkpoint)?;
            if kind != cfg.family {
                return Err(Error::Schema(format!(
                    "checkpoint family {kind} does not match config family {}",
                    cfg.family
                )));
            }
            let model = build_model(&cfg)?;
            let ratio = measure_variance_ratio(&cfg, &model, &lam, warmup)?;
            println!("variance_ratio={ratio}");
            Ok(())
        }
        Command::Synth { model, out, seed, rows } => {
            let mut rng = stream(seed, 0, Purpose::Split, 0);
            let text = match model {
                ModelKind::LogisticA1a => synth::a1a_libsvm(rows.unwrap_or(SYNTH_A1A_ROWS), synth::A1A_WIDTH, &mut rng),
                ModelKind::HierPoissonFrisk => synth::frisk_csv(&mut rng),
                ModelKind::BnnRedwine => synth::redwine_csv(rows.unwrap_or(SYNTH_REDWINE_ROWS), &mut rng),
                ModelKind::Toy => synth::toy_observations(rows.unwrap_or(20), &mut rng)
                    .iter()
                    .map(|x| format!("{x}\n"))
                    .collect(),
            };
            std::fs::write(&out, text)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
