//! Adam optimisation loop, experiment orchestration and trace output.
//!
//! A run is `repetitions` independent optimisations of λ. Each repetition
//! draws every random quantity from its own [`crate::rng`] substreams, so
//! repetitions run in parallel while the trace is written by one writer in
//! repetition order.

mod adam;
mod checkpoint;
mod config;
mod trace;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{load_config, EstimatorKind, RawConfig, RunConfig, CONFIG_KEYS};
pub use trace::{parse_trace, read_trace, TraceRow, TraceWriter, TRACE_HEADER};

use crate::cv::{
    cv_adjusted_estimate, estimate_location, pathwise_grad_batch, quad_cv_batch, quad_update_v, solve_beta_esn,
    solve_beta_gd, zvcv_feature_batch, Beta, BetaCoefficients, CvEstimator, CvMatrix, Expectation, ExpectationMode,
    Provenance, QuadParams, EXPECTATION_SAMPLES,
};
use crate::error::{Error, Result};
use crate::eval::{eval_elbo, test_lppd, variance_ratio};
use crate::families::{EpsBatch, FamilySpec};
use crate::models::{
    load_frisk_csv, load_redwine_csv, parse_libsvm, synth, Bnn, ConjugateGaussian, Dataset, HierPoisson, Logistic,
    Minibatch, Model, ModelKind, BNN_HIDDEN,
};
use crate::rng::{stream, Purpose, StreamId};

/// Rows in the synthetic stand-in for a1a.
pub const SYNTH_A1A_ROWS: usize = 1605;
/// Rows in the synthetic stand-in for redwine.
pub const SYNTH_REDWINE_ROWS: usize = 1599;

fn read_data(cfg: &RunConfig) -> Result<String> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::config("data_path", format!("missing dataset path for {}", cfg.model)))?;
    std::fs::read_to_string(path)
        .map_err(|e| Error::config("data_path", format!("cannot read {}: {e}", path.display())))
}

/// Load or synthesise the dataset and bind it to its model.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let mut split_rng = stream(cfg.seed, 0, Purpose::Split, 0);
    let model = match cfg.model {
        ModelKind::Toy => {
            let xs = synth::toy_observations(cfg.toy_observations, &mut split_rng);
            Model::Conjugate(ConjugateGaussian::from_observations(&xs))
        }
        ModelKind::LogisticA1a => {
            let text = if cfg.synthetic {
                let n = cfg.synthetic_rows.unwrap_or(SYNTH_A1A_ROWS);
                synth::a1a_libsvm(n, synth::A1A_WIDTH, &mut split_rng)
            } else {
                read_data(cfg)?
            };
            let data = parse_libsvm(&text)?.split_fraction(cfg.train_fraction, &mut split_rng)?;
            Model::Logistic(Logistic::new(Arc::new(data)))
        }
        ModelKind::HierPoissonFrisk => {
            let text = if cfg.synthetic {
                synth::frisk_csv(&mut split_rng)
            } else {
                read_data(cfg)?
            };
            Model::HierPoisson(HierPoisson::new(Arc::new(load_frisk_csv(
                &text,
                cfg.frisk_arrest_scale,
            )?))?)
        }
        ModelKind::BnnRedwine => {
            let text = if cfg.synthetic {
                let n = cfg.synthetic_rows.unwrap_or(SYNTH_REDWINE_ROWS);
                synth::redwine_csv(n, &mut split_rng)
            } else {
                read_data(cfg)?
            };
            let data: Dataset = load_redwine_csv(&text)?;
            let data = match cfg.batch_size {
                Some(_) => data.split_fraction(cfg.train_fraction, &mut split_rng)?,
                None => data.split_subsets(cfg.subset_size, &mut split_rng)?,
            };
            Model::Bnn(Bnn::new(Arc::new(data.standardize()), BNN_HIDDEN))
        }
    };
    if let Some(expected) = cfg.expected_d_z {
        if model.d_z() != expected {
            return Err(Error::Schema(format!(
                "{} has d_z = {}, expected {expected}",
                model.name(),
                model.d_z()
            )));
        }
    }
    Ok(model)
}

/// Per-repetition control-variate state.
#[derive(Debug, Clone)]
enum CvState {
    None,
    Zvcv,
    Quad { params: QuadParams, beta: BetaCoefficients },
}

/// Result of one repetition: its trace rows, the final λ and the error that
/// stopped it, if any.
#[derive(Debug)]
pub struct RepetitionOutcome {
    pub repetition: u32,
    pub rows: Vec<TraceRow>,
    pub lambda: Vec<f64>,
    pub error: Option<Error>,
}

struct Repetition<'a> {
    cfg: &'a RunConfig,
    model: &'a Model,
    family: &'a FamilySpec,
    rep: u32,
    lam: Vec<f64>,
    adam: AdamState,
    cv: CvState,
    wall_ms: f64,
    rows: Vec<TraceRow>,
}

fn sample_eps(family: &FamilySpec, n: usize, id: StreamId) -> EpsBatch {
    let mut batch = family.sample_base(n, &mut id.rng());
    batch.source = Some(id);
    batch
}

impl<'a> Repetition<'a> {
    fn id(&self, purpose: Purpose, iteration: u64) -> StreamId {
        StreamId::new(self.cfg.seed, self.rep, purpose, iteration)
    }

    fn minibatch(&self, iteration: u64) -> Result<Minibatch> {
        match self.cfg.batch_size {
            Some(b) => Minibatch::sample(self.model.train(), b, &mut self.id(Purpose::Minibatch, iteration).rng()),
            None => Ok(self.model.full_batch()),
        }
    }

    fn expectation_batch(&self, purpose: Purpose, iteration: u64) -> Option<EpsBatch> {
        match self.cfg.expectation_mode {
            ExpectationMode::ClosedForm => None,
            ExpectationMode::Empirical => Some(sample_eps(
                self.family,
                EXPECTATION_SAMPLES,
                self.id(purpose, iteration),
            )),
        }
    }

    /// One update: estimate the gradient, take an Adam ascent step and, for
    /// QuadCV, refit β and `v` on the same samples.
    fn step(&mut self, k: u64) -> Result<()> {
        let batch = self.minibatch(k)?;
        let eps = sample_eps(self.family, self.cfg.num_samples, self.id(Purpose::Estimator, k));
        let grads = pathwise_grad_batch(self.model, self.family, &self.lam, &eps, &batch)?;
        let (loc_batch, exp_batch) = match self.cv {
            CvState::Quad { .. } => (
                self.expectation_batch(Purpose::QuadLocation, k),
                self.expectation_batch(Purpose::QuadExpectation, k),
            ),
            _ => (None, None),
        };
        match &mut self.cv {
            CvState::None => {
                let g = grads.mean();
                self.adam.step(&mut self.lam, g.as_slice().unwrap())?;
            }
            CvState::Zvcv => {
                let cv = CvMatrix::Zvcv {
                    order: self.cfg.zvcv_order,
                    features: zvcv_feature_batch(&eps, self.cfg.zvcv_order)?,
                };
                let beta = solve_beta_gd(&grads, &cv, self.cfg.zvcv_lr, self.cfg.zvcv_steps)?;
                let g = cv_adjusted_estimate(&grads, &cv, &beta)?;
                self.adam.step(&mut self.lam, g.as_slice().unwrap())?;
            }
            CvState::Quad { params, beta } => {
                let z0 = estimate_location(
                    self.family,
                    &self.lam,
                    loc_batch
                        .as_ref()
                        .map_or(Expectation::ClosedForm, Expectation::Empirical),
                )?;
                let current = params.clone().with_location(z0);
                let cv = quad_cv_batch(
                    &current,
                    self.family,
                    &self.lam,
                    &eps,
                    exp_batch
                        .as_ref()
                        .map_or(Expectation::ClosedForm, Expectation::Empirical),
                )?;
                let g = cv_adjusted_estimate(&grads, &cv, beta)?;
                let lam_old = self.lam.clone();
                self.adam.step(&mut self.lam, g.as_slice().unwrap())?;
                let next_beta = match solve_beta_esn(&grads, &cv) {
                    Ok(b) => match b.beta {
                        Beta::Scalar(v) if v.is_finite() => v,
                        _ => 0.0,
                    },
                    Err(Error::Rank(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                *beta = BetaCoefficients::scalar(next_beta, Provenance::Initial).lagged(k);
                let (updated, _) = quad_update_v(
                    &current,
                    self.model,
                    self.family,
                    &lam_old,
                    &eps,
                    &batch,
                    self.cfg.gamma_v,
                )?;
                *params = updated;
            }
        }
        Ok(())
    }

    fn estimator_for_eval(&self) -> CvEstimator {
        match &self.cv {
            CvState::None => CvEstimator::NoCv,
            CvState::Zvcv => CvEstimator::ZvcvGd {
                order: self.cfg.zvcv_order,
                lr: self.cfg.zvcv_lr,
                steps: self.cfg.zvcv_steps,
            },
            CvState::Quad { params, beta } => CvEstimator::QuadCv {
                params: params.clone(),
                beta: match beta.beta {
                    Beta::Scalar(b) => b,
                    _ => 0.0,
                },
                mode: self.cfg.expectation_mode,
            },
        }
    }

    fn evaluate(&self, k: u64) -> Result<TraceRow> {
        let cfg = self.cfg;
        let elbo = eval_elbo(
            self.model,
            self.family,
            &self.lam,
            cfg.elbo_samples,
            &mut self.id(Purpose::Elbo, k).rng(),
        )?
        .value;
        let variance_ratio = if cfg.vr_every > 0 && k % cfg.vr_every == 0 {
            match &self.cv {
                CvState::None => Some(1.0),
                _ => {
                    let mut estimator = self.estimator_for_eval();
                    if let CvEstimator::QuadCv { params, .. } = &mut estimator {
                        let loc = self.expectation_batch(Purpose::QuadLocation, k + 1);
                        let z0 = estimate_location(
                            self.family,
                            &self.lam,
                            loc.as_ref().map_or(Expectation::ClosedForm, Expectation::Empirical),
                        )?;
                        *params = params.clone().with_location(z0);
                    }
                    let report = variance_ratio(
                        self.model,
                        self.family,
                        &self.lam,
                        &estimator,
                        cfg.num_samples,
                        cfg.vr_replicates,
                        cfg.batch_size,
                        &mut self.id(Purpose::VarianceRatio, k).rng(),
                    )?;
                    Some(report.ratio)
                }
            }
        } else {
            None
        };
        let test_lppd = if self.model.test().is_empty() {
            None
        } else {
            Some(test_lppd(
                self.model,
                self.family,
                &self.lam,
                cfg.lppd_samples,
                &mut self.id(Purpose::Lppd, k).rng(),
            )?)
        };
        Ok(self.row(k, elbo, variance_ratio, test_lppd))
    }

    fn row(&self, iteration: u64, elbo: f64, variance_ratio: Option<f64>, test_lppd: Option<f64>) -> TraceRow {
        TraceRow {
            run_id: self.cfg.run_id.clone(),
            repetition: self.rep,
            iteration,
            wall_ms: self.wall_ms,
            elbo,
            variance_ratio,
            test_lppd,
            estimator: self.cfg.estimator_label(),
            family: self.family.kind().to_string(),
            model: self.cfg.model.to_string(),
            num_samples: self.cfg.num_samples,
            seed: self.cfg.seed,
        }
    }

    fn run(&mut self) -> Result<()> {
        match self.evaluate(0) {
            Ok(row) => self.rows.push(row),
            Err(e) => {
                self.rows.push(self.row(0, f64::NAN, None, None));
                return Err(e);
            }
        }
        for k in 1..=self.cfg.iterations {
            let start = Instant::now();
            let result = self.step(k);
            self.wall_ms += start.elapsed().as_secs_f64() * 1e3;
            if let Err(e) = result {
                self.rows.push(self.row(k, f64::NAN, None, None));
                return Err(e);
            }
            if k % self.cfg.eval_every == 0 || k == self.cfg.iterations {
                match self.evaluate(k) {
                    Ok(row) => self.rows.push(row),
                    Err(e) => {
                        self.rows.push(self.row(k, f64::NAN, None, None));
                        return Err(e);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Run one repetition to completion or first failure.
pub fn run_repetition(cfg: &RunConfig, model: &Model, rep: u32) -> RepetitionOutcome {
    let family = FamilySpec::new(cfg.family, model.d_z());
    let lam = family
        .init_params(&mut stream(cfg.seed, rep, Purpose::Init, 0))
        .into_inner();
    let cv = match cfg.estimator {
        EstimatorKind::Nocv => Ok(CvState::None),
        EstimatorKind::ZvcvGd => Ok(CvState::Zvcv),
        EstimatorKind::Quadcv => QuadParams::zeros(model.d_z(), cfg.full_curvature).map(|params| CvState::Quad {
            params,
            beta: BetaCoefficients::scalar(0.0, Provenance::Initial),
        }),
    };
    let mut state = Repetition {
        cfg,
        model,
        family: &family,
        rep,
        adam: AdamState::new(lam.len(), cfg.gamma_lambda),
        lam,
        cv: CvState::None,
        wall_ms: 0.0,
        rows: Vec::new(),
    };
    let error = match cv {
        Ok(cv) => {
            state.cv = cv;
            state.run().err()
        }
        Err(e) => {
            state.rows.push(state.row(0, f64::NAN, None, None));
            Some(e)
        }
    };
    RepetitionOutcome {
        repetition: rep,
        rows: state.rows,
        lambda: state.lam,
        error,
    }
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trace: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// `(repetition, message)` for every repetition that stopped early.
    pub failures: Vec<(u32, String)>,
}

/// Run every repetition, writing `{run_id}.csv` and one λ checkpoint per
/// repetition into the output directory.
pub fn run_experiment_detailed(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let outcomes: Vec<RepetitionOutcome> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, &model, rep))
        .collect();
    let trace = cfg.output_dir.join(format!("{}.csv", cfg.run_id));
    let mut writer = TraceWriter::create(&trace)?;
    let mut checkpoints = Vec::new();
    let mut failures = Vec::new();
    for outcome in &outcomes {
        for row in &outcome.rows {
            writer.write(row)?;
        }
        let path = cfg
            .output_dir
            .join(format!("{}-rep{}.lambda", cfg.run_id, outcome.repetition));
        write_checkpoint(&path, cfg.family, &outcome.lambda)?;
        checkpoints.push(path);
        if let Some(e) = &outcome.error {
            failures.push((outcome.repetition, e.to_string()));
        }
    }
    writer.finish()?;
    Ok(RunArtifacts {
        trace,
        checkpoints,
        failures,
    })
}

/// Run an experiment and return the trace path.
pub fn run_experiment(cfg: &RunConfig) -> Result<PathBuf> {
    run_experiment_detailed(cfg).map(|a| a.trace)
}

/// One-off variance ratio at a fixed λ.
///
/// For QuadCV, `v` and β are first warmed up for `warmup` iterations at the
/// fixed λ so the measurement reflects a fitted control variate.
pub fn measure_variance_ratio(cfg: &RunConfig, model: &Model, lam: &[f64], warmup: u64) -> Result<f64> {
    let family = FamilySpec::new(cfg.family, model.d_z());
    if lam.len() != family.d_lambda() {
        return Err(Error::Arity(format!(
            "checkpoint has {} parameters, {} needs {}",
            lam.len(),
            cfg.family,
            family.d_lambda()
        )));
    }
    let estimator = match cfg.estimator {
        EstimatorKind::Nocv => return Ok(1.0),
        EstimatorKind::ZvcvGd => CvEstimator::ZvcvGd {
            order: cfg.zvcv_order,
            lr: cfg.zvcv_lr,
            steps: cfg.zvcv_steps,
        },
        EstimatorKind::Quadcv => {
            let mut params = QuadParams::zeros(model.d_z(), cfg.full_curvature)?;
            let mut beta = 0.0;
            let rep = u32::MAX;
            for k in 1..=warmup {
                let id = |p| StreamId::new(cfg.seed, rep, p, k);
                let batch = match cfg.batch_size {
                    Some(b) => Minibatch::sample(model.train(), b, &mut id(Purpose::Minibatch).rng())?,
                    None => model.full_batch(),
                };
                let eps = sample_eps(&family, cfg.num_samples, id(Purpose::Estimator));
                let aux = match cfg.expectation_mode {
                    ExpectationMode::ClosedForm => None,
                    ExpectationMode::Empirical => {
                        Some(sample_eps(&family, EXPECTATION_SAMPLES, id(Purpose::QuadExpectation)))
                    }
                };
                let expectation = aux.as_ref().map_or(Expectation::ClosedForm, Expectation::Empirical);
                let z0 = estimate_location(&family, lam, expectation)?;
                params = params.with_location(z0);
                let grads = pathwise_grad_batch(model, &family, lam, &eps, &batch)?;
                let cv = quad_cv_batch(&params, &family, lam, &eps, expectation)?;
                beta = match solve_beta_esn(&grads, &cv) {
                    Ok(BetaCoefficients {
                        beta: Beta::Scalar(b), ..
                    }) if b.is_finite() => b,
                    Ok(_) | Err(Error::Rank(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                params = quad_update_v(&params, model, &family, lam, &eps, &batch, cfg.gamma_v)?.0;
            }
            let loc = match cfg.expectation_mode {
                ExpectationMode::ClosedForm => None,
                ExpectationMode::Empirical => Some(sample_eps(
                    &family,
                    EXPECTATION_SAMPLES,
                    StreamId::new(cfg.seed, rep, Purpose::QuadLocation, 0),
                )),
            };
            let z0 = estimate_location(
                &family,
                lam,
                loc.as_ref().map_or(Expectation::ClosedForm, Expectation::Empirical),
            )?;
            CvEstimator::QuadCv {
                params: params.with_location(z0),
                beta,
                mode: cfg.expectation_mode,
            }
        }
    };
    let mut rng = stream(cfg.seed, 0, Purpose::VarianceRatio, 0);
    let report = variance_ratio(
        model,
        &family,
        lam,
        &estimator,
        cfg.num_samples,
        cfg.vr_replicates,
        cfg.batch_size,
        &mut rng,
    )?;
    Ok(report.ratio)
}

/// Posterior mean of the toy model, for tests and diagnostics.
pub fn toy_posterior(model: &Model) -> Option<(f64, f64)> {
    match model {
        Model::Conjugate(m) => Some(m.posterior()),
        _ => None,
    }
}
