//! Run configuration: a flat TOML table whose keys mirror [`RunConfig`].

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cv::ExpectationMode;
use crate::error::{Error, Result};
use crate::families::FamilyKind;
use crate::models::{ModelKind, DEFAULT_ARREST_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Nocv,
    ZvcvGd,
    Quadcv,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Nocv => "nocv",
            EstimatorKind::ZvcvGd => "zvcv_gd",
            EstimatorKind::Quadcv => "quadcv",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nocv" => Ok(EstimatorKind::Nocv),
            "zvcv_gd" => Ok(EstimatorKind::ZvcvGd),
            "quadcv" => Ok(EstimatorKind::Quadcv),
            other => Err(Error::config("estimator", format!("unknown estimator `{other}`"))),
        }
    }
}

/// Every key accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "family",
    "estimator",
    "num_samples",
    "iterations",
    "eval_every",
    "vr_every",
    "repetitions",
    "seed",
    "gamma_lambda",
    "zvcv_lr",
    "zvcv_steps",
    "zvcv_order",
    "gamma_v",
    "expectation_mode",
    "full_curvature",
    "data_path",
    "synthetic",
    "synthetic_rows",
    "batch_size",
    "output_dir",
    "run_id",
    "elbo_samples",
    "vr_replicates",
    "lppd_samples",
    "frisk_arrest_scale",
    "expected_d_z",
    "train_fraction",
    "subset_size",
    "toy_observations",
];

/// A config file as written: every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawConfig {
    pub model: Option<ModelKind>,
    pub family: Option<FamilyKind>,
    pub estimator: Option<EstimatorKind>,
    pub num_samples: Option<usize>,
    pub iterations: Option<u64>,
    pub eval_every: Option<u64>,
    pub vr_every: Option<u64>,
    pub repetitions: Option<u32>,
    pub seed: Option<u64>,
    pub gamma_lambda: Option<f64>,
    pub zvcv_lr: Option<f64>,
    pub zvcv_steps: Option<usize>,
    pub zvcv_order: Option<u8>,
    pub gamma_v: Option<f64>,
    pub expectation_mode: Option<ExpectationMode>,
    pub full_curvature: Option<bool>,
    pub data_path: Option<PathBuf>,
    pub synthetic: Option<bool>,
    pub synthetic_rows: Option<usize>,
    pub batch_size: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub elbo_samples: Option<usize>,
    pub vr_replicates: Option<usize>,
    pub lppd_samples: Option<usize>,
    pub frisk_arrest_scale: Option<f64>,
    pub expected_d_z: Option<usize>,
    pub train_fraction: Option<f64>,
    pub subset_size: Option<usize>,
    pub toy_observations: Option<usize>,
}

/// A validated configuration with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub family: FamilyKind,
    pub estimator: EstimatorKind,
    /// Gradient samples `L` per iteration.
    pub num_samples: usize,
    pub iterations: u64,
    pub eval_every: u64,
    /// Variance-ratio cadence in iterations; 0 disables it.
    pub vr_every: u64,
    pub repetitions: u32,
    pub seed: u64,
    /// Adam learning rate for λ.
    pub gamma_lambda: f64,
    pub zvcv_lr: f64,
    pub zvcv_steps: usize,
    pub zvcv_order: u8,
    /// Learning rate for the quadratic parameters `v`.
    pub gamma_v: f64,
    pub expectation_mode: ExpectationMode,
    pub full_curvature: bool,
    pub data_path: Option<PathBuf>,
    pub synthetic: bool,
    pub synthetic_rows: Option<usize>,
    /// Minibatch size; `None` is full batch.
    pub batch_size: Option<usize>,
    pub output_dir: PathBuf,
    pub run_id: String,
    pub elbo_samples: usize,
    pub vr_replicates: usize,
    pub lppd_samples: usize,
    pub frisk_arrest_scale: f64,
    pub expected_d_z: Option<usize>,
    pub train_fraction: f64,
    pub subset_size: usize,
    pub toy_observations: usize,
}

impl RawConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message()))?;
        if let Some(key) = table.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::config(key.clone(), format!("unknown key `{key}`")));
        }
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Apply defaults and validate.
    pub fn resolve(self) -> Result<RunConfig> {
        let model = self.model.ok_or_else(|| Error::config("model", "model is required"))?;
        let family = self
            .family
            .ok_or_else(|| Error::config("family", "family is required"))?;
        let estimator = self
            .estimator
            .ok_or_else(|| Error::config("estimator", "estimator is required"))?;
        let bnn_nvp = model == ModelKind::BnnRedwine && family == FamilyKind::RealNvp;
        let gamma_lambda = self.gamma_lambda.unwrap_or(if bnn_nvp { 1e-3 } else { 1e-2 });
        let default_iters = if model == ModelKind::BnnRedwine { 10_000 } else { 5_000 };
        let default_mode = if family == FamilyKind::RealNvp {
            ExpectationMode::Empirical
        } else {
            ExpectationMode::ClosedForm
        };
        let num_samples = self.num_samples.unwrap_or(10);
        let seed = self.seed.unwrap_or(0);
        let zvcv_order = self.zvcv_order.unwrap_or(1);
        let run_id = self.run_id.unwrap_or_else(|| {
            let est = match (estimator, zvcv_order) {
                (EstimatorKind::ZvcvGd, 2) => "zvcv_gd_o2".to_string(),
                (e, _) => e.to_string(),
            };
            format!("{model}-{family}-{est}-L{num_samples}-s{seed}")
        });
        let expected_d_z = self.expected_d_z.or(match model {
            ModelKind::Toy => None,
            ModelKind::LogisticA1a => Some(120),
            ModelKind::HierPoissonFrisk => Some(37),
            ModelKind::BnnRedwine => Some(653),
        });
        let cfg = RunConfig {
            model,
            family,
            estimator,
            num_samples,
            iterations: self.iterations.unwrap_or(default_iters),
            eval_every: self.eval_every.unwrap_or(50),
            vr_every: self.vr_every.unwrap_or(50),
            repetitions: self.repetitions.unwrap_or(5),
            seed,
            gamma_lambda,
            zvcv_lr: self.zvcv_lr.unwrap_or(1e-3),
            zvcv_steps: self.zvcv_steps.unwrap_or(4),
            zvcv_order,
            gamma_v: self.gamma_v.unwrap_or(gamma_lambda),
            expectation_mode: self.expectation_mode.unwrap_or(default_mode),
            full_curvature: self.full_curvature.unwrap_or(false),
            data_path: self.data_path,
            synthetic: self.synthetic.unwrap_or(false),
            synthetic_rows: self.synthetic_rows,
            batch_size: self.batch_size,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("traces")),
            run_id,
            elbo_samples: self.elbo_samples.unwrap_or(crate::eval::ELBO_SAMPLES),
            vr_replicates: self.vr_replicates.unwrap_or(crate::eval::VARIANCE_REPLICATES),
            lppd_samples: self.lppd_samples.unwrap_or(crate::eval::LPPD_SAMPLES),
            frisk_arrest_scale: self.frisk_arrest_scale.unwrap_or(DEFAULT_ARREST_SCALE),
            expected_d_z,
            train_fraction: self.train_fraction.unwrap_or(0.9),
            subset_size: self.subset_size.unwrap_or(100),
            toy_observations: self.toy_observations.unwrap_or(20),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{key} must be positive")))
    }
}

fn at_least_one(key: &str, v: u64) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(key, format!("{key} must be at least 1")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        at_least_one("num_samples", self.num_samples as u64)?;
        at_least_one("iterations", self.iterations)?;
        at_least_one("eval_every", self.eval_every)?;
        at_least_one("repetitions", u64::from(self.repetitions))?;
        at_least_one("elbo_samples", self.elbo_samples as u64)?;
        at_least_one("lppd_samples", self.lppd_samples as u64)?;
        at_least_one("subset_size", self.subset_size as u64)?;
        positive("gamma_lambda", self.gamma_lambda)?;
        positive("frisk_arrest_scale", self.frisk_arrest_scale)?;
        if self.vr_every > 0 && self.vr_replicates < 2 {
            return Err(Error::config("vr_replicates", "vr_replicates must be at least 2"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction", "train_fraction must lie in (0, 1]"));
        }
        if let Some(b) = self.batch_size {
            at_least_one("batch_size", b as u64)?;
        }
        match self.estimator {
            EstimatorKind::Nocv => {}
            EstimatorKind::ZvcvGd => {
                positive("zvcv_lr", self.zvcv_lr)?;
                if !(1..=2).contains(&self.zvcv_order) {
                    return Err(Error::config("zvcv_order", "zvcv_order must be 1 or 2"));
                }
            }
            EstimatorKind::Quadcv => {
                positive("gamma_v", self.gamma_v)?;
                if self.family == FamilyKind::RealNvp && self.expectation_mode == ExpectationMode::ClosedForm {
                    return Err(Error::config(
                        "expectation_mode",
                        "closed_form expectation needs a Gaussian family; real_nvp has no closed-form mean and covariance",
                    ));
                }
            }
        }
        if self.model != ModelKind::Toy && !self.synthetic {
            match &self.data_path {
                None => {
                    return Err(Error::config(
                        "data_path",
                        format!(
                            "missing dataset path for {} (set data_path or synthetic = true)",
                            self.model
                        ),
                    ))
                }
                Some(p) if !p.is_file() => {
                    return Err(Error::config(
                        "data_path",
                        format!("dataset {} is not a readable file", p.display()),
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Label written to the trace `estimator` column.
    pub fn estimator_label(&self) -> String {
        match (self.estimator, self.zvcv_order) {
            (EstimatorKind::ZvcvGd, 2) => "zvcv_gd_o2".into(),
            (e, _) => e.to_string(),
        }
    }
}

/// Read, default and validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RawConfig::from_path(path)?.resolve()
}
