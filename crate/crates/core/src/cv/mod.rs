//! Pathwise gradient batches, control variates and their coefficients.
//!
//! A control-variate estimate of `E[I(ε)]` is `(1/L) Σ_l [I(ε_l) + C(ε_l) β]`.
//! Two kinds of `C` are supported:
//!
//! - ZVCV: Stein features `φ(ε)` of the base sample, applied per dimension,
//!   so component `k` of `C(ε)β` is `φ(ε) · β_k`. The block-diagonal matrix is
//!   never formed.
//! - QuadCV: a single column `c(ε) = E[∇_λ f̃] − ∇_λ f̃(T(ε;λ))` with scalar `β`.

mod beta;
mod quad;
mod zvcv;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::families::{EpsBatch, FamilySpec};
use crate::models::{integrand_r, Minibatch, Model};

pub use beta::{ls_objective, solve_beta_esn, solve_beta_gd, solve_beta_ols};
pub use quad::{
    estimate_location, quad_cv_batch, quad_objective, quad_update_v, surrogate_expectation, Curvature, Expectation,
    ExpectationMode, QuadParams, EXPECTATION_SAMPLES, FULL_CURVATURE_MAX_DZ,
};
pub use zvcv::{zvcv_feature_batch, zvcv_feature_count, zvcv_features, ZVCV_ORDER2_MAX_DZ};

/// Per-sample integrand gradients, one row per base sample.
#[derive(Debug, Clone)]
pub struct GradBatch {
    grads: Array2<f64>,
    values: Vec<f64>,
}

impl GradBatch {
    /// Wrap precomputed gradient rows.
    pub fn from_rows(grads: Array2<f64>) -> Result<Self> {
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("gradient batch has non-finite entries".into()));
        }
        let values = vec![f64::NAN; grads.nrows()];
        Ok(GradBatch { grads, values })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.grads.view()
    }

    /// Integrand values `r(T(ε_l;λ);λ)`; NaN when built from raw rows.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grads.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.grads.ncols()
    }

    /// The plain pathwise estimate `(1/L) Σ_l I(ε_l)`.
    pub fn mean(&self) -> Array1<f64> {
        self.grads.mean_axis(Axis(0)).expect("non-empty batch")
    }
}

/// Row `l` is `∇_λ r(T(ε_l; λ); λ)`. Rows are evaluated in parallel, each on
/// its own tape, and stored in sample order.
pub fn pathwise_grad_batch(
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    eps: &EpsBatch,
    batch: &Minibatch,
) -> Result<GradBatch> {
    let rows: Vec<(f64, Vec<f64>)> = (0..eps.len())
        .into_par_iter()
        .map(|l| autodiff::grad(lam, |_, lv| integrand_r(model, family, lv, eps.row(l), batch)))
        .collect::<Result<_>>()?;
    let mut grads = Array2::zeros((rows.len(), lam.len()));
    let mut values = Vec::with_capacity(rows.len());
    for (l, (v, g)) in rows.into_iter().enumerate() {
        grads.row_mut(l).assign(&Array1::from(g));
        values.push(v);
    }
    Ok(GradBatch { grads, values })
}

/// Per-sample control-variate values.
#[derive(Debug, Clone)]
pub enum CvMatrix {
    /// Stein features, `L × J`; expanded block-diagonally across `d_λ`.
    Zvcv { order: u8, features: Array2<f64> },
    /// One `d_λ` column per sample, plus the expectation it was centred on.
    Quad {
        columns: Array2<f64>,
        expectation: Array1<f64>,
    },
}

impl CvMatrix {
    pub fn len(&self) -> usize {
        match self {
            CvMatrix::Zvcv { features, .. } => features.nrows(),
            CvMatrix::Quad { columns, .. } => columns.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a coefficient came from, for bias accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Fitted on the same samples it is applied to.
    SameSamples,
    /// Fitted on samples from an earlier iteration.
    Lagged { from_iteration: u64 },
    /// Initial value, not fitted to any samples.
    Initial,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Beta {
    /// `d_λ × J`; row `k` multiplies the features for dimension `k`.
    PerDimension(Array2<f64>),
    /// `β = A Φ` with coefficients `A` (`d_λ × M`) over the feature rows `Φ`
    /// (`M × J`) of the batch it was fitted on.
    Representer {
        coeffs: Array2<f64>,
        basis: Array2<f64>,
    },
    Scalar(f64),
}

/// Coefficients `β`, the least-squares intercept `α` when one was fitted, and
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaCoefficients {
    pub beta: Beta,
    pub alpha: Option<Array1<f64>>,
    pub provenance: Provenance,
}

impl BetaCoefficients {
    pub fn scalar(beta: f64, provenance: Provenance) -> Self {
        BetaCoefficients {
            beta: Beta::Scalar(beta),
            alpha: None,
            provenance,
        }
    }

    pub fn per_dimension(beta: Array2<f64>, provenance: Provenance) -> Self {
        BetaCoefficients {
            beta: Beta::PerDimension(beta),
            alpha: None,
            provenance,
        }
    }

    /// Mark coefficients fitted at `iteration` for use at a later one.
    pub fn lagged(mut self, iteration: u64) -> Self {
        self.provenance = Provenance::Lagged {
            from_iteration: iteration,
        };
        self
    }

    /// `d_λ × J` coefficient matrix for the per-dimension forms.
    pub fn to_dense(&self) -> Option<Array2<f64>> {
        match &self.beta {
            Beta::PerDimension(b) => Some(b.clone()),
            Beta::Representer { coeffs, basis } => Some(coeffs.dot(basis)),
            Beta::Scalar(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        let alpha_ok = self.alpha.as_ref().map_or(true, |a| a.iter().all(|v| v.is_finite()));
        let beta_ok = match &self.beta {
            Beta::PerDimension(b) => b.iter().all(|v| v.is_finite()),
            Beta::Representer { coeffs, .. } => coeffs.iter().all(|v| v.is_finite()),
            Beta::Scalar(b) => b.is_finite(),
        };
        alpha_ok && beta_ok
    }
}

/// `C(ε_l) β` for every sample, `L × d_λ`.
pub fn cv_values(cv: &CvMatrix, beta: &BetaCoefficients, d_lambda: usize) -> Result<Array2<f64>> {
    match (cv, &beta.beta) {
        (CvMatrix::Zvcv { features, .. }, Beta::PerDimension(b)) => {
            if b.dim() != (d_lambda, features.ncols()) {
                return Err(Error::Arity(format!(
                    "β is {:?} but features need {} × {}",
                    b.dim(),
                    d_lambda,
                    features.ncols()
                )));
            }
            Ok(features.dot(&b.t()))
        }
        (CvMatrix::Zvcv { features, .. }, Beta::Representer { coeffs, basis }) => {
            if coeffs.nrows() != d_lambda || basis.ncols() != features.ncols() || coeffs.ncols() != basis.nrows() {
                return Err(Error::Arity("representer β does not match the feature batch".into()));
            }
            Ok(features.dot(&basis.t()).dot(&coeffs.t()))
        }
        (CvMatrix::Quad { columns, .. }, Beta::Scalar(b)) => {
            if columns.ncols() != d_lambda {
                return Err(Error::Arity(format!(
                    "QuadCV columns have length {} but d_λ = {d_lambda}",
                    columns.ncols()
                )));
            }
            Ok(columns * *b)
        }
        _ => Err(Error::Arity("β form does not match the control-variate kind".into())),
    }
}

/// `I(ε_l) + C(ε_l) β` for every sample.
pub fn adjusted_samples(grads: &GradBatch, cv: &CvMatrix, beta: &BetaCoefficients) -> Result<Array2<f64>> {
    if cv.len() != grads.len() {
        return Err(Error::Arity(format!(
            "{} gradient rows but {} control-variate rows",
            grads.len(),
            cv.len()
        )));
    }
    Ok(&grads.grads + &cv_values(cv, beta, grads.dim())?)
}

/// `(1/L) Σ_l [I(ε_l) + C(ε_l) β]`. The intercept `α` is deliberately not added.
pub fn cv_adjusted_estimate(grads: &GradBatch, cv: &CvMatrix, beta: &BetaCoefficients) -> Result<Array1<f64>> {
    Ok(adjusted_samples(grads, cv, beta)?
        .mean_axis(Axis(0))
        .expect("non-empty batch"))
}

/// `(1/(L(L−1))) Σ_{l>l'} ‖a_l − a_l'‖²` over the rows of `samples`.
pub fn pairwise_variance(samples: ArrayView2<'_, f64>) -> Result<f64> {
    let l = samples.nrows();
    if l < 2 {
        return Err(Error::Arity(format!("pairwise variance needs L ≥ 2, got {l}")));
    }
    let mut total = 0.0;
    for i in 1..l {
        for j in 0..i {
            let a = samples.row(i);
            let b = samples.row(j);
            total += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    Ok(total / (l * (l - 1)) as f64)
}

/// Pairwise variance of the adjusted samples `I + Cβ`.
pub fn variance_pairwise(grads: &GradBatch, cv: &CvMatrix, beta: &BetaCoefficients) -> Result<f64> {
    pairwise_variance(adjusted_samples(grads, cv, beta)?.view())
}

/// How a control-variate-adjusted gradient is formed from a gradient batch.
#[derive(Debug, Clone)]
pub enum CvEstimator {
    NoCv,
    /// ZVCV with β fitted by `steps` GD steps on the same samples.
    ZvcvGd {
        order: u8,
        lr: f64,
        steps: usize,
    },
    /// ZVCV with fixed coefficients.
    ZvcvFixed {
        order: u8,
        beta: BetaCoefficients,
    },
    /// QuadCV with fixed `v` and scalar β.
    QuadCv {
        params: QuadParams,
        beta: f64,
        mode: ExpectationMode,
    },
}

impl CvEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            CvEstimator::NoCv => "nocv",
            CvEstimator::ZvcvGd { .. } => "zvcv_gd",
            CvEstimator::ZvcvFixed { .. } => "zvcv",
            CvEstimator::QuadCv { .. } => "quadcv",
        }
    }
}
