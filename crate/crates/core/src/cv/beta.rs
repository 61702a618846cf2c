//! Coefficient criteria for control variates.
//!
//! All three minimise (exactly or approximately) the least-squares objective
//! `(1/L) Σ_l ‖I(ε_l) + α + C(ε_l) β‖²`, per dimension for ZVCV.

use ndarray::{Array2, Axis};

use super::{Beta, BetaCoefficients, CvMatrix, GradBatch, Provenance};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;

fn check_rows(grads: &GradBatch, cv: &CvMatrix) -> Result<()> {
    if grads.len() != cv.len() || grads.is_empty() {
        return Err(Error::Arity(format!(
            "{} gradient rows but {} control-variate rows",
            grads.len(),
            cv.len()
        )));
    }
    Ok(())
}

/// `(1/L) Σ_l ‖I(ε_l) + α + C(ε_l) β‖²`, with `α = 0` when absent.
pub fn ls_objective(grads: &GradBatch, cv: &CvMatrix, beta: &BetaCoefficients) -> Result<f64> {
    let mut resid = super::adjusted_samples(grads, cv, beta)?;
    if let Some(alpha) = &beta.alpha {
        resid += alpha;
    }
    Ok(resid.mapv(|v| v * v).sum() / grads.len() as f64)
}

/// `steps` full-batch gradient-descent steps on the least-squares objective,
/// starting from `α = −(1/L) Σ I(ε_l)` and `β = 0`.
///
/// ZVCV coefficients are returned in representer form: every GD step moves
/// `β_k` along the span of the feature rows, so `β = A Φ` stays exact while
/// costing `O(L² d_λ)` per step instead of `O(L J d_λ)` memory.
pub fn solve_beta_gd(grads: &GradBatch, cv: &CvMatrix, lr: f64, steps: usize) -> Result<BetaCoefficients> {
    check_rows(grads, cv)?;
    if !(lr > 0.0) {
        return Err(Error::config("zvcv_lr", "zvcv_lr must be positive"));
    }
    let h = grads.rows();
    let l = grads.len();
    let step = 2.0 * lr / l as f64;
    let mut alpha = -grads.mean();
    match cv {
        CvMatrix::Zvcv { features, .. } => {
            let gram = features.dot(&features.t());
            let mut coeffs = Array2::<f64>::zeros((grads.dim(), l));
            for _ in 0..steps {
                let resid = &h + &alpha + &gram.dot(&coeffs.t());
                alpha.scaled_add(-step, &resid.sum_axis(Axis(0)));
                coeffs.scaled_add(-step, &resid.t());
            }
            Ok(BetaCoefficients {
                beta: Beta::Representer {
                    coeffs,
                    basis: features.clone(),
                },
                alpha: Some(alpha),
                provenance: Provenance::SameSamples,
            })
        }
        CvMatrix::Quad { columns, .. } => {
            let mut beta = 0.0;
            for _ in 0..steps {
                let resid = &h + &alpha + &(columns * beta);
                alpha.scaled_add(-step, &resid.sum_axis(Axis(0)));
                beta -= step * (&resid * columns).sum();
            }
            Ok(BetaCoefficients {
                beta: Beta::Scalar(beta),
                alpha: Some(alpha),
                provenance: Provenance::SameSamples,
            })
        }
    }
}

/// Exact least-squares `(α, β)` with an optional ridge penalty `ridge ‖β‖²`
/// (the intercept is not penalised).
pub fn solve_beta_ols(grads: &GradBatch, cv: &CvMatrix, ridge: f64) -> Result<BetaCoefficients> {
    check_rows(grads, cv)?;
    if !(ridge >= 0.0) {
        return Err(Error::Arity(format!("ridge must be non-negative, got {ridge}")));
    }
    let h_mean = grads.mean();
    let hc = &grads.rows() - &h_mean;
    match cv {
        CvMatrix::Zvcv { features, .. } => {
            let f_mean = features.mean_axis(Axis(0)).unwrap();
            let fc = features - &f_mean;
            let mut gram = fc.t().dot(&fc);
            gram.diag_mut().mapv_inplace(|v| v + ridge);
            let chol = Cholesky::new(gram.view(), "OLS normal equations")?;
            let beta = -chol.solve(fc.t().dot(&hc).view()).reversed_axes();
            let alpha = -(&h_mean + &beta.dot(&f_mean));
            Ok(BetaCoefficients {
                beta: Beta::PerDimension(beta),
                alpha: Some(alpha),
                provenance: Provenance::SameSamples,
            })
        }
        CvMatrix::Quad { columns, .. } => {
            let c_mean = columns.mean_axis(Axis(0)).unwrap();
            let cc = columns - &c_mean;
            let denom = cc.mapv(|v| v * v).sum() + ridge;
            if !(denom > f64::MIN_POSITIVE) {
                return Err(Error::Rank(
                    "OLS normal equations: control variate has no spread".into(),
                ));
            }
            let beta = -(&cc * &hc).sum() / denom;
            let alpha = -(&h_mean + &(&c_mean * beta));
            Ok(BetaCoefficients {
                beta: Beta::Scalar(beta),
                alpha: Some(alpha),
                provenance: Provenance::SameSamples,
            })
        }
    }
}

/// `β* = −E[CᵀC]⁻¹ E[CᵀI]` with empirical moments and no intercept.
pub fn solve_beta_esn(grads: &GradBatch, cv: &CvMatrix) -> Result<BetaCoefficients> {
    check_rows(grads, cv)?;
    let l = grads.len() as f64;
    let h = grads.rows();
    match cv {
        CvMatrix::Zvcv { features, .. } => {
            let moment = features.t().dot(features) / l;
            let cross = features.t().dot(&h) / l;
            let chol = Cholesky::new(moment.view(), "control-variate second moment")?;
            let beta = -chol.solve(cross.view()).reversed_axes();
            Ok(BetaCoefficients::per_dimension(beta, Provenance::SameSamples))
        }
        CvMatrix::Quad { columns, .. } => {
            let cc = columns.mapv(|v| v * v).sum() / l;
            if !(cc > f64::MIN_POSITIVE) {
                return Err(Error::Rank("control-variate second moment is zero".into()));
            }
            let beta = -(columns * &h).sum() / l / cc;
            Ok(BetaCoefficients::scalar(beta, Provenance::SameSamples))
        }
    }
}

/// Shorthand used in tests: a single-dimension batch with a single feature.
#[cfg(test)]
pub(crate) fn scalar_problem(h: &[f64], c: &[f64]) -> (GradBatch, CvMatrix) {
    let l = h.len();
    let grads = GradBatch::from_rows(Array2::from_shape_vec((l, 1), h.to_vec()).unwrap()).unwrap();
    let cv = CvMatrix::Zvcv {
        order: 1,
        features: Array2::from_shape_vec((l, 1), c.to_vec()).unwrap(),
    };
    (grads, cv)
}
