//! Evaluation protocols: full-data ELBO, variance ratio and test lppd.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::cv::{
    cv_adjusted_estimate, pathwise_grad_batch, quad_cv_batch, solve_beta_gd, zvcv_feature_batch, BetaCoefficients,
    CvEstimator, CvMatrix, Expectation, ExpectationMode, GradBatch, Provenance, EXPECTATION_SAMPLES,
};
use crate::error::{Error, Result};
use crate::families::{EpsBatch, FamilySpec};
use crate::models::{integrand_r, Minibatch, Model};

pub const ELBO_SAMPLES: usize = 500;
pub const VARIANCE_REPLICATES: usize = 100;
pub const LPPD_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// `(1/n) Σ r(T(ε_i;λ);λ)` over the full training set, with its standard error.
pub fn eval_elbo<G: Rng + ?Sized>(
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    n_samples: usize,
    rng: &mut G,
) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(Error::Arity("ELBO needs at least one sample".into()));
    }
    let eps = family.sample_base(n_samples, rng);
    let batch = model.full_batch();
    let values: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| integrand_r(model, family, lam, eps.row(i), &batch))
        .collect::<Result<_>>()?;
    let n = n_samples as f64;
    let value = values.iter().sum::<f64>() / n;
    if !value.is_finite() {
        return Err(Error::NumericDomain("ELBO estimate is not finite".into()));
    }
    let std_error = if n_samples > 1 {
        (values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(ElboEstimate {
        value,
        std_error,
        n_samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRatioReport {
    pub var_nocv: f64,
    pub var_cv: f64,
    pub ratio: f64,
    pub n_replicates: usize,
    pub iteration: Option<u64>,
}

/// `(1/n) Σ_j ‖g_j − ḡ‖²` over the rows of `estimates`.
fn replicate_variance(estimates: &Array2<f64>) -> f64 {
    let mean = estimates.mean_axis(Axis(0)).unwrap();
    estimates
        .rows()
        .into_iter()
        .map(|r| (&r - &mean).mapv(|v| v * v).sum())
        .sum::<f64>()
        / estimates.nrows() as f64
}

/// The control-variate-adjusted mean gradient for one replicate batch.
fn adjusted_estimate<G: Rng + ?Sized>(
    estimator: &CvEstimator,
    family: &FamilySpec,
    lam: &[f64],
    eps: &EpsBatch,
    grads: &GradBatch,
    rng: &mut G,
) -> Result<Array1<f64>> {
    match estimator {
        CvEstimator::NoCv => Ok(grads.mean()),
        CvEstimator::ZvcvGd { order, lr, steps } => {
            let cv = CvMatrix::Zvcv {
                order: *order,
                features: zvcv_feature_batch(eps, *order)?,
            };
            let beta = solve_beta_gd(grads, &cv, *lr, *steps)?;
            cv_adjusted_estimate(grads, &cv, &beta)
        }
        CvEstimator::ZvcvFixed { order, beta } => {
            let cv = CvMatrix::Zvcv {
                order: *order,
                features: zvcv_feature_batch(eps, *order)?,
            };
            cv_adjusted_estimate(grads, &cv, beta)
        }
        CvEstimator::QuadCv { params, beta, mode } => {
            let cv = match mode {
                ExpectationMode::ClosedForm => quad_cv_batch(params, family, lam, eps, Expectation::ClosedForm)?,
                ExpectationMode::Empirical => {
                    let aux = family.sample_base(EXPECTATION_SAMPLES, rng);
                    quad_cv_batch(params, family, lam, eps, Expectation::Empirical(&aux))?
                }
            };
            cv_adjusted_estimate(grads, &cv, &BetaCoefficients::scalar(*beta, Provenance::Initial))
        }
    }
}

/// Variance of the control-variate estimator relative to the plain one.
///
/// `n_replicates` batches of `L` base samples are drawn; each feeds both the
/// plain estimate and its adjusted counterpart (paired design). Variances use
/// the `1/n` normalisation. `batch_size = None` uses the full training set,
/// otherwise every replicate draws its own minibatch.
#[allow(clippy::too_many_arguments)]
pub fn variance_ratio<G: Rng + ?Sized>(
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    estimator: &CvEstimator,
    num_samples: usize,
    n_replicates: usize,
    batch_size: Option<usize>,
    rng: &mut G,
) -> Result<VarianceRatioReport> {
    if num_samples == 0 || n_replicates < 2 {
        return Err(Error::Arity(
            "variance ratio needs L ≥ 1 and at least two replicates".into(),
        ));
    }
    let d = family.d_lambda();
    let mut plain = Array2::zeros((n_replicates, d));
    let mut adjusted = Array2::zeros((n_replicates, d));
    for j in 0..n_replicates {
        let batch = match batch_size {
            Some(b) => Minibatch::sample(model.train(), b, rng)?,
            None => model.full_batch(),
        };
        let eps = family.sample_base(num_samples, rng);
        let grads = pathwise_grad_batch(model, family, lam, &eps, &batch)?;
        plain.row_mut(j).assign(&grads.mean());
        adjusted
            .row_mut(j)
            .assign(&adjusted_estimate(estimator, family, lam, &eps, &grads, rng)?);
    }
    let var_nocv = replicate_variance(&plain);
    let var_cv = replicate_variance(&adjusted);
    Ok(VarianceRatioReport {
        var_nocv,
        var_cv,
        ratio: var_cv / var_nocv,
        n_replicates,
        iteration: None,
    })
}

/// `Σ_i log((1/S) Σ_s exp(ll[s, i]))` for an `S × N` log-likelihood matrix.
pub fn lppd_from_loglik(loglik: &Array2<f64>) -> f64 {
    let s = loglik.nrows() as f64;
    loglik
        .columns()
        .into_iter()
        .map(|col| {
            let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - s.ln()
        })
        .sum()
}

/// Log pointwise predictive density of the test split under `n_z` draws from q.
pub fn test_lppd<G: Rng + ?Sized>(
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    n_z: usize,
    rng: &mut G,
) -> Result<f64> {
    let test = model.test();
    if test.is_empty() {
        return Err(Error::Capability(format!("{} has no test split", model.name())));
    }
    if n_z == 0 {
        return Err(Error::Arity("test lppd needs at least one posterior sample".into()));
    }
    let eps = family.sample_base(n_z, rng);
    let rows: Vec<Vec<f64>> = (0..n_z)
        .into_par_iter()
        .map(|s| {
            let z = family.transform(lam, eps.row(s))?;
            test.iter().map(|&i| model.log_lik_point(&z, i)).collect()
        })
        .collect::<Result<_>>()?;
    let loglik = Array2::from_shape_fn((n_z, test.len()), |(s, i)| rows[s][i]);
    Ok(lppd_from_loglik(&loglik))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cv::{solve_beta_ols, QuadParams};
    use crate::families::{neg_half_ln_2pi, FamilyKind};
    use crate::models::{ConjugateGaussian, QuadraticTarget};
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn posterior_lam(m: &ConjugateGaussian) -> Vec<f64> {
        let (mean, var) = m.posterior();
        vec![mean, 0.5 * var.ln()]
    }

    #[test]
    fn elbo_at_posterior_is_log_evidence() {
        let m = ConjugateGaussian::from_observations(&[0.0]);
        let lam = posterior_lam(&m);
        let model = Model::Conjugate(m.clone());
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let est = eval_elbo(&model, &spec, &lam, ELBO_SAMPLES, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let target = -0.5 * (4.0 * std::f64::consts::PI).ln();
        // q equals the posterior, so every sample equals the evidence
        assert!((est.value - target).abs() <= 3.0 * est.std_error + 1e-10);
        assert!((m.log_evidence() - target).abs() < 1e-12);
    }

    #[test]
    fn elbo_is_zero_at_prior_without_data() {
        let model = Model::Conjugate(ConjugateGaussian::from_observations(&[]));
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let est = eval_elbo(&model, &spec, &[0.0, 0.0], 100, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(est.value.abs() < 1e-12);
    }

    #[test]
    fn elbo_bounded_by_evidence() {
        let m = ConjugateGaussian::from_observations(&[0.3, 1.2, -0.4]);
        let model = Model::Conjugate(m.clone());
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for lam in [[0.0, 0.0], [1.0, -1.0], [-0.5, 0.5]] {
            let est = eval_elbo(&model, &spec, &lam, ELBO_SAMPLES, &mut rng).unwrap();
            assert!(est.value <= m.log_evidence() + 3.0 * est.std_error);
        }
    }

    #[test]
    fn nocv_ratio_is_exactly_one() {
        let model = Model::Conjugate(ConjugateGaussian::from_observations(&[0.5, -0.2]));
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = variance_ratio(&model, &spec, &[0.1, -0.3], &CvEstimator::NoCv, 10, 100, None, &mut rng).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.var_cv, r.var_nocv);
        let zero_gd = CvEstimator::ZvcvGd {
            order: 1,
            lr: 1e-3,
            steps: 0,
        };
        let r = variance_ratio(&model, &spec, &[0.1, -0.3], &zero_gd, 10, 20, None, &mut rng).unwrap();
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn exact_quadcv_ratio_vanishes() {
        let a = arr2(&[[1.5, 0.3], [0.3, 0.8]]);
        let t = QuadraticTarget::new(vec![0.2, -0.1], vec![1.0, 0.5], a);
        let model = Model::Quadratic(t.clone());
        let spec = FamilySpec::new(FamilyKind::MeanField, 2);
        let lam = [0.3, -0.2, -0.1, 0.2];
        let est = CvEstimator::QuadCv {
            params: QuadParams::exact(&t, &lam[..2]),
            beta: 1.0,
            mode: ExpectationMode::ClosedForm,
        };
        let r = variance_ratio(
            &model,
            &spec,
            &lam,
            &est,
            10,
            100,
            None,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert!(r.ratio <= 1e-10, "{}", r.ratio);
    }

    #[test]
    fn affine_integrand_with_oracle_beta() {
        // a linear log joint makes every gradient row affine in ε
        let t = QuadraticTarget::new(vec![0.7, -1.3], vec![0.0, 0.0], Array2::zeros((2, 2)));
        let model = Model::Quadratic(t);
        let spec = FamilySpec::new(FamilyKind::MeanField, 2);
        let lam = [0.3, -0.2, -0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = spec.sample_base(50, &mut rng);
        let grads = pathwise_grad_batch(&model, &spec, &lam, &eps, &model.full_batch()).unwrap();
        let cv = CvMatrix::Zvcv {
            order: 1,
            features: zvcv_feature_batch(&eps, 1).unwrap(),
        };
        let beta = solve_beta_ols(&grads, &cv, 0.0).unwrap();
        let est = CvEstimator::ZvcvFixed { order: 1, beta };
        let r = variance_ratio(&model, &spec, &lam, &est, 10, 100, None, &mut rng).unwrap();
        assert!(r.ratio <= 1e-10, "{}", r.ratio);
    }

    #[test]
    fn lppd_examples() {
        // |Z| = 1, Gaussian likelihood with zero residual and unit variance
        let ll = arr2(&[[neg_half_ln_2pi(), neg_half_ln_2pi()]]);
        assert!((lppd_from_loglik(&ll) - 2.0 * neg_half_ln_2pi()).abs() < 1e-15);
        let dup = arr2(&[[-1.3, -0.2], [-1.3, -0.2], [-1.3, -0.2]]);
        assert!((lppd_from_loglik(&dup) - lppd_from_loglik(&arr2(&[[-1.3, -0.2]]))).abs() < 1e-12);
        let x = arr2(&[[-800.0, -2.0], [-801.0, -3.0]]);
        let shift = 123.4;
        let shifted = x.mapv(|v| v - shift);
        assert!((lppd_from_loglik(&shifted) + 2.0 * shift - lppd_from_loglik(&x)).abs() < 1e-12);
        assert!(lppd_from_loglik(&x).is_finite());
    }

    #[test]
    fn lppd_matches_posterior_predictive() {
        let xs = [0.4, -0.3, 1.1, 0.8, 0.2, -0.5];
        let mut data = crate::models::Dataset::new(Array2::zeros((6, 0)), Array1::from(xs.to_vec()), "t").unwrap();
        data.train = vec![0, 1, 2, 3];
        data.test = vec![4, 5];
        let m = ConjugateGaussian::new(Arc::new(data), 1.0, 1.0);
        let lam = posterior_lam(&m);
        let model = Model::Conjugate(m.clone());
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let exact: f64 = [0.2, -0.5].iter().map(|&x| m.log_predictive(x)).sum();
        let reps: Vec<f64> = (0..20)
            .map(|k| test_lppd(&model, &spec, &lam, LPPD_SAMPLES, &mut ChaCha8Rng::seed_from_u64(k)).unwrap())
            .collect();
        let mean = reps.iter().sum::<f64>() / 20.0;
        let sd = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!((mean - exact).abs() <= 3.0 * sd / 20f64.sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn lppd_needs_test_split() {
        let model = Model::Conjugate(ConjugateGaussian::from_observations(&[0.1]));
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let err = test_lppd(&model, &spec, &[0.0, 0.0], 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }
}
