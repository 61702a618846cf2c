//! Quadratic-approximation control variates.
//!
//! `f̃(z) = bᵀ(z − z₀) + ½ (z − z₀)ᵀ B (z − z₀)` approximates the log joint and
//! `c(ε) = E[∇_λ f̃(T(ε;λ))] − ∇_λ f̃(T(ε;λ))`.
//!
//! For the Gaussian families the expectation has a closed form. With
//! `z = μ + F u + σ ⊙ ε`:
//!
//! - `E ∂f̃/∂μ = b + B (μ − z₀)`
//! - `E ∂f̃/∂log σ_j = B_jj σ_j²`
//! - `E ∂f̃/∂F = B F`

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CvMatrix;
use crate::autodiff::{self, Real};
use crate::error::{Error, Result};
use crate::families::{EpsBatch, FamilyKind, FamilySpec, LOW_RANK};
use crate::models::{Minibatch, Model, QuadraticTarget};

/// Size of the independent batches used for empirical expectations and `z₀`.
pub const EXPECTATION_SAMPLES: usize = 100;
/// Largest latent dimension for which a full `B` is allowed.
pub const FULL_CURVATURE_MAX_DZ: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    ClosedForm,
    Empirical,
}

/// How `E[∇_λ f̃]` and `z₀` are obtained.
#[derive(Debug, Clone, Copy)]
pub enum Expectation<'a> {
    ClosedForm,
    /// Average over an independent base batch.
    Empirical(&'a EpsBatch),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    Diagonal(Array1<f64>),
    Full(Array2<f64>),
}

/// Parameters `v = {b, B}` of the quadratic and its location `z₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadParams {
    pub b: Array1<f64>,
    pub curvature: Curvature,
    pub z0: Array1<f64>,
}

impl QuadParams {
    /// `b = 0`, `B = 0`, `z₀ = 0`.
    pub fn zeros(d_z: usize, full: bool) -> Result<Self> {
        let curvature = if full {
            if d_z > FULL_CURVATURE_MAX_DZ {
                return Err(Error::Capability(format!(
                    "full quadratic curvature is limited to d_z ≤ {FULL_CURVATURE_MAX_DZ}, got {d_z}"
                )));
            }
            Curvature::Full(Array2::zeros((d_z, d_z)))
        } else {
            Curvature::Diagonal(Array1::zeros(d_z))
        };
        Ok(QuadParams {
            b: Array1::zeros(d_z),
            curvature,
            z0: Array1::zeros(d_z),
        })
    }

    /// The exact expansion of a quadratic target around `z0`.
    pub fn exact(target: &QuadraticTarget, z0: &[f64]) -> Self {
        QuadParams {
            b: Array1::from(target.gradient(z0)),
            curvature: Curvature::Full(-&target.precision),
            z0: Array1::from(z0.to_vec()),
        }
    }

    pub fn d_z(&self) -> usize {
        self.b.len()
    }

    pub fn is_full(&self) -> bool {
        matches!(self.curvature, Curvature::Full(_))
    }

    pub fn with_location(mut self, z0: Array1<f64>) -> Self {
        self.z0 = z0;
        self
    }

    pub fn diag(&self) -> Array1<f64> {
        match &self.curvature {
            Curvature::Diagonal(d) => d.clone(),
            Curvature::Full(m) => m.diag().to_owned(),
        }
    }

    fn apply_curvature(&self, d: &Array1<f64>) -> Array1<f64> {
        match &self.curvature {
            Curvature::Diagonal(diag) => diag * d,
            Curvature::Full(m) => m.dot(d),
        }
    }

    /// `∇f̃(z) = b + B (z − z₀)`.
    pub fn gradient(&self, z: &[f64]) -> Array1<f64> {
        let d = &Array1::from(z.to_vec()) - &self.z0;
        &self.b + &self.apply_curvature(&d)
    }

    /// `f̃(z)` for any scalar type.
    pub fn value<R: Real>(&self, z: &[R]) -> R {
        let zero = z[0].constant(0.0);
        let d: Vec<R> = z.iter().zip(self.z0.iter()).map(|(&zi, &c)| zi - c).collect();
        let lin = R::affine_const(zero, &d, self.b.as_slice().unwrap());
        let quad = match &self.curvature {
            Curvature::Diagonal(diag) => {
                let sq: Vec<R> = d.iter().map(|x| x.square()).collect();
                R::affine_const(zero, &sq, diag.as_slice().unwrap())
            }
            Curvature::Full(m) => {
                let bd: Vec<R> = m
                    .rows()
                    .into_iter()
                    .map(|row| R::affine_const(zero, &d, row.to_slice().unwrap()))
                    .collect();
                R::affine(zero, &d, &bd)
            }
        };
        lin + quad * 0.5
    }
}

fn check_independent(eps: &EpsBatch, other: &EpsBatch) -> Result<()> {
    if eps.source.is_some() && eps.source == other.source {
        return Err(Error::Arity(
            "expectation batch must be drawn independently of the estimator batch".into(),
        ));
    }
    Ok(())
}

fn surrogate_grads(params: &QuadParams, family: &FamilySpec, lam: &[f64], eps: &EpsBatch) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = (0..eps.len())
        .into_par_iter()
        .map(|l| autodiff::grad(lam, |_, lv| Ok(params.value(&family.push_forward(lv, eps.row(l))))).map(|(_, g)| g))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), lam.len()));
    for (l, g) in rows.into_iter().enumerate() {
        out.row_mut(l).assign(&Array1::from(g));
    }
    Ok(out)
}

fn closed_form_expectation(params: &QuadParams, family: &FamilySpec, lam: &[f64]) -> Result<Array1<f64>> {
    let d = family.d_z();
    if family.kind() == FamilyKind::RealNvp {
        return Err(Error::Capability(
            "closed-form QuadCV expectation needs a Gaussian family; real NVP has no closed-form mean and covariance"
                .into(),
        ));
    }
    let mu = Array1::from(lam[..d].to_vec());
    let mut out = Array1::zeros(family.d_lambda());
    let e_mu = &params.b + &params.apply_curvature(&(&mu - &params.z0));
    out.slice_mut(ndarray::s![..d]).assign(&e_mu);
    let diag = params.diag();
    for j in 0..d {
        out[d + j] = diag[j] * (2.0 * lam[d + j]).exp();
    }
    if family.kind() == FamilyKind::Rank5 {
        let f = family.factor(lam).expect("rank-5 factor");
        let bf = match &params.curvature {
            Curvature::Diagonal(diag) => &f * &diag.view().insert_axis(Axis(1)),
            Curvature::Full(m) => m.dot(&f),
        };
        let r = family.slice("factor").unwrap();
        debug_assert_eq!(r.len(), d * LOW_RANK);
        for (k, v) in r.zip(bf.iter()) {
            out[k] = *v;
        }
    }
    Ok(out)
}

/// `E[∇_λ f̃(T(ε;λ))]`, in closed form or averaged over an independent batch.
pub fn surrogate_expectation(
    params: &QuadParams,
    family: &FamilySpec,
    lam: &[f64],
    expectation: Expectation<'_>,
) -> Result<Array1<f64>> {
    match expectation {
        Expectation::ClosedForm => closed_form_expectation(params, family, lam),
        Expectation::Empirical(batch) => Ok(surrogate_grads(params, family, lam, batch)?
            .mean_axis(Axis(0))
            .expect("non-empty batch")),
    }
}

/// Per-sample QuadCV columns `c(ε_l)`.
pub fn quad_cv_batch(
    params: &QuadParams,
    family: &FamilySpec,
    lam: &[f64],
    eps: &EpsBatch,
    expectation: Expectation<'_>,
) -> Result<CvMatrix> {
    if let Expectation::Empirical(batch) = expectation {
        check_independent(eps, batch)?;
    }
    let expected = surrogate_expectation(params, family, lam, expectation)?;
    let grads = surrogate_grads(params, family, lam, eps)?;
    let columns = -(&grads - &expected);
    Ok(CvMatrix::Quad {
        columns,
        expectation: expected,
    })
}

/// `z₀ = E T(ε; λ)`: the mean parameter for Gaussian families, otherwise the
/// average transform of an independent batch.
pub fn estimate_location(family: &FamilySpec, lam: &[f64], expectation: Expectation<'_>) -> Result<Array1<f64>> {
    match expectation {
        Expectation::ClosedForm => family
            .mean_cov(lam)
            .map(|(mu, _)| mu)
            .ok_or_else(|| Error::Capability("closed-form location needs a Gaussian family".into())),
        Expectation::Empirical(batch) => {
            let mut sum = Array1::zeros(family.d_z());
            for l in 0..batch.len() {
                sum += &Array1::from(family.transform(lam, batch.row(l))?);
            }
            Ok(sum / batch.len() as f64)
        }
    }
}

/// Samples `z_l` and residuals `∇f(z_l) − ∇f̃(z_l)`.
fn residuals(
    params: &QuadParams,
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    eps: &EpsBatch,
    batch: &Minibatch,
) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
    (0..eps.len())
        .into_par_iter()
        .map(|l| {
            let z = family.transform(lam, eps.row(l))?;
            let (_, g) = model.grad_log_joint(&z, batch)?;
            let r = &Array1::from(g) - &params.gradient(&z);
            Ok((&Array1::from(z) - &params.z0, r))
        })
        .collect()
}

/// `(1/(2L)) Σ_l ‖∇f(z_l) − ∇f̃(z_l)‖²`.
pub fn quad_objective(
    params: &QuadParams,
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    eps: &EpsBatch,
    batch: &Minibatch,
) -> Result<f64> {
    let res = residuals(params, model, family, lam, eps, batch)?;
    Ok(res.iter().map(|(_, r)| r.dot(r)).sum::<f64>() / (2.0 * eps.len() as f64))
}

/// One gradient-descent step on [`quad_objective`] with respect to `b` and `B`.
/// Returns the updated parameters and the objective before the step. A full
/// `B` receives the symmetrised gradient, so it stays symmetric.
pub fn quad_update_v(
    params: &QuadParams,
    model: &Model,
    family: &FamilySpec,
    lam: &[f64],
    eps: &EpsBatch,
    batch: &Minibatch,
    lr: f64,
) -> Result<(QuadParams, f64)> {
    if !(lr >= 0.0) {
        return Err(Error::config("gamma_v", "gamma_v must be non-negative"));
    }
    let res = residuals(params, model, family, lam, eps, batch)?;
    let l = res.len() as f64;
    let objective = res.iter().map(|(_, r)| r.dot(r)).sum::<f64>() / (2.0 * l);
    let d = params.d_z();
    let mut grad_b = Array1::<f64>::zeros(d);
    for (_, r) in &res {
        grad_b -= r;
    }
    grad_b /= l;
    let mut next = params.clone();
    next.b.scaled_add(-lr, &grad_b);
    match &mut next.curvature {
        Curvature::Diagonal(diag) => {
            let mut g = Array1::<f64>::zeros(d);
            for (dz, r) in &res {
                g -= &(dz * r);
            }
            diag.scaled_add(-lr / l, &g);
        }
        Curvature::Full(m) => {
            let mut g = Array2::<f64>::zeros((d, d));
            for (dz, r) in &res {
                let outer = r.view().insert_axis(Axis(1)).dot(&dz.view().insert_axis(Axis(0)));
                g -= &outer;
            }
            let sym = (&g + &g.t()) * 0.5;
            m.scaled_add(-lr / l, &sym);
        }
    }
    Ok((next, objective))
}
