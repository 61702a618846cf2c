//! Target log-joints and the datasets they are bound to.
//!
//! Every model exposes `log_joint(z, batch) = (N/B) Σ_{i∈batch} log p(x_i | z) + log p(z)`
//! generically over [`Real`], so the same code evaluates in `f64` and on the
//! autodiff tape.

mod data;
pub mod synth;

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{self, Real, EXP_CLAMP};
use crate::error::{Error, Result};
use crate::families::{neg_half_ln_2pi, FamilySpec};

pub use data::{
    load_frisk_csv, load_redwine_csv, parse_libsvm, Dataset, DatasetMeta, Standardization, DEFAULT_ARREST_SCALE,
    FRISK_ETHNICITIES, FRISK_HEADER, FRISK_PRECINCTS, FRISK_ROWS, REDWINE_FEATURES,
};

/// Prior standard deviation of the logistic weights and Poisson hyperparameters.
pub const PRIOR_SCALE: f64 = 10.0;
pub const BNN_HIDDEN: usize = 50;
/// Minibatch size used by the BNN experiments.
pub const BNN_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Toy,
    LogisticA1a,
    HierPoissonFrisk,
    BnnRedwine,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Toy => "toy",
            ModelKind::LogisticA1a => "logistic_a1a",
            ModelKind::HierPoissonFrisk => "hier_poisson_frisk",
            ModelKind::BnnRedwine => "bnn_redwine",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(ModelKind::Toy),
            "logistic_a1a" => Ok(ModelKind::LogisticA1a),
            "hier_poisson_frisk" => Ok(ModelKind::HierPoissonFrisk),
            "bnn_redwine" => Ok(ModelKind::BnnRedwine),
            other => Err(Error::config("model", format!("unknown model `{other}`"))),
        }
    }
}

/// Index set of a minibatch with its likelihood scale `N_train / B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    indices: Vec<usize>,
    scale: f64,
}

impl Minibatch {
    /// The whole training split; scale 1.
    pub fn full(train: &[usize]) -> Self {
        Minibatch {
            indices: train.to_vec(),
            scale: 1.0,
        }
    }

    /// `b` distinct training rows drawn uniformly without replacement.
    pub fn sample<G: Rng + ?Sized>(train: &[usize], b: usize, rng: &mut G) -> Result<Self> {
        if b == 0 || b > train.len() {
            return Err(Error::config(
                "batch_size",
                format!("batch size {b} must lie in 1..={}", train.len()),
            ));
        }
        let indices = index::sample(rng, train.len(), b)
            .into_iter()
            .map(|k| train[k])
            .collect();
        Ok(Minibatch {
            indices,
            scale: train.len() as f64 / b as f64,
        })
    }

    /// An explicit subset of the training split.
    pub fn from_indices(indices: Vec<usize>, train: &[usize]) -> Result<Self> {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::Arity("minibatch indices must be unique".into()));
        }
        if indices.iter().any(|i| train.binary_search(i).is_err()) {
            return Err(Error::Arity("minibatch indices must lie in the training split".into()));
        }
        let scale = if indices.is_empty() {
            1.0
        } else {
            train.len() as f64 / indices.len() as f64
        };
        Ok(Minibatch { indices, scale })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn normal_log_pdf<R: Real>(x: R, scale: f64) -> R {
    x.square() * (-0.5 / (scale * scale)) + (neg_half_ln_2pi() - scale.ln())
}

/// Bayesian logistic regression: `z = [w0, w]`, `w0, w ~ N(0, 10²)`.
#[derive(Debug, Clone)]
pub struct Logistic {
    data: Arc<Dataset>,
}

impl Logistic {
    pub fn new(data: Arc<Dataset>) -> Self {
        Logistic { data }
    }

    pub fn d_z(&self) -> usize {
        self.data.n_features() + 1
    }

    fn log_prior<R: Real>(&self, z: &[R]) -> R {
        let zero = z[0].constant(0.0);
        let sq = R::affine(zero, z, z);
        sq * (-0.5 / (PRIOR_SCALE * PRIOR_SCALE)) + (neg_half_ln_2pi() - PRIOR_SCALE.ln()) * z.len() as f64
    }

    fn log_lik_point<R: Real>(&self, z: &[R], i: usize) -> R {
        let eta = R::affine_const(z[0], &z[1..], self.data.row(i));
        if self.data.targets[i] > 0.5 {
            -(-eta).softplus()
        } else {
            -eta.softplus()
        }
    }
}

/// Hierarchical Poisson regression on the frisk table.
///
/// `log rate_ep = μ + α_e + β_p + log N_ep`, with `α_e ~ N(0, σ_α²)` for all but
/// the last (reference) ethnicity, `β_p ~ N(0, σ_β²)`, and `μ, log σ_α, log σ_β ~ N(0, 10²)`.
/// Layout: `[α (E−1), β (P), μ, log σ_α, log σ_β]`.
#[derive(Debug, Clone)]
pub struct HierPoisson {
    data: Arc<Dataset>,
    n_alpha: usize,
    n_beta: usize,
    rows: Vec<PoissonRow>,
}

#[derive(Debug, Clone, Copy)]
struct PoissonRow {
    eth: usize,
    precinct: usize,
    log_exposure: f64,
    y: f64,
    ln_y_factorial: f64,
}

impl HierPoisson {
    pub fn new(data: Arc<Dataset>) -> Result<Self> {
        if data.n_features() != 3 {
            return Err(Error::Schema(
                "poisson model needs [eth, precinct, exposure] features".into(),
            ));
        }
        let rows: Vec<PoissonRow> = (0..data.len())
            .map(|i| {
                let r = data.row(i);
                let y = data.targets[i];
                PoissonRow {
                    eth: r[0] as usize,
                    precinct: r[1] as usize,
                    log_exposure: r[2].ln(),
                    y,
                    ln_y_factorial: ln_gamma(y + 1.0),
                }
            })
            .collect();
        let n_eth = rows.iter().map(|r| r.eth).max().unwrap_or(0) + 1;
        let n_beta = rows.iter().map(|r| r.precinct).max().unwrap_or(0) + 1;
        Ok(HierPoisson {
            data,
            n_alpha: n_eth - 1,
            n_beta,
            rows,
        })
    }

    pub fn d_z(&self) -> usize {
        self.n_alpha + self.n_beta + 3
    }

    /// Index of `μ` in `z`; `log σ_α` and `log σ_β` follow.
    pub fn mu_index(&self) -> usize {
        self.n_alpha + self.n_beta
    }

    /// `log rate` for row `i`, before the overflow check.
    pub fn log_rate<R: Real>(&self, z: &[R], i: usize) -> R {
        let row = self.rows[i];
        let mut eta = z[self.mu_index()] + z[self.n_alpha + row.precinct];
        if row.eth < self.n_alpha {
            eta = eta + z[row.eth];
        }
        eta + row.log_exposure
    }

    fn log_prior<R: Real>(&self, z: &[R]) -> R {
        let zero = z[0].constant(0.0);
        let m = self.mu_index();
        let (mu, log_sa, log_sb) = (z[m], z[m + 1], z[m + 2]);
        let mut lp =
            normal_log_pdf(mu, PRIOR_SCALE) + normal_log_pdf(log_sa, PRIOR_SCALE) + normal_log_pdf(log_sb, PRIOR_SCALE);
        for (block, log_s) in [(&z[..self.n_alpha], log_sa), (&z[self.n_alpha..m], log_sb)] {
            if block.is_empty() {
                continue;
            }
            let k = block.len() as f64;
            let sq = R::affine(zero, block, block);
            lp = lp - sq * (log_s * -2.0).exp() * 0.5 - log_s * k + neg_half_ln_2pi() * k;
        }
        lp
    }

    fn log_lik_point<R: Real>(&self, z: &[R], i: usize) -> Result<R> {
        let eta = self.log_rate(z, i);
        if !(eta.value() <= EXP_CLAMP) {
            return Err(Error::NumericDomain(format!(
                "poisson rate: log rate {} at row {i} overflows",
                eta.value()
            )));
        }
        let row = self.rows[i];
        Ok(eta * row.y - eta.exp() - row.ln_y_factorial)
    }
}

/// One-hidden-layer ReLU regression network with Gaussian noise.
///
/// Layout: `[log α², log τ², W1 (H×p, row-major), b1 (H), W2 (H), b2]`;
/// weights `~ N(0, α²)`, `y ~ N(net(x), τ²)`; `log α²` and `log τ²` carry
/// improper flat priors that contribute 0.
#[derive(Debug, Clone)]
pub struct Bnn {
    data: Arc<Dataset>,
    hidden: usize,
}

impl Bnn {
    pub fn new(data: Arc<Dataset>, hidden: usize) -> Self {
        Bnn { data, hidden }
    }

    pub fn n_inputs(&self) -> usize {
        self.data.n_features()
    }

    pub fn n_weights(&self) -> usize {
        (self.n_inputs() + 1) * self.hidden + self.hidden + 1
    }

    pub fn d_z(&self) -> usize {
        2 + self.n_weights()
    }

    /// Network output for row `i`.
    pub fn predict<R: Real>(&self, z: &[R], i: usize) -> R {
        let (p, h) = (self.n_inputs(), self.hidden);
        let w1 = &z[2..2 + h * p];
        let b1 = &z[2 + h * p..2 + h * p + h];
        let w2 = &z[2 + h * p + h..2 + h * p + 2 * h];
        let b2 = z[2 + h * p + 2 * h];
        let x = self.data.row(i);
        let hidden: Vec<R> = (0..h)
            .map(|j| R::affine_const(b1[j], &w1[j * p..(j + 1) * p], x).relu())
            .collect();
        R::affine(b2, w2, &hidden)
    }

    fn log_prior<R: Real>(&self, z: &[R]) -> R {
        let zero = z[0].constant(0.0);
        let w = &z[2..];
        let n = w.len() as f64;
        let log_alpha2 = z[0];
        let sq = R::affine(zero, w, w);
        -(sq * (-log_alpha2).exp() * 0.5) - log_alpha2 * (0.5 * n) + neg_half_ln_2pi() * n
    }

    fn log_lik_point<R: Real>(&self, z: &[R], i: usize) -> R {
        let log_tau2 = z[1];
        let resid = self.predict(z, i) - self.data.targets[i];
        -(resid.square() * (-log_tau2).exp() * 0.5) - log_tau2 * 0.5 + neg_half_ln_2pi()
    }
}

/// One-dimensional conjugate model: `z ~ N(0, prior_var)`, `x_i | z ~ N(z, noise_var)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    data: Arc<Dataset>,
    prior_var: f64,
    noise_var: f64,
}

impl ConjugateGaussian {
    pub fn new(data: Arc<Dataset>, prior_var: f64, noise_var: f64) -> Self {
        ConjugateGaussian {
            data,
            prior_var,
            noise_var,
        }
    }

    /// Model with the given observations, unit prior and noise variances.
    pub fn from_observations(xs: &[f64]) -> Self {
        let features = Array2::zeros((xs.len(), 0));
        let data = Dataset::new(features, xs.to_vec().into(), "observations").expect("finite observations");
        Self::new(Arc::new(data), 1.0, 1.0)
    }

    /// Exact posterior mean and variance given the training split.
    pub fn posterior(&self) -> (f64, f64) {
        let n = self.data.train.len() as f64;
        let sum: f64 = self.data.train.iter().map(|&i| self.data.targets[i]).sum();
        let precision = 1.0 / self.prior_var + n / self.noise_var;
        (sum / self.noise_var / precision, 1.0 / precision)
    }

    /// Exact log marginal likelihood of the training split.
    pub fn log_evidence(&self) -> f64 {
        let xs: Vec<f64> = self.data.train.iter().map(|&i| self.data.targets[i]).collect();
        let n = xs.len() as f64;
        let (s2, v) = (self.noise_var, self.prior_var);
        let sum: f64 = xs.iter().sum();
        let sum_sq: f64 = xs.iter().map(|x| x * x).sum();
        // x ~ N(0, s2 I + v 11ᵀ)
        let det = s2.powf(n - 1.0) * (s2 + n * v);
        let quad = sum_sq / s2 - v * sum * sum / (s2 * (s2 + n * v));
        -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
    }

    /// Posterior predictive log density of a new observation.
    pub fn log_predictive(&self, x: f64) -> f64 {
        let (m, v) = self.posterior();
        let var = v + self.noise_var;
        -0.5 * (x - m).powi(2) / var - 0.5 * var.ln() + neg_half_ln_2pi()
    }

    fn log_prior<R: Real>(&self, z: &[R]) -> R {
        normal_log_pdf(z[0], self.prior_var.sqrt())
    }

    fn log_lik_point<R: Real>(&self, z: &[R], i: usize) -> R {
        normal_log_pdf(z[0] - self.data.targets[i], self.noise_var.sqrt())
    }
}

/// `f(z) = linᵀz − ½ (z − m)ᵀ A (z − m)` with no data; exercises exact quadratic
/// control variates.
#[derive(Debug, Clone)]
pub struct QuadraticTarget {
    pub linear: Vec<f64>,
    pub mean: Vec<f64>,
    pub precision: Array2<f64>,
    diagonal: bool,
    data: Arc<Dataset>,
}

impl QuadraticTarget {
    pub fn new(linear: Vec<f64>, mean: Vec<f64>, precision: Array2<f64>) -> Self {
        let d = mean.len();
        assert_eq!(linear.len(), d);
        assert_eq!(precision.dim(), (d, d));
        let diagonal = precision.indexed_iter().all(|((i, j), v)| i == j || *v == 0.0);
        let data = Dataset::new(Array2::zeros((0, 0)), Vec::new().into(), "none").unwrap();
        QuadraticTarget {
            linear,
            mean,
            precision,
            diagonal,
            data: Arc::new(data),
        }
    }

    /// `∇f(z) = lin − A (z − m)`.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        (0..d)
            .map(|i| {
                self.linear[i]
                    - (0..d)
                        .map(|j| self.precision[[i, j]] * (z[j] - self.mean[j]))
                        .sum::<f64>()
            })
            .collect()
    }

    fn log_prior<R: Real>(&self, z: &[R]) -> R {
        let zero = z[0].constant(0.0);
        let diff: Vec<R> = z.iter().zip(&self.mean).map(|(&zi, &m)| zi - m).collect();
        let quad = if self.diagonal {
            let sq: Vec<R> = diff.iter().map(|d| d.square()).collect();
            let diag: Vec<f64> = (0..diff.len()).map(|i| self.precision[[i, i]]).collect();
            R::affine_const(zero, &sq, &diag)
        } else {
            let ad: Vec<R> = self
                .precision
                .rows()
                .into_iter()
                .map(|row| R::affine_const(zero, &diff, row.as_slice().unwrap()))
                .collect();
            R::affine(zero, &diff, &ad)
        };
        R::affine_const(zero, z, &self.linear) - quad * 0.5
    }
}

/// A target density bound to its data.
#[derive(Debug, Clone)]
pub enum Model {
    Logistic(Logistic),
    HierPoisson(HierPoisson),
    Bnn(Bnn),
    Conjugate(ConjugateGaussian),
    Quadratic(QuadraticTarget),
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Logistic(_) => "logistic",
            Model::HierPoisson(_) => "hier_poisson",
            Model::Bnn(_) => "bnn",
            Model::Conjugate(_) => "conjugate_gaussian",
            Model::Quadratic(_) => "quadratic",
        }
    }

    pub fn d_z(&self) -> usize {
        match self {
            Model::Logistic(m) => m.d_z(),
            Model::HierPoisson(m) => m.d_z(),
            Model::Bnn(m) => m.d_z(),
            Model::Conjugate(_) => 1,
            Model::Quadratic(m) => m.mean.len(),
        }
    }

    pub fn data(&self) -> &Dataset {
        match self {
            Model::Logistic(m) => &m.data,
            Model::HierPoisson(m) => &m.data,
            Model::Bnn(m) => &m.data,
            Model::Conjugate(m) => &m.data,
            Model::Quadratic(m) => &m.data,
        }
    }

    pub fn train(&self) -> &[usize] {
        &self.data().train
    }

    pub fn test(&self) -> &[usize] {
        &self.data().test
    }

    pub fn full_batch(&self) -> Minibatch {
        Minibatch::full(self.train())
    }

    pub fn log_prior<R: Real>(&self, z: &[R]) -> R {
        match self {
            Model::Logistic(m) => m.log_prior(z),
            Model::HierPoisson(m) => m.log_prior(z),
            Model::Bnn(m) => m.log_prior(z),
            Model::Conjugate(m) => m.log_prior(z),
            Model::Quadratic(m) => m.log_prior(z),
        }
    }

    /// `log p(x_i | z)` for any row of the dataset, train or test.
    pub fn log_lik_point<R: Real>(&self, z: &[R], i: usize) -> Result<R> {
        match self {
            Model::Logistic(m) => Ok(m.log_lik_point(z, i)),
            Model::HierPoisson(m) => m.log_lik_point(z, i),
            Model::Bnn(m) => Ok(m.log_lik_point(z, i)),
            Model::Conjugate(m) => Ok(m.log_lik_point(z, i)),
            Model::Quadratic(_) => Err(Error::Capability("quadratic target has no data".into())),
        }
    }

    /// `(N/B) Σ_{i∈batch} log p(x_i | z) + log p(z)`.
    pub fn log_joint<R: Real>(&self, z: &[R], batch: &Minibatch) -> Result<R> {
        assert_eq!(z.len(), self.d_z(), "latent length mismatch");
        let zero = z[0].constant(0.0);
        let terms = batch
            .indices()
            .iter()
            .map(|&i| self.log_lik_point(z, i))
            .collect::<Result<Vec<R>>>()?;
        let lik = R::sum(zero, &terms);
        let out = lik * batch.scale() + self.log_prior(z);
        if !out.value().is_finite() {
            return Err(Error::NumericDomain(format!("{} log joint is not finite", self.name())));
        }
        Ok(out)
    }

    /// Value and gradient of the log joint.
    pub fn grad_log_joint(&self, z: &[f64], batch: &Minibatch) -> Result<(f64, Vec<f64>)> {
        autodiff::grad(z, |_, zv| self.log_joint(zv, batch))
    }
}

/// `r(T(ε;λ); λ) = log_joint(T(ε;λ)) − log q_λ(T(ε;λ))`.
pub fn integrand_r<R: Real>(
    model: &Model,
    family: &FamilySpec,
    lam: &[R],
    eps: &[f64],
    batch: &Minibatch,
) -> Result<R> {
    let (z, log_q) = family.sample_log_density(lam, eps);
    Ok(model.log_joint(&z, batch)? - log_q)
}
