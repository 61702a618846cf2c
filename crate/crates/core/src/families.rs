//! Reparameterizable variational families `z = T(ε; λ)`.
//!
//! Parameter layouts (all slices of one flat λ):
//!
//! | family        | layout                                                        |
//! |---------------|---------------------------------------------------------------|
//! | `mean_field`  | `mu[d_z]`, `log_sigma[d_z]`                                   |
//! | `rank5`       | `mu[d_z]`, `log_sigma[d_z]`, `factor[d_z × 5]` (row-major)    |
//! | `real_nvp`    | per coupling layer: scale net then shift net; per net and per |
//! |               | dense layer: `weight[out × in]` (row-major) then `bias[out]`  |
//!
//! The rank-5 family draws a base vector of length `d_z + 5`: the first `d_z`
//! coordinates drive the diagonal term and the last five the factor term,
//! `z = μ + F u + σ ⊙ ε`.
//!
//! Real NVP uses two affine coupling layers. The first conditions on the even
//! coordinates and transforms the odd ones; the second swaps the roles. Each
//! scale and shift network maps the conditioning coordinates through dense
//! layers of widths 8, 16, 16 with ReLU, then a linear layer to the transformed
//! coordinates; the scale output passes through `tanh`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::rng::StreamId;

pub const LOW_RANK: usize = 5;
pub const NVP_HIDDEN: [usize; 3] = [8, 16, 16];
/// Standard deviation of the Gaussian-family initialization.
pub const GAUSSIAN_INIT_SCALE: f64 = 0.5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    #[serde(alias = "mean_field_gaussian")]
    MeanField,
    #[serde(alias = "rank5_gaussian")]
    Rank5,
    RealNvp,
}

impl FamilyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::MeanField => "mean_field",
            FamilyKind::Rank5 => "rank5",
            FamilyKind::RealNvp => "real_nvp",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_field" | "mean_field_gaussian" => Ok(FamilyKind::MeanField),
            "rank5" | "rank5_gaussian" => Ok(FamilyKind::Rank5),
            "real_nvp" => Ok(FamilyKind::RealNvp),
            other => Err(Error::config("family", format!("unknown family `{other}`"))),
        }
    }
}

/// A named slice of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSlice {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
struct Dense {
    n_in: usize,
    n_out: usize,
    weight: usize,
    bias: usize,
}

impl Dense {
    fn forward<R: Real>(&self, lam: &[R], x: &[R]) -> Vec<R> {
        (0..self.n_out)
            .map(|o| {
                let w = &lam[self.weight + o * self.n_in..self.weight + (o + 1) * self.n_in];
                R::affine(lam[self.bias + o], w, x)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    fn forward<R: Real>(&self, lam: &[R], x: &[R]) -> Vec<R> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(lam, &h);
            if i < last {
                h = h.into_iter().map(Real::relu).collect();
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
struct Coupling {
    cond: Vec<usize>,
    trans: Vec<usize>,
    scale: Mlp,
    shift: Mlp,
}

impl Coupling {
    fn scale_shift<R: Real>(&self, lam: &[R], x: &[R]) -> (Vec<R>, Vec<R>) {
        let xc: Vec<R> = self.cond.iter().map(|&i| x[i]).collect();
        let s = self.scale.forward(lam, &xc).into_iter().map(Real::tanh).collect();
        let t = self.shift.forward(lam, &xc);
        (s, t)
    }
}

/// Shape of a variational family bound to a latent dimension.
#[derive(Debug, Clone)]
pub struct FamilySpec {
    kind: FamilyKind,
    d_z: usize,
    d_lambda: usize,
    layout: Vec<LayoutSlice>,
    couplings: Vec<Coupling>,
}

/// Base samples, one row per gradient sample.
#[derive(Debug, Clone)]
pub struct EpsBatch {
    pub values: Array2<f64>,
    pub source: Option<StreamId>,
}

impl EpsBatch {
    pub fn new(values: Array2<f64>) -> Self {
        EpsBatch {
            values: values.as_standard_layout().into_owned(),
            source: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let d = self.dim();
        &self.values.as_slice().expect("standard layout")[l * d..(l + 1) * d]
    }
}

/// `n` i.i.d. draws from `N(0, I_dim)`.
pub fn sample_base<G: Rng + ?Sized>(dim: usize, n: usize, rng: &mut G) -> EpsBatch {
    assert!(n >= 1, "at least one base sample is required");
    let values = Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(rng));
    EpsBatch::new(values)
}

/// Flat variational parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams(Vec<f64>);

impl VariationalParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("variational parameters".into()));
        }
        Ok(VariationalParams(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn base_log_density<R: Real>(zero: R, eps: &[R]) -> R {
    let sq = R::affine(zero, eps, eps);
    sq * -0.5 - HALF_LN_2PI * eps.len() as f64
}

impl FamilySpec {
    pub fn new(kind: FamilyKind, d_z: usize) -> Self {
        assert!(d_z >= 1, "latent dimension must be positive");
        let mut layout = Vec::new();
        let mut couplings = Vec::new();
        let mut cursor = 0;
        let mut take = |name: String, len: usize, layout: &mut Vec<LayoutSlice>| {
            let range = cursor..cursor + len;
            cursor += len;
            layout.push(LayoutSlice {
                name,
                range: range.clone(),
            });
            range.start
        };
        match kind {
            FamilyKind::MeanField => {
                take("mu".into(), d_z, &mut layout);
                take("log_sigma".into(), d_z, &mut layout);
            }
            FamilyKind::Rank5 => {
                take("mu".into(), d_z, &mut layout);
                take("log_sigma".into(), d_z, &mut layout);
                take("factor".into(), d_z * LOW_RANK, &mut layout);
            }
            FamilyKind::RealNvp => {
                let even: Vec<usize> = (0..d_z).step_by(2).collect();
                let odd: Vec<usize> = (1..d_z).step_by(2).collect();
                for (c, (cond, trans)) in [(even.clone(), odd.clone()), (odd, even)].into_iter().enumerate() {
                    let mut nets = Vec::new();
                    for net in ["scale", "shift"] {
                        let widths: Vec<usize> = std::iter::once(cond.len())
                            .chain(NVP_HIDDEN)
                            .chain(std::iter::once(trans.len()))
                            .collect();
                        let layers = widths
                            .windows(2)
                            .enumerate()
                            .map(|(k, w)| {
                                let weight =
                                    take(format!("coupling{c}.{net}.layer{k}.weight"), w[0] * w[1], &mut layout);
                                let bias = take(format!("coupling{c}.{net}.layer{k}.bias"), w[1], &mut layout);
                                Dense {
                                    n_in: w[0],
                                    n_out: w[1],
                                    weight,
                                    bias,
                                }
                            })
                            .collect();
                        nets.push(Mlp { layers });
                    }
                    let shift = nets.pop().unwrap();
                    let scale = nets.pop().unwrap();
                    couplings.push(Coupling {
                        cond,
                        trans,
                        scale,
                        shift,
                    });
                }
            }
        }
        let d_lambda = layout.last().map_or(0, |s| s.range.end);
        FamilySpec {
            kind,
            d_z,
            d_lambda,
            layout,
            couplings,
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn d_lambda(&self) -> usize {
        self.d_lambda
    }

    pub fn layout(&self) -> &[LayoutSlice] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Option<Range<usize>> {
        self.layout.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    /// Dimension of the base distribution.
    pub fn base_dim(&self) -> usize {
        match self.kind {
            FamilyKind::Rank5 => self.d_z + LOW_RANK,
            _ => self.d_z,
        }
    }

    pub fn sample_base<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> EpsBatch {
        sample_base(self.base_dim(), n, rng)
    }

    /// Draw an initial λ: `N(0, 0.5²)` for the Gaussian families, Glorot-normal
    /// weights with zero biases for real NVP.
    pub fn init_params<G: Rng + ?Sized>(&self, rng: &mut G) -> VariationalParams {
        let mut lam = vec![0.0; self.d_lambda];
        match self.kind {
            FamilyKind::MeanField | FamilyKind::Rank5 => {
                let normal = Normal::new(0.0, GAUSSIAN_INIT_SCALE).unwrap();
                lam.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            FamilyKind::RealNvp => {
                for c in &self.couplings {
                    for net in [&c.scale, &c.shift] {
                        for layer in &net.layers {
                            let fan = (layer.n_in + layer.n_out) as f64;
                            let normal = Normal::new(0.0, (2.0 / fan).sqrt()).unwrap();
                            let n = layer.n_in * layer.n_out;
                            lam[layer.weight..layer.weight + n]
                                .iter_mut()
                                .for_each(|v| *v = normal.sample(rng));
                        }
                    }
                }
            }
        }
        VariationalParams(lam)
    }

    fn check_shapes(&self, lam_len: usize, eps_len: usize) {
        assert_eq!(lam_len, self.d_lambda, "parameter length mismatch");
        assert_eq!(eps_len, self.base_dim(), "base sample length mismatch");
    }

    /// `z = T(ε; λ)` together with `log q_λ(z)`.
    ///
    /// For mean-field and real NVP the density comes from the change of
    /// variables at ε; for rank-5 it is the Gaussian density of z.
    pub fn sample_log_density<R: Real>(&self, lam: &[R], eps: &[f64]) -> (Vec<R>, R) {
        self.check_shapes(lam.len(), eps.len());
        let zero = lam[0].constant(0.0);
        let d = self.d_z;
        match self.kind {
            FamilyKind::MeanField => {
                let z = (0..d).map(|j| lam[d + j].exp() * eps[j] + lam[j]).collect();
                let log_sigma = R::sum(zero, &lam[d..2 * d]);
                let base = -0.5 * eps.iter().map(|e| e * e).sum::<f64>() - HALF_LN_2PI * d as f64;
                (z, -log_sigma + base)
            }
            FamilyKind::Rank5 => {
                let z = self.rank5_forward(lam, eps);
                let lq = self.rank5_log_density(lam, &z);
                (z, lq)
            }
            FamilyKind::RealNvp => {
                let mut x: Vec<R> = eps.iter().map(|&e| zero.constant(e)).collect();
                let mut log_det = zero;
                for c in &self.couplings {
                    let (s, t) = c.scale_shift(lam, &x);
                    for (k, &i) in c.trans.iter().enumerate() {
                        x[i] = x[i] * s[k].exp() + t[k];
                    }
                    log_det = R::sum(log_det, &s);
                }
                let base = -0.5 * eps.iter().map(|e| e * e).sum::<f64>() - HALF_LN_2PI * d as f64;
                (x, -log_det + base)
            }
        }
    }

    /// `z = T(ε; λ)` for any scalar type.
    pub fn push_forward<R: Real>(&self, lam: &[R], eps: &[f64]) -> Vec<R> {
        match self.kind {
            FamilyKind::Rank5 => {
                self.check_shapes(lam.len(), eps.len());
                self.rank5_forward(lam, eps)
            }
            _ => self.sample_log_density(lam, eps).0,
        }
    }

    fn rank5_forward<R: Real>(&self, lam: &[R], eps: &[f64]) -> Vec<R> {
        let d = self.d_z;
        let f0 = 2 * d;
        let u = &eps[d..d + LOW_RANK];
        (0..d)
            .map(|j| {
                let fu = R::affine_const(lam[j], &lam[f0 + j * LOW_RANK..f0 + (j + 1) * LOW_RANK], u);
                fu + lam[d + j].exp() * eps[j]
            })
            .collect()
    }

    /// Log-density of `N(μ, F Fᵀ + diag σ²)` through the Woodbury identity and the
    /// matrix determinant lemma; only a 5×5 Cholesky factor is formed.
    fn rank5_log_density<R: Real>(&self, lam: &[R], z: &[R]) -> R {
        let d = self.d_z;
        let f0 = 2 * d;
        let zero = lam[0].constant(0.0);
        let inv_var: Vec<R> = (0..d).map(|j| (lam[d + j] * -2.0).exp()).collect();
        let resid: Vec<R> = (0..d).map(|j| z[j] - lam[j]).collect();
        let scaled: Vec<R> = (0..d).map(|j| resid[j] * inv_var[j]).collect();
        let q1 = R::affine(zero, &resid, &scaled);
        let col = |m: usize| -> Vec<R> { (0..d).map(|j| lam[f0 + j * LOW_RANK + m]).collect() };
        let cols: Vec<Vec<R>> = (0..LOW_RANK).map(col).collect();
        let a: Vec<R> = cols.iter().map(|c| R::affine(zero, c, &scaled)).collect();
        let weighted: Vec<Vec<R>> = cols
            .iter()
            .map(|c| c.iter().zip(&inv_var).map(|(&f, &w)| f * w).collect())
            .collect();
        let mut m = vec![vec![zero; LOW_RANK]; LOW_RANK];
        for i in 0..LOW_RANK {
            for j in 0..=i {
                let diag = if i == j { 1.0 } else { 0.0 };
                m[i][j] = R::affine(zero.constant(diag), &weighted[i], &cols[j]);
            }
        }
        let l = cholesky_lower(&m, zero);
        // forward substitution L w = a
        let mut w: Vec<R> = Vec::with_capacity(LOW_RANK);
        for i in 0..LOW_RANK {
            let acc = R::affine(zero, &l[i][..i], &w[..i]);
            w.push((a[i] - acc) / l[i][i]);
        }
        let q2 = R::affine(zero, &w, &w);
        let log_diag: Vec<R> = (0..LOW_RANK).map(|i| l[i][i].ln()).collect();
        let log_det = R::sum(zero, &lam[d..2 * d]) * 2.0 + R::sum(zero, &log_diag) * 2.0;
        (q1 - q2) * -0.5 - log_det * 0.5 - HALF_LN_2PI * d as f64
    }

    /// Invert the transform; available for mean-field and real NVP.
    pub fn pull_back<R: Real>(&self, lam: &[R], z: &[R]) -> Result<(Vec<R>, R)> {
        assert_eq!(lam.len(), self.d_lambda, "parameter length mismatch");
        assert_eq!(z.len(), self.d_z, "latent length mismatch");
        let zero = lam[0].constant(0.0);
        let d = self.d_z;
        match self.kind {
            FamilyKind::MeanField => {
                let eps = (0..d).map(|j| (z[j] - lam[j]) * (-lam[d + j]).exp()).collect();
                Ok((eps, R::sum(zero, &lam[d..2 * d])))
            }
            FamilyKind::Rank5 => Err(Error::Capability(
                "the rank-5 transform is not invertible (base dimension exceeds d_z)".into(),
            )),
            FamilyKind::RealNvp => {
                let mut x = z.to_vec();
                let mut log_det = zero;
                for c in self.couplings.iter().rev() {
                    let (s, t) = c.scale_shift(lam, &x);
                    for (k, &i) in c.trans.iter().enumerate() {
                        x[i] = (x[i] - t[k]) * (-s[k]).exp();
                    }
                    log_det = R::sum(log_det, &s);
                }
                Ok((x, log_det))
            }
        }
    }

    /// `log q_λ(z)` for any scalar type. Real NVP inverts the flow and
    /// subtracts the accumulated scale outputs.
    pub fn log_density_generic<R: Real>(&self, lam: &[R], z: &[R]) -> Result<R> {
        match self.kind {
            FamilyKind::Rank5 => Ok(self.rank5_log_density(lam, z)),
            _ => {
                let zero = lam[0].constant(0.0);
                let (eps, log_det) = self.pull_back(lam, z)?;
                Ok(base_log_density(zero, &eps) - log_det)
            }
        }
    }

    /// `T(ε; λ)` with a finiteness check.
    pub fn transform(&self, lam: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        let z = self.push_forward(lam, eps);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("{} transform", self.kind)));
        }
        Ok(z)
    }

    /// `log q_λ(z)` with a finiteness check.
    pub fn log_density(&self, lam: &[f64], z: &[f64]) -> Result<f64> {
        let v = self.log_density_generic(lam, z)?;
        if !v.is_finite() {
            return Err(Error::NumericDomain(format!("{} log density", self.kind)));
        }
        Ok(v)
    }

    /// Closed-form mean and covariance, when the family has them.
    pub fn mean_cov(&self, lam: &[f64]) -> Option<(Array1<f64>, Array2<f64>)> {
        let d = self.d_z;
        match self.kind {
            FamilyKind::RealNvp => None,
            FamilyKind::MeanField | FamilyKind::Rank5 => {
                let mu = Array1::from(lam[..d].to_vec());
                let mut cov = Array2::zeros((d, d));
                for j in 0..d {
                    cov[[j, j]] = (2.0 * lam[d + j]).exp();
                }
                if self.kind == FamilyKind::Rank5 {
                    let f = self.factor(lam).unwrap();
                    cov += &f.dot(&f.t());
                }
                Some((mu, cov))
            }
        }
    }

    /// The `d_z × 5` factor of the rank-5 family.
    pub fn factor(&self, lam: &[f64]) -> Option<Array2<f64>> {
        let r = self.slice("factor")?;
        Some(Array2::from_shape_vec((self.d_z, LOW_RANK), lam[r].to_vec()).unwrap())
    }
}

/// Lower Cholesky factor of the symmetric matrix whose lower triangle is `m`.
fn cholesky_lower<R: Real>(m: &[Vec<R>], zero: R) -> Vec<Vec<R>> {
    let n = m.len();
    let mut l = vec![vec![zero; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let dot = R::affine(zero, &l[i][..j], &l[j][..j]);
            let s = m[i][j] - dot;
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    l
}

/// `-½ log(2π)`, exposed for tests and models.
pub fn neg_half_ln_2pi() -> f64 {
    -0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(FamilySpec::new(FamilyKind::MeanField, 37).d_lambda(), 74);
        assert_eq!(FamilySpec::new(FamilyKind::Rank5, 37).d_lambda(), 7 * 37);
        let nvp = FamilySpec::new(FamilyKind::RealNvp, 4);
        let net = |i: usize, o: usize| i * 8 + 8 + 8 * 16 + 16 + 16 * 16 + 16 + 16 * o + o;
        assert_eq!(nvp.d_lambda(), 2 * (2 * net(2, 2)));
    }

    #[test]
    fn layouts_are_disjoint_and_cover() {
        for kind in [FamilyKind::MeanField, FamilyKind::Rank5, FamilyKind::RealNvp] {
            for d in [1, 2, 5, 37] {
                let spec = FamilySpec::new(kind, d);
                let mut cursor = 0;
                for s in spec.layout() {
                    assert_eq!(s.range.start, cursor, "{kind} d={d} {}", s.name);
                    cursor = s.range.end;
                }
                assert_eq!(cursor, spec.d_lambda());
            }
        }
    }

    #[test]
    fn odd_dimension_masks() {
        let spec = FamilySpec::new(FamilyKind::RealNvp, 37);
        assert_eq!(spec.couplings[0].cond.len(), 19);
        assert_eq!(spec.couplings[0].trans.len(), 18);
        assert_eq!(spec.couplings[1].cond, spec.couplings[0].trans);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_base(3, 2, &mut rng(11));
        let b = sample_base(3, 2, &mut rng(11));
        assert_eq!(a.values, b.values);
        assert_eq!(a.row(1), &[a.values[[1, 0]], a.values[[1, 1]], a.values[[1, 2]]]);
    }

    #[test]
    fn base_moments() {
        let n = 1_000_000;
        let eps = sample_base(1, n, &mut rng(5));
        let mean = eps.values.mean().unwrap();
        let var = eps.values.mapv(|v| (v - mean).powi(2)).sum() / (n as f64 - 1.0);
        assert!(mean.abs() <= 4e-3, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn mean_field_transform_example() {
        let spec = FamilySpec::new(FamilyKind::MeanField, 2);
        let z = spec.transform(&[1.0, 2.0, 0.0, 0.0], &[0.5, -0.5]).unwrap();
        assert_eq!(z, vec![1.5, 1.5]);
    }

    #[test]
    fn rank5_with_zero_factor_is_mean_field() {
        let mf = FamilySpec::new(FamilyKind::MeanField, 3);
        let r5 = FamilySpec::new(FamilyKind::Rank5, 3);
        let head = [0.3, -0.2, 1.0, 0.1, -0.4, 0.25];
        let mut lam = head.to_vec();
        lam.extend(std::iter::repeat(0.0).take(15));
        let eps = [0.7, -1.1, 0.2, 0.5, 0.5, 0.5, 0.5, 0.5];
        let z5 = r5.transform(&lam, &eps).unwrap();
        let zm = mf.transform(&head, &eps[..3]).unwrap();
        assert_eq!(z5, zm);
        let l5 = r5.log_density(&lam, &z5).unwrap();
        let lm = mf.log_density(&head, &zm).unwrap();
        assert!((l5 - lm).abs() < 1e-12);
    }

    #[test]
    fn zero_nvp_is_identity() {
        let spec = FamilySpec::new(FamilyKind::RealNvp, 5);
        let lam = vec![0.0; spec.d_lambda()];
        let eps = [0.3, -1.2, 2.0, 0.0, 0.7];
        assert_eq!(spec.transform(&lam, &eps).unwrap(), eps.to_vec());
        let mf = FamilySpec::new(FamilyKind::MeanField, 5);
        let ld = spec.log_density(&lam, &eps).unwrap();
        let base = mf.log_density(&[0.0; 10], &eps).unwrap();
        assert!((ld - base).abs() < 1e-14);
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let spec = FamilySpec::new(FamilyKind::MeanField, 2);
        let v = spec.log_density(&[0.0; 4], &[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        // composite Simpson on [μ - 10σ, μ + 10σ]
        let spec = FamilySpec::new(FamilyKind::MeanField, 1);
        let lam = [0.4, -0.3];
        let sigma = (-0.3f64).exp();
        let (a, b) = (0.4 - 10.0 * sigma, 0.4 + 10.0 * sigma);
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = a + h * i as f64;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * spec.log_density(&lam, &[x]).unwrap().exp();
        }
        let total = acc * h / 3.0;
        assert!((total - 1.0).abs() <= 1e-6, "{total}");
    }

    #[test]
    fn mean_cov_examples() {
        let mf = FamilySpec::new(FamilyKind::MeanField, 2);
        let (mu, cov) = mf.mean_cov(&[0.0; 4]).unwrap();
        assert_eq!(mu.to_vec(), vec![0.0, 0.0]);
        assert_eq!(cov, Array2::eye(2));

        let r5 = FamilySpec::new(FamilyKind::Rank5, 2);
        let mut lam = vec![0.0; r5.d_lambda()];
        let f = r5.slice("factor").unwrap();
        lam[f.start] = 1.0; // F[0,0]
        lam[f.start + LOW_RANK] = 2.0; // F[1,0]
        let (_, cov) = r5.mean_cov(&lam).unwrap();
        let expected = ndarray::arr2(&[[2.0, 2.0], [2.0, 5.0]]);
        assert_eq!(cov, expected);

        let nvp = FamilySpec::new(FamilyKind::RealNvp, 2);
        assert!(nvp.mean_cov(&vec![0.0; nvp.d_lambda()]).is_none());
    }

    fn empirical_moments(
        spec: &FamilySpec,
        lam: &[f64],
        n: usize,
        seed: u64,
    ) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
        let eps = spec.sample_base(n, &mut rng(seed));
        let d = spec.d_z();
        let mut zs = Array2::zeros((n, d));
        for l in 0..n {
            let z = spec.transform(lam, eps.row(l)).unwrap();
            zs.row_mut(l).assign(&Array1::from(z));
        }
        let mean = zs.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = &zs - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        (mean, cov, centered)
    }

    #[test]
    fn reparameterization_matches_closed_form_moments() {
        let n = 100_000;
        for kind in [FamilyKind::MeanField, FamilyKind::Rank5] {
            let spec = FamilySpec::new(kind, 3);
            let lam = spec.init_params(&mut rng(21)).into_inner();
            let (mu, cov) = spec.mean_cov(&lam).unwrap();
            let (emp_mu, emp_cov, centered) = empirical_moments(&spec, &lam, n, 22);
            for j in 0..3 {
                let se = (cov[[j, j]] / n as f64).sqrt();
                assert!((emp_mu[j] - mu[j]).abs() <= 3.0 * se, "{kind} mean {j}");
                for k in 0..3 {
                    let prod = centered.column(j).to_owned() * centered.column(k);
                    let sd = prod.std(1.0);
                    let se = sd / (n as f64).sqrt();
                    assert!((emp_cov[[j, k]] - cov[[j, k]]).abs() <= 3.0 * se, "{kind} cov {j}{k}");
                }
            }
        }
    }

    #[test]
    fn nvp_inverts() {
        let spec = FamilySpec::new(FamilyKind::RealNvp, 7);
        for seed in 0..5 {
            let lam = spec.init_params(&mut rng(seed)).into_inner();
            let eps = spec.sample_base(1, &mut rng(100 + seed));
            let z = spec.transform(&lam, eps.row(0)).unwrap();
            let (back, _) = spec.pull_back(&lam, &z).unwrap();
            for (a, b) in back.iter().zip(eps.row(0)) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn nvp_density_routes_agree() {
        let spec = FamilySpec::new(FamilyKind::RealNvp, 6);
        let lam = spec.init_params(&mut rng(3)).into_inner();
        let eps = spec.sample_base(4, &mut rng(4));
        for l in 0..4 {
            let (z, forward) = spec.sample_log_density(&lam, eps.row(l));
            let inverse = spec.log_density(&lam, &z).unwrap();
            assert!((forward - inverse).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_field_density_matches_analytic() {
        let spec = FamilySpec::new(FamilyKind::MeanField, 4);
        let lam = spec.init_params(&mut rng(8)).into_inner();
        let eps = spec.sample_base(10, &mut rng(9));
        for l in 0..10 {
            let z = spec.transform(&lam, eps.row(l)).unwrap();
            let analytic: f64 = (0..4)
                .map(|j| {
                    let s = lam[4 + j].exp();
                    -0.5 * ((z[j] - lam[j]) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln()
                })
                .sum();
            assert!((spec.log_density(&lam, &z).unwrap() - analytic).abs() <= 1e-10);
            let (_, shortcut) = spec.sample_log_density(&lam, eps.row(l));
            assert!((shortcut - analytic).abs() <= 1e-10);
        }
    }

    #[test]
    fn rank5_density_matches_dense_gaussian() {
        let spec = FamilySpec::new(FamilyKind::Rank5, 4);
        let lam = spec.init_params(&mut rng(30)).into_inner();
        let (mu, cov) = spec.mean_cov(&lam).unwrap();
        let z = [0.2, -0.5, 1.0, 0.3];
        // dense oracle: Cholesky of the 4×4 covariance
        let n = 4;
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = cov[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
                l[[i, j]] = if i == j { s.sqrt() } else { s / l[[j, j]] };
            }
        }
        let mut w = [0.0; 4];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[[i, k]] * w[k]).sum();
            w[i] = (z[i] - mu[i] - s) / l[[i, i]];
        }
        let quad: f64 = w.iter().map(|v| v * v).sum();
        let logdet: f64 = (0..n).map(|i| 2.0 * l[[i, i]].ln()).sum();
        let expected = -0.5 * quad - 0.5 * logdet - 2.0 * (2.0 * PI).ln();
        let got = spec.log_density(&lam, &z).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn transform_is_differentiable() {
        let spec = FamilySpec::new(FamilyKind::RealNvp, 3);
        let lam = spec.init_params(&mut rng(1)).into_inner();
        let eps = [0.1, 0.2, -0.3];
        let (_, g) = grad(&lam, |_, l| Ok(R3::sum_z(&spec, l, &eps))).unwrap();
        assert_eq!(g.len(), spec.d_lambda());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    struct R3;
    impl R3 {
        fn sum_z<R: Real>(spec: &FamilySpec, lam: &[R], eps: &[f64]) -> R {
            let z = spec.push_forward(lam, eps);
            R::sum(lam[0].constant(0.0), &z)
        }
    }
}
