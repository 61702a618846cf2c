use ndarray::Array2;

use crate::error::{Error, Result};
use crate::families::EpsBatch;

/// Largest base dimension for which second-order features are built.
pub const ZVCV_ORDER2_MAX_DZ: usize = 64;

pub fn zvcv_feature_count(dim: usize, order: u8) -> usize {
    match order {
        1 => dim,
        _ => dim + dim + dim * dim.saturating_sub(1) / 2,
    }
}

fn check_order(dim: usize, order: u8) -> Result<()> {
    match order {
        1 => Ok(()),
        2 if dim <= ZVCV_ORDER2_MAX_DZ => Ok(()),
        2 => Err(Error::Capability(format!(
            "second-order ZVCV is limited to dimension {ZVCV_ORDER2_MAX_DZ}, got {dim}"
        ))),
        other => Err(Error::config(
            "zvcv_order",
            format!("ZVCV order must be 1 or 2, got {other}"),
        )),
    }
}

fn write_features(eps: &[f64], order: u8, out: &mut [f64]) {
    let d = eps.len();
    for (o, e) in out.iter_mut().zip(eps) {
        *o = -e;
    }
    if order == 2 {
        for i in 0..d {
            out[d + i] = 2.0 - 2.0 * eps[i] * eps[i];
        }
        let mut k = 2 * d;
        for i in 0..d {
            for j in i + 1..d {
                out[k] = -2.0 * eps[i] * eps[j];
                k += 1;
            }
        }
    }
}

/// Stein control variates `ΔP + ∇P·∇log q₀` for the standard Gaussian base.
///
/// Order 1 uses `P = ε_j`, giving `−ε`. Order 2 appends `2 − 2ε_i²` for
/// `P = ε_i²` and `−2ε_iε_j` (i < j) for `P = ε_iε_j`.
pub fn zvcv_features(eps: &[f64], order: u8) -> Result<Vec<f64>> {
    check_order(eps.len(), order)?;
    let mut out = vec![0.0; zvcv_feature_count(eps.len(), order)];
    write_features(eps, order, &mut out);
    Ok(out)
}

/// Features for every row of a base batch, `L × J`.
pub fn zvcv_feature_batch(eps: &EpsBatch, order: u8) -> Result<Array2<f64>> {
    check_order(eps.dim(), order)?;
    let mut out = Array2::zeros((eps.len(), zvcv_feature_count(eps.dim(), order)));
    for (l, mut row) in out.rows_mut().into_iter().enumerate() {
        write_features(eps.row(l), order, row.as_slice_mut().unwrap());
    }
    Ok(out)
}
