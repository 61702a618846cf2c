use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a Gram matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Cholesky factor of a symmetric positive-definite matrix.
pub(crate) struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub(crate) fn new(a: ArrayView2<'_, f64>, what: &str) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    if !(s > PIVOT_TOL * scale) || scale == 0.0 {
                        return Err(Error::Rank(format!("{what}: singular at pivot {i}")));
                    }
                    l[[i, i]] = s.sqrt();
                } else {
                    l[[i, j]] = s / l[[j, j]];
                }
            }
        }
        Ok(Cholesky { lower: l })
    }

    /// Solve `A X = B` column by column.
    pub(crate) fn solve(&self, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.lower.nrows();
        let mut x = b.to_owned();
        for c in 0..x.ncols() {
            for i in 0..n {
                let mut s = x[[i, c]];
                for k in 0..i {
                    s -= self.lower[[i, k]] * x[[k, c]];
                }
                x[[i, c]] = s / self.lower[[i, i]];
            }
            for i in (0..n).rev() {
                let mut s = x[[i, c]];
                for k in i + 1..n {
                    s -= self.lower[[k, i]] * x[[k, c]];
                }
                x[[i, c]] = s / self.lower[[i, i]];
            }
        }
        x
    }
}
