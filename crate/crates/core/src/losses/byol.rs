use ndarray::ArrayView2;

use super::{check_pair, normalize_rows, normalize_rows_backward, PairLoss};
use crate::error::{Error, Result};

/// Mean squared distance between L2-normalised prediction and target rows,
/// `2 - 2 cos(q_i, z_i)` per row.
pub fn byol_mse(q1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<PairLoss> {
    let ones = vec![1.0; q1.nrows()];
    byol_mse_weighted(q1, z2, &ones)
}

/// `(1/B) Σ_i w_i ‖q̂_i - ẑ_i‖²`.
pub fn byol_mse_weighted(
    q1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    weights: &[f64],
) -> Result<PairLoss> {
    check_pair(&q1, &z2, "byol_mse")?;
    let b = q1.nrows();
    if b == 0 {
        return Err(Error::InvalidArgument("byol_mse: empty batch".into()));
    }
    if weights.len() != b {
        return Err(Error::Shape(format!(
            "{} weights for {b} rows",
            weights.len()
        )));
    }
    let (uq, nq) = normalize_rows(q1, "byol prediction")?;
    let (uz, nz) = normalize_rows(z2, "byol target")?;
    let mut value = 0.0;
    let mut dq = uz.clone();
    let mut dz = uq.clone();
    for i in 0..b {
        let cos = uq.row(i).dot(&uz.row(i));
        let c = weights[i] / b as f64;
        value += c * (2.0 - 2.0 * cos);
        dq.row_mut(i).mapv_inplace(|v| -2.0 * c * v);
        dz.row_mut(i).mapv_inplace(|v| -2.0 * c * v);
    }
    Ok(PairLoss {
        value,
        grad_a: normalize_rows_backward(&uq, &nq, &dq),
        grad_b: normalize_rows_backward(&uz, &nz, &dz),
        grad_extra: None,
    })
}
