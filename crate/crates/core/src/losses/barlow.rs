use ndarray::{ArrayView2, Axis};

use super::{check_pair, Mat, PairLoss};
use crate::error::{Error, Result};

/// Added to each squared column norm in the cross-correlation denominator.
pub const BARLOW_EPS: f64 = 1e-5;

/// Column-centred, column-scaled copy of `z` plus the scaling norms.
fn standardize(z: ArrayView2<f64>) -> (Mat, Mat, Vec<f64>) {
    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
    let centred = &z - &mean;
    let norms: Vec<f64> = centred
        .columns()
        .into_iter()
        .map(|c| (c.dot(&c) + BARLOW_EPS).sqrt())
        .collect();
    let mut a = centred.clone();
    for (j, mut col) in a.columns_mut().into_iter().enumerate() {
        col /= norms[j];
    }
    (centred, a, norms)
}

fn standardize_backward(centred: &Mat, a: &Mat, norms: &[f64], da: &Mat) -> Mat {
    let mut dc = da.clone();
    for (j, mut col) in dc.columns_mut().into_iter().enumerate() {
        let proj = da.column(j).dot(&a.column(j));
        col.scaled_add(-proj / norms[j], &centred.column(j));
        col /= norms[j];
    }
    let mean = dc.mean_axis(Axis(0)).expect("non-empty batch");
    dc - &mean
}

/// Barlow-Twins redundancy reduction:
/// `Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij²`, where `C` is the batch
/// cross-correlation between the column-centred views, each column divided
/// by `sqrt(Σ_b z_bi² + ε)`.
pub fn barlow_twins(z1: ArrayView2<f64>, z2: ArrayView2<f64>, lambda: f64) -> Result<PairLoss> {
    check_pair(&z1, &z2, "barlow_twins")?;
    if z1.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "barlow_twins needs at least two samples".into(),
        ));
    }
    let (c1, a1, n1) = standardize(z1);
    let (c2, a2, n2) = standardize(z2);
    for (j, (x, y)) in n1.iter().zip(&n2).enumerate() {
        if x * x <= 2.0 * BARLOW_EPS || y * y <= 2.0 * BARLOW_EPS {
            log::warn!("barlow_twins: embedding dimension {j} has (near) zero variance");
        }
    }
    let c = a1.t().dot(&a2);
    let d = c.nrows();
    let mut value = 0.0;
    let mut g = Mat::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let cij = c[[i, j]];
            if i == j {
                value += (1.0 - cij).powi(2);
                g[[i, j]] = -2.0 * (1.0 - cij);
            } else {
                value += lambda * cij * cij;
                g[[i, j]] = 2.0 * lambda * cij;
            }
        }
    }
    let da1 = a2.dot(&g.t());
    let da2 = a1.dot(&g);
    Ok(PairLoss {
        value,
        grad_a: standardize_backward(&c1, &a1, &n1, &da1),
        grad_b: standardize_backward(&c2, &a2, &n2, &da2),
        grad_extra: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Zero-mean, mutually orthogonal columns of equal norm.
    fn orthogonal_columns() -> Mat {
        array![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0]
        ]
    }

    #[test]
    fn identical_decorrelated_views_give_zero() {
        let z = orthogonal_columns();
        let loss = barlow_twins(z.view(), z.view(), 0.005).unwrap();
        assert!(loss.value < 1e-10, "{}", loss.value);
    }

    #[test]
    fn negated_views_give_four_per_dimension() {
        let z = orthogonal_columns();
        let neg = -&z;
        let loss = barlow_twins(z.view(), neg.view(), 0.005).unwrap();
        assert!((loss.value - 12.0).abs() < 1e-4, "{}", loss.value);
    }

    #[test]
    fn nonnegative_on_random_input() {
        let z1 = array![
            [0.3, -1.2, 0.5],
            [1.1, 0.2, -0.7],
            [-0.4, 0.9, 0.1],
            [0.6, -0.3, 1.4]
        ];
        let z2 = array![
            [0.1, 0.7, -0.5],
            [-1.0, 0.4, 0.2],
            [0.8, -0.6, 0.9],
            [0.2, 0.3, -1.1]
        ];
        assert!(barlow_twins(z1.view(), z2.view(), 0.0).unwrap().value >= 0.0);
        assert!(barlow_twins(z1.view(), z2.view(), 2.0).unwrap().value >= 0.0);
    }
}
