//! Convex mixing of current-task and memory samples.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// `n` i.i.d. draws from `Beta(alpha, alpha)`.
pub fn sample_lambda(alpha: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mixup alpha must be > 0, got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample_lambda: n must be >= 1".into(),
        ));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..n).map(|_| beta.sample(rng)).collect())
}

/// Row-wise `lambda_i * x_t[i] + (1 - lambda_i) * x_buf[i]`.
pub fn mix(x_t: &Mat, x_buf: &Mat, lambda: &[f64]) -> Result<Mat> {
    if x_t.dim() != x_buf.dim() {
        return Err(Error::Shape(format!(
            "mix: {:?} vs {:?}",
            x_t.dim(),
            x_buf.dim()
        )));
    }
    if lambda.len() != x_t.nrows() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} rows",
            lambda.len(),
            x_t.nrows()
        )));
    }
    if let Some(l) = lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient {l} outside [0, 1]"
        )));
    }
    let mut out = x_t.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let l = lambda[i];
        row.zip_mut_with(&x_buf.row(i), |a, &b| *a = l * *a + (1.0 - l) * b);
    }
    Ok(out)
}

/// Both mixed views of a batch together with the shared coefficients and
/// the memory rows they were paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct MixBatch {
    pub x1: Mat,
    pub x2: Mat,
    pub lambda: Vec<f64>,
    /// `pairing[i]` is the memory-batch row mixed into current row `i`.
    pub pairing: Vec<usize>,
}

/// Pair every current row with a uniformly drawn memory row (with
/// replacement), draw one coefficient per pair and mix both views with the
/// same coefficients and pairing.
pub fn build_mix_batch(
    x1_t: &Mat,
    x2_t: &Mat,
    x1_buf: &Mat,
    x2_buf: &Mat,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixBatch> {
    if x1_t.nrows() == 0 {
        return Err(Error::InvalidArgument("empty current batch".into()));
    }
    if x1_buf.nrows() == 0 {
        return Err(Error::Buffer(
            "cross-task mixup needs a non-empty memory batch (no previous task yet?)".into(),
        ));
    }
    if x1_t.dim() != x2_t.dim() || x1_buf.dim() != x2_buf.dim() || x1_t.ncols() != x1_buf.ncols() {
        return Err(Error::Shape("view shapes disagree".into()));
    }
    let n = x1_t.nrows();
    let pairing: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..x1_buf.nrows()))
        .collect();
    let lambda = sample_lambda(alpha, n, rng)?;
    let b1 = x1_buf.select(ndarray::Axis(0), &pairing);
    let b2 = x2_buf.select(ndarray::Axis(0), &pairing);
    Ok(MixBatch {
        x1: mix(x1_t, &b1, &lambda)?,
        x2: mix(x2_t, &b2, &lambda)?,
        lambda,
        pairing,
    })
}
