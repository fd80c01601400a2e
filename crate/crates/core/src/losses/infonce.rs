use ndarray::{concatenate, s, ArrayView2, Axis};

use super::{check_pair, normalize_rows, normalize_rows_backward, Mat, PairLoss};
use crate::error::{Error, Result};

/// Symmetric InfoNCE (NT-Xent) over cosine similarities.
///
/// Row `i` of `z1` and row `i` of `z2` form a positive pair. Each of the
/// `2B` rows anchors once; its denominator runs over every other row of the
/// pool `z1 ∪ z2 ∪ extra`. The result is the mean over anchors. Rows of
/// `extra` are negatives only, never anchors.
pub fn info_nce(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    temperature: f64,
    extra: Option<ArrayView2<f64>>,
) -> Result<PairLoss> {
    let ones = vec![1.0; z1.nrows()];
    info_nce_weighted(z1, z2, temperature, extra, &ones)
}

/// [`info_nce`] with a weight per positive pair: the loss is
/// `(1/B) Σ_i w_i (ℓ_i¹ + ℓ_i²) / 2` where `ℓ_i¹`, `ℓ_i²` are the losses of
/// the two anchors of pair `i`.
pub fn info_nce_weighted(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    temperature: f64,
    extra: Option<ArrayView2<f64>>,
    weights: &[f64],
) -> Result<PairLoss> {
    check_pair(&z1, &z2, "info_nce")?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let b = z1.nrows();
    if weights.len() != b {
        return Err(Error::Shape(format!(
            "{} weights for {b} pairs",
            weights.len()
        )));
    }
    let m = match &extra {
        Some(e) => {
            if e.ncols() != z1.ncols() {
                return Err(Error::Shape(format!(
                    "negative pool width {} vs embedding width {}",
                    e.ncols(),
                    z1.ncols()
                )));
            }
            e.nrows()
        }
        None => 0,
    };
    if b == 0 {
        return Err(Error::InvalidArgument("info_nce: empty batch".into()));
    }
    if b < 2 && m == 0 {
        return Err(Error::InvalidArgument(
            "info_nce: a batch of one has no negatives".into(),
        ));
    }

    let mut parts = vec![z1.view(), z2.view()];
    if let Some(e) = &extra {
        parts.push(e.view());
    }
    let raw = concatenate(Axis(0), &parts).expect("widths checked");
    let (u, norms) = normalize_rows(raw.view(), "info_nce embeddings")?;
    let n = u.nrows();
    let anchors = u.slice(s![..2 * b, ..]);
    let logits = anchors.dot(&u.t()) / temperature;

    let mut value = 0.0;
    // coef[a, k] = c_a (p_ak - [k == positive(a)]) / τ; zero on the diagonal.
    let mut coef = Mat::zeros((2 * b, n));
    for a in 0..2 * b {
        let pos = if a < b { a + b } else { a - b };
        let c = weights[a % b] / (2 * b) as f64;
        let row = logits.row(a);
        let max = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != a)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != a)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let lse = max + denom.ln();
        value += c * (lse - row[pos]);
        for k in 0..n {
            if k == a {
                continue;
            }
            let p = (row[k] - lse).exp();
            let ind = if k == pos { 1.0 } else { 0.0 };
            coef[[a, k]] = c * (p - ind) / temperature;
        }
    }

    // d/du of Σ_a Σ_k coef[a,k] (u_a · u_k): anchors receive coef · u,
    // every pool row receives coefᵀ · anchors.
    let mut du = coef.t().dot(&anchors);
    {
        let from_anchor = coef.dot(&u);
        let mut head = du.slice_mut(s![..2 * b, ..]);
        head += &from_anchor;
    }
    let dz = normalize_rows_backward(&u, &norms, &du);
    Ok(PairLoss {
        value,
        grad_a: dz.slice(s![..b, ..]).to_owned(),
        grad_b: dz.slice(s![b..2 * b, ..]).to_owned(),
        grad_extra: extra.map(|_| dz.slice(s![2 * b.., ..]).to_owned()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_orthogonal_pairs() {
        // Anchor [1,0]: positive similarity 1, two negatives with similarity 0,
        // so every anchor contributes -log(e / (e + 2)).
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = info_nce(z.view(), z.view(), 1.0, None).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss.value - expected).abs() < 1e-12);
        assert!((loss.value - 0.5514).abs() < 5e-5);
    }

    #[test]
    fn uniform_similarities_give_log_pool_size() {
        let z = Mat::from_elem((3, 4), 0.5);
        let loss = info_nce(z.view(), z.view(), 0.3, None).unwrap();
        assert!((loss.value - (5f64).ln()).abs() < 1e-12);
        let extra = Mat::from_elem((2, 4), 0.5);
        let loss = info_nce(z.view(), z.view(), 0.3, Some(extra.view())).unwrap();
        assert!((loss.value - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn scale_invariant() {
        let z1 = array![[1.0, 0.3, -0.2], [0.2, 0.8, 0.1], [-0.4, 0.1, 0.9]];
        let z2 = array![[0.9, 0.2, -0.1], [0.1, 1.0, 0.3], [-0.3, 0.2, 0.7]];
        let a = info_nce(z1.view(), z2.view(), 0.5, None).unwrap();
        let b = info_nce((&z1 * 5.0).view(), (&z2 * 5.0).view(), 0.5, None).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_sample_without_pool() {
        let z = array![[1.0, 0.0]];
        assert!(info_nce(z.view(), z.view(), 1.0, None).is_err());
        let extra = array![[0.0, 1.0]];
        assert!(info_nce(z.view(), z.view(), 1.0, Some(extra.view())).is_ok());
    }
}
