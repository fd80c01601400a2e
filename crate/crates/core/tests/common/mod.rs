#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use cromo_core::autodiff::Mat;
use oracles::Rows;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

pub fn rows(m: &Mat) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn mat(r: &Rows) -> Mat {
    let cols = r.first().map_or(0, Vec::len);
    Mat::from_shape_fn((r.len(), cols), |(i, j)| r[i][j])
}

/// Largest entry-wise relative error, with an absolute floor of 1e-6 on
/// the scale.
pub fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` around `x`.
pub fn numeric_grad(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let v = x[[i, j]];
        xp[[i, j]] = v + h;
        let up = f(&xp);
        xp[[i, j]] = v - h;
        let down = f(&xp);
        xp[[i, j]] = v;
        g[[i, j]] = (up - down) / (2.0 * h);
    }
    g
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
