//! Straightforward reference implementations, written loop by loop without
//! sharing any code with the library. Only tests use them.

#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// NT-Xent: every row of z1 and z2 is an anchor; its positive is the same
/// row of the other view; the denominator sums over every other row of
/// z1, z2 and `extra`. `weights[i]` scales both anchors of pair `i`.
pub fn info_nce(z1: &Rows, z2: &Rows, tau: f64, extra: &Rows, weights: &[f64]) -> f64 {
    let b = z1.len();
    let mut pool: Rows = z1.clone();
    pool.extend(z2.iter().cloned());
    pool.extend(extra.iter().cloned());
    let mut total = 0.0;
    for a in 0..2 * b {
        let pos = if a < b { a + b } else { a - b };
        let mut denom = 0.0;
        for (k, row) in pool.iter().enumerate() {
            if k != a {
                denom += (cosine(&pool[a], row) / tau).exp();
            }
        }
        let num = (cosine(&pool[a], &pool[pos]) / tau).exp();
        total += weights[a % b] * -(num / denom).ln();
    }
    total / (2 * b) as f64
}

/// Barlow Twins on column-centred embeddings; each column is divided by
/// `sqrt(sum of squares + 1e-5)`.
pub fn barlow(z1: &Rows, z2: &Rows, lambda: f64) -> f64 {
    let n = z1.len();
    let d = z1[0].len();
    let standardise = |z: &Rows| -> Rows {
        let mut out = z.clone();
        for j in 0..d {
            let mean: f64 = z.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let ss: f64 = z.iter().map(|r| (r[j] - mean).powi(2)).sum();
            let s = (ss + 1e-5).sqrt();
            for i in 0..n {
                out[i][j] = (z[i][j] - mean) / s;
            }
        }
        out
    };
    let a = standardise(z1);
    let c = standardise(z2);
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let cij: f64 = (0..n).map(|b| a[b][i] * c[b][j]).sum();
            if i == j {
                loss += (1.0 - cij).powi(2);
            } else {
                loss += lambda * cij * cij;
            }
        }
    }
    loss
}

/// `(1/B) Σ w_i ‖q_i/‖q_i‖ - z_i/‖z_i‖‖²`.
pub fn byol(q: &Rows, z: &Rows, weights: &[f64]) -> f64 {
    let b = q.len();
    let mut total = 0.0;
    for i in 0..b {
        let (nq, nz) = (norm(&q[i]), norm(&z[i]));
        let d: f64 = q[i]
            .iter()
            .zip(&z[i])
            .map(|(x, y)| (x / nq - y / nz).powi(2))
            .sum();
        total += weights[i] * d;
    }
    total / b as f64
}

/// Log-determinant of a symmetric positive-definite matrix by Gaussian
/// elimination without pivoting.
pub fn logdet(m: &Rows) -> f64 {
    let d = m.len();
    let mut a = m.clone();
    let mut ld = 0.0;
    for k in 0..d {
        let p = a[k][k];
        ld += p.ln();
        for i in k + 1..d {
            let f = a[i][k] / p;
            for j in k..d {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    ld
}

/// Mean-centred batch covariance, divided by N.
pub fn covariance(z: &Rows) -> Rows {
    let n = z.len();
    let d = z[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in z {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n as f64;
            }
        }
    }
    c
}

/// CorInfoMax value with moving-average covariances. Returns the loss and
/// the two updated covariance estimates.
pub fn corinfomax(
    z1: &Rows,
    z2: &Rows,
    r1_old: &Rows,
    r2_old: &Rows,
    eps: f64,
    lambda_cov: f64,
    coeff: Option<f64>,
) -> (f64, Rows, Rows) {
    let n = z1.len() as f64;
    let d = z1[0].len();
    let blend = |old: &Rows, z: &Rows| -> Rows {
        let c = covariance(z);
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| lambda_cov * old[i][j] + (1.0 - lambda_cov) * c[i][j])
                    .collect()
            })
            .collect()
    };
    let r1 = blend(r1_old, z1);
    let r2 = blend(r2_old, z2);
    let loaded = |r: &Rows| -> Rows {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| r[i][j] + if i == j { eps } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    let c = coeff.unwrap_or(2.0 / (eps * n));
    let mut inv = 0.0;
    for (a, b) in z1.iter().zip(z2) {
        for (x, y) in a.iter().zip(b) {
            inv += (x - y).powi(2);
        }
    }
    let value = -logdet(&loaded(&r1)) - logdet(&loaded(&r2)) + c * inv;
    (value, r1, r2)
}

/// Row-normalised copy.
pub fn unit_rows(z: &Rows) -> Rows {
    z.iter()
        .map(|r| r.iter().map(|v| v / norm(r)).collect())
        .collect()
}

/// Linear accuracy, task-prediction rate and within-task accuracy from raw
/// predictions.
pub fn la_tp_wp(preds: &[usize], labels: &[usize], task_of: &[usize]) -> (f64, f64, f64) {
    let n = preds.len() as f64;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64;
    let same_task = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| task_of[**p] == task_of[**y])
        .count() as f64;
    let wp = if same_task == 0.0 {
        0.0
    } else {
        correct / same_task
    };
    (correct / n, same_task / n, wp)
}
