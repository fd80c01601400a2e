use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_pair, Mat, PairLoss};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorInfoMaxParams {
    /// Diagonal loading inside the log-determinants.
    pub eps: f64,
    /// Forgetting factor of the covariance moving average.
    pub lambda_cov: f64,
    /// Weight of the invariance term. `None` means `2 / (eps * N)`.
    pub invariance_coeff: Option<f64>,
    /// Scale embedding rows to unit norm before the loss. Applied by
    /// [`super::ssl_loss`]; the bare kernel never normalises.
    pub normalize: bool,
}

impl Default for CorInfoMaxParams {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            lambda_cov: 0.01,
            invariance_coeff: None,
            normalize: true,
        }
    }
}

impl CorInfoMaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("corinfomax eps must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.lambda_cov) {
            return Err(Error::Config(
                "corinfomax lambda_cov must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Running auto-covariance estimates for the two views.
#[derive(Debug, Clone, PartialEq)]
pub struct CovState {
    pub r1: Mat,
    pub r2: Mat,
}

impl CovState {
    /// `eps * I` for both views.
    pub fn new(dim: usize, eps: f64) -> Self {
        let r = Mat::eye(dim) * eps;
        Self {
            r1: r.clone(),
            r2: r,
        }
    }

    pub fn dim(&self) -> usize {
        self.r1.nrows()
    }
}

struct ViewTerm {
    value: f64,
    grad: Mat,
    r: Mat,
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn spectrum(m: &DMatrix<f64>) -> String {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let mut v: Vec<f64> = eig.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    format!("eigenvalues {v:?}")
}

fn view_term(
    z: ArrayView2<f64>,
    r_old: &Mat,
    p: &CorInfoMaxParams,
    view: usize,
) -> Result<ViewTerm> {
    let n = z.nrows() as f64;
    let d = z.ncols();
    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
    let zc = &z - &mean;
    let cov = zc.t().dot(&zc) / n;
    let cov = (&cov + &cov.t()) * 0.5;
    let r = r_old * p.lambda_cov + &cov * (1.0 - p.lambda_cov);

    let loaded = to_dmatrix(&(&r + &(Mat::eye(d) * p.eps)));
    let chol = loaded.clone().cholesky().ok_or_else(|| Error::NonFinite {
        context: format!("corinfomax log-determinant (view {view})"),
        detail: format!("covariance is not positive definite; {}", spectrum(&loaded)),
    })?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(Error::NonFinite {
            context: format!("corinfomax log-determinant (view {view})"),
            detail: spectrum(&loaded),
        });
    }
    let inv = chol.inverse();
    let s = Mat::from_shape_fn((d, d), |(i, j)| 0.5 * (inv[(i, j)] + inv[(j, i)]));

    // d(-logdet)/dR = -S, dR/dcov = (1 - λ), cov = Zcᵀ Zc / N.
    let dzc = zc.dot(&s) * (-(1.0 - p.lambda_cov) * 2.0 / n);
    let dmean = dzc.mean_axis(Axis(0)).expect("non-empty batch");
    Ok(ViewTerm {
        value: -logdet,
        grad: dzc - &dmean,
        r,
    })
}

/// CorInfoMax log-determinant mutual information objective.
///
/// `-logdet(R₁ + εI) - logdet(R₂ + εI) + c ‖Z₁ - Z₂‖_F²` where each `R` is
/// the moving average `λ R_prev + (1 - λ) (1/N) Z̄ᵀZ̄` of the mean-centred
/// batch and `c` defaults to `2 / (εN)`. Gradients flow through the current
/// batch covariance only; the previous state is treated as a constant.
pub fn corinfomax(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    params: &CorInfoMaxParams,
    state: &CovState,
) -> Result<(PairLoss, CovState)> {
    check_pair(&z1, &z2, "corinfomax")?;
    params.validate()?;
    if z1.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "corinfomax needs at least two samples".into(),
        ));
    }
    if state.dim() != z1.ncols() {
        return Err(Error::Shape(format!(
            "covariance state is {0}x{0} but embeddings have width {1}",
            state.dim(),
            z1.ncols()
        )));
    }
    let n = z1.nrows() as f64;
    let t1 = view_term(z1, &state.r1, params, 1)?;
    let t2 = view_term(z2, &state.r2, params, 2)?;
    let coeff = params.invariance_coeff.unwrap_or(2.0 / (params.eps * n));
    let diff = &z1 - &z2;
    let inv = coeff * diff.iter().map(|v| v * v).sum::<f64>();
    let dinv = diff * (2.0 * coeff);
    let loss = PairLoss {
        value: t1.value + t2.value + inv,
        grad_a: t1.grad + &dinv,
        grad_b: t2.grad - &dinv,
        grad_extra: None,
    };
    Ok((loss, CovState { r1: t1.r, r2: t2.r }))
}
