//! Self-supervised objectives as pure functions of embedding batches.
//!
//! Every kernel returns its value together with the analytic gradient with
//! respect to each input batch, so the caller can attach it to a tape as a
//! single node. Embeddings are `[batch, dim]` row-major matrices.

mod barlow;
mod byol;
mod corinfomax;
mod infonce;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use barlow::{barlow_twins, BARLOW_EPS};
pub use byol::{byol_mse, byol_mse_weighted};
pub use corinfomax::{corinfomax, CorInfoMaxParams, CovState};
pub use infonce::{info_nce, info_nce_weighted};

pub type Mat = Array2<f64>;

/// Value and gradients of a two-argument loss.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    /// Gradient with respect to the first argument (the predictor output for BYOL).
    pub grad_a: Mat,
    /// Gradient with respect to the second argument.
    pub grad_b: Mat,
    /// Gradient with respect to the extra negative pool, when one was given.
    pub grad_extra: Option<Mat>,
}

impl PairLoss {
    pub(crate) fn scaled(mut self, k: f64) -> Self {
        self.value *= k;
        self.grad_a *= k;
        self.grad_b *= k;
        if let Some(g) = self.grad_extra.as_mut() {
            *g *= k;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslKind {
    Simclr,
    BarlowTwins,
    Byol,
    Corinfomax,
}

impl SslKind {
    pub const ALL: [SslKind; 4] = [
        SslKind::Simclr,
        SslKind::BarlowTwins,
        SslKind::Byol,
        SslKind::Corinfomax,
    ];

    /// Per-pair losses decompose over samples and accept per-sample
    /// weights; batch-statistic losses do not.
    pub fn is_pairwise(self) -> bool {
        matches!(self, SslKind::Simclr | SslKind::Byol)
    }

    pub fn name(self) -> &'static str {
        match self {
            SslKind::Simclr => "simclr",
            SslKind::BarlowTwins => "barlow_twins",
            SslKind::Byol => "byol",
            SslKind::Corinfomax => "corinfomax",
        }
    }
}

impl std::str::FromStr for SslKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(SslKind::Simclr),
            "barlow_twins" | "barlow" => Ok(SslKind::BarlowTwins),
            "byol" => Ok(SslKind::Byol),
            "corinfomax" => Ok(SslKind::Corinfomax),
            other => Err(Error::Config(format!("unknown ssl kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SslKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyper-parameters of the selected objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslLossSpec {
    pub kind: SslKind,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Barlow-Twins off-diagonal weight.
    pub barlow_lambda: f64,
    /// CorInfoMax settings.
    pub corinfomax: CorInfoMaxParams,
}

impl Default for SslLossSpec {
    fn default() -> Self {
        Self::new(SslKind::Simclr)
    }
}

impl SslLossSpec {
    pub fn new(kind: SslKind) -> Self {
        Self {
            kind,
            temperature: 0.5,
            barlow_lambda: 0.0051,
            corinfomax: CorInfoMaxParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.barlow_lambda >= 0.0) {
            return Err(Error::Config("barlow_lambda must be >= 0".into()));
        }
        self.corinfomax.validate()
    }

    pub fn is_pairwise(&self) -> bool {
        self.kind.is_pairwise()
    }
}

/// Optional extra inputs to [`ssl_loss`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SslAux<'a> {
    /// Predictor output for the first view (required for BYOL).
    pub predicted: Option<ArrayView2<'a, f64>>,
    /// Extra negatives appended to the InfoNCE pool.
    pub negatives: Option<ArrayView2<'a, f64>>,
}

/// Loss plus the advanced covariance state (CorInfoMax only).
#[derive(Debug, Clone)]
pub struct SslOutput {
    pub loss: PairLoss,
    pub state: Option<CovState>,
}

/// Evaluate the configured objective on two embedding batches.
///
/// For BYOL the first view is routed through the predictor, so
/// `aux.predicted` must be present and `loss.grad_a` is the gradient with
/// respect to it. CorInfoMax reads `state` (initialised fresh when absent)
/// and returns the advanced state.
pub fn ssl_loss(
    spec: &SslLossSpec,
    state: Option<&CovState>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    aux: SslAux<'_>,
) -> Result<SslOutput> {
    ssl_loss_weighted(spec, state, z1, z2, aux, None)
}

/// Like [`ssl_loss`] with per-pair weights. Per-pair kinds weight each
/// sample before averaging; batch-statistic kinds scale by the mean weight.
pub fn ssl_loss_weighted(
    spec: &SslLossSpec,
    state: Option<&CovState>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    aux: SslAux<'_>,
    weights: Option<&[f64]>,
) -> Result<SslOutput> {
    if let Some(w) = weights {
        if w.len() != z1.nrows() {
            return Err(Error::Shape(format!(
                "{} weights for a batch of {}",
                w.len(),
                z1.nrows()
            )));
        }
    }
    let mean_weight = weights.map(|w| w.iter().sum::<f64>() / w.len().max(1) as f64);
    match spec.kind {
        SslKind::Simclr => {
            let loss = match weights {
                Some(w) => info_nce_weighted(z1, z2, spec.temperature, aux.negatives, w)?,
                None => info_nce(z1, z2, spec.temperature, aux.negatives)?,
            };
            Ok(SslOutput { loss, state: None })
        }
        SslKind::Byol => {
            let q1 = aux.predicted.ok_or_else(|| Error::MissingInput {
                strategy: "byol".into(),
                missing: "predictor output for the first view".into(),
            })?;
            let loss = match weights {
                Some(w) => byol_mse_weighted(q1, z2, w)?,
                None => byol_mse(q1, z2)?,
            };
            Ok(SslOutput { loss, state: None })
        }
        SslKind::BarlowTwins => {
            let loss = barlow_twins(z1, z2, spec.barlow_lambda)?;
            Ok(SslOutput {
                loss: loss.scaled(mean_weight.unwrap_or(1.0)),
                state: None,
            })
        }
        SslKind::Corinfomax => {
            let fresh;
            let st = match state {
                Some(s) => s,
                None => {
                    fresh = CovState::new(z1.ncols(), spec.corinfomax.eps);
                    &fresh
                }
            };
            let (loss, next) = if spec.corinfomax.normalize {
                let (u1, n1) = normalize_rows(z1, "corinfomax view 1")?;
                let (u2, n2) = normalize_rows(z2, "corinfomax view 2")?;
                let (mut loss, next) = corinfomax(u1.view(), u2.view(), &spec.corinfomax, st)?;
                loss.grad_a = normalize_rows_backward(&u1, &n1, &loss.grad_a);
                loss.grad_b = normalize_rows_backward(&u2, &n2, &loss.grad_b);
                (loss, next)
            } else {
                corinfomax(z1, z2, &spec.corinfomax, st)?
            };
            Ok(SslOutput {
                loss: loss.scaled(mean_weight.unwrap_or(1.0)),
                state: Some(next),
            })
        }
    }
}

pub(crate) fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Rows scaled to unit L2 norm plus the original norms.
pub(crate) fn normalize_rows(z: ArrayView2<f64>, what: &str) -> Result<(Mat, Vec<f64>)> {
    let mut u = z.to_owned();
    let mut norms = Vec::with_capacity(z.nrows());
    for (i, mut row) in u.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NonFinite {
                context: what.into(),
                detail: format!("row {i} has norm {n}; direction undefined"),
            });
        }
        row /= n;
        norms.push(n);
    }
    Ok((u, norms))
}

/// Pull a gradient with respect to normalised rows back to the raw rows.
pub(crate) fn normalize_rows_backward(u: &Mat, norms: &[f64], du: &Mat) -> Mat {
    let mut dz = du.clone();
    for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
        let ui = u.row(i);
        let proj = ui.dot(&du.row(i));
        row.scaled_add(-proj, &ui);
        row /= norms[i];
    }
    dz
}
