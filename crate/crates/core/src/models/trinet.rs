use crate::autodiff::{Mat, NodeId, Tape};
use crate::data::ImageGeom;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{self, Stream};

use super::arch::{build_encoder, build_mlp, ModelConfig};
use super::layers::{forward, Block, BnMode, BnUpdate, Builder, Ctx};

/// Parameter-name prefixes of the representation stack (encoder plus
/// projector), the part that is snapshotted and EMA-tracked.
const BACKBONE: [&str; 2] = ["encoder.", "projector."];

fn is_backbone(name: &str) -> bool {
    BACKBONE.iter().any(|p| name.starts_with(p))
}

/// Encoder, projector, BYOL predictor and distillation predictor over one
/// parameter store.
#[derive(Debug, Clone)]
pub struct TriNet {
    pub config: ModelConfig,
    pub input: ImageGeom,
    pub store: ParamStore,
    pub feature_dim: usize,
    pub embed_dim: usize,
    encoder: Vec<Block>,
    projector: Vec<Block>,
    predictor: Vec<Block>,
    distill: Vec<Block>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub h: NodeId,
    pub z: NodeId,
}

/// Build a network. Each head draws its initial weights from its own
/// random stream, so head initialisation does not depend on which heads a
/// strategy ends up using.
pub fn build_trinet(cfg: &ModelConfig, input: ImageGeom, seed: u64) -> Result<TriNet> {
    cfg.validate()?;
    if input.is_empty() {
        return Err(Error::Config("input geometry must be non-empty".into()));
    }
    let mut store = ParamStore::new();
    let (encoder, feature_dim) = {
        let mut r = rng::stream(seed, Stream::Init, 0, 0);
        let mut b = Builder::new(&mut store, &mut r, "encoder");
        build_encoder(cfg, input, &mut b)?
    };
    let d = cfg.projector_dim;
    let projector = {
        let mut r = rng::stream(seed, Stream::Init, 1, 0);
        let mut b = Builder::new(&mut store, &mut r, "projector");
        build_mlp(
            &mut b,
            feature_dim,
            cfg.projector_hidden,
            d,
            cfg.projector_layers,
            true,
        )
    };
    let predictor = {
        let mut r = rng::stream(seed, Stream::Init, 2, 0);
        let mut b = Builder::new(&mut store, &mut r, "predictor");
        build_mlp(&mut b, d, cfg.predictor_hidden, d, 2, true)
    };
    let distill = {
        let mut r = rng::stream(seed, Stream::Init, 3, 0);
        let mut b = Builder::new(&mut store, &mut r, "distill");
        build_mlp(
            &mut b,
            d,
            cfg.distill_hidden.unwrap_or(d),
            d,
            2,
            cfg.distill_bn,
        )
    };
    Ok(TriNet {
        config: cfg.clone(),
        input,
        store,
        feature_dim,
        embed_dim: d,
        encoder,
        projector,
        predictor,
        distill,
    })
}

impl TriNet {
    fn ctx<'a>(&'a self, mode: BnMode, track: bool, updates: &'a mut Vec<BnUpdate>) -> Ctx<'a> {
        Ctx {
            store: &self.store,
            mode,
            track,
            eps: self.config.bn_eps,
            updates,
        }
    }

    fn check_input(&self, tape: &Tape, x: NodeId) {
        assert_eq!(
            tape.value(x).ncols(),
            self.input.len(),
            "input rows must hold {} values",
            self.input.len()
        );
    }

    /// Encoder and projector. `track` controls gradient flow into the
    /// parameters; batch-norm statistics are appended to `updates` in
    /// training mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: BnMode,
        track: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Forward {
        self.check_input(tape, x);
        let mut ctx = self.ctx(mode, track, updates);
        let h = forward(&self.encoder, tape, x, &mut ctx);
        let z = forward(&self.projector, tape, h, &mut ctx);
        Forward { h, z }
    }

    /// Encoder only.
    pub fn features(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: BnMode,
        track: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> NodeId {
        self.check_input(tape, x);
        let mut ctx = self.ctx(mode, track, updates);
        forward(&self.encoder, tape, x, &mut ctx)
    }

    /// BYOL predictor `q(z)`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        z: NodeId,
        mode: BnMode,
        track: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> NodeId {
        let mut ctx = self.ctx(mode, track, updates);
        forward(&self.predictor, tape, z, &mut ctx)
    }

    /// Distillation predictor mapping current embeddings towards the
    /// frozen model's.
    pub fn distill_head(
        &self,
        tape: &mut Tape,
        z: NodeId,
        mode: BnMode,
        track: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> NodeId {
        let mut ctx = self.ctx(mode, track, updates);
        forward(&self.distill, tape, z, &mut ctx)
    }

    /// Fold batch statistics into running statistics:
    /// `running = (1 - m) running + m batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (id, vals) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                let r = self.store.value_mut(id);
                for (dst, v) in r.iter_mut().zip(vals.iter()) {
                    *dst = (1.0 - m) * *dst + m * v;
                }
            }
        }
    }

    /// Parameters of the encoder and projector.
    pub fn backbone_hash(&self) -> String {
        let mut s = ParamStore::new();
        for (_, e) in self.store.iter().filter(|(_, e)| is_backbone(&e.name)) {
            s.add(e.name.clone(), e.kind, e.value.clone());
        }
        s.content_hash()
    }

    /// Same architecture and parameter shapes.
    pub fn compatible_with(&self, other: &TriNet) -> bool {
        self.input == other.input
            && self.store.len() == other.store.len()
            && self
                .store
                .iter()
                .zip(other.store.iter())
                .all(|((_, a), (_, b))| a.name == b.name && a.value.dim() == b.value.dim())
    }
}

/// Evaluation-mode features and embeddings of a batch, with a finiteness
/// check. Embeddings are not normalised.
pub fn embed(net: &TriNet, x: &Mat) -> Result<(Mat, Mat)> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let mut sink = Vec::new();
    let f = net.forward(&mut tape, xi, BnMode::Eval, false, &mut sink);
    let (h, z) = (tape.value(f.h).clone(), tape.value(f.z).clone());
    check_finite(&h, "encoder features")?;
    check_finite(&z, "projector embeddings")?;
    Ok((h, z))
}

/// Evaluation-mode encoder features in chunks of `chunk` rows.
pub fn encode_features(net: &TriNet, x: &Mat, chunk: usize) -> Result<Mat> {
    let mut out = Mat::zeros((x.nrows(), net.feature_dim));
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let mut tape = Tape::new();
        let xi = tape.constant(x.slice(ndarray::s![start..end, ..]).to_owned());
        let mut sink = Vec::new();
        let h = net.features(&mut tape, xi, BnMode::Eval, false, &mut sink);
        out.slice_mut(ndarray::s![start..end, ..])
            .assign(tape.value(h));
        start = end;
    }
    check_finite(&out, "encoder features")?;
    Ok(out)
}

pub(crate) fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if let Some((i, v)) = m.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        let (r, c) = (i / m.ncols().max(1), i % m.ncols().max(1));
        return Err(Error::NonFinite {
            context: what.into(),
            detail: format!("value {v} at row {r}, column {c}"),
        });
    }
    Ok(())
}

/// Frozen copy of a network's encoder and projector. Forward passes run in
/// evaluation mode and never produce parameter gradients.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    net: TriNet,
}

pub fn snapshot(net: &TriNet) -> FrozenModel {
    FrozenModel { net: net.clone() }
}

impl FrozenModel {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Forward {
        let mut sink = Vec::new();
        self.net.forward(tape, x, BnMode::Eval, false, &mut sink)
    }

    /// Embeddings of a batch without a caller-managed tape.
    pub fn embed(&self, x: &Mat) -> Result<(Mat, Mat)> {
        embed(&self.net, x)
    }

    pub fn params(&self) -> &ParamStore {
        &self.net.store
    }

    pub fn backbone_hash(&self) -> String {
        self.net.backbone_hash()
    }

    /// Network view, e.g. for evaluation.
    pub fn net(&self) -> &TriNet {
        &self.net
    }
}

/// Momentum-averaged copy of a network's encoder and projector.
#[derive(Debug, Clone)]
pub struct EmaTarget {
    net: TriNet,
}

impl EmaTarget {
    pub fn new(online: &TriNet) -> Self {
        Self {
            net: online.clone(),
        }
    }

    /// Target forward. Batch norm uses batch statistics, as the online
    /// network does during training; no gradients flow.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Forward {
        let mut sink = Vec::new();
        self.net.forward(tape, x, BnMode::Train, false, &mut sink)
    }

    pub fn net(&self) -> &TriNet {
        &self.net
    }
}

/// `target = m target + (1 - m) online` for every encoder and projector
/// tensor, running statistics included.
pub fn ema_update(target: &mut EmaTarget, online: &TriNet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum {m} outside [0, 1]"
        )));
    }
    if !target.net.compatible_with(online) {
        return Err(Error::Shape(
            "EMA target and online network differ in shape".into(),
        ));
    }
    for ((_, t), (_, o)) in target.net.store.iter_mut().zip(online.store.iter()) {
        if !is_backbone(&t.name) {
            continue;
        }
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            t.value.assign(&o.value);
            continue;
        }
        ndarray::Zip::from(&mut t.value)
            .and(&o.value)
            .for_each(|a, &b| *a = m * *a + (1.0 - m) * b);
    }
    Ok(())
}
