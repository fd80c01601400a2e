//! Layer graphs built from parameter-store handles.

use rand::Rng;

use crate::autodiff::{BnLayout, BnStats, ConvGeom, Mat, NodeId, Tape};
use crate::params::{ParamId, ParamKind, ParamStore};

/// Whether batch norm uses batch statistics (training) or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics observed during a training forward, to be folded into
/// running statistics after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum Block {
    Linear {
        w: ParamId,
        b: Option<ParamId>,
    },
    Conv {
        w: ParamId,
        geom: ConvGeom,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
        layout: BnLayout,
    },
    Relu,
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<Block>,
        shortcut: Vec<Block>,
    },
    AvgPool {
        channels: usize,
        spatial: usize,
    },
}

/// Forward context shared by every block of one pass.
pub(crate) struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub mode: BnMode,
    pub track: bool,
    pub eps: f64,
    pub updates: &'a mut Vec<BnUpdate>,
}

pub(crate) fn forward(blocks: &[Block], tape: &mut Tape, x: NodeId, ctx: &mut Ctx<'_>) -> NodeId {
    let mut h = x;
    for b in blocks {
        h = forward_block(b, tape, h, ctx);
    }
    h
}

fn forward_block(block: &Block, tape: &mut Tape, x: NodeId, ctx: &mut Ctx<'_>) -> NodeId {
    match block {
        Block::Linear { w, b } => {
            let wn = ctx.store.leaf(tape, *w, ctx.track);
            let bn = b.map(|b| ctx.store.leaf(tape, b, ctx.track));
            tape.linear(x, wn, bn)
        }
        Block::Conv { w, geom } => {
            let wn = ctx.store.leaf(tape, *w, ctx.track);
            tape.conv2d(x, wn, *geom)
        }
        Block::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            layout,
        } => {
            let g = ctx.store.leaf(tape, *gamma, ctx.track);
            let b = ctx.store.leaf(tape, *beta, ctx.track);
            match ctx.mode {
                BnMode::Train => {
                    let (y, stats) =
                        tape.batch_norm(x, g, b, *layout, BnStats::Batch { eps: ctx.eps });
                    if let Some((m, v)) = stats {
                        ctx.updates.push(BnUpdate {
                            mean_id: *mean,
                            var_id: *var,
                            mean: m,
                            var: v,
                        });
                    }
                    y
                }
                BnMode::Eval => {
                    let m = ctx.store.value(*mean).row(0).to_vec();
                    let v = ctx.store.value(*var).row(0).to_vec();
                    let stats = BnStats::Running {
                        mean: &m,
                        var: &v,
                        eps: ctx.eps,
                    };
                    tape.batch_norm(x, g, b, *layout, stats).0
                }
            }
        }
        Block::Relu => tape.relu(x),
        Block::Residual { body, shortcut } => {
            let main = forward(body, tape, x, ctx);
            let skip = if shortcut.is_empty() {
                x
            } else {
                forward(shortcut, tape, x, ctx)
            };
            let s = tape.add(main, skip);
            tape.relu(s)
        }
        Block::AvgPool { channels, spatial } => tape.avg_pool(x, *channels, *spatial),
    }
}

/// Helper that names parameters under a prefix and initialises them.
pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub prefix: String,
    counter: usize,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
            counter: 0,
        }
    }

    fn name(&mut self, layer: &str) -> String {
        let n = format!("{}.{}{}", self.prefix, layer, self.counter);
        self.counter += 1;
        n
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn fan_in(&mut self, rows: usize, cols: usize, fan_in: usize) -> Mat {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound))
    }

    pub fn linear(&mut self, inp: usize, out: usize, bias: bool) -> Block {
        let name = self.name("linear");
        let w = self.fan_in(out, inp, inp);
        let w = self
            .store
            .add(format!("{name}.weight"), ParamKind::Weight, w);
        let b = bias.then(|| {
            let v = self.fan_in(1, out, inp);
            self.store.add(format!("{name}.bias"), ParamKind::Bias, v)
        });
        Block::Linear { w, b }
    }

    pub fn conv(&mut self, geom: ConvGeom) -> Block {
        let name = self.name("conv");
        let w = self.fan_in(geom.out_channels, geom.patch_len(), geom.patch_len());
        let w = self
            .store
            .add(format!("{name}.weight"), ParamKind::Weight, w);
        Block::Conv { w, geom }
    }

    pub fn batch_norm(&mut self, channels: usize, layout: BnLayout) -> Block {
        let name = self.name("bn");
        let gamma = self.store.add(
            format!("{name}.weight"),
            ParamKind::NormScale,
            Mat::ones((1, channels)),
        );
        let beta = self.store.add(
            format!("{name}.bias"),
            ParamKind::NormShift,
            Mat::zeros((1, channels)),
        );
        let mean = self.store.add(
            format!("{name}.running_mean"),
            ParamKind::RunningMean,
            Mat::zeros((1, channels)),
        );
        let var = self.store.add(
            format!("{name}.running_var"),
            ParamKind::RunningVar,
            Mat::ones((1, channels)),
        );
        Block::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            layout,
        }
    }
}
