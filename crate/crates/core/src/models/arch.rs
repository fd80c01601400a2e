use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Block, Builder};
use crate::autodiff::{BnLayout, ConvGeom};
use crate::data::ImageGeom;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resnet18,
    Resnet50,
    SmallCnn,
    Mlp,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Arch::Resnet18),
            "resnet50" => Ok(Arch::Resnet50),
            "small_cnn" => Ok(Arch::SmallCnn),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

/// Network shape. Widths of the heads are in embedding units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden widths of the `mlp` encoder.
    pub mlp_hidden: Vec<usize>,
    /// Output width of the `mlp` encoder.
    pub feature_dim: usize,
    /// Batch norm after each hidden layer of the `mlp` encoder.
    pub mlp_batch_norm: bool,
    /// Base channel count of `small_cnn`.
    pub cnn_width: usize,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    /// Number of linear layers in the projector (1 to 3).
    pub projector_layers: usize,
    /// Hidden width of the BYOL predictor.
    pub predictor_hidden: usize,
    /// Hidden width of the distillation predictor; `None` means the
    /// projector output width.
    pub distill_hidden: Option<usize>,
    pub distill_bn: bool,
    pub bn_eps: f64,
    /// Weight of the newest batch in running statistics.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Resnet18,
            mlp_hidden: vec![64],
            feature_dim: 16,
            mlp_batch_norm: true,
            cnn_width: 16,
            projector_hidden: 2048,
            projector_dim: 2048,
            projector_layers: 3,
            predictor_hidden: 4096,
            distill_hidden: None,
            distill_bn: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.projector_dim == 0 || self.projector_hidden == 0 || self.predictor_hidden == 0 {
            return bad("head widths must be positive");
        }
        if !(1..=3).contains(&self.projector_layers) {
            return bad("projector_layers must be 1, 2 or 3");
        }
        if self.arch == Arch::Mlp && (self.feature_dim == 0 || self.mlp_hidden.contains(&0)) {
            return bad("mlp widths must be positive");
        }
        if self.arch == Arch::SmallCnn && self.cnn_width == 0 {
            return bad("cnn_width must be positive");
        }
        if self.distill_hidden == Some(0) {
            return bad("distill_hidden must be positive");
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1]");
        }
        Ok(())
    }
}

/// Encoder layers and their output width.
pub(crate) fn build_encoder<R: Rng>(
    cfg: &ModelConfig,
    input: ImageGeom,
    b: &mut Builder<'_, R>,
) -> Result<(Vec<Block>, usize)> {
    match cfg.arch {
        Arch::Mlp => {
            let mut blocks = Vec::new();
            let mut width = input.len();
            for &h in &cfg.mlp_hidden {
                blocks.push(b.linear(width, h, true));
                if cfg.mlp_batch_norm {
                    blocks.push(b.batch_norm(h, BnLayout::Dense));
                }
                blocks.push(Block::Relu);
                width = h;
            }
            blocks.push(b.linear(width, cfg.feature_dim, true));
            Ok((blocks, cfg.feature_dim))
        }
        Arch::SmallCnn => {
            let w = cfg.cnn_width;
            let g1 = conv_geom(input.channels, input.height, input.width, w, 3, 1);
            let g2 = conv_geom(w, g1.out_h(), g1.out_w(), 2 * w, 3, 2);
            let spatial = g2.out_h() * g2.out_w();
            let blocks = vec![
                b.conv(g1),
                b.batch_norm(w, spatial_layout(&g1)),
                Block::Relu,
                b.conv(g2),
                b.batch_norm(2 * w, spatial_layout(&g2)),
                Block::Relu,
                Block::AvgPool {
                    channels: 2 * w,
                    spatial,
                },
            ];
            Ok((blocks, 2 * w))
        }
        Arch::Resnet18 => Ok(resnet(input, b, &[2, 2, 2, 2], false)),
        Arch::Resnet50 => Ok(resnet(input, b, &[3, 4, 6, 3], true)),
    }
}

fn conv_geom(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize) -> ConvGeom {
    ConvGeom {
        in_channels: cin,
        in_h: h,
        in_w: w,
        out_channels: cout,
        kernel: k,
        stride,
        pad: k / 2,
    }
}

fn spatial_layout(g: &ConvGeom) -> BnLayout {
    BnLayout::Spatial {
        channels: g.out_channels,
        spatial: g.out_h() * g.out_w(),
    }
}

/// CIFAR-style ResNet: 3x3 stem without max-pool, four stages with widths
/// 64..512 (times 4 for bottleneck blocks), global average pooling.
fn resnet<R: Rng>(
    input: ImageGeom,
    b: &mut Builder<'_, R>,
    depths: &[usize],
    bottleneck: bool,
) -> (Vec<Block>, usize) {
    let stem = conv_geom(input.channels, input.height, input.width, 64, 3, 1);
    let mut blocks = vec![
        b.conv(stem),
        b.batch_norm(64, spatial_layout(&stem)),
        Block::Relu,
    ];
    let (mut c, mut h, mut w) = (64, stem.out_h(), stem.out_w());
    let expansion = if bottleneck { 4 } else { 1 };
    for (stage, &depth) in depths.iter().enumerate() {
        let width = 64 << stage;
        for i in 0..depth {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let out = width * expansion;
            let mut body = Vec::new();
            let (oh, ow);
            if bottleneck {
                let g1 = conv_geom(c, h, w, width, 1, 1);
                let g2 = conv_geom(width, h, w, width, 3, stride);
                let g3 = conv_geom(width, g2.out_h(), g2.out_w(), out, 1, 1);
                body.extend([
                    b.conv(g1),
                    b.batch_norm(width, spatial_layout(&g1)),
                    Block::Relu,
                ]);
                body.extend([
                    b.conv(g2),
                    b.batch_norm(width, spatial_layout(&g2)),
                    Block::Relu,
                ]);
                body.extend([b.conv(g3), b.batch_norm(out, spatial_layout(&g3))]);
                (oh, ow) = (g3.out_h(), g3.out_w());
            } else {
                let g1 = conv_geom(c, h, w, width, 3, stride);
                let g2 = conv_geom(width, g1.out_h(), g1.out_w(), out, 3, 1);
                body.extend([
                    b.conv(g1),
                    b.batch_norm(width, spatial_layout(&g1)),
                    Block::Relu,
                ]);
                body.extend([b.conv(g2), b.batch_norm(out, spatial_layout(&g2))]);
                (oh, ow) = (g2.out_h(), g2.out_w());
            }
            let shortcut = if stride != 1 || c != out {
                let g = ConvGeom {
                    pad: 0,
                    ..conv_geom(c, h, w, out, 1, stride)
                };
                vec![b.conv(g), b.batch_norm(out, spatial_layout(&g))]
            } else {
                Vec::new()
            };
            blocks.push(Block::Residual { body, shortcut });
            (c, h, w) = (out, oh, ow);
        }
    }
    blocks.push(Block::AvgPool {
        channels: c,
        spatial: h * w,
    });
    (blocks, c)
}

/// `layers` linear layers `inp -> hidden -> ... -> out` with batch norm and
/// ReLU between them.
pub(crate) fn build_mlp<R: Rng>(
    b: &mut Builder<'_, R>,
    inp: usize,
    hidden: usize,
    out: usize,
    layers: usize,
    bn: bool,
) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut width = inp;
    for _ in 1..layers {
        blocks.push(b.linear(width, hidden, true));
        if bn {
            blocks.push(b.batch_norm(hidden, BnLayout::Dense));
        }
        blocks.push(Block::Relu);
        width = hidden;
    }
    blocks.push(b.linear(width, out, true));
    blocks
}
