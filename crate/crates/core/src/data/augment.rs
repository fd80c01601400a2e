use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::ImageGeom;
use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// One augmentation step. Probabilities are per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugOp {
    /// Crop a random region of relative area in `scale` and aspect ratio in
    /// `ratio`, resized back to the input size.
    RandomResizedCrop {
        scale: [f64; 2],
        ratio: [f64; 2],
    },
    HorizontalFlip {
        p: f64,
    },
    ColorJitter {
        p: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale {
        p: f64,
    },
    GaussianBlur {
        p: f64,
        sigma: [f64; 2],
    },
    Solarize {
        p: f64,
        threshold: f64,
    },
    /// Additive pixel noise, applied before clamping to `[0, 1]`.
    GaussianNoise {
        std: f64,
    },
}

impl AugOp {
    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = match *self {
            AugOp::RandomResizedCrop { scale, ratio } => {
                scale[0] > 0.0
                    && scale[0] <= scale[1]
                    && scale[1] <= 1.0
                    && ratio[0] > 0.0
                    && ratio[0] <= ratio[1]
            }
            AugOp::HorizontalFlip { p } | AugOp::Grayscale { p } => prob(p),
            AugOp::ColorJitter {
                p,
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                prob(p)
                    && brightness >= 0.0
                    && contrast >= 0.0
                    && saturation >= 0.0
                    && (0.0..=0.5).contains(&hue)
            }
            AugOp::GaussianBlur { p, sigma } => prob(p) && sigma[0] > 0.0 && sigma[0] <= sigma[1],
            AugOp::Solarize { p, threshold } => prob(p) && (0.0..=1.0).contains(&threshold),
            AugOp::GaussianNoise { std } => std >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid augmentation parameters: {self:?}"
            )))
        }
    }
}

/// Train and eval op lists plus per-channel normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub train_ops: Vec<AugOp>,
    pub eval_ops: Vec<AugOp>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::identity(3)
    }
}

impl AugmentationPolicy {
    /// No ops; normalisation with mean 0 and std 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            train_ops: Vec::new(),
            eval_ops: Vec::new(),
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// The usual CIFAR-style SSL recipe.
    pub fn cifar_ssl() -> Self {
        Self {
            train_ops: vec![
                AugOp::RandomResizedCrop {
                    scale: [0.08, 1.0],
                    ratio: [0.75, 4.0 / 3.0],
                },
                AugOp::ColorJitter {
                    p: 0.8,
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.2,
                    hue: 0.1,
                },
                AugOp::Grayscale { p: 0.2 },
                AugOp::Solarize {
                    p: 0.1,
                    threshold: 0.5,
                },
                AugOp::HorizontalFlip { p: 0.5 },
            ],
            eval_ops: Vec::new(),
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.247, 0.243, 0.261],
        }
    }

    /// Light recipe for tiny synthetic images: pixel noise plus brightness
    /// and contrast jitter.
    pub fn toy(channels: usize, noise: f64) -> Self {
        Self {
            train_ops: vec![
                AugOp::ColorJitter {
                    p: 0.8,
                    brightness: 0.2,
                    contrast: 0.2,
                    saturation: 0.0,
                    hue: 0.0,
                },
                AugOp::GaussianNoise { std: noise },
            ],
            eval_ops: Vec::new(),
            mean: vec![0.5; channels],
            std: vec![0.25; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalisation has {}/{} entries for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalisation std must be > 0".into()));
        }
        for op in self.train_ops.iter().chain(&self.eval_ops) {
            op.validate()?;
        }
        Ok(())
    }
}

/// Working image: `C x H x W` values in `[0, 1]`.
struct Img {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Img {
    fn from_hwc(bytes: &[u8], g: ImageGeom) -> Self {
        let mut data = vec![0.0; g.len()];
        let plane = g.height * g.width;
        for p in 0..plane {
            for c in 0..g.channels {
                data[c * plane + p] = bytes[p * g.channels + c] as f64 / 255.0;
            }
        }
        Self {
            c: g.channels,
            h: g.height,
            w: g.width,
            data,
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    fn gray(&self) -> Vec<f64> {
        let n = self.plane();
        if self.c < 3 {
            return self.data[..n].to_vec();
        }
        (0..n)
            .map(|p| 0.299 * self.data[p] + 0.587 * self.data[n + p] + 0.114 * self.data[2 * n + p])
            .collect()
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn resized_crop(img: &mut Img, scale: [f64; 2], ratio: [f64; 2], rng: &mut impl Rng) {
    let (h, w) = (img.h as f64, img.w as f64);
    let area = h * w;
    let mut region = (0, 0, img.h, img.w);
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let r = uniform(rng, ratio[0].ln(), ratio[1].ln()).exp();
        let cw = (target * r).sqrt().round() as usize;
        let ch = (target / r).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= img.w && ch <= img.h {
            let y0 = rng.random_range(0..=img.h - ch);
            let x0 = rng.random_range(0..=img.w - cw);
            region = (y0, x0, ch, cw);
            break;
        }
    }
    let (y0, x0, ch, cw) = region;
    let plane = img.plane();
    let mut out = vec![0.0; img.data.len()];
    let sy = ch as f64 / h;
    let sx = cw as f64 / w;
    for c in 0..img.c {
        let src = &img.data[c * plane..(c + 1) * plane];
        for oy in 0..img.h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let iy = fy.floor() as usize;
            let ty = fy - iy as f64;
            let iy1 = (iy + 1).min(ch - 1);
            for ox in 0..img.w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let ix = fx.floor() as usize;
                let tx = fx - ix as f64;
                let ix1 = (ix + 1).min(cw - 1);
                let at = |y: usize, x: usize| src[(y0 + y) * img.w + x0 + x];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix1) * tx;
                let bot = at(iy1, ix) * (1.0 - tx) + at(iy1, ix1) * tx;
                out[c * plane + oy * img.w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    img.data = out;
}

fn flip(img: &mut Img) {
    let w = img.w;
    for row in img.data.chunks_exact_mut(w) {
        row.reverse();
    }
}

fn jitter(img: &mut Img, b: f64, c: f64, s: f64, hue: f64, rng: &mut impl Rng) {
    if b > 0.0 {
        let f = uniform(rng, (1.0 - b).max(0.0), 1.0 + b);
        img.data.iter_mut().for_each(|v| *v *= f);
        img.clamp();
    }
    if c > 0.0 {
        let f = uniform(rng, (1.0 - c).max(0.0), 1.0 + c);
        let g = img.gray();
        let m = g.iter().sum::<f64>() / g.len() as f64;
        img.data.iter_mut().for_each(|v| *v = (*v - m) * f + m);
        img.clamp();
    }
    if s > 0.0 && img.c >= 3 {
        let f = uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
        let g = img.gray();
        let n = img.plane();
        for ch in 0..3 {
            for p in 0..n {
                let v = &mut img.data[ch * n + p];
                *v = (*v - g[p]) * f + g[p];
            }
        }
        img.clamp();
    }
    if hue > 0.0 && img.c >= 3 {
        // Rotate chroma in YIQ space.
        let theta = uniform(rng, -hue, hue) * std::f64::consts::TAU;
        let (sin, cos) = theta.sin_cos();
        let n = img.plane();
        for p in 0..n {
            let (r, g, b) = (img.data[p], img.data[n + p], img.data[2 * n + p]);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (i * cos - q * sin, i * sin + q * cos);
            img.data[p] = y + 0.956 * i + 0.621 * q;
            img.data[n + p] = y - 0.272 * i - 0.647 * q;
            img.data[2 * n + p] = y - 1.106 * i + 1.703 * q;
        }
        img.clamp();
    }
}

fn grayscale(img: &mut Img) {
    if img.c < 3 {
        return;
    }
    let g = img.gray();
    let n = img.plane();
    for ch in 0..img.c {
        img.data[ch * n..(ch + 1) * n].copy_from_slice(&g);
    }
}

fn blur(img: &mut Img, sigma: f64) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.h as isize, img.w as isize);
    let n = img.plane();
    let mut tmp = vec![0.0; n];
    for c in 0..img.c {
        let ch = &mut img.data[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * ch[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc / norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                ch[(y * w + x) as usize] = acc / norm;
            }
        }
    }
}

fn apply(img: &mut Img, op: &AugOp, rng: &mut impl Rng) {
    match *op {
        AugOp::RandomResizedCrop { scale, ratio } => resized_crop(img, scale, ratio, rng),
        AugOp::HorizontalFlip { p } => {
            if rng.random_bool(p) {
                flip(img)
            }
        }
        AugOp::ColorJitter {
            p,
            brightness,
            contrast,
            saturation,
            hue,
        } => {
            if rng.random_bool(p) {
                jitter(img, brightness, contrast, saturation, hue, rng)
            }
        }
        AugOp::Grayscale { p } => {
            if rng.random_bool(p) {
                grayscale(img)
            }
        }
        AugOp::GaussianBlur { p, sigma } => {
            if rng.random_bool(p) {
                let s = uniform(rng, sigma[0], sigma[1]);
                blur(img, s)
            }
        }
        AugOp::Solarize { p, threshold } => {
            if rng.random_bool(p) {
                img.data.iter_mut().for_each(|v| {
                    if *v >= threshold {
                        *v = 1.0 - *v
                    }
                });
            }
        }
        AugOp::GaussianNoise { std } => {
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("valid std");
                img.data.iter_mut().for_each(|v| *v += normal.sample(rng));
                img.clamp();
            }
        }
    }
}

/// Apply `ops` to every image and normalise, producing `[B, C*H*W]` rows in
/// channel-major order.
pub fn augment_batch(
    images: &[&[u8]],
    geom: ImageGeom,
    ops: &[AugOp],
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Mat> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot augment an empty batch".into(),
        ));
    }
    policy.validate(geom.channels)?;
    let mut out = Mat::zeros((images.len(), geom.len()));
    let plane = geom.height * geom.width;
    for (b, bytes) in images.iter().enumerate() {
        if bytes.len() != geom.len() {
            return Err(Error::Shape(format!(
                "image {b} has {} bytes, expected {}",
                bytes.len(),
                geom.len()
            )));
        }
        let mut img = Img::from_hwc(bytes, geom);
        for op in ops {
            apply(&mut img, op, rng);
        }
        let mut row = out.row_mut(b);
        for (j, v) in img.data.iter().enumerate() {
            let c = j / plane;
            row[j] = (v - policy.mean[c]) / policy.std[c];
        }
    }
    Ok(out)
}

/// Two independently augmented views of the same batch.
pub fn two_views(
    images: &[&[u8]],
    geom: ImageGeom,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<(Mat, Mat)> {
    let v1 = augment_batch(images, geom, &policy.train_ops, policy, rng)?;
    let v2 = augment_batch(images, geom, &policy.train_ops, policy, rng)?;
    Ok((v1, v2))
}

/// The evaluation transform of a batch.
pub fn eval_view(
    images: &[&[u8]],
    geom: ImageGeom,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Mat> {
    augment_batch(images, geom, &policy.eval_ops, policy, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    const G: ImageGeom = ImageGeom {
        channels: 3,
        height: 6,
        width: 5,
    };

    fn batch() -> Vec<Vec<u8>> {
        (0..3u8)
            .map(|b| {
                (0..G.len())
                    .map(|i| ((i * 7 + b as usize * 31) % 256) as u8)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identity_policy_gives_equal_views() {
        let imgs = batch();
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let p = AugmentationPolicy::identity(3);
        let (a, b) = two_views(&refs, G, &p, &mut stream(0, Stream::Augment, 0, 0)).unwrap();
        assert_eq!(a, b);
        // channel-major: element (c=1, y=0, x=0) of image 0 is HWC byte 1
        assert!((a[[0, 30]] - imgs[0][1] as f64 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let imgs = batch();
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let p = AugmentationPolicy::cifar_ssl();
        let a = two_views(&refs, G, &p, &mut stream(4, Stream::Augment, 1, 2)).unwrap();
        let b = two_views(&refs, G, &p, &mut stream(4, Stream::Augment, 1, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
    }

    #[test]
    fn crop_preserves_constant_images() {
        let img = vec![77u8; G.len()];
        let refs = vec![img.as_slice(); 4];
        let mut p = AugmentationPolicy::identity(3);
        p.train_ops = vec![AugOp::RandomResizedCrop {
            scale: [0.1, 1.0],
            ratio: [0.5, 2.0],
        }];
        let (a, b) = two_views(&refs, G, &p, &mut stream(1, Stream::Augment, 0, 0)).unwrap();
        let c = 77.0 / 255.0;
        assert!(a.iter().chain(b.iter()).all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let mut p = AugmentationPolicy::identity(3);
        p.train_ops = vec![AugOp::HorizontalFlip { p: 1.5 }];
        assert!(p.validate(3).is_err());
        assert!(AugmentationPolicy::identity(1).validate(3).is_err());
    }
}
