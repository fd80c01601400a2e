use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Shape of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageGeom {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images stored as contiguous `H x W x C` bytes with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub geom: ImageGeom,
    pub class_count: usize,
    images: Vec<u8>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        geom: ImageGeom,
        class_count: usize,
        images: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() * geom.len() {
            return Err(Error::Shape(format!(
                "{} image bytes for {} labels of {} bytes each",
                images.len(),
                labels.len(),
                geom.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            name: name.into(),
            geom,
            class_count,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `H x W x C` bytes of sample `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.geom.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw_images(&self) -> &[u8] {
        &self.images
    }

    /// Samples `indices` in the given order, keeping the class count.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.geom.len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            name: self.name.clone(),
            geom: self.geom,
            class_count: self.class_count,
            images,
            labels,
        }
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Class-structured Gaussian images for fast experiments.
///
/// Classes are arranged as `groups x members`: class `c` belongs to group
/// `c / members` and has member index `c % members`. The clean image of a
/// class is `0.5 + group_scale * G[group] + class_scale * K[member]` where
/// `G` and `K` are fixed random unit-RMS pixel patterns. Every sample adds
/// isotropic Gaussian noise of standard deviation `noise`. Pixel values are
/// clamped to `[0, 1]` and quantised to bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of class groups; must divide `classes`.
    pub groups: usize,
    pub group_scale: f64,
    pub class_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 100,
            test_per_class: 50,
            channels: 1,
            height: 8,
            width: 8,
            groups: 1,
            group_scale: 0.0,
            class_scale: 0.15,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "synthetic dataset dimensions must be positive".into(),
            ));
        }
        if self.groups == 0 || self.classes % self.groups != 0 {
            return Err(Error::Config(format!(
                "synthetic groups ({}) must divide classes ({})",
                self.groups, self.classes
            )));
        }
        if !(self.noise >= 0.0) || !self.group_scale.is_finite() || !self.class_scale.is_finite() {
            return Err(Error::Config(
                "synthetic scales must be finite and noise >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn geom(&self) -> ImageGeom {
        ImageGeom {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

fn unit_rms_pattern(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut v: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / len as f64)
        .sqrt()
        .max(1e-12);
    v.iter_mut().for_each(|x| *x /= rms);
    v
}

/// Class-mean images (as values in `[0, 1]` before noise) in `H x W x C`.
pub fn synthetic_means(cfg: &SyntheticConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let len = cfg.geom().len();
    let members = cfg.classes / cfg.groups;
    let mut rng = rng::stream(cfg.seed, Stream::Synthetic, 0, 0);
    let group_pat: Vec<Vec<f64>> = (0..cfg.groups)
        .map(|_| unit_rms_pattern(len, &mut rng))
        .collect();
    let member_pat: Vec<Vec<f64>> = (0..members)
        .map(|_| unit_rms_pattern(len, &mut rng))
        .collect();
    Ok((0..cfg.classes)
        .map(|c| {
            let (g, m) = (c / members, c % members);
            (0..len)
                .map(|p| {
                    0.5 + cfg.group_scale * group_pat[g][p] + cfg.class_scale * member_pat[m][p]
                })
                .collect()
        })
        .collect())
}

fn synthetic_split(
    cfg: &SyntheticConfig,
    means: &[Vec<f64>],
    per_class: usize,
    split: u64,
) -> Result<LabeledDataset> {
    let len = cfg.geom().len();
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rng = rng::stream(cfg.seed, Stream::Synthetic, 1 + split, 0);
    let n = cfg.classes * per_class;
    let mut images = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so that the natural sample order is not sorted.
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                let v = (m + cfg.noise * normal.sample(&mut rng)).clamp(0.0, 1.0);
                images.push((v * 255.0).round() as u8);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        "synthetic-gaussians",
        cfg.geom(),
        cfg.classes,
        images,
        labels,
    )
}

pub fn synthetic_gaussians(cfg: &SyntheticConfig) -> Result<DatasetPair> {
    let means = synthetic_means(cfg)?;
    Ok(DatasetPair {
        train: synthetic_split(cfg, &means, cfg.train_per_class, 0)?,
        test: synthetic_split(cfg, &means, cfg.test_per_class, 1)?,
    })
}

/// Registered dataset names.
pub const DATASETS: [&str; 4] = ["cifar10", "cifar100", "tinyimagenet", "synthetic-gaussians"];

/// Load a registered dataset. `root` is ignored for the synthetic dataset,
/// whose parameters come from `synthetic`.
pub fn load_dataset(name: &str, root: &Path, synthetic: &SyntheticConfig) -> Result<DatasetPair> {
    match name {
        "cifar10" => load_cifar(root, CifarKind::Ten),
        "cifar100" => load_cifar(root, CifarKind::Hundred),
        "tinyimagenet" => load_tinyimagenet(root),
        "synthetic-gaussians" => synthetic_gaussians(synthetic),
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

#[derive(Clone, Copy)]
enum CifarKind {
    Ten,
    Hundred,
}

const CIFAR_GEOM: ImageGeom = ImageGeom {
    channels: 3,
    height: 32,
    width: 32,
};

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DatasetLoad {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// First of `candidates` under `root` that exists, else `root` itself.
fn locate(root: &Path, candidates: &[&str]) -> PathBuf {
    candidates
        .iter()
        .map(|c| root.join(c))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| root.to_path_buf())
}

fn read_cifar_file(
    path: &Path,
    label_bytes: usize,
    images: &mut Vec<u8>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    let plane = 32 * 32;
    let record = label_bytes + 3 * plane;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(load_err(
            path,
            format!(
                "size {} is not a multiple of the {record}-byte record",
                bytes.len()
            ),
        ));
    }
    for rec in bytes.chunks_exact(record) {
        // The fine label is the last label byte.
        labels.push(rec[label_bytes - 1] as usize);
        let px = &rec[label_bytes..];
        // Stored as three channel planes; convert to interleaved HWC.
        for p in 0..plane {
            for c in 0..3 {
                images.push(px[c * plane + p]);
            }
        }
    }
    Ok(())
}

fn load_cifar(root: &Path, kind: CifarKind) -> Result<DatasetPair> {
    let (dir, train_files, test_files, label_bytes, classes, name) = match kind {
        CifarKind::Ten => (
            locate(root, &["cifar-10-batches-bin"]),
            (1..=5)
                .map(|i| format!("data_batch_{i}.bin"))
                .collect::<Vec<_>>(),
            vec!["test_batch.bin".to_string()],
            1,
            10,
            "cifar10",
        ),
        CifarKind::Hundred => (
            locate(root, &["cifar-100-binary"]),
            vec!["train.bin".to_string()],
            vec!["test.bin".to_string()],
            2,
            100,
            "cifar100",
        ),
    };
    let read = |files: &[String]| -> Result<LabeledDataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            read_cifar_file(&dir.join(f), label_bytes, &mut images, &mut labels)?;
        }
        LabeledDataset::new(name, CIFAR_GEOM, classes, images, labels)
            .map_err(|e| load_err(&dir, e.to_string()))
    };
    Ok(DatasetPair {
        train: read(&train_files)?,
        test: read(&test_files)?,
    })
}

fn decode_rgb64(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    if rgb.dimensions() != (64, 64) {
        return Err(load_err(
            path,
            format!("expected 64x64, got {:?}", rgb.dimensions()),
        ));
    }
    Ok(rgb.into_raw())
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| load_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn load_tinyimagenet(root: &Path) -> Result<DatasetPair> {
    let dir = locate(root, &["tiny-imagenet-200"]);
    let wnids_path = dir.join("wnids.txt");
    let wnids_text =
        fs::read_to_string(&wnids_path).map_err(|e| load_err(&wnids_path, e.to_string()))?;
    let mut wnids: Vec<String> = wnids_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    wnids.sort();
    let class_of = |w: &str| wnids.binary_search_by(|x| x.as_str().cmp(w)).ok();
    let geom = ImageGeom {
        channels: 3,
        height: 64,
        width: 64,
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, w) in wnids.iter().enumerate() {
        for f in sorted_files(&dir.join("train").join(w).join("images"))? {
            images.extend(decode_rgb64(&f)?);
            labels.push(c);
        }
    }
    let train = LabeledDataset::new("tinyimagenet", geom, wnids.len(), images, labels)?;

    let ann_path = dir.join("val").join("val_annotations.txt");
    let ann = fs::read_to_string(&ann_path).map_err(|e| load_err(&ann_path, e.to_string()))?;
    let mut entries: Vec<(String, usize)> = Vec::new();
    for line in ann.lines().filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split('\t');
        let (Some(file), Some(w)) = (cols.next(), cols.next()) else {
            return Err(load_err(&ann_path, format!("malformed line `{line}`")));
        };
        let c = class_of(w).ok_or_else(|| load_err(&ann_path, format!("unknown wnid {w}")))?;
        entries.push((file.to_string(), c));
    }
    entries.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (file, c) in entries {
        images.extend(decode_rgb64(&dir.join("val").join("images").join(file))?);
        labels.push(c);
    }
    let test = LabeledDataset::new("tinyimagenet", geom, wnids.len(), images, labels)?;
    Ok(DatasetPair { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts() {
        let cfg = SyntheticConfig::default();
        let pair = synthetic_gaussians(&cfg).unwrap();
        assert_eq!(pair.train.class_count, 4);
        assert_eq!(pair.train.len(), 400);
        assert_eq!(pair.train.class_histogram(), vec![100; 4]);
        assert_eq!(pair.test.len(), 200);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(
            synthetic_gaussians(&cfg).unwrap(),
            synthetic_gaussians(&cfg).unwrap()
        );
        let other = SyntheticConfig { seed: 1, ..cfg };
        assert_ne!(
            synthetic_gaussians(&cfg).unwrap().train,
            synthetic_gaussians(&other).unwrap().train
        );
    }

    #[test]
    fn unknown_name() {
        let err = load_dataset("mnist", Path::new("."), &SyntheticConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownDataset(_)));
    }

    #[test]
    fn cifar10_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        for c in 0..3u8 {
            rec.extend(std::iter::repeat(c * 10).take(1024));
        }
        for i in 1..=5 {
            fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        fs::write(
            dir.path().join("test_batch.bin"),
            [rec.clone(), rec.clone()].concat(),
        )
        .unwrap();
        let pair = load_dataset("cifar10", dir.path(), &SyntheticConfig::default()).unwrap();
        assert_eq!(pair.train.class_count, 10);
        assert_eq!(pair.train.len(), 5);
        assert_eq!(pair.test.len(), 2);
        assert_eq!(pair.train.label(0), 7);
        assert_eq!(&pair.train.image(0)[..6], &[0, 10, 20, 0, 10, 20]);
    }

    #[test]
    fn corrupt_cifar_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.bin"), [1u8, 2, 3]).unwrap();
        let err = load_dataset("cifar100", dir.path(), &SyntheticConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DatasetLoad { .. }), "{err}");
    }
}
