//! Experiment configuration: TOML documents, dotted-key overrides,
//! canonical hashing and named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationPolicy, ClassOrder, SplitMode, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::{SslKind, SslLossSpec};
use crate::models::{Arch, ModelConfig};
use crate::objective::Strategy;
use crate::optim::{OptimConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Registry name: `cifar10`, `cifar100`, `tinyimagenet` or
    /// `synthetic-gaussians`.
    pub dataset: String,
    pub root: PathBuf,
    pub num_tasks: usize,
    pub split: SplitMode,
    /// Defaults to a shuffle keyed by the trainer seed.
    pub class_order: Option<ClassOrder>,
    pub synthetic: SyntheticConfig,
    /// Defaults to the CIFAR recipe for image datasets and the light toy
    /// recipe for synthetic data.
    pub augmentation: Option<AugmentationPolicy>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic-gaussians".into(),
            root: PathBuf::from("data"),
            num_tasks: 2,
            split: SplitMode::Cil,
            class_order: None,
            synthetic: SyntheticConfig::default(),
            augmentation: None,
        }
    }
}

impl DataConfig {
    pub fn is_synthetic(&self) -> bool {
        self.dataset == "synthetic-gaussians"
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        match &self.augmentation {
            Some(p) => p.clone(),
            None if self.is_synthetic() => AugmentationPolicy::toy(self.synthetic.channels, 0.1),
            None => AugmentationPolicy::cifar_ssl(),
        }
    }

    pub fn class_order(&self, seed: u64) -> ClassOrder {
        self.class_order
            .clone()
            .unwrap_or(ClassOrder::Shuffled(seed))
    }
}

/// Epoch count for every task, or one entry per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epochs {
    All(usize),
    PerTask(Vec<usize>),
}

impl Epochs {
    pub fn for_task(&self, t: usize) -> usize {
        match self {
            Epochs::All(e) => *e,
            Epochs::PerTask(v) => v[t],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: Epochs,
    pub batch_size: usize,
    /// Memory rows drawn per step for replay and mixup.
    pub buffer_batch_size: usize,
    /// Exemplars kept per finished task.
    pub buffer_budget: usize,
    /// Mixup coefficients are drawn from `Beta(alpha, alpha)`.
    pub alpha: f64,
    /// Distillation weight.
    pub zeta: f64,
    /// Base momentum of the BYOL target network.
    pub ema_momentum: f64,
    pub optim: OptimConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Cromo,
            seed: 0,
            epochs: Epochs::All(1),
            batch_size: 256,
            buffer_batch_size: 64,
            buffer_budget: 500,
            alpha: 1.0,
            zeta: 1.0,
            ema_momentum: 0.99,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Standardise features with training-set statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    /// Settings used for out-of-distribution transfer.
    pub fn transfer() -> Self {
        Self {
            epochs: 200,
            lr: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "probe epochs, batch_size and lr must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "probe momentum must lie in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub transfer_probe: ProbeConfig,
    pub knn_k: usize,
    /// Rows per forward pass when extracting features.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            transfer_probe: ProbeConfig::transfer(),
            knn_k: 200,
            chunk: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Parent of the run directories. Not part of the config hash.
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: SslLossSpec,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: SslLossSpec::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn cfg_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

/// Parse `raw` as a TOML value, falling back to a plain string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let slot = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(
        parts[parts.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

impl ExperimentConfig {
    /// Parse a TOML document, apply overrides and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// A file path when one exists, otherwise a preset name.
    pub fn resolve(name_or_path: &str, overrides: &[String]) -> Result<Self> {
        let p = Path::new(name_or_path);
        if p.exists() {
            return Self::load(p, overrides);
        }
        let base = preset(name_or_path)?;
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_tasks == 0 {
            return Err(cfg_err("data.num_tasks must be >= 1"));
        }
        if d.is_synthetic() {
            d.synthetic.validate()?;
        }
        if let Some(ClassOrder::Explicit(v)) = &d.class_order {
            if v.is_empty() {
                return Err(cfg_err("data.class_order: explicit order is empty"));
            }
        }
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.trainer;
        t.optim.validate()?;
        match &t.epochs {
            Epochs::All(0) => return Err(cfg_err("trainer.epochs must be >= 1")),
            Epochs::PerTask(v) if v.len() != d.num_tasks => {
                return Err(cfg_err(format!(
                    "trainer.epochs lists {} entries for {} tasks",
                    v.len(),
                    d.num_tasks
                )))
            }
            Epochs::PerTask(v) if v.contains(&0) => {
                return Err(cfg_err("trainer.epochs entries must be >= 1"))
            }
            _ => {}
        }
        if t.batch_size < 2 {
            return Err(cfg_err("trainer.batch_size must be >= 2"));
        }
        if t.buffer_batch_size == 0 {
            return Err(cfg_err("trainer.buffer_batch_size must be >= 1"));
        }
        if !(t.alpha > 0.0) || !t.alpha.is_finite() {
            return Err(cfg_err("trainer.alpha must be > 0"));
        }
        if !(t.zeta >= 0.0) || !t.zeta.is_finite() {
            return Err(cfg_err("trainer.zeta must be >= 0"));
        }
        if !(0.0..=1.0).contains(&t.ema_momentum) {
            return Err(cfg_err("trainer.ema_momentum must lie in [0, 1]"));
        }
        self.eval.probe.validate()?;
        self.eval.transfer_probe.validate()?;
        if self.eval.knn_k == 0 || self.eval.chunk == 0 {
            return Err(cfg_err("eval.knn_k and eval.chunk must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (keys sorted, output root
    /// dropped), so key order in the source document does not matter.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_root");
        }
        let canon = serde_json::to_string(&v).expect("json value serialises");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    /// Run directory: `<output_root>/<name>-<first 12 hash chars>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_root
            .join(format!("{}-{}", self.name, &self.hash()[..12]))
    }
}

/// Benchmark rows: classes per task, task count, per-task budget, epochs.
struct Bench {
    key: &'static str,
    dataset: &'static str,
    num_tasks: usize,
    budget: usize,
    first_epochs: usize,
    later_epochs: usize,
    /// Column of the per-method settings (0 CIFAR-10, 1 CIFAR-100, 2 TinyImageNet).
    column: usize,
}

const BENCHES: [Bench; 4] = [
    Bench {
        key: "cifar10_split2",
        dataset: "cifar10",
        num_tasks: 2,
        budget: 500,
        first_epochs: 500,
        later_epochs: 500,
        column: 0,
    },
    Bench {
        key: "cifar100_split5",
        dataset: "cifar100",
        num_tasks: 5,
        budget: 500,
        first_epochs: 750,
        later_epochs: 750,
        column: 1,
    },
    Bench {
        key: "cifar100_split10",
        dataset: "cifar100",
        num_tasks: 10,
        budget: 100,
        first_epochs: 600,
        later_epochs: 350,
        column: 1,
    },
    Bench {
        key: "tinyimagenet_split10",
        dataset: "tinyimagenet",
        num_tasks: 10,
        budget: 100,
        first_epochs: 500,
        later_epochs: 350,
        column: 2,
    },
];

/// Batch size, lr, optimiser, weight decay and projector width per method
/// and dataset column.
fn method_settings(kind: SslKind, column: usize) -> (usize, f64, OptimizerKind, f64, usize) {
    use OptimizerKind::*;
    match kind {
        SslKind::Corinfomax => (
            [512, 512, 256][column],
            [0.1, 0.1, 0.5][column],
            Sgd,
            1e-4,
            [64, 128, 64][column],
        ),
        SslKind::Simclr => (
            [512, 512, 256][column],
            [0.6, 0.6, 0.3][column],
            Sgd,
            5e-4,
            [128, 128, 2048][column],
        ),
        SslKind::Byol => (256, [1.0, 1.0, 0.3][column], Lars, 1e-5, 4096),
        SslKind::BarlowTwins => (256, 0.3, Lars, 1e-4, 2048),
    }
}

fn ssl_key(kind: SslKind) -> &'static str {
    match kind {
        SslKind::BarlowTwins => "barlow",
        k => k.name(),
    }
}

/// Names of every built-in preset.
pub fn preset_names() -> Vec<String> {
    let mut v = vec!["toy".to_string()];
    for b in &BENCHES {
        for k in SslKind::ALL {
            for s in Strategy::ALL {
                v.push(format!("{}_{}_{}", b.key, ssl_key(k), s.name()));
            }
        }
    }
    v
}

/// The small synthetic setup used by the test-suite experiments: four
/// classes with independent mean patterns, two tasks, an MLP encoder.
pub fn toy_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "toy".into(),
        ..ExperimentConfig::default()
    };
    c.data.class_order = Some(ClassOrder::Natural);
    c.data.synthetic = SyntheticConfig {
        classes: 4,
        train_per_class: 100,
        test_per_class: 100,
        channels: 1,
        height: 8,
        width: 8,
        groups: 4,
        group_scale: 0.06,
        class_scale: 0.0,
        noise: 0.15,
        seed: 0,
    };
    // Augmentation noise above the sample noise, so instances can only be
    // told apart through their class pattern.
    c.data.augmentation = Some(AugmentationPolicy::toy(1, 0.3));
    c.model = ModelConfig {
        arch: Arch::Mlp,
        mlp_hidden: vec![64],
        feature_dim: 16,
        projector_hidden: 32,
        projector_dim: 16,
        projector_layers: 2,
        predictor_hidden: 32,
        ..ModelConfig::default()
    };
    c.loss = SslLossSpec::new(SslKind::Simclr);
    c.trainer = TrainerConfig {
        strategy: Strategy::Cromo,
        epochs: Epochs::All(200),
        batch_size: 32,
        buffer_batch_size: 16,
        buffer_budget: 40,
        optim: OptimConfig {
            lr: 0.2,
            warmup_epochs: 0,
            weight_decay: 1e-4,
            ..OptimConfig::default()
        },
        ..TrainerConfig::default()
    };
    c.eval = EvalConfig {
        probe: ProbeConfig {
            epochs: 30,
            batch_size: 64,
            ..ProbeConfig::default()
        },
        knn_k: 20,
        ..EvalConfig::default()
    };
    c
}

/// Look up a preset by name: `toy` or `<benchmark>_<ssl>_<strategy>`, for
/// example `cifar100_split5_barlow_cromo`.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    if name == "toy" {
        return Ok(toy_config());
    }
    let unknown = || {
        cfg_err(format!(
            "`{name}` is neither a config file nor a preset name"
        ))
    };
    let bench = BENCHES
        .iter()
        .find(|b| name.starts_with(b.key) && name[b.key.len()..].starts_with('_'))
        .ok_or_else(unknown)?;
    let rest = &name[bench.key.len() + 1..];
    let kind = SslKind::ALL
        .into_iter()
        .find(|k| rest.starts_with(ssl_key(*k)) && rest[ssl_key(*k).len()..].starts_with('_'))
        .ok_or_else(unknown)?;
    let strategy: Strategy = rest[ssl_key(kind).len() + 1..]
        .parse()
        .map_err(|_| unknown())?;

    let (batch, lr, opt, wd, proj) = method_settings(kind, bench.column);
    let mut c = ExperimentConfig {
        name: name.to_string(),
        ..ExperimentConfig::default()
    };
    c.data.dataset = bench.dataset.into();
    c.data.num_tasks = bench.num_tasks;
    c.model = ModelConfig {
        arch: if bench.dataset == "tinyimagenet" {
            Arch::Resnet50
        } else {
            Arch::Resnet18
        },
        projector_hidden: proj,
        projector_dim: proj,
        predictor_hidden: 4096,
        ..ModelConfig::default()
    };
    c.loss = SslLossSpec::new(kind);
    let epochs = if bench.first_epochs == bench.later_epochs {
        Epochs::All(bench.first_epochs)
    } else {
        let mut v = vec![bench.later_epochs; bench.num_tasks];
        v[0] = bench.first_epochs;
        Epochs::PerTask(v)
    };
    c.trainer = TrainerConfig {
        strategy,
        epochs,
        batch_size: batch,
        buffer_budget: bench.budget,
        optim: OptimConfig {
            kind: opt,
            lr,
            weight_decay: wd,
            ..OptimConfig::default()
        },
        ..TrainerConfig::default()
    };
    Ok(c)
}
