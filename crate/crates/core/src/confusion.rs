//! Task-confusion study: the same data trained under a round-robin task
//! schedule or from a single pool, with train-set LA/WP/TP recorded along
//! the way.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape};
use crate::config::{DataConfig, ExperimentConfig, ProbeConfig, TrainerConfig};
use crate::data::{
    augment_batch, load_dataset, make_minibatch_schedule, split_class_incremental_with,
    split_data_incremental, ClassOrder, LabeledDataset, ScheduleMode, SplitMode, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{compute_la_wp_tp, dataset_features, fit_linear_probe};
use crate::losses::{SslKind, SslLossSpec};
use crate::models::{Arch, BnMode, ModelConfig, TriNet};
use crate::objective::Strategy;
use crate::optim::{lr_at, OptimConfig, Optimizer, OptimizerKind};
use crate::params::{ParamId, ParamKind};
use crate::rng::{self, Stream};
use crate::trainer::{train_step, RunState, StepClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionMode {
    /// Round-robin over class-incremental tasks, one task per batch.
    CilMinibatch,
    /// Round-robin over data-incremental shards.
    DilMinibatch,
    /// Uniform batches from all training data.
    SinglePool,
}

impl ConfusionMode {
    pub fn name(self) -> &'static str {
        match self {
            ConfusionMode::CilMinibatch => "cil_minibatch",
            ConfusionMode::DilMinibatch => "dil_minibatch",
            ConfusionMode::SinglePool => "single_pool",
        }
    }

    pub const ALL: [ConfusionMode; 3] = [
        ConfusionMode::CilMinibatch,
        ConfusionMode::DilMinibatch,
        ConfusionMode::SinglePool,
    ];
}

impl std::str::FromStr for ConfusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ConfusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// The configured self-supervised loss.
    Ssl,
    /// Cross-entropy on labels through a linear classifier.
    Supervised,
}

impl std::str::FromStr for Learner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssl" => Ok(Learner::Ssl),
            "supervised" => Ok(Learner::Supervised),
            _ => Err(Error::Config(format!(
                "unknown learner `{s}` (ssl, supervised)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfusionConfig {
    pub name: String,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: SslLossSpec,
    pub learner: Learner,
    pub mode: ConfusionMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub warmup_iterations: usize,
    /// Fit a probe every this many iterations (and after the last one).
    pub probe_every: usize,
    pub probe: ProbeConfig,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for ConfusionConfig {
    fn default() -> Self {
        toy_confusion(Learner::Ssl, ConfusionMode::CilMinibatch)
    }
}

/// Desk-scale defaults over the toy synthetic data. The encoder runs
/// without batch norm: per-batch statistics of single-task batches strip
/// the task mean from the features, which hurts the supervised control as
/// much as the self-supervised learners.
pub fn toy_confusion(learner: Learner, mode: ConfusionMode) -> ConfusionConfig {
    let mut toy = crate::config::toy_config();
    toy.data.synthetic.group_scale = 0.05;
    toy.model.mlp_batch_norm = false;
    let lr = match learner {
        Learner::Ssl => 0.2,
        Learner::Supervised => 0.05,
    };
    ConfusionConfig {
        name: "confusion-toy".into(),
        output_root: PathBuf::from("runs"),
        data: toy.data,
        model: toy.model,
        loss: toy.loss,
        learner,
        mode,
        iterations: 2000,
        batch_size: 32,
        optim: OptimConfig {
            lr,
            warmup_epochs: 0,
            ..OptimConfig::default()
        },
        warmup_iterations: 0,
        probe_every: 500,
        probe: toy.eval.probe,
        chunk: 256,
        seed: 0,
    }
}

/// Settings of the full-scale study: CIFAR-100 in ten class-incremental
/// tasks, per-learner optimiser, learning rate, batch size and epochs.
pub fn cifar100_confusion(learner: Learner, kind: SslKind, mode: ConfusionMode) -> ConfusionConfig {
    let (optim, lr, epochs, batch, dim) = match (learner, kind) {
        (Learner::Supervised, _) => (OptimizerKind::Sgd, 0.075, 200, 128, 128),
        (_, SslKind::Corinfomax) => (OptimizerKind::Sgd, 0.5, 1000, 512, 128),
        (_, SslKind::BarlowTwins) => (OptimizerKind::Lars, 0.3, 1000, 256, 2048),
        (_, SslKind::Simclr) => (OptimizerKind::Lars, 0.6, 1000, 512, 128),
        (_, SslKind::Byol) => (OptimizerKind::Lars, 1.0, 1000, 256, 4096),
    };
    let iterations = epochs * 50_000 / batch;
    ConfusionConfig {
        name: format!(
            "cifar100_confusion_{}",
            if learner == Learner::Supervised {
                "supervised"
            } else {
                kind.name()
            }
        ),
        output_root: PathBuf::from("runs"),
        data: DataConfig {
            dataset: "cifar100".into(),
            num_tasks: 10,
            class_order: Some(ClassOrder::Natural),
            synthetic: SyntheticConfig::default(),
            ..DataConfig::default()
        },
        model: ModelConfig {
            arch: Arch::Resnet18,
            projector_dim: dim,
            projector_hidden: dim.max(2048),
            ..ModelConfig::default()
        },
        loss: SslLossSpec::new(kind),
        learner,
        mode,
        iterations,
        batch_size: batch,
        optim: OptimConfig {
            kind: optim,
            lr,
            warmup_epochs: 0,
            ..OptimConfig::default()
        },
        warmup_iterations: 10 * 50_000 / batch,
        probe_every: iterations / 10,
        probe: ProbeConfig::default(),
        chunk: 256,
        seed: 0,
    }
}

impl ConfusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 || self.probe_every == 0 || self.chunk == 0
        {
            return bad("iterations, batch_size, probe_every and chunk must be positive".into());
        }
        if self.data.num_tasks == 0 {
            return bad("data.num_tasks must be positive".into());
        }
        if self.warmup_iterations >= self.iterations {
            return bad("warmup_iterations must be below iterations".into());
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.probe.validate()?;
        self.data.synthetic.validate()
    }

    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_root");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output_root.join("confusion").join(&self.hash()[..12])
    }

    /// Shared output directory of several cells, keyed by all their hashes.
    pub fn grid_dir(cells: &[ConfusionConfig]) -> Result<PathBuf> {
        let first = cells
            .first()
            .ok_or_else(|| Error::InvalidArgument("no confusion cells".into()))?;
        if cells.len() == 1 {
            return Ok(first.out_dir());
        }
        let mut h = Sha256::new();
        for c in cells {
            h.update(c.hash().as_bytes());
        }
        Ok(first
            .output_root
            .join("confusion")
            .join(&hex::encode(h.finalize())[..12]))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn learner_name(&self) -> String {
        match self.learner {
            Learner::Ssl => self.loss.kind.name().to_string(),
            Learner::Supervised => "supervised".into(),
        }
    }

    /// The trainer configuration the SSL learner steps with.
    fn as_experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            name: self.name.clone(),
            output_root: self.output_root.clone(),
            data: self.data.clone(),
            model: self.model.clone(),
            loss: self.loss,
            trainer: TrainerConfig {
                strategy: Strategy::Finetune,
                seed: self.seed,
                batch_size: self.batch_size,
                buffer_budget: 0,
                optim: self.optim,
                ..TrainerConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }
}

/// Train-set metrics at one probe point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub learner: String,
    pub mode: String,
    pub iteration: usize,
    pub la: f64,
    pub wp: f64,
    pub tp: f64,
}

/// Linear classifier for the supervised control. Its tensors live in the
/// network's own store so one optimiser updates everything.
struct Classifier {
    weight: ParamId,
    bias: ParamId,
}

impl Classifier {
    fn attach(net: &mut TriNet, classes: usize) -> Self {
        let dim = net.feature_dim;
        Self {
            weight: net.store.add(
                "classifier.weight",
                ParamKind::Weight,
                Mat::zeros((classes, dim)),
            ),
            bias: net
                .store
                .add("classifier.bias", ParamKind::Bias, Mat::zeros((1, classes))),
        }
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut value = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        value -= row[y].ln();
        row[y] -= 1.0;
        row /= n;
    }
    (value / n, grad)
}

fn supervised_step(
    net: &mut TriNet,
    head: &Classifier,
    optimizer: &mut Optimizer,
    cfg: &ConfusionConfig,
    ds: &LabeledDataset,
    idx: &[usize],
    clock: StepClock,
) -> Result<f64> {
    let policy = cfg.data.augmentation_policy();
    let images: Vec<&[u8]> = idx.iter().map(|&i| ds.image(i)).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
    let mut r = rng::stream(cfg.seed, Stream::Augment, 0, clock.step as u64);
    let x = augment_batch(&images, ds.geom, &policy.train_ops, &policy, &mut r)?;
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let xn = tape.constant(x);
    let h = net.features(&mut tape, xn, BnMode::Train, true, &mut updates);
    let w = net.store.leaf(&mut tape, head.weight, true);
    let b = net.store.leaf(&mut tape, head.bias, true);
    let logits = tape.linear(h, w, Some(b));
    let (value, g) = cross_entropy(tape.value(logits), &labels);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("supervised loss at iteration {}", clock.step),
            detail: format!("{value}"),
        });
    }
    let root = tape.loss(value, vec![(logits, g)]);
    let grads = tape.backward(root);
    let lr = lr_at(
        cfg.optim.lr,
        cfg.optim.min_lr_ratio,
        clock.step,
        clock.total,
        clock.warmup,
    );
    optimizer.step(&mut net.store, &grads, lr);
    net.apply_bn_updates(&updates);
    Ok(value)
}

/// Train-set probe metrics for the current encoder.
fn probe_point(
    net: &TriNet,
    cfg: &ConfusionConfig,
    ds: &LabeledDataset,
    map: &crate::data::TaskClassMap,
) -> Result<(f64, f64, f64)> {
    let policy = cfg.data.augmentation_policy();
    let f = dataset_features(net, ds, &policy, cfg.chunk, cfg.seed)?;
    let probe = fit_linear_probe(&f, ds.labels(), ds.class_count, &cfg.probe, cfg.seed)?;
    let r = compute_la_wp_tp(&probe.predict(&f), ds.labels(), map)?;
    Ok((r.la, r.wp, r.tp))
}

/// Train one learner under one schedule, probing the train set along the
/// way. SSL learners step through the main trainer's step function.
pub fn run_confusion_experiment(cfg: &ConfusionConfig) -> Result<Vec<CurveRecord>> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data.dataset, &cfg.data.root, &cfg.data.synthetic)?;
    let train = &data.train;
    let order = cfg.data.class_order(cfg.seed);
    // Task groups for the decomposition are always the class-incremental
    // ones, whatever the schedule.
    let cil = split_class_incremental_with(train, cfg.data.num_tasks, &order)?;
    let map = cil.class_task_map();
    let (seq, mode) = match cfg.mode {
        ConfusionMode::CilMinibatch => (cil.clone(), ScheduleMode::RoundRobin),
        ConfusionMode::DilMinibatch => (
            split_data_incremental(train, cfg.data.num_tasks, cfg.seed)?,
            ScheduleMode::RoundRobin,
        ),
        ConfusionMode::SinglePool => (cil.clone(), ScheduleMode::SinglePool),
    };
    if cfg.data.split == SplitMode::Dil && cfg.mode == ConfusionMode::CilMinibatch {
        log::warn!("data.split is ignored by the confusion harness; the mode decides the split");
    }
    let schedule = make_minibatch_schedule(&seq, cfg.batch_size, cfg.iterations, mode, cfg.seed)?;
    let policy = cfg.data.augmentation_policy();
    let exp = cfg.as_experiment();
    let mut state = RunState::new(&exp, train.geom)?;
    let mut optimizer = Optimizer::new(cfg.optim)?;
    let head = match cfg.learner {
        Learner::Supervised => Some(Classifier::attach(&mut state.net, train.class_count)),
        Learner::Ssl => None,
    };
    let learner = cfg.learner_name();
    let mut records = Vec::new();
    for (k, batch) in schedule.order.iter().enumerate() {
        let clock = StepClock {
            step: k,
            total: cfg.iterations,
            warmup: cfg.warmup_iterations,
        };
        match &head {
            Some(h) => {
                supervised_step(
                    &mut state.net,
                    h,
                    &mut optimizer,
                    cfg,
                    train,
                    &batch.indices,
                    clock,
                )?;
            }
            None => {
                let images: Vec<&[u8]> = batch.indices.iter().map(|&i| train.image(i)).collect();
                train_step(&mut state, &exp, &policy, &images, clock)?;
            }
        }
        let done = k + 1;
        if done % cfg.probe_every == 0 || done == cfg.iterations {
            let (la, wp, tp) = probe_point(&state.net, cfg, train, &map)?;
            log::info!(
                "{learner} {} iteration {done}: LA {la:.4} WP {wp:.4} TP {tp:.4}",
                cfg.mode.name()
            );
            records.push(CurveRecord {
                learner: learner.clone(),
                mode: cfg.mode.name().into(),
                iteration: done,
                la,
                wp,
                tp,
            });
        }
    }
    Ok(records)
}

pub const CURVES_CSV: &str = "curves.csv";

/// Read records back from a `curves.csv` written by [`emit_curves`].
pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, why: &str| {
        Error::InvalidArgument(format!("{}:{}: {why}", path.display(), n + 1))
    };
    let mut out: Vec<CurveRecord> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 fields"));
        }
        let iteration: usize = f[2].parse().map_err(|_| bad(n, "bad iteration"))?;
        let value: f64 = f[4].parse().map_err(|_| bad(n, "bad value"))?;
        let idx = match out
            .iter()
            .position(|r| r.learner == f[0] && r.mode == f[1] && r.iteration == iteration)
        {
            Some(i) => i,
            None => {
                out.push(CurveRecord {
                    learner: f[0].into(),
                    mode: f[1].into(),
                    iteration,
                    la: 0.0,
                    wp: 0.0,
                    tp: 0.0,
                });
                out.len() - 1
            }
        };
        match f[3] {
            "la" => out[idx].la = value,
            "tp" => out[idx].tp = value,
            "wp" => out[idx].wp = value,
            _ => return Err(bad(n, "unknown metric")),
        }
    }
    Ok(out)
}

/// Write `curves.csv` and one plot per metric into `out`. Nothing is
/// written when `records` is empty.
pub fn emit_curves(records: &[CurveRecord], out: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no curve records to write".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("learner,mode,iteration,metric,value\n");
    for r in records {
        for (m, v) in [("la", r.la), ("tp", r.tp), ("wp", r.wp)] {
            writeln!(csv, "{},{},{},{m},{v}", r.learner, r.mode, r.iteration)
                .expect("string write");
        }
    }
    let csv_path = out.join(CURVES_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let mut written = vec![csv_path];

    let mut series: Vec<(String, Vec<&CurveRecord>)> = Vec::new();
    for r in records {
        let key = format!("{} / {}", r.learner, r.mode);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => series.push((key, vec![r])),
        }
    }
    let max_it = records.iter().map(|r| r.iteration).max().unwrap_or(1) as f64;
    for (metric, get) in [
        ("la", (|r: &CurveRecord| r.la) as fn(&CurveRecord) -> f64),
        ("tp", |r: &CurveRecord| r.tp),
        ("wp", |r: &CurveRecord| r.wp),
    ] {
        let path = out.join(format!("{metric}.png"));
        plot_metric(&path, metric, max_it, &series, get).map_err(|e| Error::Plot(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}

fn plot_metric(
    path: &Path,
    metric: &str,
    max_it: f64,
    series: &[(String, Vec<&CurveRecord>)],
    get: fn(&CurveRecord) -> f64,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let text = crate::plot::register_font();
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(10);
    if text {
        builder
            .caption(
                format!("train {}", metric.to_uppercase()),
                ("sans-serif", 20),
            )
            .x_label_area_size(30)
            .y_label_area_size(40);
    }
    let mut chart = builder.build_cartesian_2d(0f64..max_it, 0f64..1f64)?;
    if text {
        chart.configure_mesh().x_desc("iteration").draw()?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()?;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                pts.iter().map(|r| (r.iteration as f64, get(r))),
                color,
            ))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}
