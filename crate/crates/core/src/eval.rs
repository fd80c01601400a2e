//! Frozen-encoder evaluation: linear probe, LA/WP/TP decomposition, k-NN,
//! per-task k-NN matrices and transfer accuracy.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::config::ProbeConfig;
use crate::data::{eval_view, AugmentationPolicy, DatasetPair, LabeledDataset, TaskClassMap};
use crate::error::{Error, Result};
use crate::models::{encode_features, TriNet};
use crate::optim::lr_at;
use crate::rng::{self, Stream};

/// Evaluation-transformed images of a whole dataset, `[N, C*H*W]`.
pub fn dataset_matrix(ds: &LabeledDataset, policy: &AugmentationPolicy, seed: u64) -> Result<Mat> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset `{}` is empty",
            ds.name
        )));
    }
    let mut rng = rng::stream(seed, Stream::Augment, u64::MAX, 0);
    let images: Vec<&[u8]> = (0..ds.len()).map(|i| ds.image(i)).collect();
    eval_view(&images, ds.geom, policy, &mut rng)
}

/// Encoder features of a whole dataset under the evaluation transform.
pub fn dataset_features(
    net: &TriNet,
    ds: &LabeledDataset,
    policy: &AugmentationPolicy,
    chunk: usize,
    seed: u64,
) -> Result<Mat> {
    encode_features(net, &dataset_matrix(ds, policy, seed)?, chunk)
}

/// Single affine layer on (optionally standardised) features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[classes, dim]`.
    pub weight: Mat,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl LinearProbe {
    pub fn logits(&self, features: &Mat) -> Mat {
        let x = (features - &self.mean) / &self.scale;
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn predict(&self, features: &Mat) -> Vec<usize> {
        self.logits(features)
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_features(f: &Mat) -> Result<()> {
    if let Some(v) = f.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "probe features".into(),
            detail: format!("value {v}"),
        });
    }
    Ok(())
}

/// Multinomial logistic regression by mini-batch SGD with momentum and a
/// cosine learning-rate decay. Weights start at zero.
pub fn fit_linear_probe(
    features: &Mat,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    cfg.validate()?;
    check_features(features)?;
    let (n, d) = features.dim();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} feature rows for {} labels",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} >= {classes} classes"
        )));
    }
    let (mean, scale) = if cfg.standardize {
        let mean = features.mean_axis(Axis(0)).expect("n > 0");
        let scale = features
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-8 { s } else { 1.0 });
        (mean, scale)
    } else {
        (Array1::zeros(d), Array1::ones(d))
    };
    let x = (features - &mean) / &scale;
    let mut w = Mat::zeros((classes, d));
    let mut b = Array1::<f64>::zeros(classes);
    let mut vw = Mat::zeros((classes, d));
    let mut vb = Array1::<f64>::zeros(classes);

    let bs = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, Stream::Probe, 0, 0);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(bs) {
            let xb = x.select(Axis(0), idx);
            let mut p = xb.dot(&w.t()) + &b;
            for mut row in p.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row /= s;
            }
            for (r, &i) in idx.iter().enumerate() {
                p[[r, labels[i]]] -= 1.0;
            }
            p /= idx.len() as f64;
            let mut gw = p.t().dot(&xb);
            gw.scaled_add(cfg.weight_decay, &w);
            let gb = p.sum_axis(Axis(0));
            let lr = lr_at(cfg.lr, 0.0, step, total, 0);
            vw *= cfg.momentum;
            vw += &gw;
            vb *= cfg.momentum;
            vb += &gb;
            w.scaled_add(-lr, &vw);
            b.scaled_add(-lr, &vb);
            step += 1;
        }
    }
    check_features(&w)?;
    Ok(LinearProbe {
        weight: w,
        bias: b,
        mean,
        scale,
    })
}

/// Counts and rates of the LA = WP x TP decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_total: usize,
    pub n_class_correct: usize,
    pub n_task_correct: usize,
    pub la: f64,
    pub tp: f64,
    /// 0 when no prediction landed in the right task; see `wp_undefined`.
    pub wp: f64,
    pub wp_undefined: bool,
    /// Class accuracy over the samples of each task.
    pub per_task_accuracy: Vec<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub knn_accuracy: Option<f64>,
}

/// Score predictions against labels under a class-to-task map.
pub fn compute_la_wp_tp(
    preds: &[usize],
    labels: &[usize],
    map: &TaskClassMap,
) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let k = map.class_count();
    let unmapped = |c: usize| Error::InvalidArgument(format!("class {c} is not in the task map"));
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut class_ok, mut task_ok) = (0, 0);
    let mut per_task = vec![(0usize, 0usize); map.num_tasks()];
    for (&p, &y) in preds.iter().zip(labels) {
        let ty = map.task_of(y).ok_or_else(|| unmapped(y))?;
        let tp = map.task_of(p).ok_or_else(|| unmapped(p))?;
        confusion[y][p] += 1;
        per_task[ty].1 += 1;
        if tp == ty {
            task_ok += 1;
        }
        if p == y {
            class_ok += 1;
            per_task[ty].0 += 1;
        }
    }
    let n = preds.len();
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricsReport {
        n_total: n,
        n_class_correct: class_ok,
        n_task_correct: task_ok,
        la: rate(class_ok, n),
        tp: rate(task_ok, n),
        wp: rate(class_ok, task_ok),
        wp_undefined: task_ok == 0,
        per_task_accuracy: per_task.iter().map(|&(c, t)| rate(c, t)).collect(),
        confusion,
        knn_accuracy: None,
    })
}

/// Cosine k-NN with similarity-weighted votes.
pub fn knn_predict(
    train: &Mat,
    train_labels: &[usize],
    test: &Mat,
    k: usize,
    classes: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > train.nrows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} reference rows",
            train.nrows()
        )));
    }
    if train.ncols() != test.ncols() || train_labels.len() != train.nrows() {
        return Err(Error::Shape(
            "k-NN reference and query shapes disagree".into(),
        ));
    }
    check_features(train)?;
    check_features(test)?;
    let unit = |m: &Mat| {
        let mut u = m.clone();
        for mut r in u.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r /= n;
            }
        }
        u
    };
    let (tr, te) = (unit(train), unit(test));
    let sims = te.dot(&tr.t());
    let mut out = Vec::with_capacity(te.nrows());
    let mut idx: Vec<usize> = (0..tr.nrows()).collect();
    for row in sims.rows() {
        idx.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![0.0; classes];
        for &j in &idx[..k] {
            votes[train_labels[j]] += row[j];
        }
        out.push(argmax(votes.into_iter()));
    }
    Ok(out)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64
}

pub fn knn_accuracy(
    train: &Mat,
    train_labels: &[usize],
    test: &Mat,
    test_labels: &[usize],
    k: usize,
    classes: usize,
) -> Result<f64> {
    Ok(accuracy(
        &knn_predict(train, train_labels, test, k, classes)?,
        test_labels,
    ))
}

/// Probe trained on `train`, scored on `test` under `map`.
pub fn evaluate_linear(
    net: &TriNet,
    data: &DatasetPair,
    map: &TaskClassMap,
    policy: &AugmentationPolicy,
    probe: &ProbeConfig,
    chunk: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let ftr = dataset_features(net, &data.train, policy, chunk, seed)?;
    let fte = dataset_features(net, &data.test, policy, chunk, seed)?;
    let phi = fit_linear_probe(
        &ftr,
        data.train.labels(),
        data.train.class_count,
        probe,
        seed,
    )?;
    compute_la_wp_tp(&phi.predict(&fte), data.test.labels(), map)
}

/// Probe accuracy on a different dataset (out-of-distribution transfer).
pub fn transfer_accuracy(
    net: &TriNet,
    target: &DatasetPair,
    policy: &AugmentationPolicy,
    probe: &ProbeConfig,
    chunk: usize,
    seed: u64,
) -> Result<f64> {
    if target.train.geom != net.input {
        return Err(Error::Shape(format!(
            "target images are {:?}, the encoder expects {:?}",
            target.train.geom, net.input
        )));
    }
    let ftr = dataset_features(net, &target.train, policy, chunk, seed)?;
    let fte = dataset_features(net, &target.test, policy, chunk, seed)?;
    let phi = fit_linear_probe(
        &ftr,
        target.train.labels(),
        target.train.class_count,
        probe,
        seed,
    )?;
    Ok(accuracy(&phi.predict(&fte), target.test.labels()))
}

/// `entries[i][j]`: k-NN accuracy on task `j` after training task `i`;
/// `None` for tasks not yet seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub entries: Vec<Vec<Option<f64>>>,
}

impl TaskMatrix {
    /// Per task: best accuracy ever reached minus the final accuracy.
    pub fn forgetting(&self) -> Vec<f64> {
        let t = self.entries.len();
        (0..t)
            .map(|j| {
                let best = (j..t)
                    .filter_map(|i| self.entries[i][j])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - self.entries[t - 1][j].unwrap_or(0.0)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for j in 0..self.entries.len() {
            let _ = write!(s, ",task_{j}");
        }
        s.push('\n');
        for (i, row) in self.entries.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in row {
                match v {
                    Some(a) => {
                        let _ = write!(s, ",{a:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Per-task k-NN accuracy of each checkpoint, with each task's training
/// samples as the reference set.
#[allow(clippy::too_many_arguments)]
pub fn per_task_knn_matrix(
    checkpoints: &[TriNet],
    train: &LabeledDataset,
    test: &LabeledDataset,
    map: &TaskClassMap,
    policy: &AugmentationPolicy,
    k: usize,
    chunk: usize,
    seed: u64,
) -> Result<TaskMatrix> {
    let t = map.num_tasks();
    if checkpoints.len() != t {
        return Err(Error::InvalidArgument(format!(
            "{} checkpoints for {t} tasks",
            checkpoints.len()
        )));
    }
    let pick = |ds: &LabeledDataset, j: usize| -> Vec<usize> {
        (0..ds.len())
            .filter(|&i| map.task_of(ds.label(i)) == Some(j))
            .collect()
    };
    let mut entries = vec![vec![None; t]; t];
    for (i, net) in checkpoints.iter().enumerate() {
        let ftr = dataset_features(net, train, policy, chunk, seed)?;
        let fte = dataset_features(net, test, policy, chunk, seed)?;
        for (j, slot) in entries[i].iter_mut().enumerate().take(i + 1) {
            let (a, b) = (pick(train, j), pick(test, j));
            if a.is_empty() || b.is_empty() {
                return Err(Error::InvalidArgument(format!("task {j} has no samples")));
            }
            let la: Vec<usize> = a.iter().map(|&x| train.label(x)).collect();
            let lb: Vec<usize> = b.iter().map(|&x| test.label(x)).collect();
            *slot = Some(knn_accuracy(
                &ftr.select(Axis(0), &a),
                &la,
                &fte.select(Axis(0), &b),
                &lb,
                k.min(a.len()),
                train.class_count,
            )?);
        }
    }
    Ok(TaskMatrix { entries })
}

/// Confusion matrix as CSV with a header of predicted classes.
pub fn confusion_csv(report: &MetricsReport) -> String {
    let k = report.confusion.len();
    let mut s = String::from("true\\pred");
    for c in 0..k {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (c, row) in report.confusion.iter().enumerate() {
        let _ = write!(s, "{c}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One cell of a results table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub method: String,
    pub ssl: String,
    pub report: MetricsReport,
}

/// Methods as rows, one LA / WP / TP column triple per SSL objective,
/// values in percent.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut kinds: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.ssl.as_str()) {
            kinds.push(&r.ssl);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut s = format!("{:<24}", "method");
    for k in &kinds {
        let _ = write!(s, " | {:^23}", k);
    }
    s.push('\n');
    let _ = write!(s, "{:<24}", "");
    for _ in &kinds {
        let _ = write!(s, " | {:>7}{:>8}{:>8}", "LA", "WP", "TP");
    }
    s.push('\n');
    for m in &methods {
        let _ = write!(s, "{m:<24}");
        for k in &kinds {
            match rows.iter().find(|r| r.method == *m && r.ssl == *k) {
                Some(r) => {
                    let wp = if r.report.wp_undefined {
                        "n/a".to_string()
                    } else {
                        format!("{:.2}", 100.0 * r.report.wp)
                    };
                    let _ = write!(
                        s,
                        " | {:>7.2}{:>8}{:>8.2}",
                        100.0 * r.report.la,
                        wp,
                        100.0 * r.report.tp
                    );
                }
                None => {
                    let _ = write!(s, " | {:>23}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Same content as [`format_table`] in CSV form.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("method,ssl,la,wp,tp,wp_undefined,knn\n");
    for r in rows {
        let knn = r
            .report
            .knn_accuracy
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{},{}",
            r.method, r.ssl, r.report.la, r.report.wp, r.report.tp, r.report.wp_undefined, knn
        );
    }
    s
}
