//! End-to-end runs: load data, train every task, evaluate the final model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{dataset_features, evaluate_linear, knn_accuracy, write_text, MetricsReport};
use crate::trainer::{load_experiment_data, run_continual, RunOptions, RunOutcome};

pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub strategy: String,
    pub ssl: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub run: RunOutcome,
}

/// Linear-probe (and k-NN) evaluation of a trained network.
pub fn evaluate_run(cfg: &ExperimentConfig, run: &RunOutcome) -> Result<ExperimentReport> {
    let (data, seq) = load_experiment_data(cfg)?;
    evaluate_with(cfg, run, &data, &seq)
}

fn evaluate_with(
    cfg: &ExperimentConfig,
    run: &RunOutcome,
    data: &crate::data::DatasetPair,
    seq: &crate::data::TaskSequence,
) -> Result<ExperimentReport> {
    let policy = cfg.data.augmentation_policy();
    let map = seq.class_task_map();
    let ev = &cfg.eval;
    let seed = cfg.trainer.seed;
    let net = &run.state.net;
    let mut metrics = evaluate_linear(net, data, &map, &policy, &ev.probe, ev.chunk, seed)?;
    if ev.knn_k > 0 && ev.knn_k <= data.train.len() {
        let ftr = dataset_features(net, &data.train, &policy, ev.chunk, seed)?;
        let fte = dataset_features(net, &data.test, &policy, ev.chunk, seed)?;
        metrics.knn_accuracy = Some(knn_accuracy(
            &ftr,
            data.train.labels(),
            &fte,
            data.test.labels(),
            ev.knn_k,
            data.train.class_count,
        )?);
    }
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        strategy: cfg.trainer.strategy.name().into(),
        ssl: cfg.loss.kind.name().into(),
        seed,
        metrics,
    })
}

/// Train and evaluate. With a run directory the report is written next to
/// the checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let (data, seq) = load_experiment_data(cfg)?;
    let run = run_continual(cfg, &data, &seq, opts)?;
    let report = evaluate_with(cfg, &run, &data, &seq)?;
    if let Some(dir) = &opts.run_dir {
        write_report(&dir.join(REPORT), &report)?;
    }
    Ok(ExperimentOutcome { report, run })
}

pub fn write_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}
