mod common;

use std::fs;
use std::time::Instant;

use cromo_core::config::{toy_config, Epochs, ExperimentConfig};
use cromo_core::eval::{accuracy, dataset_features, fit_linear_probe};
use cromo_core::experiment::{evaluate_run, run_experiment, REPORT};
use cromo_core::models::{build_trinet, load_checkpoint};
use cromo_core::objective::Strategy;
use cromo_core::trainer::{
    checkpoint_path, end_task, load_experiment_data, read_metrics_log, run_continual, train_task,
    RunOptions, RunState, CONFIG_SNAPSHOT, MANIFEST, METRICS_LOG,
};

fn short_toy(strategy: Strategy, epochs: usize) -> ExperimentConfig {
    let mut c = toy_config();
    c.trainer.strategy = strategy;
    c.trainer.epochs = Epochs::All(epochs);
    c
}

fn in_memory(cfg: &ExperimentConfig) -> cromo_core::trainer::RunOutcome {
    let (data, seq) = load_experiment_data(cfg).unwrap();
    run_continual(cfg, &data, &seq, &RunOptions::default()).unwrap()
}

#[test]
fn smoke_run_writes_loadable_checkpoint() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_toy(Strategy::Cromo, 2);
    let opts = RunOptions {
        run_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let out = run_experiment(&cfg, &opts).unwrap();
    assert!(start.elapsed().as_secs() < 60);

    let (data, _) = load_experiment_data(&cfg).unwrap();
    let mut net = build_trinet(&cfg.model, data.train.geom, 99).unwrap();
    let (hash, _) = load_checkpoint(&mut net, &checkpoint_path(dir.path(), 1)).unwrap();
    assert_eq!(hash, cfg.hash());
    assert!(net.store.bitwise_eq(&out.run.state.net.store));

    for name in [CONFIG_SNAPSHOT, MANIFEST, METRICS_LOG, REPORT] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let text = fs::read_to_string(dir.path().join(CONFIG_SNAPSHOT)).unwrap();
    let back = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
    assert_eq!(back.hash(), cfg.hash());
    let log = read_metrics_log(&dir.path().join(METRICS_LOG)).unwrap();
    assert_eq!(log, out.run.records);
}

#[test]
fn frozen_model_is_taken_once_per_boundary() {
    let out = in_memory(&short_toy(Strategy::Cromo, 1));
    assert_eq!(out.state.snapshots_taken, 1);
    assert!(out.state.frozen.is_some());
}

#[test]
fn one_loss_bundle_per_step() {
    let cfg = short_toy(Strategy::Cromo, 3);
    let out = in_memory(&cfg);
    let (_, seq) = load_experiment_data(&cfg).unwrap();
    for t in 0..seq.len() {
        let n = seq.tasks[t].indices.len();
        let count = out.records.iter().filter(|r| r.task == t).count();
        assert_eq!(count, 3 * n.div_ceil(cfg.trainer.batch_size));
    }
    for r in &out.records {
        assert!((r.loss.total - r.loss.recomposed_total()).abs() < 1e-9);
    }
}

#[test]
fn cassle_plus_without_buffer_or_distillation_is_finetune() {
    let mut a = short_toy(Strategy::CasslePlus, 2);
    a.trainer.buffer_budget = 0;
    a.trainer.zeta = 0.0;
    let mut b = a.clone();
    b.trainer.strategy = Strategy::Finetune;
    let (ra, rb) = (in_memory(&a).records, in_memory(&b).records);
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.loss.total, y.loss.total, "step {}", x.step);
    }
}

#[test]
fn cross_task_mixing_needs_a_buffer() {
    let mut cfg = short_toy(Strategy::Cromo, 1);
    cfg.trainer.buffer_budget = 0;
    let (data, seq) = load_experiment_data(&cfg).unwrap();
    assert!(run_continual(&cfg, &data, &seq, &RunOptions::default()).is_err());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let cfg = short_toy(Strategy::Cromo, 2);
    let (data, seq) = load_experiment_data(&cfg).unwrap();
    let whole = tempfile::tempdir().unwrap();
    let opts = |dir: &std::path::Path, resume| RunOptions {
        run_dir: Some(dir.to_path_buf()),
        resume,
        ..RunOptions::default()
    };
    run_continual(&cfg, &data, &seq, &opts(whole.path(), false)).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = RunOptions {
        stop_after: Some(1),
        ..opts(split.path(), false)
    };
    let partial = run_continual(&cfg, &data, &seq, &first).unwrap();
    assert_eq!(partial.state.task_index, 1);
    run_continual(&cfg, &data, &seq, &opts(split.path(), true)).unwrap();

    let bytes = |d: &std::path::Path, f: &std::path::Path| fs::read(d.join(f)).unwrap();
    let ckpt = checkpoint_path(std::path::Path::new(""), 1);
    assert_eq!(bytes(whole.path(), &ckpt), bytes(split.path(), &ckpt));
    let log = std::path::Path::new(METRICS_LOG);
    assert_eq!(bytes(whole.path(), log), bytes(split.path(), log));

    let mut other = cfg.clone();
    other.trainer.zeta = 0.5;
    assert!(run_continual(&other, &data, &seq, &opts(split.path(), true)).is_err());
}

#[test]
fn buffer_grows_by_budget_with_balanced_classes() {
    for budget in [15, 50] {
        let mut cfg = short_toy(Strategy::Er, 1);
        cfg.data.num_tasks = 5;
        cfg.data.synthetic.classes = 10;
        cfg.data.synthetic.groups = 10;
        cfg.data.synthetic.train_per_class = 20;
        cfg.trainer.buffer_budget = budget;
        let (data, seq) = load_experiment_data(&cfg).unwrap();
        let policy = cfg.data.augmentation_policy();
        let mut state = RunState::new(&cfg, data.train.geom).unwrap();
        let mut seen = 0;
        for t in 0..seq.len() {
            let task = seq.task_dataset(&data.train, t);
            train_task(&mut state, &task, &cfg, &policy, &mut |_| Ok(())).unwrap();
            end_task(&mut state, &task, &cfg, t + 1 < seq.len()).unwrap();
            seen += task.len();
            assert_eq!(
                state.buffer.len(),
                ((t + 1) * budget).min(seen),
                "budget {budget} task {t}"
            );
            for k in 0..=t {
                let counts: Vec<usize> = state.buffer.class_counts(k).into_values().collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "task {k}: {counts:?}");
            }
        }
    }
}

#[test]
fn evaluation_leaves_the_encoder_untouched() {
    let cfg = short_toy(Strategy::Finetune, 1);
    let out = in_memory(&cfg);
    let before = out.state.net.store.content_hash();
    evaluate_run(&cfg, &out).unwrap();
    assert_eq!(out.state.net.store.content_hash(), before);
}

#[test]
fn probe_on_random_encoder_separates_toy_classes() {
    let mut cfg = toy_config();
    cfg.data.synthetic.group_scale = 0.3;
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let net = build_trinet(&cfg.model, data.train.geom, 5).unwrap();
    let policy = cfg.data.augmentation_policy();
    let f = dataset_features(&net, &data.train, &policy, 256, 0).unwrap();
    let probe = fit_linear_probe(&f, data.train.labels(), 4, &cfg.eval.probe, 0).unwrap();
    assert!(accuracy(&probe.predict(&f), data.train.labels()) > 0.95);
}
