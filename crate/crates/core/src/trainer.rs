//! The continual training loop and its run-directory artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, NodeId, Tape};
use crate::buffer::MemoryBuffer;
use crate::config::ExperimentConfig;
use crate::data::{
    epoch_batches, load_dataset, split_class_incremental_with, split_data_incremental, two_views,
    AugmentationPolicy, DatasetPair, ImageGeom, LabeledDataset, SplitMode, TaskSequence,
};
use crate::error::{Error, Result};
use crate::losses::{CovState, SslKind};
use crate::mixup::{build_mix_batch, MixBatch};
use crate::models::{
    build_trinet, ema_update, load_checkpoint, save_checkpoint, snapshot, BnMode, BnUpdate,
    EmaTarget, FrozenModel, TriNet,
};
use crate::objective::{
    total_loss, InputMix, LossBundle, LossInputs, MixInputs, OutputMix, ViewPair,
};
use crate::optim::{ema_momentum, lr_at, Optimizer};
use crate::rng::{self, Stream};

/// Everything that evolves during a continual run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub net: TriNet,
    /// Snapshot taken at the end of the previous task.
    pub frozen: Option<FrozenModel>,
    /// BYOL target network.
    pub ema: Option<EmaTarget>,
    pub buffer: MemoryBuffer,
    /// Zero-based index of the task to be trained next.
    pub task_index: usize,
    pub optimizer: Optimizer,
    /// CorInfoMax covariance estimates of the current task.
    pub cov: Option<CovState>,
    /// Optimiser steps taken over the whole run.
    pub step: u64,
    pub snapshots_taken: usize,
}

impl RunState {
    pub fn new(cfg: &ExperimentConfig, geom: ImageGeom) -> Result<Self> {
        let net = build_trinet(&cfg.model, geom, cfg.trainer.seed)?;
        let ema = (cfg.loss.kind == SslKind::Byol).then(|| EmaTarget::new(&net));
        Ok(Self {
            net,
            frozen: None,
            ema,
            buffer: MemoryBuffer::new(geom, cfg.trainer.buffer_budget),
            task_index: 0,
            optimizer: Optimizer::new(cfg.trainer.optim)?,
            cov: None,
            step: 0,
            snapshots_taken: 0,
        })
    }
}

/// Position of a step inside its task's schedule.
#[derive(Debug, Clone, Copy)]
pub struct StepClock {
    pub step: usize,
    pub total: usize,
    pub warmup: usize,
}

/// One line of `metrics.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBundle,
}

fn concat_rows(parts: &[&Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

/// Row layout of the concatenated online batch of one view.
struct Layout {
    /// Current rows plus replayed rows: the task-loss batch.
    task: Range<usize>,
    mix: Option<Range<usize>>,
    /// Memory rows embedded by the online model (same-model partners).
    partner: Option<Range<usize>>,
}

/// One optimisation step on a batch of raw current-task images.
///
/// Randomness is keyed by `(seed, task_index, clock.step)`, so the step is
/// reproducible on its own and independent of which strategy runs.
pub fn train_step(
    state: &mut RunState,
    cfg: &ExperimentConfig,
    policy: &AugmentationPolicy,
    images: &[&[u8]],
    clock: StepClock,
) -> Result<LossBundle> {
    let tc = &cfg.trainer;
    let strategy = tc.strategy;
    let flags = strategy.flags();
    let spec = &cfg.loss;
    let byol = spec.kind == SslKind::Byol;
    let geom = state.net.input;
    let ti = state.task_index;
    let later = ti > 0;
    let (seed, a, b) = (tc.seed, ti as u64, clock.step as u64);

    let mut aug = rng::stream(seed, Stream::Augment, a, b);
    let (c1, c2) = two_views(images, geom, policy, &mut aug)?;
    let n = c1.nrows();

    let needs_buffer = later && strategy.uses_buffer() && !state.buffer.is_empty();
    let memory = if needs_buffer {
        let mut r = rng::stream(seed, Stream::BufferSample, a, b);
        let batch = state.buffer.sample_batch(tc.buffer_batch_size, &mut r)?;
        Some(two_views(&batch.images, geom, policy, &mut aug)?)
    } else {
        None
    };
    let replay = if flags.replay { memory.as_ref() } else { None };

    let mix_kind = flags.input_mix.filter(|_| later);
    let mix: Option<MixBatch> = match mix_kind {
        None => None,
        Some(kind) => {
            let mut r = rng::stream(seed, Stream::Mixup, a, b);
            let (p1, p2) = match kind {
                InputMix::CrossTask => {
                    let m = memory.as_ref().ok_or_else(|| {
                        Error::Buffer(format!(
                            "strategy `{strategy}` needs memory samples after the first task"
                        ))
                    })?;
                    (&m.0, &m.1)
                }
                InputMix::WithinTask => (&c1, &c2),
            };
            Some(build_mix_batch(&c1, &c2, p1, p2, tc.alpha, &mut r)?)
        }
    };
    let same_model_memory =
        mix_kind == Some(InputMix::CrossTask) && flags.output_mix == OutputMix::SameModel;

    let task_rows = n + replay.map_or(0, |r| r.0.nrows());
    let mut layout = Layout {
        task: 0..task_rows,
        mix: None,
        partner: None,
    };
    let mut end = task_rows;
    if mix.is_some() {
        layout.mix = Some(end..end + n);
        end += n;
    }
    if same_model_memory {
        let m = memory.as_ref().expect("checked above").0.nrows();
        layout.partner = Some(end..end + m);
    }
    let online_input = |v: usize| -> Mat {
        let (cur, rep, mx, mem) = if v == 0 {
            (
                &c1,
                replay.map(|r| &r.0),
                mix.as_ref().map(|m| &m.x1),
                memory.as_ref().map(|m| &m.0),
            )
        } else {
            (
                &c2,
                replay.map(|r| &r.1),
                mix.as_ref().map(|m| &m.x2),
                memory.as_ref().map(|m| &m.1),
            )
        };
        let mut parts = vec![cur];
        parts.extend(rep);
        parts.extend(mx);
        if same_model_memory {
            parts.extend(mem);
        }
        concat_rows(&parts)
    };
    let task_input = |v: usize| -> Mat {
        let (cur, rep) = if v == 0 {
            (&c1, replay.map(|r| &r.0))
        } else {
            (&c2, replay.map(|r| &r.1))
        };
        match rep {
            Some(r) => concat_rows(&[cur, r]),
            None => cur.clone(),
        }
    };

    let zeta_active = flags.distill && later && tc.zeta > 0.0;
    let frozen_partner = mix.is_some() && flags.output_mix == OutputMix::CrossModel;
    if (zeta_active || frozen_partner) && state.frozen.is_none() {
        return Err(Error::MissingInput {
            strategy: strategy.name().into(),
            missing: "the previous task's frozen model".into(),
        });
    }

    let mut tape = Tape::new();
    let mut updates: Vec<BnUpdate> = Vec::new();
    let net = &state.net;
    let mut z = Vec::with_capacity(2);
    let mut p = Vec::with_capacity(2);
    for v in 0..2 {
        let x = tape.constant(online_input(v));
        let zv = net
            .forward(&mut tape, x, BnMode::Train, true, &mut updates)
            .z;
        z.push(zv);
        if byol {
            p.push(net.predict(&mut tape, zv, BnMode::Train, true, &mut updates));
        }
    }
    let rows = |tape: &mut Tape, node: NodeId, r: &Range<usize>| tape.slice_rows(node, r.clone());
    let current = ViewPair {
        v1: rows(&mut tape, z[0], &layout.task),
        v2: rows(&mut tape, z[1], &layout.task),
    };
    let predicted = byol.then(|| ViewPair {
        v1: rows(&mut tape, p[0], &layout.task),
        v2: rows(&mut tape, p[1], &layout.task),
    });
    let target = match (&state.ema, byol) {
        (Some(ema), true) => {
            let t: Vec<NodeId> = (0..2)
                .map(|v| {
                    let x = tape.constant(task_input(v));
                    ema.forward(&mut tape, x).z
                })
                .collect();
            Some(ViewPair { v1: t[0], v2: t[1] })
        }
        (None, true) => {
            return Err(Error::MissingInput {
                strategy: strategy.name().into(),
                missing: "a BYOL target network".into(),
            })
        }
        _ => None,
    };

    let (old, distilled) = if zeta_active {
        let frozen = state.frozen.as_ref().expect("checked above");
        let o: Vec<NodeId> = (0..2)
            .map(|v| {
                let x = tape.constant(task_input(v));
                frozen.forward(&mut tape, x).z
            })
            .collect();
        let h1 = net.distill_head(&mut tape, current.v1, BnMode::Train, true, &mut updates);
        let h2 = net.distill_head(&mut tape, current.v2, BnMode::Train, true, &mut updates);
        (
            Some(ViewPair { v1: o[0], v2: o[1] }),
            Some(ViewPair { v1: h1, v2: h2 }),
        )
    } else {
        (None, None)
    };

    let mix_inputs = match (&mix, &layout.mix) {
        (Some(m), Some(mr)) => {
            let src = if byol { &p } else { &z };
            let zm = [rows(&mut tape, src[0], mr), rows(&mut tape, src[1], mr)];
            let first = 0..n;
            let anchor = match (&target, byol) {
                (Some(t), true) => [rows(&mut tape, t.v1, &first), rows(&mut tape, t.v2, &first)],
                _ => [rows(&mut tape, z[0], &first), rows(&mut tape, z[1], &first)],
            };
            let mut partner = Vec::with_capacity(2);
            for v in 0..2 {
                let full = if frozen_partner {
                    let frozen = state.frozen.as_ref().expect("checked above");
                    let src = match mix_kind {
                        Some(InputMix::CrossTask) => {
                            let mem = memory.as_ref().expect("mix built from memory");
                            if v == 0 {
                                &mem.0
                            } else {
                                &mem.1
                            }
                        }
                        _ => {
                            if v == 0 {
                                &c1
                            } else {
                                &c2
                            }
                        }
                    };
                    let x = tape.constant(src.clone());
                    frozen.forward(&mut tape, x).z
                } else if let Some(pr) = &layout.partner {
                    rows(&mut tape, z[v], pr)
                } else {
                    rows(&mut tape, z[v], &first)
                };
                partner.push(tape.gather_rows(full, &m.pairing));
            }
            Some(MixInputs {
                z: ViewPair {
                    v1: zm[0],
                    v2: zm[1],
                },
                anchor: ViewPair {
                    v1: anchor[0],
                    v2: anchor[1],
                },
                partner: ViewPair {
                    v1: partner[0],
                    v2: partner[1],
                },
                lambda: m.lambda.clone(),
            })
        }
        _ => None,
    };

    let inputs = LossInputs {
        task_index: ti,
        current,
        predicted,
        target,
        old,
        distilled,
        mix: mix_inputs,
    };
    let out = total_loss(
        &mut tape,
        strategy,
        spec,
        state.cov.as_ref(),
        &inputs,
        tc.zeta,
    )?;
    if !out.bundle.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss at task {ti}, step {}", clock.step),
            detail: format!(
                "task {} distill {} cromo {} / {}",
                out.bundle.task_loss,
                out.bundle.distill_loss,
                out.bundle.cromo_loss_v1,
                out.bundle.cromo_loss_v2
            ),
        });
    }
    let grads = tape.backward(out.root);
    if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            context: format!("gradients at task {ti}, step {}", clock.step),
            detail: format!("parameter `{}`", state.net.store.get(*id).name),
        });
    }
    let lr = lr_at(
        tc.optim.lr,
        tc.optim.min_lr_ratio,
        clock.step,
        clock.total,
        clock.warmup,
    );
    state.optimizer.step(&mut state.net.store, &grads, lr);
    state.net.apply_bn_updates(&updates);
    if let Some(ema) = state.ema.as_mut() {
        ema_update(
            ema,
            &state.net,
            ema_momentum(tc.ema_momentum, clock.step, clock.total),
        )?;
    }
    if out.state.is_some() {
        state.cov = out.state;
    }
    state.step += 1;
    Ok(out.bundle)
}

/// Schedule length of one task: `(steps per epoch, total steps, warmup steps)`.
pub fn task_schedule(
    cfg: &ExperimentConfig,
    task_len: usize,
    task_index: usize,
) -> (usize, usize, usize) {
    let batch = cfg.trainer.batch_size.min(task_len);
    let per_epoch = task_len.div_ceil(batch);
    let epochs = cfg.trainer.epochs.for_task(task_index);
    let warm_epochs = cfg
        .trainer
        .optim
        .warmup_epochs
        .min(epochs.saturating_sub(1));
    (per_epoch, per_epoch * epochs, per_epoch * warm_epochs)
}

/// Train the current task for its configured epochs. `log` receives every
/// step record.
pub fn train_task(
    state: &mut RunState,
    task: &LabeledDataset,
    cfg: &ExperimentConfig,
    policy: &AugmentationPolicy,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    if task.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "task {} is empty",
            state.task_index
        )));
    }
    if task.geom != state.net.input {
        return Err(Error::Shape(format!(
            "task images are {:?}, the network expects {:?}",
            task.geom, state.net.input
        )));
    }
    let ti = state.task_index;
    if cfg.trainer.batch_size > task.len() {
        log::warn!(
            "batch size {} exceeds task {ti} size {}; using {}",
            cfg.trainer.batch_size,
            task.len(),
            task.len()
        );
    }
    let (per_epoch, total, warmup) = task_schedule(cfg, task.len(), ti);
    let epochs = cfg.trainer.epochs.for_task(ti);
    let mut k = 0;
    for epoch in 0..epochs {
        let mut r = rng::stream(cfg.trainer.seed, Stream::Shuffle, ti as u64, epoch as u64);
        let batches = epoch_batches(task.len(), cfg.trainer.batch_size, &mut r);
        debug_assert_eq!(batches.len(), per_epoch);
        for idx in batches {
            let images: Vec<&[u8]> = idx.iter().map(|&i| task.image(i)).collect();
            let clock = StepClock {
                step: k,
                total,
                warmup,
            };
            let bundle = train_step(state, cfg, policy, &images, clock)?;
            let rec = StepRecord {
                step: state.step,
                task: ti,
                epoch,
                lr: lr_at(
                    cfg.trainer.optim.lr,
                    cfg.trainer.optim.min_lr_ratio,
                    k,
                    total,
                    warmup,
                ),
                loss: bundle,
            };
            log(&rec)?;
            k += 1;
        }
        log::debug!("task {ti} epoch {epoch} done ({k}/{total} steps)");
    }
    Ok(())
}

/// Task-boundary bookkeeping: snapshot the model when another task
/// follows, store exemplars, reset optimiser and CorInfoMax state.
pub fn end_task(
    state: &mut RunState,
    task: &LabeledDataset,
    cfg: &ExperimentConfig,
    more_tasks: bool,
) -> Result<()> {
    let ti = state.task_index;
    if more_tasks {
        state.frozen = Some(snapshot(&state.net));
        state.snapshots_taken += 1;
    }
    let mut r = rng::stream(cfg.trainer.seed, Stream::Buffer, ti as u64, 0);
    state.buffer.update_after_task(task, ti, &mut r)?;
    state.optimizer.reset();
    state.cov = None;
    state.task_index += 1;
    Ok(())
}

/// Dataset plus its task split as configured.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<(DatasetPair, TaskSequence)> {
    let data = load_dataset(&cfg.data.dataset, &cfg.data.root, &cfg.data.synthetic)?;
    let seq = match cfg.data.split {
        SplitMode::Cil => split_class_incremental_with(
            &data.train,
            cfg.data.num_tasks,
            &cfg.data.class_order(cfg.trainer.seed),
        )?,
        SplitMode::Dil => {
            split_data_incremental(&data.train, cfg.data.num_tasks, cfg.trainer.seed)?
        }
    };
    Ok((data, seq))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where artifacts go; `None` keeps the run in memory.
    pub run_dir: Option<PathBuf>,
    /// Continue from the last completed task found in `run_dir`.
    pub resume: bool,
    /// Keep a copy of the model after every task in the outcome.
    pub keep_task_models: bool,
    /// Stop once this many tasks are complete; a later `resume` continues.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    pub run_dir: Option<PathBuf>,
    /// Records produced by this invocation (excludes resumed tasks).
    pub records: Vec<StepRecord>,
    /// Model after each task, when requested.
    pub task_models: Vec<TriNet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    config_hash: String,
    completed_tasks: usize,
    log_lines: usize,
    total_steps: u64,
}

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const METRICS_LOG: &str = "metrics.log";
pub const MANIFEST: &str = "manifest.json";
pub const BUFFER_SNAPSHOT: &str = "buffer.snapshot";
const PROGRESS: &str = "progress.json";

pub fn checkpoint_path(run_dir: &Path, task: usize) -> PathBuf {
    run_dir
        .join("checkpoints")
        .join(format!("task_{task}.ckpt"))
}

fn ema_path(run_dir: &Path, task: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("task_{task}.ema"))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Keep the first `lines` lines of the log, dropping records of a task
/// that was interrupted.
fn truncate_log(path: &Path, lines: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = BufReader::new(f)
        .lines()
        .take(lines)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut text = kept.join("\n");
    if !kept.is_empty() {
        text.push('\n');
    }
    write_atomic(path, &text)
}

/// Train every task in order, persisting artifacts when a run directory is
/// given. Runs are deterministic under a fixed seed.
pub fn run_continual(
    cfg: &ExperimentConfig,
    data: &DatasetPair,
    seq: &TaskSequence,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    seq.validate(&data.train)?;
    if seq.is_empty() {
        return Err(Error::InvalidArgument("task sequence is empty".into()));
    }
    let policy = cfg.data.augmentation_policy();
    policy.validate(data.train.geom.channels)?;
    let tc = &cfg.trainer;
    if seq.len() > 1
        && tc.buffer_budget == 0
        && tc.strategy.flags().input_mix == Some(InputMix::CrossTask)
    {
        return Err(Error::Config(format!(
            "strategy `{}` mixes with memory samples and needs trainer.buffer_budget > 0",
            tc.strategy
        )));
    }
    let hash = cfg.hash();
    let mut state = RunState::new(cfg, data.train.geom)?;
    let mut start = 0;
    let mut log_lines = 0;
    let mut log_file = None;

    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let progress_path = dir.join(PROGRESS);
        if opts.resume && progress_path.exists() {
            let text =
                fs::read_to_string(&progress_path).map_err(|e| Error::io(&progress_path, e))?;
            let p: Progress =
                serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if p.config_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "resume mismatch: run was produced by config {}, current config is {}",
                    p.config_hash, hash
                )));
            }
            if p.completed_tasks > 0 {
                let last = p.completed_tasks - 1;
                let (stored, _) = load_checkpoint(&mut state.net, &checkpoint_path(dir, last))?;
                if stored != hash {
                    return Err(Error::Checkpoint(
                        "resume mismatch: checkpoint config hash differs".into(),
                    ));
                }
                if let Some(ema) = state.ema.as_mut() {
                    let mut net = ema.net().clone();
                    load_checkpoint(&mut net, &ema_path(dir, last))?;
                    *ema = EmaTarget::new(&net);
                }
                let (buffer, bh) = MemoryBuffer::load(&dir.join(BUFFER_SNAPSHOT))?;
                if bh != hash {
                    return Err(Error::Checkpoint(
                        "resume mismatch: buffer config hash differs".into(),
                    ));
                }
                state.buffer = buffer;
                if p.completed_tasks < seq.len() {
                    state.frozen = Some(snapshot(&state.net));
                    state.snapshots_taken = 1;
                }
                state.task_index = p.completed_tasks;
                state.step = p.total_steps;
            }
            start = p.completed_tasks;
            log_lines = p.log_lines;
            truncate_log(&dir.join(METRICS_LOG), log_lines)?;
            log::info!("resuming {} at task {start}", dir.display());
        } else {
            write_atomic(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
            seq.write_manifest(&dir.join(MANIFEST))?;
            write_atomic(&dir.join(METRICS_LOG), "")?;
        }
        let path = dir.join(METRICS_LOG);
        let f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        log_file = Some((path, BufWriter::new(f)));
    }

    let base_lines = log_lines;
    let mut records = Vec::new();
    let mut task_models = Vec::new();
    for t in start..seq.len() {
        let task = seq.task_dataset(&data.train, t);
        log::info!(
            "task {t}: {} samples, classes {:?}",
            task.len(),
            seq.tasks[t].classes
        );
        {
            let mut sink = |r: &StepRecord| -> Result<()> {
                if let Some((path, w)) = log_file.as_mut() {
                    let line = serde_json::to_string(r).expect("record serialises");
                    writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                records.push(r.clone());
                Ok(())
            };
            train_task(&mut state, &task, cfg, &policy, &mut sink)?;
        }
        end_task(&mut state, &task, cfg, t + 1 < seq.len())?;
        if opts.keep_task_models {
            task_models.push(state.net.clone());
        }
        if let (Some(dir), Some((path, w))) = (&opts.run_dir, log_file.as_mut()) {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            let meta = serde_json::json!({ "task": t, "strategy": tc.strategy.name(), "ssl": cfg.loss.kind.name() });
            save_checkpoint(
                &state.net,
                &checkpoint_path(dir, t),
                &hash,
                &meta.to_string(),
            )?;
            if let Some(ema) = &state.ema {
                save_checkpoint(ema.net(), &ema_path(dir, t), &hash, &meta.to_string())?;
            }
            state.buffer.save(&dir.join(BUFFER_SNAPSHOT), &hash)?;
            let lines = base_lines + records.len();
            let p = Progress {
                config_hash: hash.clone(),
                completed_tasks: t + 1,
                log_lines: lines,
                total_steps: state.step,
            };
            write_atomic(
                &dir.join(PROGRESS),
                &serde_json::to_string_pretty(&p).expect("plain struct"),
            )?;
        }
        if opts.stop_after == Some(t + 1) {
            break;
        }
    }
    Ok(RunOutcome {
        state,
        run_dir: opts.run_dir.clone(),
        records,
        task_models,
    })
}

/// Read `metrics.log` back.
pub fn read_metrics_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l)
                .map_err(|e| Error::Checkpoint(format!("bad metrics line: {e}")))
        })
        .collect()
}
