use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::split::TaskSequence;
use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Iteration `k` draws its whole batch from task `k mod T`.
    RoundRobin,
    /// Every batch is drawn from the union of all tasks.
    SinglePool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    /// Source task, or `None` for single-pool batches.
    pub task: Option<usize>,
    /// Indices into the source dataset.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub batch_size: usize,
    pub mode: ScheduleMode,
    pub order: Vec<ScheduledBatch>,
}

/// Draws without replacement from a pool, reshuffling on exhaustion.
struct Cycler {
    pool: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(mut pool: Vec<usize>, rng: &mut StreamRng) -> Self {
        pool.shuffle(rng);
        Self { pool, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut StreamRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.pool.len() {
                self.pool.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn make_minibatch_schedule(
    seq: &TaskSequence,
    batch_size: usize,
    iterations: usize,
    mode: ScheduleMode,
    seed: u64,
) -> Result<IterationSchedule> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty task sequence".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let smallest = seq.tasks.iter().map(|t| t.indices.len()).min().unwrap_or(0);
    if batch_size > smallest {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} exceeds the smallest task ({smallest} samples)"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Schedule, 0, 0);
    let order = match mode {
        ScheduleMode::RoundRobin => {
            let mut cyclers: Vec<Cycler> = seq
                .tasks
                .iter()
                .map(|t| Cycler::new(t.indices.clone(), &mut rng))
                .collect();
            (0..iterations)
                .map(|k| {
                    let t = k % seq.len();
                    ScheduledBatch {
                        task: Some(t),
                        indices: cyclers[t].take(batch_size, &mut rng),
                    }
                })
                .collect()
        }
        ScheduleMode::SinglePool => {
            let all: Vec<usize> = seq
                .tasks
                .iter()
                .flat_map(|t| t.indices.iter().copied())
                .collect();
            let mut cycler = Cycler::new(all, &mut rng);
            (0..iterations)
                .map(|_| ScheduledBatch {
                    task: None,
                    indices: cycler.take(batch_size, &mut rng),
                })
                .collect()
        }
    };
    Ok(IterationSchedule {
        batch_size,
        mode,
        order,
    })
}

/// Batches of one epoch over `n` samples: a fresh permutation cut into
/// `ceil(n / batch)` batches. The last batch is topped up with samples from
/// the start of the permutation so every batch has the same size.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    assert!(n > 0 && batch > 0, "epoch_batches: empty input");
    let batch = batch.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let steps = n.div_ceil(batch);
    (0..steps)
        .map(|s| (0..batch).map(|k| perm[(s * batch + k) % n]).collect())
        .collect()
}
