use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Disjoint class sets per task.
    Cil,
    /// Disjoint sample shards per task, every class in every task.
    Dil,
}

/// How classes are ordered before being chunked into tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ClassOrder {
    /// Shuffle class ids with the given seed.
    Shuffled(u64),
    /// Ascending class id.
    Natural,
    /// A full permutation of the class ids.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub task_id: usize,
    /// Sorted class ids present in the task.
    pub classes: Vec<usize>,
    /// Indices into the source dataset, ascending.
    pub indices: Vec<usize>,
}

/// Ordered tasks over one source dataset. Serialises to the split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub mode: SplitMode,
    pub class_count: usize,
    pub source_len: usize,
    pub tasks: Vec<TaskSplit>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Materialise task `t` from the source dataset.
    pub fn task_dataset(&self, source: &LabeledDataset, t: usize) -> LabeledDataset {
        source.subset(&self.tasks[t].indices)
    }

    /// Class to task map. For CIL sequences this is the split's own
    /// assignment; for DIL sequences every class maps to task 0.
    pub fn class_task_map(&self) -> TaskClassMap {
        let mut task_of = vec![0; self.class_count];
        if self.mode == SplitMode::Cil {
            for t in &self.tasks {
                for &c in &t.classes {
                    task_of[c] = t.task_id;
                }
            }
            TaskClassMap::new(task_of, self.tasks.len()).expect("valid split")
        } else {
            TaskClassMap::new(task_of, 1).expect("valid split")
        }
    }

    /// Check the structural invariants of the sequence against its source.
    pub fn validate(&self, source: &LabeledDataset) -> Result<()> {
        if self.source_len != source.len() {
            return Err(Error::Split(format!(
                "manifest covers {} samples, dataset has {}",
                self.source_len,
                source.len()
            )));
        }
        let mut seen = vec![false; source.len()];
        for t in &self.tasks {
            for &i in &t.indices {
                if i >= source.len() || seen[i] {
                    return Err(Error::Split(format!(
                        "sample {i} is duplicated or out of range"
                    )));
                }
                seen[i] = true;
                if t.classes.binary_search(&source.label(i)).is_err() {
                    return Err(Error::Split(format!(
                        "sample {i} of class {} not in task {} classes",
                        source.label(i),
                        t.task_id
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Split("task samples do not cover the dataset".into()));
        }
        if self.mode == SplitMode::Cil {
            let mut all = BTreeSet::new();
            for t in &self.tasks {
                for &c in &t.classes {
                    if !all.insert(c) {
                        return Err(Error::Split(format!("class {c} appears in two tasks")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Split(format!("bad manifest {}: {e}", path.display())))
    }
}

/// Class to task assignment used to score task-id prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskClassMap {
    task_of: Vec<usize>,
    num_tasks: usize,
}

impl TaskClassMap {
    pub fn new(task_of: Vec<usize>, num_tasks: usize) -> Result<Self> {
        if let Some(t) = task_of.iter().find(|&&t| t >= num_tasks) {
            return Err(Error::InvalidArgument(format!(
                "task id {t} >= {num_tasks}"
            )));
        }
        Ok(Self { task_of, num_tasks })
    }

    /// Consecutive blocks of `per_task` classes.
    pub fn contiguous(class_count: usize, num_tasks: usize) -> Result<Self> {
        if num_tasks == 0 || class_count % num_tasks != 0 {
            return Err(Error::Split(format!(
                "{class_count} classes cannot be split into {num_tasks} equal tasks"
            )));
        }
        let per = class_count / num_tasks;
        Self::new((0..class_count).map(|c| c / per).collect(), num_tasks)
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.task_of.get(class).copied()
    }

    pub fn class_count(&self) -> usize {
        self.task_of.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn classes_of(&self, task: usize) -> Vec<usize> {
        (0..self.task_of.len())
            .filter(|&c| self.task_of[c] == task)
            .collect()
    }
}

fn class_permutation(class_count: usize, order: &ClassOrder) -> Result<Vec<usize>> {
    match order {
        ClassOrder::Natural => Ok((0..class_count).collect()),
        ClassOrder::Shuffled(seed) => {
            let mut v: Vec<usize> = (0..class_count).collect();
            v.shuffle(&mut rng::stream(*seed, Stream::Split, 0, 0));
            Ok(v)
        }
        ClassOrder::Explicit(v) => {
            let mut sorted = v.clone();
            sorted.sort_unstable();
            if sorted != (0..class_count).collect::<Vec<_>>() {
                return Err(Error::Split(format!(
                    "explicit class order must be a permutation of 0..{class_count}"
                )));
            }
            Ok(v.clone())
        }
    }
}

/// Class-incremental split with classes shuffled by `seed` and chunked.
pub fn split_class_incremental(
    ds: &LabeledDataset,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskSequence> {
    split_class_incremental_with(ds, num_tasks, &ClassOrder::Shuffled(seed))
}

pub fn split_class_incremental_with(
    ds: &LabeledDataset,
    num_tasks: usize,
    order: &ClassOrder,
) -> Result<TaskSequence> {
    if num_tasks < 1 {
        return Err(Error::Split("num_tasks must be >= 1".into()));
    }
    if ds.class_count % num_tasks != 0 {
        return Err(Error::Split(format!(
            "{} classes are not divisible into {num_tasks} tasks",
            ds.class_count
        )));
    }
    let perm = class_permutation(ds.class_count, order)?;
    let per = ds.class_count / num_tasks;
    let mut task_of = vec![0; ds.class_count];
    for (pos, &c) in perm.iter().enumerate() {
        task_of[c] = pos / per;
    }
    let mut tasks: Vec<TaskSplit> = (0..num_tasks)
        .map(|t| {
            let mut classes = perm[t * per..(t + 1) * per].to_vec();
            classes.sort_unstable();
            TaskSplit {
                task_id: t,
                classes,
                indices: Vec::new(),
            }
        })
        .collect();
    for (i, &l) in ds.labels().iter().enumerate() {
        tasks[task_of[l]].indices.push(i);
    }
    let seq = TaskSequence {
        mode: SplitMode::Cil,
        class_count: ds.class_count,
        source_len: ds.len(),
        tasks,
    };
    seq.validate(ds)?;
    Ok(seq)
}

/// Data-incremental split: each class's samples are shuffled by `seed` and
/// dealt into `num_tasks` near-equal shards, so every task sees every class.
pub fn split_data_incremental(
    ds: &LabeledDataset,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if num_tasks < 1 {
        return Err(Error::Split("num_tasks must be >= 1".into()));
    }
    let hist = ds.class_histogram();
    if let Some((c, &n)) = hist.iter().enumerate().find(|(_, &n)| n < num_tasks) {
        return Err(Error::Split(format!(
            "class {c} has {n} samples, fewer than {num_tasks} tasks"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(seed, Stream::Split, 1, 0);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_tasks];
    // Rotate the starting shard per class so remainders spread evenly.
    let mut offset = 0;
    for idx in by_class.iter_mut() {
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            shards[(offset + k) % num_tasks].push(i);
        }
        offset = (offset + idx.len()) % num_tasks;
    }
    let all: Vec<usize> = (0..ds.class_count).collect();
    let tasks = shards
        .into_iter()
        .enumerate()
        .map(|(t, mut indices)| {
            indices.sort_unstable();
            TaskSplit {
                task_id: t,
                classes: all.clone(),
                indices,
            }
        })
        .collect();
    let seq = TaskSequence {
        mode: SplitMode::Dil,
        class_count: ds.class_count,
        source_len: ds.len(),
        tasks,
    };
    seq.validate(ds)?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{synthetic_gaussians, SyntheticConfig};

    fn toy() -> LabeledDataset {
        synthetic_gaussians(&SyntheticConfig::default())
            .unwrap()
            .train
    }

    #[test]
    fn cil_two_tasks() {
        let ds = toy();
        let seq = split_class_incremental(&ds, 2, 3).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq
            .tasks
            .iter()
            .all(|t| t.classes.len() == 2 && t.indices.len() == 200));
        assert_eq!(seq, split_class_incremental(&ds, 2, 3).unwrap());
    }

    #[test]
    fn cil_rejects_bad_counts() {
        let ds = toy();
        assert!(split_class_incremental(&ds, 3, 0).is_err());
        assert!(split_class_incremental(&ds, 0, 0).is_err());
    }

    #[test]
    fn natural_order_is_contiguous() {
        let seq = split_class_incremental_with(&toy(), 2, &ClassOrder::Natural).unwrap();
        assert_eq!(seq.tasks[0].classes, vec![0, 1]);
        assert_eq!(
            seq.class_task_map(),
            TaskClassMap::contiguous(4, 2).unwrap()
        );
    }

    #[test]
    fn dil_four_shards() {
        let ds = toy();
        let seq = split_data_incremental(&ds, 4, 9).unwrap();
        for t in &seq.tasks {
            assert_eq!(t.indices.len(), 100);
            let sub = seq.task_dataset(&ds, t.task_id);
            assert!(sub.class_histogram().iter().all(|&n| n > 0));
        }
        let single = split_data_incremental(&ds, 1, 9).unwrap();
        assert_eq!(single.tasks[0].indices, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn manifest_roundtrip() {
        let ds = toy();
        let seq = split_class_incremental(&ds, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        seq.write_manifest(&p).unwrap();
        assert_eq!(TaskSequence::read_manifest(&p).unwrap(), seq);
    }
}
