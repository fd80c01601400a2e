//! Fixed-budget exemplar memory of raw images from finished tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::data::{ImageGeom, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    /// HWC bytes at native resolution, never augmented.
    pub image: Vec<u8>,
    pub label: usize,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    pub geom: ImageGeom,
    pub samples_per_task: usize,
    entries: Vec<BufferEntry>,
    tasks_seen: BTreeSet<usize>,
}

/// Rows drawn from the buffer, borrowed.
#[derive(Debug, Clone)]
pub struct BufferBatch<'a> {
    pub images: Vec<&'a [u8]>,
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BufferMeta {
    samples_per_task: usize,
    tasks_seen: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
}

/// Split `budget` slots over classes with the given capacities: one slot
/// at a time, cycling through `order`, skipping full classes. Counts of
/// classes that are not exhausted differ by at most one.
fn allocate(budget: usize, capacity: &[usize], order: &[usize]) -> Vec<usize> {
    let mut counts = vec![0; capacity.len()];
    let target = budget.min(capacity.iter().sum());
    let mut given = 0;
    while given < target {
        for &c in order {
            if given == target {
                break;
            }
            if counts[c] < capacity[c] {
                counts[c] += 1;
                given += 1;
            }
        }
    }
    counts
}

impl MemoryBuffer {
    pub fn new(geom: ImageGeom, samples_per_task: usize) -> Self {
        Self {
            geom,
            samples_per_task,
            entries: Vec::new(),
            tasks_seen: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn tasks_seen(&self) -> &BTreeSet<usize> {
        &self.tasks_seen
    }

    /// Per-class counts of the entries stored for `task`.
    pub fn class_counts(&self, task: usize) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.task == task) {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }

    /// Store a class-balanced random selection of `task`'s samples.
    /// Existing entries are left untouched.
    pub fn update_after_task(
        &mut self,
        task: &LabeledDataset,
        task_id: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.tasks_seen.contains(&task_id) {
            return Err(Error::Buffer(format!("task {task_id} is already stored")));
        }
        if task.geom != self.geom {
            return Err(Error::Shape(format!(
                "buffer holds {:?} images, task has {:?}",
                self.geom, task.geom
            )));
        }
        if task.len() < self.samples_per_task {
            log::warn!(
                "task {task_id} has {} samples, fewer than the per-task budget {}; storing all of them",
                task.len(),
                self.samples_per_task
            );
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..task.len() {
            by_class.entry(task.label(i)).or_default().push(i);
        }
        let classes: Vec<usize> = by_class.keys().copied().collect();
        let mut pools: Vec<Vec<usize>> = by_class.into_values().collect();
        for p in &mut pools {
            p.shuffle(rng);
        }
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.shuffle(rng);
        let capacity: Vec<usize> = pools.iter().map(Vec::len).collect();
        let counts = allocate(self.samples_per_task, &capacity, &order);

        let mut chosen: Vec<usize> = pools
            .iter()
            .zip(&counts)
            .flat_map(|(p, &k)| p[..k].iter().copied())
            .collect();
        chosen.sort_unstable();
        for i in chosen {
            self.entries.push(BufferEntry {
                image: task.image(i).to_vec(),
                label: task.label(i),
                task: task_id,
            });
        }
        self.tasks_seen.insert(task_id);
        Ok(())
    }

    /// `n` uniform draws with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::Buffer("cannot sample from an empty buffer".into()));
        }
        Ok((0..n)
            .map(|_| rng.random_range(0..self.entries.len()))
            .collect())
    }

    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<BufferBatch<'_>> {
        let idx = self.sample_indices(n, rng)?;
        Ok(BufferBatch {
            images: idx
                .iter()
                .map(|&i| self.entries[i].image.as_slice())
                .collect(),
            labels: idx.iter().map(|&i| self.entries[i].label).collect(),
            task_ids: idx.iter().map(|&i| self.entries[i].task).collect(),
        })
    }

    pub fn to_container(&self, config_hash: &str) -> Container {
        let meta = BufferMeta {
            samples_per_task: self.samples_per_task,
            tasks_seen: self.tasks_seen.iter().copied().collect(),
            channels: self.geom.channels,
            height: self.geom.height,
            width: self.geom.width,
        };
        let mut c = Container::new(
            config_hash,
            serde_json::to_string(&meta).expect("plain struct"),
        );
        let n = self.entries.len();
        let images: Vec<u8> = self
            .entries
            .iter()
            .flat_map(|e| e.image.iter().copied())
            .collect();
        c.push(
            "buffer/images",
            vec![n, self.geom.len()],
            ArrayData::U8(images),
        );
        c.push(
            "buffer/labels",
            vec![n],
            ArrayData::I64(self.entries.iter().map(|e| e.label as i64).collect()),
        );
        c.push(
            "buffer/tasks",
            vec![n],
            ArrayData::I64(self.entries.iter().map(|e| e.task as i64).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("buffer snapshot: {m}"));
        let meta: BufferMeta =
            serde_json::from_str(&c.metadata).map_err(|e| bad(&e.to_string()))?;
        let geom = ImageGeom {
            channels: meta.channels,
            height: meta.height,
            width: meta.width,
        };
        let (ArrayData::U8(images), ArrayData::I64(labels), ArrayData::I64(tasks)) = (
            &c.require("buffer/images")?.data,
            &c.require("buffer/labels")?.data,
            &c.require("buffer/tasks")?.data,
        ) else {
            return Err(bad("unexpected dtypes"));
        };
        let n = labels.len();
        if tasks.len() != n || images.len() != n * geom.len() {
            return Err(bad("inconsistent entry counts"));
        }
        let entries = (0..n)
            .map(|i| BufferEntry {
                image: images[i * geom.len()..(i + 1) * geom.len()].to_vec(),
                label: labels[i] as usize,
                task: tasks[i] as usize,
            })
            .collect();
        Ok(Self {
            geom,
            samples_per_task: meta.samples_per_task,
            entries,
            tasks_seen: meta.tasks_seen.into_iter().collect(),
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        self.to_container(config_hash).save(path)
    }

    /// Load a snapshot, returning it with its stored config hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let c = Container::load(path)?;
        Ok((Self::from_container(&c)?, c.config_hash))
    }
}
