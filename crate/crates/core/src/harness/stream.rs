use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{DpatError, Result};
use crate::model::VideoClip;

/// One task of a class-incremental stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    /// 1-based task id.
    pub id: usize,
    /// Sorted class ids `Y_t`.
    pub classes: Vec<usize>,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

/// Ordered tasks with pairwise-disjoint class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub class_names: Vec<String>,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    /// Groups `dataset` by an explicit class partition. Classes may not
    /// repeat across tasks and every class must exist in the dataset.
    pub fn from_partition(dataset: &Dataset, partition: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for group in &partition {
            if group.is_empty() {
                return Err(DpatError::Protocol("task with no classes".into()));
            }
            for &c in group {
                if c >= dataset.num_classes() {
                    return Err(DpatError::Protocol(format!("class {c} is not in the dataset")));
                }
                if !seen.insert(c) {
                    return Err(DpatError::Protocol(format!("class {c} appears in more than one task")));
                }
            }
        }
        let tasks = partition
            .into_iter()
            .enumerate()
            .map(|(i, mut classes)| {
                classes.sort_unstable();
                let pick = |clips: &[VideoClip]| -> Vec<VideoClip> {
                    clips
                        .iter()
                        .filter(|c| classes.binary_search(&c.label).is_ok())
                        .cloned()
                        .collect()
                };
                TaskData {
                    id: i + 1,
                    train: pick(&dataset.train),
                    test: pick(&dataset.test),
                    classes,
                }
            })
            .collect();
        let stream = Self {
            class_names: dataset.class_names.clone(),
            tasks,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: usize) -> Option<&TaskData> {
        self.tasks.get(id.checked_sub(1)?)
    }

    /// `Ỹ_t`: union of class sets of tasks `1..=t`, sorted.
    pub fn cumulative_classes(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks.iter().take(t).flat_map(|d| d.classes.iter().copied()).collect();
        out.sort_unstable();
        out
    }

    /// Checks disjointness and that every sample's label is in its task.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(DpatError::Protocol(format!("class {c} appears in more than one task")));
                }
            }
            if let Some(clip) = task
                .train
                .iter()
                .chain(&task.test)
                .find(|c| !task.classes.contains(&c.label))
            {
                return Err(DpatError::Protocol(format!(
                    "task {} holds a sample of class {}",
                    task.id, clip.label
                )));
            }
        }
        Ok(())
    }
}

/// Shuffles the class ids with `seed` and cuts them into `n` equal groups.
pub fn partition_classes(num_classes: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || num_classes % n != 0 {
        return Err(DpatError::Protocol(format!(
            "{num_classes} classes cannot be split into {n} equal tasks"
        )));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(classes.chunks(num_classes / n).map(<[usize]>::to_vec).collect())
}

pub fn build_task_stream(dataset: &Dataset, n: usize, seed: u64) -> Result<TaskStream> {
    let partition = partition_classes(dataset.num_classes(), n, seed)?;
    TaskStream::from_partition(dataset, partition)
}
