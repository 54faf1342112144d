//! Class-incremental protocol: task streams, the accuracy matrix, metrics
//! and the experiment runner.

pub mod metrics;
pub mod plot;
pub mod report;
pub mod stream;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, CheckpointInfo};
use crate::config::ExperimentConfig;
use crate::data::{augment, Dataset};
use crate::error::{DpatError, Result};
use crate::model::DpatModel;
use crate::trainer::{evaluate, train_task, EpochRecord, PreparedClip, Selection, Stage, TrainObserver, TrainMode};

pub use metrics::{average_accuracy, backward_forgetting, compute_metrics, AccuracyMatrix};
pub use report::{write_report, Report};
pub use stream::{build_task_stream, partition_classes, TaskData, TaskStream};

/// How inference picks the task-specific prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelectionMode {
    /// Key matching, task identity unknown.
    #[default]
    Matched,
    /// The true task id, for upper-bound analysis.
    Oracle,
}

/// A read of task data, recorded in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataAccess {
    Train { task: usize },
    Test { after: usize, task: usize },
}

/// Ordered record of which task's data was read when.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub entries: Vec<DataAccess>,
}

impl AccessLog {
    /// Checks that no evaluation after task `j` was preceded by training
    /// data of a later task, and that tests only touch seen tasks.
    pub fn check(&self) -> Result<()> {
        let mut trained = 0;
        for e in &self.entries {
            match *e {
                DataAccess::Train { task } => trained = trained.max(task),
                DataAccess::Test { after, task } => {
                    if trained > after || task > after {
                        return Err(DpatError::Protocol(format!(
                            "row {after} evaluated task {task} after training on task {trained}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub selection: SelectionMode,
    /// Writes `task-<t>/` checkpoints here at every task boundary.
    pub checkpoint_dir: Option<PathBuf>,
}

struct Recorder<'a> {
    records: &'a mut Vec<EpochRecord>,
}

impl TrainObserver for Recorder<'_> {
    fn on_epoch(&mut self, record: &EpochRecord) {
        log::debug!(
            "task {} stage {:?} epoch {} loss {:.4} ce {:.4} match {:.4}",
            record.task,
            record.stage,
            record.epoch,
            record.loss,
            record.cross_entropy,
            record.matching
        );
        self.records.push(record.clone());
    }
}

/// Accuracy and task-selection outcome on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitScore {
    pub correct: usize,
    pub matched: usize,
    pub total: usize,
}

impl SplitScore {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Classifies every clip of task `task`'s test split.
pub fn score_split(model: &DpatModel, clips: &[PreparedClip], task: usize, selection: SelectionMode) -> Result<SplitScore> {
    if clips.is_empty() {
        return Err(DpatError::Data(format!("task {task} has an empty test split")));
    }
    let sel = match selection {
        SelectionMode::Matched => Selection::Matched,
        SelectionMode::Oracle => Selection::Oracle(task),
    };
    let mut score = SplitScore {
        correct: 0,
        matched: 0,
        total: clips.len(),
    };
    for clip in clips {
        let p = evaluate(clip, model, sel)?;
        score.correct += usize::from(p.class == clip.label);
        score.matched += usize::from(p.task == task);
    }
    Ok(score)
}

/// A continual run advanced one task at a time, so a failure still
/// leaves the rows computed so far.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub stream: TaskStream,
    pub model: DpatModel,
    pub r: AccuracyMatrix,
    pub log: Vec<EpochRecord>,
    pub access: AccessLog,
    /// Per-task `(matched, total)` on the final row.
    pub matching: Vec<(usize, usize)>,
    options: RunOptions,
    rng: ChaCha8Rng,
    test_cache: Vec<Vec<PreparedClip>>,
    done: usize,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, dataset: &Dataset, options: RunOptions) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let stream = build_task_stream(dataset, config.stream.tasks, config.stream.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = DpatModel::new(config.model.clone(), config.train.ablation, config.train.tau, &mut rng)?;
        let n = stream.len();
        Ok(Self {
            config,
            stream,
            model,
            r: AccuracyMatrix::new(n),
            log: Vec::new(),
            access: AccessLog::default(),
            matching: Vec::new(),
            options,
            rng,
            test_cache: Vec::new(),
            done: 0,
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.done
    }

    pub fn is_finished(&self) -> bool {
        self.done == self.stream.len()
    }

    fn prepare_train(&self, task: &TaskData) -> Result<Vec<PreparedClip>> {
        let aug = &self.config.stream.augment;
        let identity = aug.crop.is_none() && aug.resize.is_none() && (aug.flip_probability == 0.0 || aug.motion_labels);
        task.train
            .iter()
            .enumerate()
            .map(|(i, clip)| {
                if identity {
                    PreparedClip::new(clip, &self.model)
                } else {
                    let seed = self.config.seed ^ ((task.id as u64) << 32) ^ i as u64;
                    let (c, _) = augment(clip, aug, seed)?;
                    PreparedClip::new(&c, &self.model)
                }
            })
            .collect()
    }

    /// Trains the next task and fills its row of `R`.
    pub fn run_next_task(&mut self) -> Result<usize> {
        let t = self.done + 1;
        let task = self
            .stream
            .task(t)
            .ok_or_else(|| DpatError::Protocol("stream is exhausted".into()))?
            .clone();
        self.access.entries.push(DataAccess::Train { task: t });
        let train = self.prepare_train(&task)?;
        let mut recorder = Recorder { records: &mut self.log };
        let id = train_task(
            &mut self.model,
            &train,
            &task.classes,
            &self.config.train,
            &mut self.rng,
            &mut recorder,
        )?;
        debug_assert_eq!(id, t);
        self.done = t;

        if let Some(dir) = &self.options.checkpoint_dir {
            let stage = match self.config.train.mode {
                TrainMode::Joint => Stage::Joint,
                _ => Stage::Adapter,
            };
            let info = CheckpointInfo {
                config_hash: self.config.fingerprint(),
                task: t,
                stage: stage.id(),
            };
            save_checkpoint(&dir.join(format!("task-{t}")), &self.model, &info)?;
        }

        let test = task
            .test
            .iter()
            .map(|c| PreparedClip::new(c, &self.model))
            .collect::<Result<Vec<_>>>()?;
        self.test_cache.push(test);
        let last = t == self.stream.len();
        for i in 1..=t {
            self.access.entries.push(DataAccess::Test { after: t, task: i });
            let score = score_split(&self.model, &self.test_cache[i - 1], i, self.options.selection)?;
            self.r.set(t, i, score.accuracy())?;
            if last {
                self.matching.push((score.matched, score.total));
            }
        }
        log::info!(
            "task {t}/{}: mean accuracy over seen tasks {:.4}",
            self.stream.len(),
            self.r.seen_mean(t).unwrap_or(f64::NAN)
        );
        Ok(t)
    }

    /// Runs every remaining task.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_next_task()?;
        }
        Ok(())
    }

    /// Report of the current state; `complete` is false until every task ran.
    pub fn report(&self) -> Result<Report> {
        self.access.check()?;
        let complete = self.is_finished();
        let acc = if complete { Some(average_accuracy(&self.r)?) } else { None };
        let bwf = if complete && self.r.tasks() >= 2 {
            Some(backward_forgetting(&self.r)?)
        } else {
            None
        };
        let matching_accuracy = if complete {
            let (m, n) = self
                .matching
                .iter()
                .fold((0, 0), |(a, b), &(m, n)| (a + m, b + n));
            Some(m as f64 / n as f64)
        } else {
            None
        };
        Ok(Report {
            fingerprint: self.config.fingerprint(),
            config_toml: self.config.to_toml(),
            r: self.r.clone(),
            acc,
            bwf,
            matching_accuracy,
            curve: self.r.curve(),
            task_classes: self.stream.tasks.iter().map(|t| t.classes.clone()).collect(),
            log: self.log.clone(),
            complete,
        })
    }
}

/// Builds the stream, trains every task and returns the report.
pub fn run_experiment(config: &ExperimentConfig, dataset: &Dataset, options: RunOptions) -> Result<(Report, DpatModel)> {
    let mut exp = Experiment::new(config.clone(), dataset, options)?;
    exp.run_to_end()?;
    Ok((exp.report()?, exp.model))
}
