//! Two-stage decoupled training per task and selection-based inference.
//!
//! Stage 1 tunes the prompts and the head with cross-entropy only; stage 2
//! tunes the adapters, the current task key and the head with
//! cross-entropy plus `λ·L_match`. Everything else stays frozen.

pub mod optim;
pub mod schedule;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::error::{DpatError, Result};
use crate::model::{forward_model, Ablation, DpatModel, ParamGroup, ParamKey, Role, TokenTensor};
use crate::prompt::MatchLossKind;

pub use optim::{Adam, Optimizer, Sgd};
pub use schedule::cosine_lr;

/// How a task is optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Prompt stage, then adapter stage, softmax matching loss.
    #[default]
    Dpat,
    /// One phase over the union of both stages' groups for twice the epochs.
    Joint,
    /// Decoupled stages with the raw-distance matching loss.
    DualpromptLoss,
}

impl TrainMode {
    pub fn match_kind(self) -> MatchLossKind {
        match self {
            TrainMode::DualpromptLoss => MatchLossKind::Raw,
            _ => MatchLossKind::Softmax,
        }
    }
}

/// Optimization settings shared by every task of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub batch_size: usize,
    /// Epochs per stage (`M_t`).
    pub epochs: usize,
    pub prompt_lr: f64,
    pub adapter_lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub cosine_schedule: bool,
    pub mode: TrainMode,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Batch 64, 50 epochs per stage, learning rates 1e-3 / 3e-4, λ = 1,
    /// τ = 0.1, cosine decay.
    pub fn reference() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            prompt_lr: 1e-3,
            adapter_lr: 3e-4,
            tau: 0.1,
            lambda: 1.0,
            cosine_schedule: true,
            mode: TrainMode::Dpat,
            ablation: Ablation::default(),
        }
    }

    /// Reference structure with batch size, epochs and learning rates
    /// scaled for the desk benchmark.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            epochs: 8,
            prompt_lr: 5e-2,
            adapter_lr: 2e-2,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DpatError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.prompt_lr >= 0.0) || !(self.adapter_lr >= 0.0) {
            return fail("lambda and learning rates must be non-negative");
        }
        if self.ablation.all_prefixes && self.mode == TrainMode::DualpromptLoss {
            return fail("dualprompt-loss mode needs task prompts; it cannot run with all prefixes ablated");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prompt,
    Adapter,
    Joint,
}

impl Stage {
    pub fn id(self) -> u8 {
        match self {
            Stage::Prompt => 1,
            Stage::Adapter => 2,
            Stage::Joint => 0,
        }
    }

    /// Whether the matching term enters the loss.
    pub fn uses_match_loss(self) -> bool {
        !matches!(self, Stage::Prompt)
    }
}

/// Parameter groups updated by `stage` while training task `task`.
pub fn trainable_params(stage: Stage, task: usize, ablation: &Ablation) -> BTreeSet<ParamGroup> {
    let mut set = BTreeSet::new();
    let prompts = |set: &mut BTreeSet<ParamGroup>| {
        if ablation.agnostic_prompts_active() {
            set.insert(ParamGroup::AgnosticPrompt(Role::Temporal));
            set.insert(ParamGroup::AgnosticPrompt(Role::Spatial));
        }
        if ablation.task_prompts_active() {
            set.insert(ParamGroup::TaskPrompt { task, role: Role::Temporal });
            set.insert(ParamGroup::TaskPrompt { task, role: Role::Spatial });
        }
    };
    let adapters = |set: &mut BTreeSet<ParamGroup>| {
        if ablation.temporal_adapter_active() {
            set.insert(ParamGroup::Adapter(Role::Temporal));
        }
        if ablation.spatial_adapter_active() {
            set.insert(ParamGroup::Adapter(Role::Spatial));
        }
        set.insert(ParamGroup::TaskKey(task));
    };
    match stage {
        Stage::Prompt => prompts(&mut set),
        Stage::Adapter => adapters(&mut set),
        Stage::Joint => {
            prompts(&mut set);
            adapters(&mut set);
        }
    }
    set.insert(ParamGroup::Head);
    set
}

/// A clip ready for training or evaluation: frozen patch embedding, frozen
/// query feature and label.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub tokens: TokenTensor,
    pub query: Vec<f64>,
    pub label: usize,
}

impl PreparedClip {
    pub fn new(clip: &crate::model::VideoClip, model: &DpatModel) -> Result<Self> {
        let tokens = model.embed(clip)?;
        let query = model.plain_features(&tokens)?;
        Ok(Self {
            tokens,
            query,
            label: clip.label,
        })
    }
}

/// Mean loss terms over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub matching: f64,
}

/// Batch loss and gradients for task `task` under `stage`. Logits are
/// restricted to `active_classes`; the matching term is added with weight
/// `lambda` when the stage uses it.
pub fn batch_loss_and_grads(
    model: &DpatModel,
    batch: &[&PreparedClip],
    task: usize,
    stage: Stage,
    active_classes: &[usize],
    lambda: f64,
    kind: MatchLossKind,
    groups: &BTreeSet<ParamGroup>,
) -> Result<(LossParts, Gradients)> {
    if batch.is_empty() {
        return Err(DpatError::Data("empty batch".into()));
    }
    let mask = model.head.mask_for(active_classes)?;
    let trainable = |g: ParamGroup| groups.contains(&g);
    let mut grads = Gradients::new();
    let mut parts = LossParts::default();
    for clip in batch {
        let slot = model.head.slot_of(clip.label).ok_or_else(|| {
            DpatError::Data(format!("label {} is outside the seen class set", clip.label))
        })?;
        let mut tape = Tape::new();
        let logits = model.logits_on_tape(&mut tape, &clip.tokens, task, &trainable)?;
        let ce = tape.cross_entropy(logits, slot, &mask)?;
        let mut terms = vec![(ce, 1.0)];
        parts.cross_entropy += tape.value(ce).data()[0];
        if stage.uses_match_loss() {
            let keys: Vec<_> = (1..=task)
                .map(|t| {
                    let key = ParamKey::TaskKey(t);
                    let value = model.keys.key(t).expect("key exists for every seen task");
                    tape.param(key, value, trainable(key.group()))
                })
                .collect();
            let m = tape.match_loss(&clip.query, &keys, task, model.keys.tau(), kind)?;
            parts.matching += tape.value(m).data()[0];
            terms.push((m, lambda));
        }
        let total = tape.weighted_sum(&terms);
        parts.total += tape.value(total).data()[0];
        for (k, g) in tape.backward(total) {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(k, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in grads.values_mut() {
        g.scale_assign(1.0 / n);
    }
    parts.total /= n;
    parts.cross_entropy /= n;
    parts.matching /= n;
    Ok((parts, grads))
}

/// Batch loss without gradients.
pub fn batch_loss(
    model: &DpatModel,
    batch: &[&PreparedClip],
    task: usize,
    stage: Stage,
    active_classes: &[usize],
    lambda: f64,
    kind: MatchLossKind,
) -> Result<LossParts> {
    batch_loss_and_grads(model, batch, task, stage, active_classes, lambda, kind, &BTreeSet::new())
        .map(|(p, _)| p)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub matching: f64,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_stage_end(&mut self, _task: usize, _stage: Stage, _model: &DpatModel) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

fn group_lr(group: ParamGroup, stage: Stage, cfg: &RunConfig) -> f64 {
    match stage {
        Stage::Prompt => cfg.prompt_lr,
        Stage::Adapter => cfg.adapter_lr,
        Stage::Joint => match group {
            ParamGroup::AgnosticPrompt(_) | ParamGroup::TaskPrompt { .. } => cfg.prompt_lr,
            _ => cfg.adapter_lr,
        },
    }
}

fn run_stage<R: Rng + ?Sized>(
    model: &mut DpatModel,
    data: &[PreparedClip],
    classes: &[usize],
    task: usize,
    stage: Stage,
    epochs: usize,
    cfg: &RunConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let groups = trainable_params(stage, task, &model.ablation);
    debug_assert!(!groups.contains(&ParamGroup::Backbone));
    let mut opt = Adam::default();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut sum = LossParts::default();
        let mut lr_factor = 1.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedClip> = chunk.iter().map(|&i| &data[i]).collect();
            let (parts, grads) = batch_loss_and_grads(
                model,
                &batch,
                task,
                stage,
                classes,
                cfg.lambda,
                cfg.mode.match_kind(),
                &groups,
            )?;
            lr_factor = if cfg.cosine_schedule {
                cosine_lr(step, total_steps, 1.0)
            } else {
                1.0
            };
            opt.begin_step();
            for (key, grad) in &grads {
                let group = key.group();
                if !groups.contains(&group) {
                    continue;
                }
                let lr = group_lr(group, stage, cfg) * lr_factor;
                let param = model
                    .param_mut(*key)
                    .ok_or_else(|| DpatError::Config(format!("missing parameter {key}")))?;
                opt.update(*key, param, grad, lr);
            }
            let w = batch.len() as f64;
            sum.total += parts.total * w;
            sum.cross_entropy += parts.cross_entropy * w;
            sum.matching += parts.matching * w;
            step += 1;
        }
        let n = data.len() as f64;
        let base = match stage {
            Stage::Adapter => cfg.adapter_lr,
            _ => cfg.prompt_lr,
        };
        observer.on_epoch(&EpochRecord {
            task,
            stage,
            epoch: epoch + 1,
            lr: base * lr_factor,
            loss: sum.total / n,
            cross_entropy: sum.cross_entropy / n,
            matching: sum.matching / n,
        });
    }
    observer.on_stage_end(task, stage, model);
    Ok(())
}

/// Trains one new task whose samples carry labels in `classes`. Grows the
/// head and allocates the task's prompts and key, then runs the prompt
/// stage followed by the adapter stage (or a single joint phase of twice
/// the epochs). Returns the new task id.
pub fn train_task<R: Rng + ?Sized>(
    model: &mut DpatModel,
    data: &[PreparedClip],
    classes: &[usize],
    cfg: &RunConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<usize> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DpatError::Data("task has no training samples".into()));
    }
    if let Some(c) = data.iter().find(|c| !classes.contains(&c.label)) {
        return Err(DpatError::Data(format!(
            "sample label {} is not in the task's class set",
            c.label
        )));
    }
    let task = model.begin_task(classes, rng)?;
    match cfg.mode {
        TrainMode::Dpat | TrainMode::DualpromptLoss => {
            run_stage(model, data, classes, task, Stage::Prompt, cfg.epochs, cfg, rng, observer)?;
            run_stage(model, data, classes, task, Stage::Adapter, cfg.epochs, cfg, rng, observer)?;
        }
        TrainMode::Joint => {
            run_stage(model, data, classes, task, Stage::Joint, 2 * cfg.epochs, cfg, rng, observer)?;
        }
    }
    Ok(task)
}

/// Where the task-specific prompt comes from at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// `argmin_t γ(q(x), k_t)`.
    Matched,
    /// Forced task id, bypassing the key bank.
    Oracle(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub class: usize,
    pub task: usize,
}

/// Selects a task from the query, runs the model with that task's prompts
/// over every seen class and returns the arg-max class with the task used.
pub fn evaluate(clip: &PreparedClip, model: &DpatModel, selection: Selection) -> Result<Prediction> {
    if model.num_tasks() == 0 {
        return Err(DpatError::Selection("no task has been trained".into()));
    }
    let task = match selection {
        Selection::Matched => model.keys.select(&clip.query)?,
        Selection::Oracle(t) => t,
    };
    let logits = forward_model(model, &clip.tokens, task, None)?;
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(Prediction {
        class: model.head.classes()[best],
        task,
    })
}
