//! Dual prompts (task-agnostic and task-specific), the task key bank and
//! query/key matching.

pub mod matching;
pub mod query;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpatError, Result};
use crate::model::config::Ablation;
use crate::model::params::{ParamKey, Role};
use crate::tensor::Tensor;

pub use matching::{cosine_distance, dualprompt_match_loss, match_loss, select_task, MatchLossKind};
pub use query::query_fn;

/// Where prompts sit in the backbone and how long they are.
///
/// Lengths count prefix positions: a prompt of length `L` is stored as a
/// `(2L, D)` array whose first `L` rows are prepended to the attention keys
/// and last `L` rows to the values. Layer ranges are 1-based and inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPlan {
    pub agnostic_len: usize,
    pub specific_len: usize,
    pub agnostic_layers: [usize; 2],
    pub specific_layers: [usize; 2],
}

impl Default for PromptPlan {
    fn default() -> Self {
        Self::reference()
    }
}

impl PromptPlan {
    /// g-prompts of length 20 in blocks 1–2, e-prompts of length 5 in blocks 3–5.
    pub fn reference() -> Self {
        Self {
            agnostic_len: 20,
            specific_len: 5,
            agnostic_layers: [1, 2],
            specific_layers: [3, 5],
        }
    }

    pub fn desk() -> Self {
        Self::reference()
    }

    pub fn is_agnostic_layer(&self, layer: usize) -> bool {
        (self.agnostic_layers[0]..=self.agnostic_layers[1]).contains(&layer)
    }

    pub fn is_specific_layer(&self, layer: usize) -> bool {
        (self.specific_layers[0]..=self.specific_layers[1]).contains(&layer)
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        let [ga, gb] = self.agnostic_layers;
        let [ea, eb] = self.specific_layers;
        if ga == 0 || ea == 0 || ga > gb || ea > eb {
            return Err(DpatError::Config(format!(
                "prompt layer ranges must be 1-based and ordered: {:?}, {:?}",
                self.agnostic_layers, self.specific_layers
            )));
        }
        if gb > blocks || eb > blocks {
            return Err(DpatError::Config(format!(
                "prompt layers exceed the {blocks} available blocks"
            )));
        }
        if ga <= eb && ea <= gb {
            return Err(DpatError::Config(
                "task-agnostic and task-specific layer ranges overlap".into(),
            ));
        }
        if self.agnostic_len == 0 || self.specific_len == 0 {
            return Err(DpatError::Config("prompt lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Temporal and spatial prompt of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RolePair {
    pub temporal: Tensor,
    pub spatial: Tensor,
}

impl RolePair {
    pub fn get(&self, role: Role) -> &Tensor {
        match role {
            Role::Temporal => &self.temporal,
            Role::Spatial => &self.spatial,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut Tensor {
        match role {
            Role::Temporal => &mut self.temporal,
            Role::Spatial => &mut self.spatial,
        }
    }
}

/// Prompts resolved for one block.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrompts<'a> {
    pub temporal: (ParamKey, &'a Tensor),
    pub spatial: (ParamKey, &'a Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    plan: PromptPlan,
    dim: usize,
    agnostic: BTreeMap<usize, RolePair>,
    specific: Vec<BTreeMap<usize, RolePair>>,
}

fn init_prompt<R: Rng + ?Sized>(len: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[2 * len, dim], -1.0, 1.0, rng)
}

impl PromptSet {
    /// Creates the shared g-prompts; task prompts are added per task.
    pub fn new<R: Rng + ?Sized>(plan: PromptPlan, dim: usize, rng: &mut R) -> Self {
        let agnostic = (plan.agnostic_layers[0]..=plan.agnostic_layers[1])
            .map(|l| {
                let temporal = init_prompt(plan.agnostic_len, dim, rng);
                let spatial = init_prompt(plan.agnostic_len, dim, rng);
                (l, RolePair { temporal, spatial })
            })
            .collect();
        Self {
            plan,
            dim,
            agnostic,
            specific: Vec::new(),
        }
    }

    pub fn plan(&self) -> &PromptPlan {
        &self.plan
    }

    pub fn num_tasks(&self) -> usize {
        self.specific.len()
    }

    /// Adds fresh e-prompts for a new task and returns its 1-based id.
    pub fn add_task<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let layers = (self.plan.specific_layers[0]..=self.plan.specific_layers[1])
            .map(|l| {
                let temporal = init_prompt(self.plan.specific_len, self.dim, rng);
                let spatial = init_prompt(self.plan.specific_len, self.dim, rng);
                (l, RolePair { temporal, spatial })
            })
            .collect();
        self.specific.push(layers);
        self.specific.len()
    }

    /// Prompts attached to `layer` when running with task `task`'s
    /// e-prompts: g-prompts in the agnostic range, `e_task` in the specific
    /// range, nothing elsewhere.
    pub fn assemble_prompts(
        &self,
        layer: usize,
        task: usize,
        ablation: &Ablation,
    ) -> Result<Option<LayerPrompts<'_>>> {
        if task == 0 || task > self.specific.len() {
            return Err(DpatError::Selection(format!(
                "unknown task {task}; {} tasks have prompts",
                self.specific.len()
            )));
        }
        if self.plan.is_agnostic_layer(layer) && ablation.agnostic_prompts_active() {
            let p = &self.agnostic[&layer];
            return Ok(Some(LayerPrompts {
                temporal: (
                    ParamKey::AgnosticPrompt {
                        layer,
                        role: Role::Temporal,
                    },
                    &p.temporal,
                ),
                spatial: (
                    ParamKey::AgnosticPrompt {
                        layer,
                        role: Role::Spatial,
                    },
                    &p.spatial,
                ),
            }));
        }
        if self.plan.is_specific_layer(layer) && ablation.task_prompts_active() {
            let p = &self.specific[task - 1][&layer];
            return Ok(Some(LayerPrompts {
                temporal: (
                    ParamKey::TaskPrompt {
                        task,
                        layer,
                        role: Role::Temporal,
                    },
                    &p.temporal,
                ),
                spatial: (
                    ParamKey::TaskPrompt {
                        task,
                        layer,
                        role: Role::Spatial,
                    },
                    &p.spatial,
                ),
            }));
        }
        Ok(None)
    }

    pub(crate) fn get(&self, key: ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::AgnosticPrompt { layer, role } => self.agnostic.get(&layer).map(|p| p.get(role)),
            ParamKey::TaskPrompt { task, layer, role } => self
                .specific
                .get(task.checked_sub(1)?)
                .and_then(|m| m.get(&layer))
                .map(|p| p.get(role)),
            _ => None,
        }
    }

    pub(crate) fn get_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::AgnosticPrompt { layer, role } => {
                self.agnostic.get_mut(&layer).map(|p| p.get_mut(role))
            }
            ParamKey::TaskPrompt { task, layer, role } => self
                .specific
                .get_mut(task.checked_sub(1)?)
                .and_then(|m| m.get_mut(&layer))
                .map(|p| p.get_mut(role)),
            _ => None,
        }
    }

    pub(crate) fn keys(&self) -> Vec<ParamKey> {
        let mut out = Vec::new();
        for &layer in self.agnostic.keys() {
            for role in [Role::Temporal, Role::Spatial] {
                out.push(ParamKey::AgnosticPrompt { layer, role });
            }
        }
        for (t, layers) in self.specific.iter().enumerate() {
            for &layer in layers.keys() {
                for role in [Role::Temporal, Role::Spatial] {
                    out.push(ParamKey::TaskPrompt {
                        task: t + 1,
                        layer,
                        role,
                    });
                }
            }
        }
        out
    }
}

/// One learnable key per task plus the matching temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskKeyBank {
    keys: Vec<Tensor>,
    dim: usize,
    tau: f64,
}

impl TaskKeyBank {
    pub fn new(dim: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(DpatError::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self {
            keys: Vec::new(),
            dim,
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, task: usize) -> Option<&Tensor> {
        self.keys.get(task.checked_sub(1)?)
    }

    pub(crate) fn key_mut(&mut self, task: usize) -> Option<&mut Tensor> {
        self.keys.get_mut(task.checked_sub(1)?)
    }

    pub fn keys(&self) -> &[Tensor] {
        &self.keys
    }

    /// Appends a unit-norm random key and returns its 1-based task id.
    pub fn add_key<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let mut k = Tensor::randn(&[self.dim], 1.0, rng);
        let n = k.norm();
        k.scale_assign(1.0 / n);
        self.keys.push(k);
        self.keys.len()
    }

    pub(crate) fn push(&mut self, key: Tensor) {
        self.keys.push(key);
    }

    pub fn select(&self, query: &[f64]) -> Result<usize> {
        let refs: Vec<&[f64]> = self.keys.iter().map(|k| k.data()).collect();
        select_task(query, &refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_with_tasks(n: usize) -> PromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = PromptSet::new(PromptPlan::reference(), 8, &mut rng);
        for _ in 0..n {
            set.add_task(&mut rng);
        }
        set
    }

    #[test]
    fn reference_plan_resolution() {
        let set = set_with_tasks(3);
        let none = Ablation::default();
        let p = set.assemble_prompts(1, 1, &none).unwrap().unwrap();
        assert!(matches!(p.temporal.0, ParamKey::AgnosticPrompt { layer: 1, .. }));
        assert_eq!(p.temporal.1.shape(), &[40, 8]);
        let p = set.assemble_prompts(4, 3, &none).unwrap().unwrap();
        assert_eq!(
            p.spatial.0,
            ParamKey::TaskPrompt {
                task: 3,
                layer: 4,
                role: Role::Spatial
            }
        );
        assert_eq!(p.spatial.1.shape(), &[10, 8]);
        assert!(set.assemble_prompts(6, 1, &none).unwrap().is_none());
    }

    #[test]
    fn unknown_task_is_a_selection_error() {
        let set = set_with_tasks(2);
        let r = set.assemble_prompts(4, 3, &Ablation::default());
        assert!(matches!(r, Err(DpatError::Selection(_))));
    }

    #[test]
    fn ablations_remove_prompts() {
        let set = set_with_tasks(1);
        let no_g = Ablation {
            agnostic_prefix: true,
            ..Ablation::default()
        };
        assert!(set.assemble_prompts(1, 1, &no_g).unwrap().is_none());
        assert!(set.assemble_prompts(3, 1, &no_g).unwrap().is_some());
        let none = Ablation {
            all_prefixes: true,
            ..Ablation::default()
        };
        assert!(set.assemble_prompts(3, 1, &none).unwrap().is_none());
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let mut plan = PromptPlan::reference();
        plan.specific_layers = [2, 4];
        assert!(plan.validate(6).is_err());
        plan.specific_layers = [3, 7];
        assert!(plan.validate(6).is_err());
    }

    #[test]
    fn new_keys_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = TaskKeyBank::new(16, 0.1).unwrap();
        assert_eq!(bank.add_key(&mut rng), 1);
        assert!((bank.key(1).unwrap().norm() - 1.0).abs() < 1e-12);
        assert!(TaskKeyBank::new(16, 0.0).is_err());
    }
}
