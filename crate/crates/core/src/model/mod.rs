//! The adapted frozen backbone: patch embedding, prefix attention,
//! bottleneck adapters, the temporal-then-spatial block and the head.

pub mod adapter;
pub mod attention;
pub mod backbone;
pub mod block;
pub mod clip;
pub mod config;
pub mod head;
pub mod params;
pub mod pretrain;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{DpatError, Result};
use crate::prompt::{PromptSet, TaskKeyBank};
use crate::tensor::Tensor;

pub use adapter::{adapter_forward, AdapterParams, BlockAdapters};
pub use attention::{prefix_msa, standard_attention, AttentionWeights};
pub use backbone::{patch_embed, BackboneBlock, BackboneParams};
pub use block::{dpat_block, AdapterMode};
pub use clip::{TokenTensor, VideoClip};
pub use config::{Ablation, ModelConfig, TemporalPosition};
pub use head::ClassifierHead;
pub use params::{AdapterPart, ParamGroup, ParamKey, Role};
pub use pretrain::PretrainConfig;

use adapter::AdapterVars;
use block::{dpat_block_on_tape, plain_block_on_tape, AdapterPath, BlockSettings, BlockVars, LayerNormVars};

/// Complete model state for a continual run.
#[derive(Clone, Debug, PartialEq)]
pub struct DpatModel {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub backbone: BackboneParams,
    pub adapters: Vec<BlockAdapters>,
    pub prompts: PromptSet,
    pub keys: TaskKeyBank,
    pub head: ClassifierHead,
}

impl DpatModel {
    /// Frozen backbone from `config.backbone_seed`; adapters and
    /// task-agnostic prompts drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, ablation: Ablation, tau: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(&config)?;
        let bottleneck = config.bottleneck();
        let adapters = (0..config.blocks)
            .map(|_| -> Result<BlockAdapters> {
                Ok(BlockAdapters {
                    temporal: AdapterParams::init(config.dim, bottleneck, config.adapter_up_init_std, rng)?,
                    spatial: AdapterParams::init(config.dim, bottleneck, config.adapter_up_init_std, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let prompts = PromptSet::new(config.prompts.clone(), config.dim, rng);
        let keys = TaskKeyBank::new(config.dim, tau)?;
        let head = ClassifierHead::new(config.dim);
        Ok(Self {
            config,
            ablation,
            backbone,
            adapters,
            prompts,
            keys,
            head,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.keys.len()
    }

    /// Grows the head and allocates `e_t` and `k_t` for a new task.
    /// Returns the new 1-based task id.
    pub fn begin_task<R: Rng + ?Sized>(&mut self, classes: &[usize], rng: &mut R) -> Result<usize> {
        let task = self.num_tasks() + 1;
        self.head.grow(task, classes, rng)?;
        let p = self.prompts.add_task(rng);
        let k = self.keys.add_key(rng);
        debug_assert!(p == task && k == task);
        Ok(task)
    }

    pub fn embed(&self, clip: &VideoClip) -> Result<TokenTensor> {
        if clip.frames() != self.config.frames
            || clip.height() != self.config.height
            || clip.width() != self.config.width
            || clip.channels() != self.config.channels
        {
            return Err(DpatError::DimensionMismatch(format!(
                "clip is {}x{}x{}x{}, model expects {}x{}x{}x{}",
                clip.frames(),
                clip.height(),
                clip.width(),
                clip.channels(),
                self.config.frames,
                self.config.height,
                self.config.width,
                self.config.channels
            )));
        }
        patch_embed(clip, &self.backbone)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::AgnosticPrompt { .. } | ParamKey::TaskPrompt { .. } => self.prompts.get(key),
            ParamKey::Adapter { layer, role, part } => {
                self.adapters.get(layer.checked_sub(1)?).map(|a| a.get(role).part(part))
            }
            ParamKey::TaskKey(t) => self.keys.key(t),
            ParamKey::HeadWeight => Some(&self.head.weight),
            ParamKey::HeadBias => Some(&self.head.bias),
            ParamKey::Backbone(i) => self.backbone.named_tensors().get(i).map(|(_, t)| *t),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::AgnosticPrompt { .. } | ParamKey::TaskPrompt { .. } => self.prompts.get_mut(key),
            ParamKey::Adapter { layer, role, part } => self
                .adapters
                .get_mut(layer.checked_sub(1)?)
                .map(|a| a.get_mut(role).part_mut(part)),
            ParamKey::TaskKey(t) => self.keys.key_mut(t),
            ParamKey::HeadWeight => Some(&mut self.head.weight),
            ParamKey::HeadBias => Some(&mut self.head.bias),
            ParamKey::Backbone(i) => self.backbone.named_tensors_mut().into_iter().nth(i).map(|(_, t)| t),
        }
    }

    /// Every non-backbone tensor, in a fixed order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = self.prompts.keys();
        for layer in 1..=self.adapters.len() {
            for role in [Role::Temporal, Role::Spatial] {
                for part in AdapterPart::ALL {
                    keys.push(ParamKey::Adapter { layer, role, part });
                }
            }
        }
        keys.extend((1..=self.keys.len()).map(ParamKey::TaskKey));
        keys.push(ParamKey::HeadWeight);
        keys.push(ParamKey::HeadBias);
        keys
    }

    fn settings(&self, tokens: &TokenTensor) -> BlockSettings {
        BlockSettings {
            frames: tokens.frames(),
            tokens: tokens.tokens(),
            heads: self.config.heads,
            eps: self.config.layer_norm_eps,
            feed_forward: self.config.feed_forward,
        }
    }

    /// Records the adapted forward pass on `tape` and returns the `(1, C)`
    /// logit node. `prompt_task` picks the task-specific prompts; leaves in
    /// groups accepted by `trainable` receive gradients.
    pub(crate) fn logits_on_tape(
        &self,
        tape: &mut Tape,
        tokens: &TokenTensor,
        prompt_task: usize,
        trainable: &dyn Fn(ParamGroup) -> bool,
    ) -> Result<Var> {
        let x = self.blocks_on_tape(tape, tokens, prompt_task, trainable)?;
        let pooled = self.pool_on_tape(tape, x, tokens);
        let train_head = trainable(ParamGroup::Head);
        let w = tape.param(ParamKey::HeadWeight, &self.head.weight, train_head);
        let b = tape.param(ParamKey::HeadBias, &self.head.bias, train_head);
        let logits = tape.matmul_bt(pooled, w);
        Ok(tape.add_bias(logits, b))
    }

    /// Runs only the stacked blocks and returns the token matrix node.
    pub(crate) fn blocks_on_tape(
        &self,
        tape: &mut Tape,
        tokens: &TokenTensor,
        prompt_task: usize,
        trainable: &dyn Fn(ParamGroup) -> bool,
    ) -> Result<Var> {
        let settings = self.settings(tokens);
        let mut x = tape.constant(tokens.as_rows());
        for (i, frozen) in self.backbone.blocks.iter().enumerate() {
            let layer = i + 1;
            let vars = BlockVars::register(tape, frozen);
            let prompts = match self.prompts.assemble_prompts(layer, prompt_task, &self.ablation)? {
                Some(lp) => {
                    let t = tape.param(lp.temporal.0, lp.temporal.1, trainable(lp.temporal.0.group()));
                    let s = tape.param(lp.spatial.0, lp.spatial.1, trainable(lp.spatial.0.group()));
                    (Some(t), Some(s))
                }
                None => (None, None),
            };
            let path = |tape: &mut Tape, role: Role, active: bool| {
                if active {
                    AdapterPath::Adapter(AdapterVars::register(
                        tape,
                        self.adapters[i].get(role),
                        layer,
                        role,
                        trainable,
                    ))
                } else {
                    AdapterPath::Identity
                }
            };
            let at = path(tape, Role::Temporal, self.ablation.temporal_adapter_active());
            let as_ = path(tape, Role::Spatial, self.ablation.spatial_adapter_active());
            x = dpat_block_on_tape(tape, x, &vars, prompts, (at, as_), settings)?;
        }
        Ok(x)
    }

    /// Final norm, then the mean of the per-frame class tokens.
    fn pool_on_tape(&self, tape: &mut Tape, x: Var, tokens: &TokenTensor) -> Var {
        let ln = LayerNormVars::register(tape, &self.backbone.final_ln);
        let x = ln.apply(tape, x, self.config.layer_norm_eps);
        let cls: Vec<usize> = (0..tokens.frames()).map(|t| t * tokens.tokens()).collect();
        let cls = tape.gather_rows(x, cls);
        tape.mean_rows(cls)
    }

    /// Frame-mean class-token feature of the unmodified frozen image model
    /// (no temporal pass, no prompts, no adapters).
    pub fn plain_features(&self, tokens: &TokenTensor) -> Result<Vec<f64>> {
        let settings = self.settings(tokens);
        let mut tape = Tape::new();
        let mut x = tape.constant(tokens.as_rows());
        for frozen in &self.backbone.blocks {
            let vars = BlockVars::register(&mut tape, frozen);
            x = plain_block_on_tape(&mut tape, x, &vars, settings)?;
        }
        let pooled = self.pool_on_tape(&mut tape, x, tokens);
        Ok(tape.value(pooled).data().to_vec())
    }
}

/// Logits over the head's slots for a clip's token tensor, using task
/// `prompt_task`'s prompts. With `class_mask`, slots outside the given class
/// ids are set to `−∞`.
pub fn forward_model(
    model: &DpatModel,
    tokens: &TokenTensor,
    prompt_task: usize,
    class_mask: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let mask = class_mask.map(|m| model.head.mask_for(m)).transpose()?;
    let mut tape = Tape::new();
    let logits = model.logits_on_tape(&mut tape, tokens, prompt_task, &|_| false)?;
    let mut out = tape.value(logits).data().to_vec();
    if let Some(mask) = mask {
        for (v, active) in out.iter_mut().zip(mask) {
            if !active {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// Token tensor after all adapted blocks, before pooling.
pub fn forward_tokens(model: &DpatModel, tokens: &TokenTensor, prompt_task: usize) -> Result<TokenTensor> {
    let mut tape = Tape::new();
    let x = model.blocks_on_tape(&mut tape, tokens, prompt_task, &|_| false)?;
    TokenTensor::from_tensor(tokens.frames(), tokens.tokens(), tape.value(x).clone())
}
