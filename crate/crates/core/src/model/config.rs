use serde::{Deserialize, Serialize};

use crate::error::{DpatError, Result};
use crate::model::pretrain::PretrainConfig;
use crate::prompt::PromptPlan;

/// Optional positional signal along the frame axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalPosition {
    #[default]
    None,
    /// Fixed sine/cosine table of shape `(T, D)`, frozen with the backbone.
    Sinusoidal,
}

/// Backbone geometry and the adapter/prompt layout attached to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Keep the frozen feed-forward sublayer after the spatial pass.
    pub feed_forward: bool,
    pub temporal_position: TemporalPosition,
    pub adapter_ratio: f64,
    /// Std of the adapter up-projection at creation; zero gives an
    /// exactly vanishing adapter.
    pub adapter_up_init_std: f64,
    pub layer_norm_eps: f64,
    /// Seed of the frozen backbone weights, independent of the run seed.
    pub backbone_seed: u64,
    pub pretrain: PretrainConfig,
    pub prompts: PromptPlan,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small geometry that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 32,
            heads: 4,
            blocks: 6,
            mlp_hidden: 64,
            feed_forward: true,
            temporal_position: TemporalPosition::Sinusoidal,
            adapter_ratio: 0.25,
            adapter_up_init_std: 0.0,
            layer_norm_eps: 1e-6,
            backbone_seed: 0,
            pretrain: PretrainConfig::desk(),
            prompts: PromptPlan::desk(),
        }
    }

    /// ViT-B/16 geometry on 16-frame 224×224 clips.
    pub fn paper_geometry() -> Self {
        Self {
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            dim: 768,
            heads: 12,
            blocks: 12,
            mlp_hidden: 3072,
            feed_forward: true,
            temporal_position: TemporalPosition::None,
            adapter_ratio: 0.25,
            adapter_up_init_std: 0.0,
            layer_norm_eps: 1e-6,
            backbone_seed: 0,
            pretrain: PretrainConfig::disabled(),
            prompts: PromptPlan::reference(),
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Tokens per frame including the class token.
    pub fn tokens(&self) -> usize {
        self.patches_per_frame() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `round(ratio · D)`.
    pub fn bottleneck(&self) -> usize {
        (self.adapter_ratio * self.dim as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DpatError::Config(m));
        if self.frames == 0 || self.channels == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return fail("frames, channels, blocks and mlp_hidden must be positive".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "{}x{} frames are not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.bottleneck() < 1 {
            return fail(format!(
                "adapter ratio {} gives an empty bottleneck for dim {}",
                self.adapter_ratio, self.dim
            ));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.adapter_up_init_std >= 0.0) {
            return fail("layer_norm_eps must be positive and adapter_up_init_std non-negative".into());
        }
        self.prompts.validate(self.blocks)
    }
}

/// Components switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Adapter-T replaced by the identity and never trained.
    pub temporal_adapter: bool,
    /// Both adapters replaced by the identity and never trained.
    pub all_adapters: bool,
    /// No task-agnostic prompts.
    pub agnostic_prefix: bool,
    /// No prompts at all.
    pub all_prefixes: bool,
}

impl Ablation {
    pub fn temporal_adapter_active(&self) -> bool {
        !(self.temporal_adapter || self.all_adapters)
    }

    pub fn spatial_adapter_active(&self) -> bool {
        !self.all_adapters
    }

    pub fn agnostic_prompts_active(&self) -> bool {
        !(self.agnostic_prefix || self.all_prefixes)
    }

    pub fn task_prompts_active(&self) -> bool {
        !self.all_prefixes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_bottleneck_width() {
        let mut c = ModelConfig::desk();
        c.dim = 64;
        c.heads = 4;
        assert_eq!(c.bottleneck(), 16);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper_geometry().validate().unwrap();
        assert_eq!(ModelConfig::paper_geometry().tokens(), 197);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let mut c = ModelConfig::desk();
        c.patch = 5;
        assert!(matches!(c.validate(), Err(DpatError::Config(_))));
    }
}
