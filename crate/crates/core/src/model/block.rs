//! The adapted block: a temporal pass over the frame axis followed by a
//! spatial pass over the token axis, both through the block's single frozen
//! attention, then the frozen feed-forward sublayer.

use crate::autograd::{Tape, Var};
use crate::error::{DpatError, Result};
use crate::model::adapter::{AdapterParams, AdapterVars};
use crate::model::attention::{prefix_msa_on_tape, AttentionVars};
use crate::model::backbone::{BackboneBlock, LayerNormParams};
use crate::model::clip::{frame_major_index, token_major_index, TokenTensor};
use crate::model::params::Role;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNormVars {
    gamma: Var,
    beta: Var,
}

impl LayerNormVars {
    pub(crate) fn register(tape: &mut Tape, p: &LayerNormParams) -> Self {
        Self::register_with(tape, p, &mut |tape, t| tape.constant(t.clone()))
    }

    pub(crate) fn register_with(tape: &mut Tape, p: &LayerNormParams, leaf: &mut dyn FnMut(&mut Tape, &Tensor) -> Var) -> Self {
        Self {
            gamma: leaf(tape, &p.gamma),
            beta: leaf(tape, &p.beta),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Var {
        tape.layer_norm(x, self.gamma, self.beta, eps)
    }
}

/// A frozen block registered on a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    ln1: LayerNormVars,
    attn: AttentionVars,
    ln2: LayerNormVars,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockVars {
    pub(crate) fn register(tape: &mut Tape, b: &BackboneBlock) -> Self {
        Self::register_with(tape, b, &mut |tape, t| tape.constant(t.clone()))
    }

    /// Registers the block's tensors through `leaf`, in the order of
    /// `BackboneParams::named_tensors`.
    pub(crate) fn register_with(tape: &mut Tape, b: &BackboneBlock, leaf: &mut dyn FnMut(&mut Tape, &Tensor) -> Var) -> Self {
        let ln1 = LayerNormVars::register_with(tape, &b.ln1, leaf);
        let attn = AttentionVars::register_with(tape, &b.attn, leaf);
        let ln2 = LayerNormVars::register_with(tape, &b.ln2, leaf);
        Self {
            ln1,
            attn,
            ln2,
            w1: leaf(tape, &b.ffn.w1),
            b1: leaf(tape, &b.ffn.b1),
            w2: leaf(tape, &b.ffn.w2),
            b2: leaf(tape, &b.ffn.b2),
        }
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Var {
        let h = self.ln2.apply(tape, x, eps);
        let h = tape.matmul(h, self.w1);
        let h = tape.add_bias(h, self.b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.w2);
        let h = tape.add_bias(h, self.b2);
        tape.add(x, h)
    }
}

/// What sits after the attention output of a pass.
#[derive(Clone, Copy, Debug)]
pub(crate) enum AdapterPath {
    Adapter(AdapterVars),
    /// Adapter removed; the attention output joins the residual directly.
    Identity,
}

impl AdapterPath {
    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            AdapterPath::Adapter(a) => a.apply(tape, x),
            AdapterPath::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockSettings {
    pub frames: usize,
    pub tokens: usize,
    pub heads: usize,
    pub eps: f64,
    pub feed_forward: bool,
}

/// `x` is the `(T·(N+1), D)` frame-major token matrix.
pub(crate) fn dpat_block_on_tape(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    prompts: (Option<Var>, Option<Var>),
    adapters: (AdapterPath, AdapterPath),
    s: BlockSettings,
) -> Result<Var> {
    // Temporal pass: (T, N+1, D) -> (N+1, T, D), attend over frames.
    let xt = tape.gather_rows(x, token_major_index(s.frames, s.tokens));
    let a = block.ln1.apply(tape, xt, s.eps);
    let a = prefix_msa_on_tape(tape, a, prompts.0, &block.attn, s.frames, s.heads)?;
    let a = adapters.0.apply(tape, a);
    let back = tape.gather_rows(a, frame_major_index(s.frames, s.tokens));
    let h_t = tape.add(x, back);

    // Spatial pass over the N+1 tokens of each frame.
    let a = block.ln1.apply(tape, h_t, s.eps);
    let a = prefix_msa_on_tape(tape, a, prompts.1, &block.attn, s.tokens, s.heads)?;
    let a = adapters.1.apply(tape, a);
    let h_s = tape.add(h_t, a);

    Ok(if s.feed_forward {
        block.feed_forward(tape, h_s, s.eps)
    } else {
        h_s
    })
}

/// Unmodified image-model block applied to each frame independently.
pub(crate) fn plain_block_on_tape(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    s: BlockSettings,
) -> Result<Var> {
    let a = block.ln1.apply(tape, x, s.eps);
    let a = prefix_msa_on_tape(tape, a, None, &block.attn, s.tokens, s.heads)?;
    let h = tape.add(x, a);
    Ok(if s.feed_forward {
        block.feed_forward(tape, h, s.eps)
    } else {
        h
    })
}

/// Adapter choice for the standalone [`dpat_block`].
#[derive(Clone, Copy, Debug)]
pub enum AdapterMode<'a> {
    Adapter(&'a AdapterParams),
    Identity,
}

/// Runs one adapted block on a token tensor. `prompts` are the optional
/// temporal and spatial prompts, each `(L_p, D)`.
pub fn dpat_block(
    h: &TokenTensor,
    prompts: (Option<&Tensor>, Option<&Tensor>),
    adapters: (AdapterMode<'_>, AdapterMode<'_>),
    block: &BackboneBlock,
    heads: usize,
    feed_forward: bool,
) -> Result<TokenTensor> {
    let (frames, tokens, dim) = h.shape();
    for p in [prompts.0, prompts.1].into_iter().flatten() {
        if p.cols() != dim {
            return Err(DpatError::InvalidPrompt(format!(
                "prompt width {} does not match model width {dim}",
                p.cols()
            )));
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(h.as_rows());
    let vars = BlockVars::register(&mut tape, block);
    let pt = prompts.0.map(|p| tape.constant(p.clone()));
    let ps = prompts.1.map(|p| tape.constant(p.clone()));
    let mut path = |mode: AdapterMode<'_>, role| match mode {
        AdapterMode::Adapter(a) => {
            AdapterPath::Adapter(AdapterVars::register(&mut tape, a, 1, role, &|_| false))
        }
        AdapterMode::Identity => AdapterPath::Identity,
    };
    let at = path(adapters.0, Role::Temporal);
    let as_ = path(adapters.1, Role::Spatial);
    let out = dpat_block_on_tape(
        &mut tape,
        x,
        &vars,
        (pt, ps),
        (at, as_),
        BlockSettings {
            frames,
            tokens,
            heads,
            eps: 1e-6,
            feed_forward,
        },
    )?;
    TokenTensor::from_tensor(frames, tokens, tape.value(out).clone())
}
