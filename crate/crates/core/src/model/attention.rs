//! Frozen multi-head self-attention with optional key/value prefixes.

use crate::autograd::{Tape, Var};
use crate::error::{DpatError, Result};
use crate::tensor::Tensor;

/// Query/key/value/output projections, each `(D, D)` with a `(D)` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Attention weights registered on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

impl AttentionVars {
    pub(crate) fn register(tape: &mut Tape, w: &AttentionWeights) -> Self {
        Self::register_with(tape, w, &mut |tape, t| tape.constant(t.clone()))
    }

    /// Registers the eight tensors in the order wq, bq, wk, bk, wv, bv, wo, bo.
    pub(crate) fn register_with(tape: &mut Tape, w: &AttentionWeights, leaf: &mut dyn FnMut(&mut Tape, &Tensor) -> Var) -> Self {
        Self {
            wq: leaf(tape, &w.wq),
            bq: leaf(tape, &w.bq),
            wk: leaf(tape, &w.wk),
            bk: leaf(tape, &w.bk),
            wv: leaf(tape, &w.wv),
            bv: leaf(tape, &w.bv),
            wo: leaf(tape, &w.wo),
            bo: leaf(tape, &w.bo),
        }
    }
}

/// Splits a `(L_p, D)` prompt node into its key and value halves.
pub(crate) fn split_prompt(tape: &mut Tape, prompt: Var) -> Result<(Var, Var)> {
    let rows = tape.value(prompt).rows();
    if rows % 2 != 0 {
        return Err(DpatError::InvalidPrompt(format!(
            "prompt length {rows} is odd and cannot be split into key/value halves"
        )));
    }
    let half = rows / 2;
    let k = tape.slice_rows(prompt, 0, half);
    let v = tape.slice_rows(prompt, half, half);
    Ok((k, v))
}

/// Prefix-tuned attention on a tape over consecutive sequences of
/// `seq_len` rows. The prompt halves are prepended to the projected keys
/// and values, so every query attends over `L_p/2 + seq_len` positions.
pub(crate) fn prefix_msa_on_tape(
    tape: &mut Tape,
    h: Var,
    prompt: Option<Var>,
    w: &AttentionVars,
    seq_len: usize,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(h).cols();
    let prefix = match prompt {
        Some(p) => {
            if tape.value(p).cols() != d {
                return Err(DpatError::InvalidPrompt(format!(
                    "prompt width {} does not match model width {d}",
                    tape.value(p).cols()
                )));
            }
            if tape.value(p).rows() == 0 {
                None
            } else {
                Some(split_prompt(tape, p)?)
            }
        }
        None => None,
    };
    let q = tape.matmul(h, w.wq);
    let q = tape.add_bias(q, w.bq);
    let k = tape.matmul(h, w.wk);
    let k = tape.add_bias(k, w.bk);
    let v = tape.matmul(h, w.wv);
    let v = tape.add_bias(v, w.bv);
    let o = tape.attention(q, k, v, prefix, seq_len, heads)?;
    let o = tape.matmul(o, w.wo);
    Ok(tape.add_bias(o, w.bo))
}

/// Prefix attention over one sequence `h: (L, D)`. `prompt`, when given, is
/// an `(L_p, D)` array with `L_p` even; an empty prompt reduces to plain
/// multi-head attention.
pub fn prefix_msa(
    h: &Tensor,
    prompt: Option<&Tensor>,
    attn: &AttentionWeights,
    heads: usize,
) -> Result<Tensor> {
    if h.shape().len() != 2 {
        return Err(DpatError::DimensionMismatch(format!(
            "expected (L, D) input, got {:?}",
            h.shape()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let pv = prompt.map(|p| tape.constant(p.clone()));
    let w = AttentionVars::register(&mut tape, attn);
    let out = prefix_msa_on_tape(&mut tape, hv, pv, &w, h.rows(), heads)?;
    Ok(tape.value(out).clone())
}

/// Plain multi-head self-attention over one `(L, D)` sequence.
pub fn standard_attention(h: &Tensor, attn: &AttentionWeights, heads: usize) -> Result<Tensor> {
    prefix_msa(h, None, attn, heads)
}
