//! The frozen transformer backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DpatError, Result};
use crate::model::attention::AttentionWeights;
use crate::model::clip::{TokenTensor, VideoClip};
use crate::model::config::{ModelConfig, TemporalPosition};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Frozen weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionWeights,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
}

/// All frozen backbone weights. Nothing here is ever updated by training.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub patch: usize,
    pub heads: usize,
    /// `(P·P·C, D)`.
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    /// `(N+1, D)`.
    pub pos_embed: Tensor,
    /// `(T, D)` when a temporal position table is enabled.
    pub temporal_pos: Option<Tensor>,
    pub blocks: Vec<BackboneBlock>,
    pub final_ln: LayerNormParams,
}

impl BackboneParams {
    /// Frozen weights for `config`: the seeded random initialization,
    /// pretrained on static frames unless `config.pretrain.steps` is 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        crate::model::pretrain::pretrained_backbone(config)
    }

    /// Seeded random initialization from `config.backbone_seed`.
    pub fn random(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let d = config.dim;
        let pd = config.patch_dim();
        let lin = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let patch_weight = lin(pd, d, &mut rng);
        let cls_token = Tensor::randn(&[d], 1.0, &mut rng);
        let pos_embed = Tensor::randn(&[config.tokens(), d], 0.5, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| BackboneBlock {
                ln1: LayerNormParams::identity(d),
                attn: AttentionWeights {
                    wq: lin(d, d, &mut rng),
                    bq: Tensor::zeros(&[d]),
                    wk: lin(d, d, &mut rng),
                    bk: Tensor::zeros(&[d]),
                    wv: lin(d, d, &mut rng),
                    bv: Tensor::zeros(&[d]),
                    wo: lin(d, d, &mut rng),
                    bo: Tensor::zeros(&[d]),
                },
                ln2: LayerNormParams::identity(d),
                ffn: FeedForward {
                    w1: lin(d, config.mlp_hidden, &mut rng),
                    b1: Tensor::zeros(&[config.mlp_hidden]),
                    w2: lin(config.mlp_hidden, d, &mut rng),
                    b2: Tensor::zeros(&[d]),
                },
            })
            .collect();
        let temporal_pos = match config.temporal_position {
            TemporalPosition::None => None,
            TemporalPosition::Sinusoidal => Some(sinusoidal_table(config.frames, d)),
        };
        Ok(Self {
            patch: config.patch,
            heads: config.heads,
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            temporal_pos,
            blocks,
            final_ln: LayerNormParams::identity(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.cls_token.len()
    }

    /// Every frozen tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("backbone/patch_w".into(), &self.patch_weight),
            ("backbone/patch_b".into(), &self.patch_bias),
            ("backbone/cls".into(), &self.cls_token),
            ("backbone/pos".into(), &self.pos_embed),
            ("backbone/final_ln/g".into(), &self.final_ln.gamma),
            ("backbone/final_ln/b".into(), &self.final_ln.beta),
        ];
        if let Some(tp) = &self.temporal_pos {
            out.push(("backbone/temporal_pos".into(), tp));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            let parts: [(&str, &Tensor); 16] = [
                ("ln1_g", &b.ln1.gamma),
                ("ln1_b", &b.ln1.beta),
                ("wq", &b.attn.wq),
                ("bq", &b.attn.bq),
                ("wk", &b.attn.wk),
                ("bk", &b.attn.bk),
                ("wv", &b.attn.wv),
                ("bv", &b.attn.bv),
                ("wo", &b.attn.wo),
                ("bo", &b.attn.bo),
                ("ln2_g", &b.ln2.gamma),
                ("ln2_b", &b.ln2.beta),
                ("ffn_w1", &b.ffn.w1),
                ("ffn_b1", &b.ffn.b1),
                ("ffn_w2", &b.ffn.w2),
                ("ffn_b2", &b.ffn.b2),
            ];
            for (name, t) in parts {
                out.push((format!("backbone/block/{l}/{name}"), t));
            }
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("backbone/patch_w".into(), &mut self.patch_weight),
            ("backbone/patch_b".into(), &mut self.patch_bias),
            ("backbone/cls".into(), &mut self.cls_token),
            ("backbone/pos".into(), &mut self.pos_embed),
            ("backbone/final_ln/g".into(), &mut self.final_ln.gamma),
            ("backbone/final_ln/b".into(), &mut self.final_ln.beta),
        ];
        if let Some(tp) = &mut self.temporal_pos {
            out.push(("backbone/temporal_pos".into(), tp));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let l = i + 1;
            let parts: [(&str, &mut Tensor); 16] = [
                ("ln1_g", &mut b.ln1.gamma),
                ("ln1_b", &mut b.ln1.beta),
                ("wq", &mut b.attn.wq),
                ("bq", &mut b.attn.bq),
                ("wk", &mut b.attn.wk),
                ("bk", &mut b.attn.bk),
                ("wv", &mut b.attn.wv),
                ("bv", &mut b.attn.bv),
                ("wo", &mut b.attn.wo),
                ("bo", &mut b.attn.bo),
                ("ln2_g", &mut b.ln2.gamma),
                ("ln2_b", &mut b.ln2.beta),
                ("ffn_w1", &mut b.ffn.w1),
                ("ffn_b1", &mut b.ffn.b1),
                ("ffn_w2", &mut b.ffn.w2),
                ("ffn_b2", &mut b.ffn.b2),
            ];
            for (name, t) in parts {
                out.push((format!("backbone/block/{l}/{name}"), t));
            }
        }
        out
    }
}

/// Standard sine/cosine position table of shape `(len, dim)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Splits every frame into non-overlapping patches, projects them with the
/// shared patch weights, prepends the class token and adds the positional
/// embedding (identically for every frame).
pub fn patch_embed(clip: &VideoClip, params: &BackboneParams) -> Result<TokenTensor> {
    let p = params.patch;
    let (t_len, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(DpatError::DimensionMismatch(format!(
            "{h}x{w} frames are not divisible by patch size {p}"
        )));
    }
    let pd = p * p * c;
    if params.patch_weight.rows() != pd {
        return Err(DpatError::DimensionMismatch(format!(
            "patch projection expects {} inputs, clip patches have {pd}",
            params.patch_weight.rows()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let tokens = n + 1;
    if params.pos_embed.rows() != tokens {
        return Err(DpatError::DimensionMismatch(format!(
            "positional embedding has {} rows for {tokens} tokens",
            params.pos_embed.rows()
        )));
    }
    if let Some(tp) = &params.temporal_pos {
        if tp.rows() != t_len {
            return Err(DpatError::DimensionMismatch(format!(
                "temporal position table has {} rows for {t_len} frames",
                tp.rows()
            )));
        }
    }
    let d = params.dim();

    let mut patches = vec![0.0; t_len * n * pd];
    for t in 0..t_len {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = (t * n + gy * gw + gx) * pd;
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            patches[row + k] = clip.pixel(t, gy * p + py, gx * p + px, ch);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let mut proj = vec![0.0; t_len * n * d];
    gemm(
        t_len * n,
        pd,
        d,
        &patches,
        false,
        params.patch_weight.data(),
        false,
        &mut proj,
        false,
    );

    let mut out = vec![0.0; t_len * tokens * d];
    for t in 0..t_len {
        for j in 0..tokens {
            let dst = &mut out[(t * tokens + j) * d..][..d];
            let pos = params.pos_embed.row(j);
            if j == 0 {
                for k in 0..d {
                    dst[k] = params.cls_token.data()[k] + pos[k];
                }
            } else {
                let src = &proj[(t * n + j - 1) * d..][..d];
                for k in 0..d {
                    dst[k] = src[k] + params.patch_bias.data()[k] + pos[k];
                }
            }
            if let Some(tp) = &params.temporal_pos {
                for (x, v) in dst.iter_mut().zip(tp.row(t)) {
                    *x += v;
                }
            }
        }
    }
    TokenTensor::new(t_len, tokens, d, out)
}
