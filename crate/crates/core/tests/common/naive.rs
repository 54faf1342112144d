//! Scalar-loop reference implementations used as test oracles. Nothing here
//! calls into the library's tensor or tape code.

use dpat::model::{AdapterParams, AttentionWeights, BackboneBlock, BackboneParams, DpatModel, VideoClip};
use dpat::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn linear(x: &Rows, w: &Tensor, b: &Tensor) -> Rows {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..dout)
                .map(|j| (0..din).map(|i| r[i] * w.data()[i * dout + j]).sum::<f64>() + b.data()[j])
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Rows, gamma: &Tensor, beta: &Tensor, eps: f64) -> Rows {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention over one sequence with raw key/value prefixes
/// taken from the two halves of `prompt`.
pub fn mha(h: &Rows, prompt: Option<&Rows>, w: &AttentionWeights, heads: usize) -> Rows {
    let q = linear(h, &w.wq, &w.bq);
    let mut k = Vec::new();
    let mut v = Vec::new();
    if let Some(p) = prompt {
        let half = p.len() / 2;
        k.extend(p[..half].iter().cloned());
        v.extend(p[half..].iter().cloned());
    }
    k.extend(linear(h, &w.wk, &w.bk));
    v.extend(linear(h, &w.wv, &w.bv));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; h.len()];
    for (i, qi) in q.iter().enumerate() {
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols {
                out[i][c] = e.iter().zip(&v).map(|(p, vj)| p / z * vj[c]).sum();
            }
        }
    }
    linear(&out, &w.wo, &w.bo)
}

pub fn adapter(x: &Rows, a: &AdapterParams) -> Rows {
    let h: Rows = linear(x, &a.down_weight, &a.down_bias)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &a.up_weight, &a.up_bias)
}

/// One adapted block on frame-major rows `(T·M, D)`.
pub fn block(
    x: &Rows,
    frames: usize,
    prompts: (Option<&Rows>, Option<&Rows>),
    adapters: (Option<&AdapterParams>, Option<&AdapterParams>),
    b: &BackboneBlock,
    heads: usize,
    feed_forward: bool,
    eps: f64,
) -> Rows {
    let m = x.len() / frames;
    let normed = layer_norm(x, &b.ln1.gamma, &b.ln1.beta, eps);
    let mut temporal = vec![Vec::new(); x.len()];
    for n in 0..m {
        let seq: Rows = (0..frames).map(|t| normed[t * m + n].clone()).collect();
        let mut a = mha(&seq, prompts.0, &b.attn, heads);
        if let Some(ad) = adapters.0 {
            a = adapter(&a, ad);
        }
        for t in 0..frames {
            temporal[t * m + n] = a[t].clone();
        }
    }
    let h_t = add(x, &temporal);
    let normed = layer_norm(&h_t, &b.ln1.gamma, &b.ln1.beta, eps);
    let mut spatial = Vec::new();
    for t in 0..frames {
        let seq = normed[t * m..(t + 1) * m].to_vec();
        let mut a = mha(&seq, prompts.1, &b.attn, heads);
        if let Some(ad) = adapters.1 {
            a = adapter(&a, ad);
        }
        spatial.extend(a);
    }
    let h_s = add(&h_t, &spatial);
    if !feed_forward {
        return h_s;
    }
    let f = layer_norm(&h_s, &b.ln2.gamma, &b.ln2.beta, eps);
    let f: Rows = linear(&f, &b.ffn.w1, &b.ffn.b1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&h_s, &linear(&f, &b.ffn.w2, &b.ffn.b2))
}

/// Patch embedding with class token, spatial and optional temporal
/// positions, frame-major.
pub fn embed(clip: &VideoClip, p: &BackboneParams) -> Rows {
    let s = p.patch;
    let (gh, gw) = (clip.height() / s, clip.width() / s);
    let d = p.patch_weight.cols();
    let mut out = Vec::new();
    for t in 0..clip.frames() {
        let mut tokens = vec![p.cls_token.data().to_vec()];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut flat = Vec::new();
                for y in 0..s {
                    for x in 0..s {
                        for c in 0..clip.channels() {
                            flat.push(clip.pixel(t, gy * s + y, gx * s + x, c));
                        }
                    }
                }
                tokens.push(linear(&vec![flat], &p.patch_weight, &p.patch_bias).remove(0));
            }
        }
        for (j, tok) in tokens.iter_mut().enumerate() {
            for k in 0..d {
                tok[k] += p.pos_embed.row(j)[k];
                if let Some(tp) = &p.temporal_pos {
                    tok[k] += tp.row(t)[k];
                }
            }
        }
        out.extend(tokens);
    }
    out
}

/// Logits of the whole model with task `task`'s prompts.
pub fn forward(model: &DpatModel, clip: &VideoClip, task: usize) -> Vec<f64> {
    let cfg = &model.config;
    let mut x = embed(clip, &model.backbone);
    for (i, b) in model.backbone.blocks.iter().enumerate() {
        let lp = model.prompts.assemble_prompts(i + 1, task, &model.ablation).unwrap();
        let (pt, ps) = match &lp {
            Some(lp) => (Some(rows(lp.temporal.1)), Some(rows(lp.spatial.1))),
            None => (None, None),
        };
        let ab = &model.ablation;
        let at = ab.temporal_adapter_active().then_some(&model.adapters[i].temporal);
        let as_ = ab.spatial_adapter_active().then_some(&model.adapters[i].spatial);
        x = block(&x, cfg.frames, (pt.as_ref(), ps.as_ref()), (at, as_), b, cfg.heads, cfg.feed_forward, cfg.layer_norm_eps);
    }
    let x = layer_norm(&x, &model.backbone.final_ln.gamma, &model.backbone.final_ln.beta, cfg.layer_norm_eps);
    let m = cfg.tokens();
    let d = cfg.dim;
    let pooled: Vec<f64> = (0..d)
        .map(|k| (0..cfg.frames).map(|t| x[t * m][k]).sum::<f64>() / cfg.frames as f64)
        .collect();
    let w = &model.head.weight;
    (0..w.rows())
        .map(|c| w.row(c).iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>() + model.head.bias.data()[c])
        .collect()
}
