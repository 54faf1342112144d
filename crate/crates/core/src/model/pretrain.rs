//! Image-level pretraining of the backbone on static sprite frames.
//!
//! The frozen backbone should behave like an image model that has already
//! learned spatial features but knows nothing about motion. Each step draws
//! fresh single frames of random shapes at random positions and trains the
//! whole image model (patch projection, class token, positional embedding,
//! blocks, final norm) to predict the shape and the coarse position cell from
//! the class token. The result is a pure function of the model config.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::data::sprites::{gen_clip, Motion, Shape, SpriteSpec, Start};
use crate::error::{DpatError, Result};
use crate::model::backbone::BackboneParams;
use crate::model::block::{plain_block_on_tape, BlockSettings, BlockVars, LayerNormVars};
use crate::model::config::ModelConfig;
use crate::model::params::ParamKey;
use crate::tensor::Tensor;
use crate::trainer::optim::{Adam, Optimizer};
use crate::trainer::schedule::cosine_lr;

/// Pretraining budget; `steps = 0` keeps the random initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Pixel noise of the pretraining frames.
    pub noise: f64,
    /// Side of the position grid whose cells are the position labels;
    /// 1 trains on shape alone.
    pub grid: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PretrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 900,
            batch_size: 32,
            lr: 2e-3,
            noise: 0.05,
            grid: 1,
        }
    }

    pub fn disabled() -> Self {
        Self {
            steps: 0,
            ..Self::desk()
        }
    }
}

const HEAD_W: ParamKey = ParamKey::HeadWeight;
const HEAD_B: ParamKey = ParamKey::HeadBias;

struct Sample {
    patches: Tensor,
    shape: usize,
    cell: usize,
}

fn draw_sample<R: Rng>(config: &ModelConfig, pre: &PretrainConfig, rng: &mut R) -> Result<Sample> {
    let (h, w) = (config.height, config.width);
    let max_size = (h.min(w) / 2).max(2);
    let size = rng.random_range((max_size / 2).max(1)..=max_size);
    let shape = rng.random_range(0..Shape::ALL.len());
    let y = rng.random_range(0..=h - size) as f64;
    let x = rng.random_range(0..=w - size) as f64;
    let spec = SpriteSpec {
        speed: 0.0,
        noise: pre.noise,
        size,
        color: None,
        start: Some(Start { along: x, across: y }),
        ..SpriteSpec::new(Shape::ALL[shape], Motion::Right)
    };
    let frame = gen_clip(&spec, 1, h, w, rng.random())?;
    let g = pre.grid;
    let cy = ((y + size as f64 / 2.0) / h as f64 * g as f64).min(g as f64 - 1.0) as usize;
    let cx = ((x + size as f64 / 2.0) / w as f64 * g as f64).min(g as f64 - 1.0) as usize;

    let p = config.patch;
    let (gh, gw) = (h / p, w / p);
    let pd = config.patch_dim();
    let mut patches = Tensor::zeros(&[gh * gw, pd]);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        row[k] = frame.pixel(0, gy * p + py, gx * p + px, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(Sample {
        patches,
        shape,
        cell: cy * g + cx,
    })
}

fn batch_loss(
    params: &BackboneParams,
    head: (&Tensor, &Tensor),
    config: &ModelConfig,
    batch: &[Sample],
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let index = Cell::new(0);
    let mut leaf = |tape: &mut Tape, t: &Tensor| -> Var {
        let v = tape.param(ParamKey::Backbone(index.get()), t, true);
        index.set(index.get() + 1);
        v
    };
    let pw = leaf(&mut tape, &params.patch_weight);
    let pb = leaf(&mut tape, &params.patch_bias);
    let cls = leaf(&mut tape, &params.cls_token);
    let pos = leaf(&mut tape, &params.pos_embed);
    let final_ln = LayerNormVars::register_with(&mut tape, &params.final_ln, &mut leaf);
    if params.temporal_pos.is_some() {
        // the frame-axis table is fixed, but keeps its slot in the numbering
        index.set(index.get() + 1);
    }
    let blocks: Vec<BlockVars> = params
        .blocks
        .iter()
        .map(|b| BlockVars::register_with(&mut tape, b, &mut leaf))
        .collect();

    // Each image becomes one frame of a pseudo-clip, so the spatial pass
    // attends within images only.
    let n = batch.len();
    let tokens = config.tokens();
    let patches_per = tokens - 1;
    let pd = config.patch_dim();
    let mut stacked = Vec::with_capacity(n * patches_per * pd);
    for s in batch {
        stacked.extend_from_slice(s.patches.data());
    }
    let patches = tape.constant(Tensor::from_vec(&[n * patches_per, pd], stacked)?);
    let x = tape.matmul(patches, pw);
    let x = tape.add_bias(x, pb);
    let x = tape.concat_rows(cls, x);
    let order: Vec<usize> = (0..n)
        .flat_map(|b| std::iter::once(0).chain((0..patches_per).map(move |p| 1 + b * patches_per + p)))
        .collect();
    let x = tape.gather_rows(x, order);
    let pos = tape.gather_rows(pos, (0..n).flat_map(|_| 0..tokens).collect());
    let mut x = tape.add(x, pos);
    let settings = BlockSettings {
        frames: n,
        tokens,
        heads: config.heads,
        eps: config.layer_norm_eps,
        feed_forward: config.feed_forward,
    };
    for b in &blocks {
        x = plain_block_on_tape(&mut tape, x, b, settings)?;
    }
    let x = final_ln.apply(&mut tape, x, config.layer_norm_eps);
    let feats = tape.gather_rows(x, (0..n).map(|b| b * tokens).collect());
    let hw = tape.param(HEAD_W, head.0, true);
    let hb = tape.param(HEAD_B, head.1, true);
    let logits = tape.matmul_bt(feats, hw);
    let logits = tape.add_bias(logits, hb);
    let shapes = Shape::ALL.len();
    let width = head.1.len();
    let shape_mask: Vec<bool> = (0..width).map(|i| i < shapes).collect();
    let cell_mask: Vec<bool> = (0..width).map(|i| i >= shapes).collect();
    let mut terms = Vec::with_capacity(2 * n);
    for (b, s) in batch.iter().enumerate() {
        let row = tape.slice_rows(logits, b, 1);
        terms.push((tape.cross_entropy(row, s.shape, &shape_mask)?, 1.0 / n as f64));
        terms.push((tape.cross_entropy(row, shapes + s.cell, &cell_mask)?, 1.0 / n as f64));
    }
    let loss = tape.weighted_sum(&terms);
    Ok((tape.value(loss).data()[0], tape.backward(loss)))
}

/// Trains `params` in place; returns the mean loss of the last 10% of steps.
pub fn pretrain_backbone(params: &mut BackboneParams, config: &ModelConfig) -> Result<f64> {
    let pre = &config.pretrain;
    if pre.steps == 0 {
        return Ok(f64::NAN);
    }
    if config.channels != 3 {
        return Err(DpatError::Config("backbone pretraining renders 3-channel frames".into()));
    }
    if pre.batch_size == 0 || pre.grid == 0 || !(pre.lr > 0.0) || !(0.0..=0.5).contains(&pre.noise) {
        return Err(DpatError::Config("pretraining needs a positive batch, grid and lr, and noise in [0, 0.5]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.backbone_seed ^ 0x9e37_79b9_7f4a_7c15);
    let width = Shape::ALL.len() + pre.grid * pre.grid;
    let mut head_w = Tensor::randn(&[width, config.dim], 0.02, &mut rng);
    let mut head_b = Tensor::zeros(&[width]);
    let mut opt = Adam::default();
    let tail = (pre.steps / 10).max(1);
    let mut tail_loss = 0.0;
    for step in 0..pre.steps {
        let batch = (0..pre.batch_size)
            .map(|_| draw_sample(config, pre, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_loss(params, (&head_w, &head_b), config, &batch)?;
        if step + tail >= pre.steps {
            tail_loss += loss / tail as f64;
        }
        let lr = cosine_lr(step, pre.steps, pre.lr);
        opt.begin_step();
        let mut slots = params.named_tensors_mut();
        for (key, g) in grads {
            let slot: &mut Tensor = match key {
                ParamKey::Backbone(i) => &mut *slots[i].1,
                ParamKey::HeadWeight => &mut head_w,
                ParamKey::HeadBias => &mut head_b,
                _ => unreachable!("only backbone and head leaves are registered"),
            };
            opt.update(key, slot, &g, lr);
        }
        if step % 50 == 0 {
            log::debug!("backbone pretraining step {step}: loss {loss:.4}");
        }
    }
    log::debug!("backbone pretraining done: final loss {tail_loss:.4}");
    Ok(tail_loss)
}

fn cache() -> &'static Mutex<HashMap<String, BackboneParams>> {
    static CACHE: OnceLock<Mutex<HashMap<String, BackboneParams>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Random init followed by pretraining, memoized per process on the
/// config, since the result depends on nothing else.
pub fn pretrained_backbone(config: &ModelConfig) -> Result<BackboneParams> {
    let key = serde_json::to_string(config).map_err(|e| DpatError::Config(e.to_string()))?;
    if let Some(hit) = cache().lock().expect("backbone cache").get(&key) {
        return Ok(hit.clone());
    }
    let mut params = BackboneParams::random(config)?;
    pretrain_backbone(&mut params, config)?;
    cache()
        .lock()
        .expect("backbone cache")
        .insert(key, params.clone());
    Ok(params)
}
