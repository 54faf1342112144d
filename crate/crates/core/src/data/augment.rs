//! Clip-consistent random crop, resize and horizontal flip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DpatError, Result};
use crate::model::VideoClip;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop window `(height, width)`; `None` keeps the full frame.
    pub crop: Option<[usize; 2]>,
    /// Output size after the crop; `None` keeps the crop size.
    pub resize: Option<[usize; 2]>,
    /// Probability of a horizontal flip.
    pub flip_probability: f64,
    /// Set when labels encode motion direction; disables flipping, which
    /// would turn a left-moving clip into a right-moving one.
    pub motion_labels: bool,
}

/// What was applied to a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentRecord {
    /// Top-left corner `(y, x)` of the crop window.
    pub origin: (usize, usize),
    pub window: (usize, usize),
    pub flipped: bool,
}

/// Applies one crop window and one flip decision to every frame.
pub fn augment(clip: &VideoClip, config: &AugmentConfig, seed: u64) -> Result<(VideoClip, AugmentRecord)> {
    let (h, w, c) = (clip.height(), clip.width(), clip.channels());
    let [ch, cw] = config.crop.unwrap_or([h, w]);
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(DpatError::Augment(format!("crop {ch}x{cw} does not fit a {h}x{w} frame")));
    }
    if !(0.0..=1.0).contains(&config.flip_probability) {
        return Err(DpatError::Augment(format!(
            "flip probability {} outside [0, 1]",
            config.flip_probability
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let flip_draw = rng.random::<f64>() < config.flip_probability;
    let flipped = flip_draw && !config.motion_labels;
    let [rh, rw] = config.resize.unwrap_or([ch, cw]);
    if rh == 0 || rw == 0 {
        return Err(DpatError::Augment("resize target must be non-empty".into()));
    }

    let mut out = Vec::with_capacity(clip.frames() * rh * rw * c);
    for t in 0..clip.frames() {
        for y in 0..rh {
            for x in 0..rw {
                for k in 0..c {
                    let v = if (rh, rw) == (ch, cw) {
                        clip.pixel(t, oy + y, ox + x, k)
                    } else {
                        bilinear(clip, t, k, (oy, ox), (ch, cw), (y, x), (rh, rw))
                    };
                    out.push(v);
                }
            }
            if flipped {
                let row = out.len() - rw * c;
                flip_row(&mut out[row..], c);
            }
        }
    }
    let record = AugmentRecord {
        origin: (oy, ox),
        window: (ch, cw),
        flipped,
    };
    Ok((VideoClip::new(clip.frames(), rh, rw, c, out, clip.label)?, record))
}

fn flip_row(row: &mut [f64], channels: usize) {
    let n = row.len() / channels;
    for i in 0..n / 2 {
        for k in 0..channels {
            row.swap(i * channels + k, (n - 1 - i) * channels + k);
        }
    }
}

// Half-pixel-centre sampling of the crop window.
fn bilinear(
    clip: &VideoClip,
    t: usize,
    k: usize,
    (oy, ox): (usize, usize),
    (ch, cw): (usize, usize),
    (y, x): (usize, usize),
    (rh, rw): (usize, usize),
) -> f64 {
    let sy = ((y as f64 + 0.5) * ch as f64 / rh as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
    let sx = ((x as f64 + 0.5) * cw as f64 / rw as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let p = |yy: usize, xx: usize| clip.pixel(t, oy + yy, ox + xx, k);
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
}
