//! Moving-sprite videos whose labels factor into shape × motion.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DpatError, Result};
use crate::model::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Cross,
        Shape::Diamond,
        Shape::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
        }
    }

    /// Whether pixel `(y, x)` of a `size × size` box belongs to the sprite.
    pub fn covers(self, y: usize, x: usize, size: usize) -> bool {
        let s = size as f64;
        let cy = y as f64 + 0.5 - s / 2.0;
        let cx = x as f64 + 0.5 - s / 2.0;
        let r = s / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => cy * cy + cx * cx <= r * r,
            Shape::Triangle => {
                // apex at the top row, base along the bottom row
                let half = (y as f64 + 1.0) / s * r;
                cx.abs() <= half
            }
            Shape::Cross => {
                let arm = (s / 6.0).max(0.5);
                cx.abs() <= arm || cy.abs() <= arm
            }
            Shape::Diamond => cx.abs() + cy.abs() <= r,
            Shape::Ring => {
                let d = (cy * cy + cx * cx).sqrt();
                d <= r && d >= r * 0.5
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Up,
    Down,
    Left,
    Right,
    Clockwise,
    Counterclockwise,
}

impl Motion {
    pub const ALL: [Motion; 6] = [
        Motion::Up,
        Motion::Down,
        Motion::Left,
        Motion::Right,
        Motion::Clockwise,
        Motion::Counterclockwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Clockwise => "clockwise",
            Motion::Counterclockwise => "counterclockwise",
        }
    }

    /// The motion that traces the same path backwards.
    pub fn reverse(self) -> Motion {
        match self {
            Motion::Up => Motion::Down,
            Motion::Down => Motion::Up,
            Motion::Left => Motion::Right,
            Motion::Right => Motion::Left,
            Motion::Clockwise => Motion::Counterclockwise,
            Motion::Counterclockwise => Motion::Clockwise,
        }
    }

    fn is_orbit(self) -> bool {
        matches!(self, Motion::Clockwise | Motion::Counterclockwise)
    }
}

/// Where a trajectory starts. For translations the moving coordinate is
/// unfolded: positions outside `[0, span]` are folded back by reflection,
/// so any real start is valid. For orbits `phase` is the starting angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Start {
    /// Unfolded coordinate along the direction of motion, or the angle.
    pub along: f64,
    /// Fixed coordinate across the direction of motion (orbit: unused).
    pub across: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub shape: Shape,
    pub motion: Motion,
    /// Pixels per frame (arc length per frame for orbits).
    pub speed: f64,
    /// Standard deviation of additive Gaussian pixel noise, in `[0, 0.5]`.
    pub noise: f64,
    /// Side of the sprite's bounding box in pixels.
    pub size: usize,
    /// Sprite color; drawn from the seed when absent.
    pub color: Option<[f64; 3]>,
    /// Trajectory start; drawn from the seed when absent.
    pub start: Option<Start>,
}

impl SpriteSpec {
    pub fn new(shape: Shape, motion: Motion) -> Self {
        Self {
            shape,
            motion,
            speed: 2.0,
            noise: 0.0,
            size: 8,
            color: None,
            start: None,
        }
    }

    /// `shape_index · num_motions + motion_index`.
    pub fn class_id(shape_index: usize, motion_index: usize, num_motions: usize) -> usize {
        shape_index * num_motions + motion_index
    }
}

/// Folds an unfolded coordinate into `[0, span]` with reflecting walls.
pub fn reflect(u: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = u.rem_euclid(period);
    if m > span {
        period - m
    } else {
        m
    }
}

/// Top-left sprite position `(y, x)` at frame `t`.
pub fn position(spec: &SpriteSpec, start: Start, t: usize, height: usize, width: usize) -> (f64, f64) {
    let span_y = (height - spec.size) as f64;
    let span_x = (width - spec.size) as f64;
    let d = spec.speed * t as f64;
    match spec.motion {
        Motion::Up => (reflect(start.along - d, span_y), start.across),
        Motion::Down => (reflect(start.along + d, span_y), start.across),
        Motion::Left => (start.across, reflect(start.along - d, span_x)),
        Motion::Right => (start.across, reflect(start.along + d, span_x)),
        Motion::Clockwise | Motion::Counterclockwise => {
            let radius = (span_y.min(span_x) / 2.0).max(1.0);
            let omega = spec.speed / radius;
            // image y grows downwards, so increasing angle turns clockwise on screen
            let angle = match spec.motion {
                Motion::Clockwise => start.along + omega * t as f64,
                _ => start.along - omega * t as f64,
            };
            (span_y / 2.0 + radius * angle.sin(), span_x / 2.0 + radius * angle.cos())
        }
    }
}

/// Start position that makes `gen_clip` of the reversed motion produce this
/// clip's frames in reverse order.
pub fn mirrored_start(spec: &SpriteSpec, start: Start, frames: usize, height: usize, width: usize) -> Start {
    let travel = spec.speed * (frames.saturating_sub(1)) as f64;
    if spec.motion.is_orbit() {
        let span = (height.min(width) - spec.size) as f64;
        let radius = (span / 2.0).max(1.0);
        let omega = spec.speed / radius;
        let sweep = omega * (frames.saturating_sub(1)) as f64;
        let along = match spec.motion {
            Motion::Clockwise => start.along + sweep,
            _ => start.along - sweep,
        };
        return Start { along, ..start };
    }
    let along = match spec.motion {
        Motion::Up | Motion::Left => start.along - travel,
        _ => start.along + travel,
    };
    Start { along, ..start }
}

fn random_start<R: Rng + ?Sized>(spec: &SpriteSpec, height: usize, width: usize, rng: &mut R) -> Start {
    let span_y = (height - spec.size) as f64;
    let span_x = (width - spec.size) as f64;
    let (span_along, span_across) = match spec.motion {
        Motion::Up | Motion::Down => (span_y, span_x),
        Motion::Left | Motion::Right => (span_x, span_y),
        _ => {
            return Start {
                along: rng.random_range(0.0..2.0 * PI),
                across: 0.0,
            }
        }
    };
    // integer starts keep integer-speed trajectories on the pixel grid
    let along = rng.random_range(0..=(2.0 * span_along) as usize) as f64;
    let across = rng.random_range(0..=span_across as usize) as f64;
    Start { along, across }
}

/// Renders a clip of `frames × height × width × 3`. Deterministic in
/// `(spec, seed)`; the label is left at 0 for the caller to set.
pub fn gen_clip(spec: &SpriteSpec, frames: usize, height: usize, width: usize, seed: u64) -> Result<VideoClip> {
    if spec.size == 0 || spec.size > height || spec.size > width {
        return Err(DpatError::Generation(format!(
            "sprite of size {} does not fit a {height}x{width} frame",
            spec.size
        )));
    }
    if frames == 0 {
        return Err(DpatError::Generation("clip needs at least one frame".into()));
    }
    if !(0.0..=0.5).contains(&spec.noise) {
        return Err(DpatError::Generation(format!("noise level {} outside [0, 0.5]", spec.noise)));
    }
    if !(spec.speed >= 0.0) {
        return Err(DpatError::Generation(format!("negative speed {}", spec.speed)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = match spec.color {
        Some(c) => c,
        None => [
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
        ],
    };
    let start = match spec.start {
        Some(s) => s,
        None => random_start(spec, height, width, &mut rng),
    };
    let mask: Vec<bool> = (0..spec.size * spec.size)
        .map(|i| spec.shape.covers(i / spec.size, i % spec.size, spec.size))
        .collect();
    let plane = height * width * 3;
    let mut pixels = vec![0.0; frames * plane];
    for t in 0..frames {
        let (py, px) = position(spec, start, t, height, width);
        let oy = py.round() as usize;
        let ox = px.round() as usize;
        let frame = &mut pixels[t * plane..(t + 1) * plane];
        for y in 0..spec.size {
            for x in 0..spec.size {
                if mask[y * spec.size + x] {
                    let base = ((oy + y) * width + ox + x) * 3;
                    frame[base..base + 3].copy_from_slice(&color);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("noise level checked above");
        for p in &mut pixels {
            *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    VideoClip::new(frames, height, width, 3, pixels, 0)
}

/// Intensity-weighted centroid `(y, x)` of frame `t`.
pub fn centroid(clip: &VideoClip, t: usize) -> (f64, f64) {
    let (mut sy, mut sx, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..clip.height() {
        for x in 0..clip.width() {
            let w: f64 = (0..clip.channels()).map(|c| clip.pixel(t, y, x, c)).sum();
            sy += w * y as f64;
            sx += w * x as f64;
            sw += w;
        }
    }
    (sy / sw, sx / sw)
}
