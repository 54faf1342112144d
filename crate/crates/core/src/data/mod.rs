//! Synthetic and folder-ingested video datasets.

pub mod augment;
pub mod ingest;
pub mod sprites;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{DpatError, Result};
use crate::model::VideoClip;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, AugmentRecord};
pub use ingest::ingest_folder;
pub use sprites::{gen_clip, Motion, Shape, SpriteSpec, Start};

/// Labelled clips with fixed train and test splits. Labels index
/// `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Splits `clips` per class, keeping the first clips for training and
    /// the last `ceil(test_fraction · n)` for testing.
    pub fn from_clips(name: &str, class_names: Vec<String>, clips: Vec<VideoClip>, test_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(DpatError::Data(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut per_class: Vec<Vec<VideoClip>> = vec![Vec::new(); class_names.len()];
        for clip in clips {
            let bucket = per_class
                .get_mut(clip.label)
                .ok_or_else(|| DpatError::Data(format!("label {} has no class name", clip.label)))?;
            bucket.push(clip);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for bucket in per_class {
            let n_test = (bucket.len() as f64 * test_fraction).ceil() as usize;
            let cut = bucket.len() - n_test;
            for (i, clip) in bucket.into_iter().enumerate() {
                if i < cut {
                    train.push(clip);
                } else {
                    test.push(clip);
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            class_names,
            train,
            test,
        })
    }

    /// Checks that all clips share one geometry and carry known labels.
    pub fn validate(&self) -> Result<()> {
        let mut geometry = None;
        for clip in self.train.iter().chain(&self.test) {
            if clip.label >= self.num_classes() {
                return Err(DpatError::Data(format!(
                    "label {} outside {} classes",
                    clip.label,
                    self.num_classes()
                )));
            }
            let g = (clip.frames(), clip.height(), clip.width(), clip.channels());
            match geometry {
                None => geometry = Some(g),
                Some(h) if h != g => {
                    return Err(DpatError::Data(format!("mixed clip geometries {h:?} and {g:?}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// The shape × motion benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteBenchmark {
    pub shapes: Vec<Shape>,
    pub motions: Vec<Motion>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_size: usize,
    pub speed: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SpriteBenchmark {
    fn default() -> Self {
        Self::desk()
    }
}

impl SpriteBenchmark {
    /// 4 shapes × 4 translations = 16 classes of 8 × 32 × 32 clips.
    pub fn desk() -> Self {
        Self {
            shapes: Shape::ALL[..4].to_vec(),
            motions: Motion::ALL[..4].to_vec(),
            train_per_class: 24,
            test_per_class: 12,
            frames: 8,
            height: 32,
            width: 32,
            sprite_size: 10,
            speed: 3.0,
            noise: 0.05,
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.motions.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_classes());
        for s in &self.shapes {
            for m in &self.motions {
                names.push(format!("{}-{}", s.name(), m.name()));
            }
        }
        names
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("benchmark serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Generates every clip. Clip seeds are drawn from `seed`, so the
    /// dataset is a pure function of this struct.
    pub fn generate(&self) -> Result<Dataset> {
        if self.shapes.is_empty() || self.motions.is_empty() {
            return Err(DpatError::Generation("benchmark needs shapes and motions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (si, &shape) in self.shapes.iter().enumerate() {
            for (mi, &motion) in self.motions.iter().enumerate() {
                let label = SpriteSpec::class_id(si, mi, self.motions.len());
                let spec = SpriteSpec {
                    speed: self.speed,
                    noise: self.noise,
                    size: self.sprite_size,
                    ..SpriteSpec::new(shape, motion)
                };
                for i in 0..self.train_per_class + self.test_per_class {
                    let mut clip = gen_clip(&spec, self.frames, self.height, self.width, rng.random())?;
                    clip.label = label;
                    if i < self.train_per_class {
                        train.push(clip);
                    } else {
                        test.push(clip);
                    }
                }
            }
        }
        Ok(Dataset {
            name: format!("sprites-{}", self.fingerprint()),
            class_names: self.class_names(),
            train,
            test,
        })
    }

    /// Like [`generate`](Self::generate) but reuses a cached copy under
    /// `cache_dir` when present and writes one otherwise.
    pub fn load_or_generate(&self, cache_dir: Option<&Path>) -> Result<Dataset> {
        let Some(dir) = cache_dir else {
            return self.generate();
        };
        let path = dir.join(format!("sprites-{}.safetensors", self.fingerprint()));
        if path.exists() {
            match load_dataset(&path) {
                Ok(ds) => return Ok(ds),
                Err(e) => log::warn!("ignoring unreadable dataset cache {}: {e}", path.display()),
            }
        }
        let ds = self.generate()?;
        std::fs::create_dir_all(dir)?;
        save_dataset(&ds, &path)?;
        Ok(ds)
    }
}

fn stack(clips: &[VideoClip]) -> (Tensor, Tensor) {
    let (f, h, w, c) = clips
        .first()
        .map(|x| (x.frames(), x.height(), x.width(), x.channels()))
        .unwrap_or((0, 0, 0, 0));
    let mut data = Vec::with_capacity(clips.len() * f * h * w * c);
    for clip in clips {
        data.extend_from_slice(clip.pixels());
    }
    let labels = clips.iter().map(|x| x.label as f64).collect();
    (
        Tensor::from_vec(&[clips.len(), f, h, w, c], data).expect("stacked shape"),
        Tensor::from_vec(&[clips.len()], labels).expect("label shape"),
    )
}

fn unstack(pixels: &Tensor, labels: &Tensor) -> Result<Vec<VideoClip>> {
    let s = pixels.shape();
    if s.len() != 5 || labels.shape() != [s[0]] {
        return Err(DpatError::Checkpoint("bad dataset tensor shapes".into()));
    }
    let per = s[1] * s[2] * s[3] * s[4];
    (0..s[0])
        .map(|i| {
            VideoClip::new(
                s[1],
                s[2],
                s[3],
                s[4],
                pixels.data()[i * per..(i + 1) * per].to_vec(),
                labels.data()[i] as usize,
            )
        })
        .collect()
}

/// Writes a dataset into the tensor container format.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let (trp, trl) = stack(&ds.train);
    let (tep, tel) = stack(&ds.test);
    let tensors = vec![
        ("train/pixels".to_string(), trp),
        ("train/labels".to_string(), trl),
        ("test/pixels".to_string(), tep),
        ("test/labels".to_string(), tel),
    ];
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("name".to_string(), ds.name.clone());
    meta.insert("classes".to_string(), ds.class_names.join("\n"));
    checkpoint::write_tensors(path, &tensors, &meta)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (tensors, meta) = checkpoint::read_tensors(path)?;
    let get = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DpatError::Checkpoint(format!("dataset file lacks {name}")))
    };
    let classes = meta
        .get("classes")
        .ok_or_else(|| DpatError::Checkpoint("dataset file lacks class names".into()))?;
    let ds = Dataset {
        name: meta.get("name").cloned().unwrap_or_default(),
        class_names: classes.split('\n').map(str::to_string).collect(),
        train: unstack(get("train/pixels")?, get("train/labels")?)?,
        test: unstack(get("test/pixels")?, get("test/labels")?)?,
    };
    ds.validate()?;
    Ok(ds)
}
