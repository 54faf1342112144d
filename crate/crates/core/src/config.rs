//! Experiment configuration: TOML schema, presets, validation and the
//! fingerprint that identifies a resolved run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, Dataset, SpriteBenchmark};
use crate::error::{DpatError, Result};
use crate::model::ModelConfig;
use crate::trainer::RunConfig;

/// Where clips come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Sprites(SpriteBenchmark),
    Folder {
        path: PathBuf,
        /// Fraction of each class's clips held out for testing.
        test_fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub dataset: DatasetSource,
    /// Number of tasks `N`; the class count must be divisible by it.
    pub tasks: usize,
    /// Seed of the class-to-task partition.
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperGeometry,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run seed: adapter, prompt, key and head initialization plus shuffling.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: RunConfig,
    pub stream: StreamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                seed: 0,
                model: ModelConfig::desk(),
                train: RunConfig::desk(),
                stream: StreamConfig {
                    dataset: DatasetSource::Sprites(SpriteBenchmark::desk()),
                    tasks: 4,
                    seed: 0,
                    augment: AugmentConfig {
                        motion_labels: true,
                        ..AugmentConfig::default()
                    },
                },
            },
            Preset::PaperGeometry => {
                let model = ModelConfig::paper_geometry();
                let sprites = SpriteBenchmark {
                    frames: model.frames,
                    height: model.height,
                    width: model.width,
                    sprite_size: 48,
                    speed: 10.0,
                    ..SpriteBenchmark::desk()
                };
                Self {
                    seed: 0,
                    model,
                    train: RunConfig::reference(),
                    stream: StreamConfig {
                        dataset: DatasetSource::Sprites(sprites),
                        tasks: 4,
                        seed: 0,
                        augment: AugmentConfig {
                            motion_labels: true,
                            ..AugmentConfig::default()
                        },
                    },
                }
            }
        }
    }

    /// Parses TOML. Unknown keys are rejected; missing sections take the
    /// desk preset's values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DpatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DpatError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            DpatError::Config(m) => DpatError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.stream.tasks == 0 {
            return Err(DpatError::Config("stream needs at least one task".into()));
        }
        match &self.stream.dataset {
            DatasetSource::Sprites(b) => {
                if (b.frames, b.height, b.width) != (self.model.frames, self.model.height, self.model.width)
                    || self.model.channels != 3
                {
                    return Err(DpatError::Config(format!(
                        "sprite clips are {}x{}x{}x3 but the model expects {}x{}x{}x{}",
                        b.frames,
                        b.height,
                        b.width,
                        self.model.frames,
                        self.model.height,
                        self.model.width,
                        self.model.channels
                    )));
                }
                if b.num_classes() % self.stream.tasks != 0 {
                    return Err(DpatError::Config(format!(
                        "{} classes do not split into {} equal tasks",
                        b.num_classes(),
                        self.stream.tasks
                    )));
                }
            }
            DatasetSource::Folder { test_fraction, .. } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(DpatError::Config(format!("test_fraction {test_fraction} outside [0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset; `cache_dir` caches generated sprites.
    pub fn load_dataset(&self, cache_dir: Option<&Path>) -> Result<Dataset> {
        match &self.stream.dataset {
            DatasetSource::Sprites(b) => b.load_or_generate(cache_dir),
            DatasetSource::Folder { path, test_fraction } => {
                let ing = crate::data::ingest_folder(path, self.model.frames)?;
                let name = path.display().to_string();
                Dataset::from_clips(&name, ing.class_names, ing.clips, *test_fraction)
            }
        }
    }
}

/// One row of the `--print-defaults` table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefaultEntry {
    pub field: String,
    pub value: String,
    pub source: &'static str,
}

const REFERENCE: &str = "reference configuration";
const DESK: &str = "desk-scale override (size only)";
const CHOICE: &str = "design choice, see decisions ledger";

/// Every leaf of the resolved config with where its value comes from.
pub fn default_provenance(cfg: &ExperimentConfig) -> Vec<DefaultEntry> {
    let value = toml::Value::try_from(cfg).expect("config converts to a TOML value");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out.into_iter()
        .map(|(field, value)| {
            let source = source_of(&field);
            DefaultEntry { field, value, source }
        })
        .collect()
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&p, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn source_of(field: &str) -> &'static str {
    match field {
        "model.adapter_ratio"
        | "model.prompts.agnostic_len"
        | "model.prompts.specific_len"
        | "model.prompts.agnostic_layers"
        | "model.prompts.specific_layers"
        | "train.tau"
        | "train.lambda"
        | "train.cosine_schedule"
        | "model.layer_norm_eps" => REFERENCE,
        "train.prompt_lr" | "train.adapter_lr" | "train.batch_size" | "train.epochs" => DESK,
        f if f.starts_with("train.ablation") || f == "train.mode" => "default: full method, no ablation",
        f if f.starts_with("model.") => {
            if matches!(
                f,
                "model.feed_forward"
                    | "model.temporal_position"
                    | "model.adapter_up_init_std"
                    | "model.backbone_seed"
            ) || f.starts_with("model.pretrain.")
            {
                CHOICE
            } else {
                DESK
            }
        }
        f if f.starts_with("stream.") || f == "seed" => "desk benchmark definition",
        _ => CHOICE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for p in [Preset::Desk, Preset::PaperGeometry] {
            let cfg = ExperimentConfig::preset(p);
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.fingerprint(), cfg.fingerprint());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::default().to_toml();
        text = text.replace("[train]\n", "[train]\nlearning_rate = 0.1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(DpatError::Config(_))));
        let text = ExperimentConfig::default()
            .to_toml()
            .replace("[model]\n", "[model]\nbogus = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(DpatError::Config(_))));
    }

    #[test]
    fn indivisible_stream_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.stream.tasks = 3;
        assert!(matches!(cfg.validate(), Err(DpatError::Config(_))));
    }

    #[test]
    fn provenance_covers_reference_values() {
        let rows = default_provenance(&ExperimentConfig::default());
        let lambda = rows.iter().find(|r| r.field == "train.lambda").unwrap();
        assert_eq!(lambda.value, "1.0");
        assert_eq!(lambda.source, REFERENCE);
        assert!(rows.iter().any(|r| r.field == "model.prompts.specific_len" && r.value == "5"));
    }
}
