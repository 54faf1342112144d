#![allow(dead_code)]

pub mod naive;

use dpat::config::{DatasetSource, ExperimentConfig};
use dpat::data::{Motion, Shape, SpriteBenchmark};
use dpat::model::{Ablation, DpatModel, ModelConfig, PretrainConfig, TemporalPosition, VideoClip};
use dpat::prompt::PromptPlan;
use dpat::trainer::PreparedClip;
use dpat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 2 blocks, D = 8, T = 2, N = 4 patches per frame.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        height: 8,
        width: 8,
        channels: 3,
        patch: 4,
        dim: 8,
        heads: 2,
        blocks: 2,
        mlp_hidden: 16,
        feed_forward: true,
        temporal_position: TemporalPosition::Sinusoidal,
        adapter_ratio: 0.25,
        adapter_up_init_std: 0.1,
        layer_norm_eps: 1e-6,
        backbone_seed: 3,
        pretrain: PretrainConfig::disabled(),
        prompts: PromptPlan {
            agnostic_len: 2,
            specific_len: 1,
            agnostic_layers: [1, 1],
            specific_layers: [2, 2],
        },
    }
}

pub fn random_clip(cfg: &ModelConfig, label: usize, rng: &mut impl Rng) -> VideoClip {
    let n = cfg.frames * cfg.height * cfg.width * cfg.channels;
    let pixels = (0..n).map(|_| rng.random::<f64>()).collect();
    VideoClip::new(cfg.frames, cfg.height, cfg.width, cfg.channels, pixels, label).unwrap()
}

pub fn tiny_model(seed: u64, ablation: Ablation) -> DpatModel {
    DpatModel::new(tiny_model_config(), ablation, 0.1, &mut rng(seed)).unwrap()
}

pub fn prepared(model: &DpatModel, labels: &[usize], seed: u64) -> Vec<PreparedClip> {
    let mut r = rng(seed);
    labels
        .iter()
        .map(|&l| PreparedClip::new(&random_clip(&model.config, l, &mut r), model).unwrap())
        .collect()
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// A two-task sprite run small enough for a few seconds of CPU.
pub fn small_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.model = ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        patch: 8,
        dim: 16,
        heads: 2,
        blocks: 3,
        mlp_hidden: 32,
        pretrain: PretrainConfig {
            steps: 5,
            batch_size: 4,
            ..PretrainConfig::desk()
        },
        prompts: PromptPlan {
            agnostic_len: 2,
            specific_len: 2,
            agnostic_layers: [1, 1],
            specific_layers: [2, 3],
        },
        ..ModelConfig::desk()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.stream.tasks = 2;
    cfg.stream.seed = seed;
    cfg.stream.dataset = DatasetSource::Sprites(SpriteBenchmark {
        shapes: vec![Shape::Square, Shape::Circle],
        motions: vec![Motion::Up, Motion::Right],
        train_per_class: 4,
        test_per_class: 2,
        frames: 4,
        height: 16,
        width: 16,
        sprite_size: 6,
        speed: 2.0,
        noise: 0.05,
        seed,
    });
    cfg
}
