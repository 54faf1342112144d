use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpat::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use dpat::config::{ExperimentConfig, Preset};
use dpat::data::{gen_clip, Motion, Shape, SpriteSpec};
use dpat::harness::metrics::{compute_metrics as metrics, AccuracyMatrix};
use dpat::harness::report::write_report;
use dpat::harness::{run_experiment as run, RunOptions, SelectionMode};
use dpat::model::{DpatModel, VideoClip};
use dpat::trainer::{evaluate, train_task, NoopObserver, PreparedClip, Selection};

create_exception!(dpat_py, DpatError, PyException);

fn err(e: dpat::DpatError) -> PyErr {
    DpatError::new_err(e.to_string())
}

fn parse_preset(name: &str) -> PyResult<Preset> {
    match name {
        "desk" => Ok(Preset::Desk),
        "paper-geometry" => Ok(Preset::PaperGeometry),
        other => Err(DpatError::new_err(format!("unknown preset {other:?}"))),
    }
}

/// Resolved TOML configuration of a preset.
#[pyfunction]
#[pyo3(signature = (preset = "desk"))]
fn default_config(preset: &str) -> PyResult<String> {
    Ok(ExperimentConfig::preset(parse_preset(preset)?).to_toml())
}

/// Validates a TOML configuration and returns its fingerprint.
#[pyfunction]
fn config_fingerprint(toml: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(toml).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg.fingerprint())
}

/// Average accuracy and backward forgetting of a lower-triangular
/// accuracy matrix given as rows.
#[pyfunction]
fn compute_metrics(rows: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let r = AccuracyMatrix::from_rows(&rows).map_err(err)?;
    metrics(&r).map_err(err)
}

#[pyfunction]
fn match_loss(query: Vec<f64>, keys: Vec<Vec<f64>>, current: usize, tau: f64) -> PyResult<f64> {
    let refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
    dpat::prompt::match_loss(&query, &refs, current, tau).map_err(err)
}

/// 1-based index of the key nearest to `query` in cosine distance.
#[pyfunction]
fn select_task(query: Vec<f64>, keys: Vec<Vec<f64>>) -> PyResult<usize> {
    dpat::prompt::select_task(&query, &keys).map_err(err)
}

fn parse_name<T: Copy>(all: &[T], name: &str, label: fn(T) -> &'static str, what: &str) -> PyResult<T> {
    all.iter()
        .copied()
        .find(|v| label(*v) == name)
        .ok_or_else(|| DpatError::new_err(format!("unknown {what} {name:?}")))
}

/// Renders one sprite clip; returns `(T, H, W, 3)` pixels flattened in
/// row-major order.
#[pyfunction]
#[pyo3(signature = (shape, motion, frames, height, width, seed, speed = 2.0, noise = 0.0, size = 8))]
#[allow(clippy::too_many_arguments)]
fn sprite_clip(
    shape: &str,
    motion: &str,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    speed: f64,
    noise: f64,
    size: usize,
) -> PyResult<Vec<f64>> {
    let spec = SpriteSpec {
        speed,
        noise,
        size,
        ..SpriteSpec::new(
            parse_name(&Shape::ALL, shape, Shape::name, "shape")?,
            parse_name(&Motion::ALL, motion, Motion::name, "motion")?,
        )
    };
    let clip = gen_clip(&spec, frames, height, width, seed).map_err(err)?;
    Ok(clip.pixels().to_vec())
}

/// Continual-learning model: frozen backbone, prompts, adapters, keys
/// and the growing head.
#[pyclass(module = "dpat_py")]
struct Model {
    inner: DpatModel,
    cfg: ExperimentConfig,
    rng: ChaCha8Rng,
}

impl Model {
    fn clip(&self, pixels: Vec<f64>, label: usize) -> PyResult<PreparedClip> {
        let m = &self.inner.config;
        let clip = VideoClip::new(m.frames, m.height, m.width, m.channels, pixels, label).map_err(err)?;
        PreparedClip::new(&clip, &self.inner).map_err(err)
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config_toml = None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = match config_toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        cfg.validate().map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inner = DpatModel::new(cfg.model.clone(), cfg.train.ablation, cfg.train.tau, &mut rng).map_err(err)?;
        Ok(Self { inner, cfg, rng })
    }

    /// Restores a checkpoint directory written by `save` or the CLI.
    #[staticmethod]
    #[pyo3(signature = (path, config_toml = None))]
    fn load(path: PathBuf, config_toml: Option<&str>) -> PyResult<Self> {
        let (inner, info) = load_checkpoint(&path).map_err(err)?;
        let cfg = match config_toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ info.task as u64);
        Ok(Self { inner, cfg, rng })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let info = CheckpointInfo {
            config_hash: self.cfg.fingerprint(),
            task: self.inner.num_tasks(),
            stage: 2,
        };
        save_checkpoint(&path, &self.inner, &info).map_err(err)
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    /// Class id scored by each head slot, in slot order.
    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.inner.head.classes().to_vec()
    }

    /// Clip geometry `(frames, height, width, channels)`.
    #[getter]
    fn clip_shape(&self) -> (usize, usize, usize, usize) {
        let m = &self.inner.config;
        (m.frames, m.height, m.width, m.channels)
    }

    /// Trains a new task on flattened clips; returns its 1-based id.
    fn train_task(&mut self, clips: Vec<Vec<f64>>, labels: Vec<usize>, classes: Vec<usize>) -> PyResult<usize> {
        if clips.len() != labels.len() {
            return Err(DpatError::new_err("clips and labels differ in length"));
        }
        let data = clips
            .into_iter()
            .zip(labels)
            .map(|(p, l)| self.clip(p, l))
            .collect::<PyResult<Vec<_>>>()?;
        train_task(&mut self.inner, &data, &classes, &self.cfg.train, &mut self.rng, &mut NoopObserver).map_err(err)
    }

    /// Predicted class and selected task. `task` forces the prompts of
    /// that task instead of key matching.
    #[pyo3(signature = (pixels, task = None))]
    fn predict(&self, pixels: Vec<f64>, task: Option<usize>) -> PyResult<(usize, usize)> {
        let clip = self.clip(pixels, 0)?;
        let selection = task.map_or(Selection::Matched, Selection::Oracle);
        let p = evaluate(&clip, &self.inner, selection).map_err(err)?;
        Ok((p.class, p.task))
    }

    /// Frozen query feature used for task matching.
    fn query(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.clip(pixels, 0)?.query)
    }
}

/// Summary of a finished continual run.
#[pyclass(module = "dpat_py", get_all)]
struct RunSummary {
    acc: Option<f64>,
    bwf: Option<f64>,
    matching_accuracy: Option<f64>,
    curve: Vec<f64>,
    r: Vec<Vec<f64>>,
    fingerprint: String,
}

/// Runs the full task stream described by `config_toml`. With `out_dir`,
/// writes the report and per-task checkpoints there.
#[pyfunction]
#[pyo3(signature = (config_toml = None, out_dir = None, oracle = false))]
fn run_experiment(py: Python<'_>, config_toml: Option<&str>, out_dir: Option<PathBuf>, oracle: bool) -> PyResult<RunSummary> {
    let cfg = match config_toml {
        Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    let report = py.detach(|| -> dpat::Result<_> {
        let ds = cfg.load_dataset(None)?;
        let options = RunOptions {
            selection: if oracle { SelectionMode::Oracle } else { SelectionMode::Matched },
            checkpoint_dir: out_dir.as_ref().map(|d| d.join("checkpoints")),
        };
        let (report, _) = run(&cfg, &ds, options)?;
        if let Some(dir) = &out_dir {
            write_report(dir, &report, None)?;
        }
        Ok(report)
    });
    let report = report.map_err(err)?;
    let n = report.r.tasks();
    let r = (1..=n)
        .map(|i| (1..=i).map(|j| report.r.get(i, j).unwrap_or(f64::NAN)).collect())
        .collect();
    Ok(RunSummary {
        acc: report.acc,
        bwf: report.bwf,
        matching_accuracy: report.matching_accuracy,
        curve: report.curve,
        r,
        fingerprint: report.fingerprint,
    })
}

#[pymodule]
fn dpat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DpatError", m.py().get_type::<DpatError>())?;
    m.add_class::<Model>()?;
    m.add_class::<RunSummary>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(match_loss, m)?)?;
    m.add_function(wrap_pyfunction!(select_task, m)?)?;
    m.add_function(wrap_pyfunction!(sprite_clip, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
