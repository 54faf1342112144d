//! Named-tensor checkpoints in the safetensors container plus a text
//! manifest.
//!
//! A checkpoint directory holds `model.safetensors` and `manifest.txt`.
//! Tensors are stored as little-endian `f64`; the container sorts them by
//! name, so saving the same state twice yields identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{DpatError, Result};
use crate::model::{Ablation, ClassifierHead, DpatModel, ModelConfig};
use crate::tensor::Tensor;

pub const TENSOR_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.txt";
const META_KEY: &str = "dpat";

fn ckpt_err(e: impl std::fmt::Display) -> DpatError {
    DpatError::Checkpoint(e.to_string())
}

/// Serializes named tensors with string metadata into container bytes.
pub fn tensors_to_bytes(tensors: &[(String, Tensor)], meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(n, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.clone(), bytes, t.shape().to_vec())
        })
        .collect();
    let views = raw
        .iter()
        .map(|(n, b, s)| Ok((n.as_str(), TensorView::new(Dtype::F64, s.clone(), b).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    // a single metadata entry keeps the header independent of hash order
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta).map_err(ckpt_err)?);
    safetensors::serialize(views, &Some(info)).map_err(ckpt_err)
}

/// Parses container bytes back into name-sorted tensors and metadata.
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, BTreeMap<String, String>)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
    let meta = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
        Some(json) => serde_json::from_str(json).map_err(ckpt_err)?,
        None => BTreeMap::new(),
    };
    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(DpatError::Checkpoint(format!("tensor {name} is {:?}, expected F64", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::from_vec(view.shape(), data)?));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((out, meta))
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)], meta: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, tensors_to_bytes(tensors, meta)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<(Vec<(String, Tensor)>, BTreeMap<String, String>)> {
    tensors_from_bytes(&fs::read(path)?)
}

/// Provenance stored with a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Fingerprint of the resolved experiment config.
    pub config_hash: String,
    /// Number of tasks trained so far.
    pub task: usize,
    /// Last completed stage: 1, 2, or 0 for a joint phase.
    pub stage: u8,
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    model: ModelConfig,
    ablation: Ablation,
    tau: f64,
}

/// Every tensor of `model` under its checkpoint name, including the
/// frozen backbone and the head's class layout.
pub fn model_tensors(model: &DpatModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .backbone
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for key in model.param_keys() {
        let t = model.param(key).expect("listed parameter exists");
        out.push((key.name(), t.clone()));
    }
    let as_f64 = |v: &[usize]| Tensor::from_vec(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("1-d");
    out.push(("head/classes".into(), as_f64(model.head.classes())));
    let tasks: Vec<usize> = (0..model.head.width())
        .map(|s| model.head.task_of_slot(s).expect("slot in range"))
        .collect();
    out.push(("head/task_of_slot".into(), as_f64(&tasks)));
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn manifest_text(info: &CheckpointInfo, tensors: usize) -> String {
    format!(
        "format: dpat-checkpoint/1\nconfig_hash: {}\ntask: {}\nstage: {}\ntensors: {tensors}\n",
        info.config_hash, info.task, info.stage
    )
}

/// Parses `manifest.txt`.
pub fn read_manifest(dir: &Path) -> Result<CheckpointInfo> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(':') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| DpatError::Checkpoint(format!("manifest lacks {k}")))
    };
    if get("format")? != "dpat-checkpoint/1" {
        return Err(DpatError::Checkpoint("unknown manifest format".into()));
    }
    Ok(CheckpointInfo {
        config_hash: get("config_hash")?,
        task: get("task")?.parse().map_err(ckpt_err)?,
        stage: get("stage")?.parse().map_err(ckpt_err)?,
    })
}

/// Writes `model.safetensors` and `manifest.txt` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &DpatModel, info: &CheckpointInfo) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tensors = model_tensors(model);
    let stored = StoredModel {
        model: model.config.clone(),
        ablation: model.ablation,
        tau: model.keys.tau(),
    };
    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), serde_json::to_string(&stored).map_err(ckpt_err)?);
    meta.insert("info".to_string(), serde_json::to_string(info).map_err(ckpt_err)?);
    write_tensors(&dir.join(TENSOR_FILE), &tensors, &meta)?;
    fs::write(dir.join(MANIFEST_FILE), manifest_text(info, tensors.len()))?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory. The tensor set must
/// match the stored configuration exactly.
pub fn load_checkpoint(dir: &Path) -> Result<(DpatModel, CheckpointInfo)> {
    let info = read_manifest(dir)?;
    let (tensors, meta) = read_tensors(&dir.join(TENSOR_FILE))?;
    let stored: StoredModel = serde_json::from_str(
        meta.get("model")
            .ok_or_else(|| DpatError::Checkpoint("container lacks model metadata".into()))?,
    )
    .map_err(ckpt_err)?;
    let embedded: CheckpointInfo = serde_json::from_str(
        meta.get("info")
            .ok_or_else(|| DpatError::Checkpoint("container lacks checkpoint info".into()))?,
    )
    .map_err(ckpt_err)?;
    if embedded != info {
        return Err(DpatError::Checkpoint("manifest disagrees with the tensor container".into()));
    }
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let take = |m: &mut BTreeMap<String, Tensor>, n: &str| {
        m.remove(n)
            .ok_or_else(|| DpatError::Checkpoint(format!("checkpoint lacks tensor {n}")))
    };
    let to_usize = |t: &Tensor| -> Result<Vec<usize>> {
        t.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(DpatError::Checkpoint(format!("bad index value {v}")))
                }
            })
            .collect()
    };

    // shapes come from a fresh model; every value is then overwritten
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DpatModel::new(stored.model, stored.ablation, stored.tau, &mut rng)?;
    let classes = to_usize(&take(&mut by_name, "head/classes")?)?;
    let task_of_slot = to_usize(&take(&mut by_name, "head/task_of_slot")?)?;
    let tasks = task_of_slot.iter().copied().max().unwrap_or(0);
    for _ in 0..tasks {
        model.prompts.add_task(&mut rng);
        model.keys.push(Tensor::zeros(&[model.config.dim]));
    }
    model.head = ClassifierHead::restore(
        classes,
        task_of_slot,
        take(&mut by_name, "head/weight")?,
        take(&mut by_name, "head/bias")?,
    )?;
    for (name, slot) in model.backbone.named_tensors_mut() {
        assign(slot, take(&mut by_name, &name)?, &name)?;
    }
    for key in model.param_keys() {
        let name = key.name();
        if matches!(name.as_str(), "head/weight" | "head/bias") {
            continue;
        }
        let value = take(&mut by_name, &name)?;
        assign(model.param_mut(key).expect("listed parameter exists"), value, &name)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(DpatError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((model, info))
}

fn assign(slot: &mut Tensor, value: Tensor, name: &str) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(DpatError::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            value.shape(),
            slot.shape()
        )));
    }
    *slot = value;
    Ok(())
}
