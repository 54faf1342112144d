mod common;

use common::{prepared, rng, tiny_model};
use dpat::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use dpat::model::{forward_model, Ablation, DpatModel};
use dpat::trainer::{train_task, NoopObserver, RunConfig};
use dpat::DpatError;

fn trained() -> DpatModel {
    let mut model = tiny_model(1, Ablation::default());
    let cfg = RunConfig {
        epochs: 1,
        batch_size: 2,
        ..RunConfig::desk()
    };
    let mut r = rng(2);
    let a = prepared(&model, &[0, 1, 0, 1], 3);
    train_task(&mut model, &a, &[0, 1], &cfg, &mut r, &mut NoopObserver).unwrap();
    let b = prepared(&model, &[5, 2], 4);
    train_task(&mut model, &b, &[5, 2], &cfg, &mut r, &mut NoopObserver).unwrap();
    model
}

fn info() -> CheckpointInfo {
    CheckpointInfo {
        config_hash: "abc123".into(),
        task: 2,
        stage: 2,
    }
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let model = trained();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_checkpoint(&a, &model, &info()).unwrap();
    let (loaded, got) = load_checkpoint(&a).unwrap();
    assert_eq!(got, info());
    assert_eq!(loaded, model);
    save_checkpoint(&b, &loaded, &got).unwrap();
    assert_eq!(files(&a), files(&b));
}

#[test]
fn restored_model_predicts_identically() {
    let model = trained();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &model, &info()).unwrap();
    let (loaded, _) = load_checkpoint(tmp.path()).unwrap();
    for clip in prepared(&model, &[0, 5], 9) {
        for task in [1, 2] {
            assert_eq!(
                forward_model(&model, &clip.tokens, task, None).unwrap(),
                forward_model(&loaded, &clip.tokens, task, None).unwrap()
            );
        }
    }
    assert_eq!(loaded.head.classes(), &[0, 1, 5, 2]);
}

#[test]
fn truncated_tensor_file_is_rejected() {
    let model = trained();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &model, &info()).unwrap();
    let path = tmp.path().join("model.safetensors");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(tmp.path()), Err(DpatError::Checkpoint(_))));
}

#[test]
fn manifest_must_agree_with_the_container() {
    let model = trained();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &model, &info()).unwrap();
    let other = tempfile::tempdir().unwrap();
    save_checkpoint(other.path(), &model, &CheckpointInfo { task: 1, ..info() }).unwrap();
    std::fs::copy(other.path().join("manifest.txt"), tmp.path().join("manifest.txt")).unwrap();
    assert!(load_checkpoint(tmp.path()).is_err());
}

#[test]
fn missing_directory_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(&tmp.path().join("nope")).is_err());
}
