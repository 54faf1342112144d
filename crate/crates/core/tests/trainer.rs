mod common;

use common::naive;
use common::{prepared, random_clip, rng, tiny_model};
use dpat::model::{Ablation, DpatModel};
use dpat::prompt::{match_loss, MatchLossKind};
use dpat::trainer::{
    batch_loss, cosine_lr, evaluate, train_task, NoopObserver, PreparedClip, RunConfig, Selection, Stage,
};
use dpat::DpatError;
use proptest::prelude::*;

fn quick() -> RunConfig {
    RunConfig {
        epochs: 1,
        batch_size: 2,
        ..RunConfig::desk()
    }
}

/// Two tasks of two classes each, task 2 allocated but not trained.
fn two_task_model(seed: u64) -> (DpatModel, Vec<PreparedClip>) {
    let mut model = tiny_model(seed, Ablation::default());
    let mut r = rng(seed + 100);
    let first = prepared(&model, &[0, 1, 0, 1], seed + 1);
    train_task(&mut model, &first, &[0, 1], &quick(), &mut r, &mut NoopObserver).unwrap();
    model.begin_task(&[2, 3], &mut r).unwrap();
    let second = prepared(&model, &[2, 3], seed + 2);
    (model, second)
}

fn refs(clips: &[PreparedClip]) -> Vec<&PreparedClip> {
    clips.iter().collect()
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 10, 0.2), 0.2);
    assert!((cosine_lr(5, 10, 0.2) - 0.1).abs() < 1e-15);
    assert!(cosine_lr(10, 10, 0.2).abs() < 1e-15);
    assert_eq!(cosine_lr(3, 0, 0.2), 0.2);
}

#[test]
fn zero_lambda_adapter_loss_equals_prompt_loss() {
    let (model, data) = two_task_model(1);
    let b = refs(&data);
    let s1 = batch_loss(&model, &b, 2, Stage::Prompt, &[2, 3], 1.0, MatchLossKind::Softmax).unwrap();
    let s2 = batch_loss(&model, &b, 2, Stage::Adapter, &[2, 3], 0.0, MatchLossKind::Softmax).unwrap();
    assert_eq!(s1.total, s2.total);
    assert_eq!(s1.matching, 0.0);
}

#[test]
fn first_task_adapter_loss_is_cross_entropy() {
    let mut model = tiny_model(2, Ablation::default());
    model.begin_task(&[0, 1], &mut rng(3)).unwrap();
    let data = prepared(&model, &[0, 1, 1], 4);
    let s2 = batch_loss(&model, &refs(&data), 1, Stage::Adapter, &[0, 1], 1.0, MatchLossKind::Softmax).unwrap();
    assert_eq!(s2.matching, 0.0);
    assert_eq!(s2.total, s2.cross_entropy);
}

#[test]
fn adapter_loss_matches_hand_assembly() {
    let (model, data) = two_task_model(5);
    let lambda = 0.7;
    let got = batch_loss(&model, &refs(&data), 2, Stage::Adapter, &[2, 3], lambda, MatchLossKind::Softmax).unwrap();

    let mut r = rng(5 + 2);
    let mut want = 0.0;
    for label in [2, 3] {
        // regenerate the clip exactly as `prepared` drew it
        let clip = random_clip(&model.config, label, &mut r);
        let logits = naive::forward(&model, &clip, 2);
        let active = [logits[2], logits[3]];
        let m = active.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + active.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let ce = lse - logits[label];
        let q = model.plain_features(&model.embed(&clip).unwrap()).unwrap();
        let keys: Vec<&[f64]> = model.keys.keys().iter().map(|k| k.data()).collect();
        want += ce + lambda * match_loss(&q, &keys, 2, model.keys.tau()).unwrap();
    }
    want /= 2.0;
    assert!((got.total - want).abs() < 1e-10, "{} vs {want}", got.total);
}

#[test]
fn head_grows_monotonically_and_keeps_old_rows() {
    let mut model = tiny_model(6, Ablation::default());
    let mut r = rng(7);
    let a = prepared(&model, &[4, 1], 8);
    train_task(&mut model, &a, &[4, 1], &quick(), &mut r, &mut NoopObserver).unwrap();
    assert_eq!(model.head.classes(), &[4, 1]);
    let before = model.head.weight.clone();
    model.begin_task(&[0, 3], &mut r).unwrap();
    assert_eq!(model.head.classes(), &[4, 1, 0, 3]);
    assert_eq!(&model.head.weight.data()[..before.len()], before.data());
}

#[test]
fn training_never_touches_the_backbone() {
    let mut model = tiny_model(10, Ablation::default());
    let before = model.backbone.clone();
    let data = prepared(&model, &[0, 1, 0, 1], 11);
    train_task(&mut model, &data, &[0, 1], &quick(), &mut rng(12), &mut NoopObserver).unwrap();
    assert_eq!(model.backbone, before);
}

#[test]
fn single_task_evaluation_selects_task_one() {
    let mut model = tiny_model(13, Ablation::default());
    let data = prepared(&model, &[0, 1], 14);
    train_task(&mut model, &data, &[0, 1], &quick(), &mut rng(15), &mut NoopObserver).unwrap();
    for clip in prepared(&model, &[0, 1, 0], 16) {
        let p = evaluate(&clip, &model, Selection::Matched).unwrap();
        assert_eq!(p.task, 1);
        assert!([0, 1].contains(&p.class));
    }
}

#[test]
fn matching_accuracy_counts_selected_tasks() {
    let (mut model, data) = two_task_model(17);
    // force task 2's key onto the query of the first clip: that clip must select task 2
    let q = data[0].query.clone();
    let key = model.param_mut(dpat::model::ParamKey::TaskKey(2)).unwrap();
    key.data_mut().copy_from_slice(&q);
    assert_eq!(evaluate(&data[0], &model, Selection::Matched).unwrap().task, 2);
    let hits = data
        .iter()
        .filter(|c| evaluate(c, &model, Selection::Matched).unwrap().task == 2)
        .count();
    let selected: Vec<usize> = data.iter().map(|c| model.keys.select(&c.query).unwrap()).collect();
    assert_eq!(hits, selected.iter().filter(|t| **t == 2).count());
}

#[test]
fn empty_task_is_rejected() {
    let mut model = tiny_model(22, Ablation::default());
    let err = train_task(&mut model, &[], &[0], &quick(), &mut rng(0), &mut NoopObserver).unwrap_err();
    assert!(matches!(err, DpatError::Data(_)));
    assert_eq!(model.num_tasks(), 0);
}

#[test]
fn overlapping_task_classes_are_a_protocol_error() {
    let mut model = tiny_model(18, Ablation::default());
    let mut r = rng(19);
    let a = prepared(&model, &[0, 1], 20);
    train_task(&mut model, &a, &[0, 1], &quick(), &mut r, &mut NoopObserver).unwrap();
    let b = prepared(&model, &[1, 2], 21);
    let err = train_task(&mut model, &b, &[1, 2], &quick(), &mut r, &mut NoopObserver).unwrap_err();
    assert!(matches!(err, DpatError::Protocol(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn adapter_loss_is_linear_in_lambda(seed in 0u64..1000, lambda in 0.0f64..3.0) {
        let (model, data) = two_task_model(seed);
        let b = refs(&data);
        let s = batch_loss(&model, &b, 2, Stage::Adapter, &[2, 3], lambda, MatchLossKind::Softmax).unwrap();
        prop_assert!((s.total - (s.cross_entropy + lambda * s.matching)).abs() < 1e-12);
        let s0 = batch_loss(&model, &b, 2, Stage::Adapter, &[2, 3], 0.0, MatchLossKind::Softmax).unwrap();
        prop_assert!((s.total - s0.total - lambda * s.matching).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_non_increasing(total in 1usize..500, base in 1e-5f64..1.0) {
        let mut prev = base;
        for step in 0..=total {
            let lr = cosine_lr(step, total, base);
            prop_assert!(lr <= prev + 1e-18 && lr >= -1e-18);
            prev = lr;
        }
    }
}
