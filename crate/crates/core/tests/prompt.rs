mod common;

use common::{random_clip, rng, tiny_model};
use dpat::model::{Ablation, ParamKey, Role};
use dpat::prompt::{
    cosine_distance, dualprompt_match_loss, match_loss, query_fn, select_task, PromptPlan, PromptSet,
};
use dpat::trainer::{train_task, NoopObserver, PreparedClip, RunConfig};
use proptest::prelude::*;

fn reference_set(tasks: usize) -> PromptSet {
    let mut r = rng(1);
    let mut set = PromptSet::new(PromptPlan::reference(), 8, &mut r);
    for _ in 0..tasks {
        set.add_task(&mut r);
    }
    set
}

#[test]
fn reference_layout_resolves_per_layer() {
    let set = reference_set(3);
    let none = Ablation::default();

    let l1 = set.assemble_prompts(1, 2, &none).unwrap().unwrap();
    assert!(matches!(l1.temporal.0, ParamKey::AgnosticPrompt { layer: 1, role: Role::Temporal }));
    assert_eq!(l1.temporal.1.shape(), &[40, 8]);

    let l4 = set.assemble_prompts(4, 3, &none).unwrap().unwrap();
    assert!(matches!(l4.spatial.0, ParamKey::TaskPrompt { task: 3, layer: 4, role: Role::Spatial }));
    assert_eq!(l4.spatial.1.shape(), &[10, 8]);

    assert!(set.assemble_prompts(6, 3, &none).unwrap().is_none());
}

#[test]
fn each_task_gets_its_own_specific_prompts() {
    let set = reference_set(2);
    let none = Ablation::default();
    let a = set.assemble_prompts(3, 1, &none).unwrap().unwrap();
    let b = set.assemble_prompts(3, 2, &none).unwrap().unwrap();
    assert_ne!(a.temporal.1, b.temporal.1);
    let g1 = set.assemble_prompts(2, 1, &none).unwrap().unwrap();
    let g2 = set.assemble_prompts(2, 2, &none).unwrap().unwrap();
    assert_eq!(g1.temporal.1, g2.temporal.1);
}

#[test]
fn query_is_deterministic_and_untouched_by_training() {
    let mut model = tiny_model(2, Ablation::default());
    let mut r = rng(3);
    let clip = random_clip(&model.config, 0, &mut r);
    let q = query_fn(&clip, &model).unwrap();
    assert_eq!(q.len(), model.config.dim);
    assert_eq!(q, query_fn(&clip, &model).unwrap());

    let data: Vec<PreparedClip> = (0..4)
        .map(|i| PreparedClip::new(&random_clip(&model.config, i % 2, &mut r), &model).unwrap())
        .collect();
    let cfg = RunConfig {
        epochs: 1,
        batch_size: 2,
        ..RunConfig::desk()
    };
    train_task(&mut model, &data, &[0, 1], &cfg, &mut r, &mut NoopObserver).unwrap();
    assert_eq!(q, query_fn(&clip, &model).unwrap());
}

#[test]
fn single_frame_clip_gives_a_finite_query() {
    let mut cfg = common::tiny_model_config();
    cfg.frames = 1;
    let model = dpat::model::DpatModel::new(cfg, Ablation::default(), 0.1, &mut rng(4)).unwrap();
    let clip = random_clip(&model.config, 0, &mut rng(5));
    let q = query_fn(&clip, &model).unwrap();
    assert!(q.iter().all(|v| v.is_finite()));
    assert_eq!(q.len(), 8);
}

#[test]
fn two_key_softmax_loss_value() {
    // γ = (0.2, 0.4), τ = 0.1, current task 2: log(1 + e^2)
    let q = [1.0, 0.0];
    let k1 = [0.8, 0.6];
    let k2 = [0.6, 0.8];
    assert!((cosine_distance(&q, &k1).unwrap() - 0.2).abs() < 1e-15);
    assert!((cosine_distance(&q, &k2).unwrap() - 0.4).abs() < 1e-15);
    let loss = match_loss(&q, &[&k1, &k2], 2, 0.1).unwrap();
    let want = (1.0 + 2f64.exp()).ln();
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    assert!((want - 2.126928011042972).abs() < 1e-12);
}

#[test]
fn raw_distance_loss_cases() {
    let q = [0.3, -1.2, 2.0];
    assert!(dualprompt_match_loss(&q, &q).unwrap().abs() < 1e-15);
    assert!((dualprompt_match_loss(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
    let k = [1.0, 2.0, -0.5];
    let cos = (0.3 - 2.4 - 1.0) / ((0.09f64 + 1.44 + 4.0).sqrt() * (1.0f64 + 4.0 + 0.25).sqrt());
    assert!((dualprompt_match_loss(&q, &k).unwrap() - (1.0 - cos)).abs() < 1e-15);
}

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn keys_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (2usize..6, 1usize..6).prop_flat_map(|(dim, n)| (vec_strategy(dim), prop::collection::vec(vec_strategy(dim), n)))
}

proptest! {
    #[test]
    fn softmax_loss_is_negative_log_probability((q, keys) in keys_strategy(), tau in 0.05f64..2.0) {
        let refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
        let t = keys.len();
        let gammas: Vec<f64> = keys.iter().map(|k| cosine_distance(&q, k).unwrap()).collect();
        let z: f64 = gammas.iter().map(|g| (-g / tau).exp()).sum();
        let want = -((-gammas[t - 1] / tau).exp() / z).ln();
        let got = match_loss(&q, &refs, t, tau).unwrap();
        prop_assert!(got >= -1e-12);
        prop_assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn exp_negative_loss_is_the_softmax_mass((q, keys) in keys_strategy(), tau in 0.05f64..2.0) {
        let refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
        let t = keys.len();
        let logits: Vec<f64> = keys.iter().map(|k| -cosine_distance(&q, k).unwrap() / tau).collect();
        let z: f64 = logits.iter().map(|a| a.exp()).sum();
        let mass = logits[t - 1].exp() / z;
        prop_assert!(((-match_loss(&q, &refs, t, tau).unwrap()).exp() - mass).abs() < 1e-10);
    }

    #[test]
    fn scaling_distances_and_tau_together_is_neutral(gammas in prop::collection::vec(0.0f64..0.9, 1..6), c in 0.1f64..2.0, tau in 0.05f64..2.0) {
        // q = e1 and unit keys at angle acos(1 - g) realize any distance g in [0, 2]
        let key = |g: f64| { let th = (1.0 - g).acos(); vec![th.cos(), th.sin()] };
        let q = [1.0, 0.0];
        let base: Vec<Vec<f64>> = gammas.iter().map(|g| key(*g)).collect();
        let scaled: Vec<Vec<f64>> = gammas.iter().map(|g| key(c * g)).collect();
        let t = gammas.len();
        let a = match_loss(&q, &base.iter().map(|k| k.as_slice()).collect::<Vec<_>>(), t, tau).unwrap();
        let b = match_loss(&q, &scaled.iter().map(|k| k.as_slice()).collect::<Vec<_>>(), t, c * tau).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn loss_is_invariant_to_key_and_query_scale((q, keys) in keys_strategy(), s in 0.1f64..10.0, tau in 0.05f64..2.0) {
        let refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
        let scaled: Vec<Vec<f64>> = keys.iter().map(|k| k.iter().map(|v| v * s).collect()).collect();
        let srefs: Vec<&[f64]> = scaled.iter().map(|k| k.as_slice()).collect();
        let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
        let t = keys.len();
        let a = match_loss(&q, &refs, t, tau).unwrap();
        let b = match_loss(&qs, &srefs, t, tau).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn selection_is_the_brute_force_argmin((q, keys) in keys_strategy(), s in 0.1f64..10.0) {
        let got = select_task(&q, &keys).unwrap();
        let mut best = 0;
        for i in 0..keys.len() {
            if cosine_distance(&q, &keys[i]).unwrap() < cosine_distance(&q, &keys[best]).unwrap() {
                best = i;
            }
        }
        prop_assert_eq!(got, best + 1);
        let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
        let d = |v: &[f64]| cosine_distance(v, &keys[got - 1]).unwrap();
        // rescaling the query keeps the winner up to floating-point ties
        let again = select_task(&qs, &keys).unwrap();
        prop_assert!(again == got || (d(&qs) - cosine_distance(&qs, &keys[again - 1]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_key_loss_is_zero(q in vec_strategy(4), k in vec_strategy(4), tau in 0.01f64..5.0) {
        prop_assert_eq!(match_loss(&q, &[&k], 1, tau).unwrap(), 0.0);
    }
}
