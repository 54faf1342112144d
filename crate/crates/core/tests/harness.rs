mod common;

use std::collections::BTreeSet;

use common::small_experiment;
use dpat::harness::{
    average_accuracy, backward_forgetting, compute_metrics, partition_classes, AccessLog, AccuracyMatrix,
    DataAccess, Experiment, RunOptions,
};
use dpat::DpatError;
use proptest::prelude::*;

#[test]
fn partition_is_disjoint_complete_and_seeded() {
    let p = partition_classes(400, 10, 7).unwrap();
    assert_eq!(p.len(), 10);
    assert!(p.iter().all(|t| t.len() == 40));
    let all: BTreeSet<usize> = p.iter().flatten().copied().collect();
    assert_eq!(all.len(), 400);
    assert_eq!(p, partition_classes(400, 10, 7).unwrap());
    assert_ne!(p, partition_classes(400, 10, 8).unwrap());
}

#[test]
fn indivisible_partition_is_rejected() {
    assert!(matches!(partition_classes(10, 3, 0), Err(DpatError::Protocol(_))));
    assert!(partition_classes(10, 0, 0).is_err());
}

#[test]
fn three_task_metrics_by_hand() {
    let r = AccuracyMatrix::from_rows(&[vec![0.8], vec![0.6, 0.9], vec![0.4, 0.7, 1.0]]).unwrap();
    let (acc, bwf) = compute_metrics(&r).unwrap();
    assert!((acc - 0.7).abs() < 1e-15);
    assert!((bwf - 0.3).abs() < 1e-15);
    assert_eq!(r.curve().len(), 3);
    assert!((r.curve()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn incomplete_matrix_has_no_metrics() {
    let mut r = AccuracyMatrix::new(2);
    r.set(1, 1, 0.5).unwrap();
    assert!(average_accuracy(&r).is_err());
    assert!(r.set(1, 2, 0.5).is_err());
}

#[test]
fn access_log_rejects_evaluation_after_future_training() {
    let ok = AccessLog {
        entries: vec![
            DataAccess::Train { task: 1 },
            DataAccess::Test { after: 1, task: 1 },
            DataAccess::Train { task: 2 },
            DataAccess::Test { after: 2, task: 1 },
        ],
    };
    ok.check().unwrap();
    let leak = AccessLog {
        entries: vec![DataAccess::Train { task: 2 }, DataAccess::Test { after: 1, task: 1 }],
    };
    assert!(matches!(leak.check(), Err(DpatError::Protocol(_))));
    let unseen = AccessLog {
        entries: vec![DataAccess::Train { task: 1 }, DataAccess::Test { after: 1, task: 2 }],
    };
    assert!(unseen.check().is_err());
}

#[test]
fn two_task_run_reports_consistent_metrics() {
    let cfg = small_experiment(3);
    let ds = cfg.load_dataset(None).unwrap();
    let mut exp = Experiment::new(cfg, &ds, RunOptions::default()).unwrap();
    exp.run_next_task().unwrap();
    let partial = exp.report().unwrap();
    assert!(!partial.complete && partial.acc.is_none() && partial.bwf.is_none());
    exp.run_to_end().unwrap();
    let report = exp.report().unwrap();
    assert!(report.complete);

    let (acc, bwf) = compute_metrics(&report.r).unwrap();
    assert_eq!(report.acc, Some(acc));
    assert_eq!(report.bwf, Some(bwf));
    let m = report.matching_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&m));
    assert_eq!(report.curve, report.r.curve());

    // every evaluation after task j happened before task j+1's training
    assert_eq!(
        exp.access.entries,
        vec![
            DataAccess::Train { task: 1 },
            DataAccess::Test { after: 1, task: 1 },
            DataAccess::Train { task: 2 },
            DataAccess::Test { after: 2, task: 1 },
            DataAccess::Test { after: 2, task: 2 },
        ]
    );
    let classes: BTreeSet<usize> = report.task_classes.iter().flatten().copied().collect();
    assert_eq!(classes.len(), 4);
}

#[test]
fn single_task_stream_leaves_forgetting_undefined() {
    let mut cfg = small_experiment(4);
    cfg.stream.tasks = 1;
    let ds = cfg.load_dataset(None).unwrap();
    let mut exp = Experiment::new(cfg, &ds, RunOptions::default()).unwrap();
    exp.run_to_end().unwrap();
    let report = exp.report().unwrap();
    assert!(report.acc.is_some());
    assert!(report.bwf.is_none());
    assert!(matches!(backward_forgetting(&report.r), Err(DpatError::UndefinedMetric(_))));
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..7).prop_flat_map(|n| {
        (1..=n)
            .map(|i| prop::collection::vec(0.0f64..=1.0, i))
            .collect::<Vec<_>>()
    })
}

proptest! {
    #[test]
    fn metrics_follow_their_definitions(rows in matrix()) {
        let r = AccuracyMatrix::from_rows(&rows).unwrap();
        let n = rows.len();
        let acc = average_accuracy(&r).unwrap();
        prop_assert!((acc - rows[n - 1].iter().sum::<f64>() / n as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&acc));
        if n >= 2 {
            let bwf = backward_forgetting(&r).unwrap();
            let want = (0..n - 1).map(|i| rows[i][i] - rows[n - 1][i]).sum::<f64>() / (n - 1) as f64;
            prop_assert!((bwf - want).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&bwf));
        }
        let curve = r.curve();
        for (j, c) in curve.iter().enumerate() {
            let want = rows[j].iter().sum::<f64>() / (j + 1) as f64;
            prop_assert!((c - want).abs() < 1e-12);
        }
    }

    #[test]
    fn no_forgetting_when_rows_repeat_the_diagonal(diag in prop::collection::vec(0.0f64..=1.0, 2..6)) {
        let n = diag.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| diag[..=i].to_vec()).collect();
        let r = AccuracyMatrix::from_rows(&rows).unwrap();
        prop_assert!(backward_forgetting(&r).unwrap().abs() < 1e-15);
    }

    #[test]
    fn partitions_cover_every_class_once(tasks in 1usize..8, per in 1usize..10, seed in any::<u64>()) {
        let p = partition_classes(tasks * per, tasks, seed).unwrap();
        let mut all: Vec<usize> = p.iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..tasks * per).collect::<Vec<_>>());
    }
}
