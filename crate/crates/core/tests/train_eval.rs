use proptest::prelude::*;
use sst_core::episodes::{make_fold, sample_episode, EpisodeSource, FoldStride, Mode};
use sst_core::model::ModelSpec;
use sst_core::nn::{init_parameters, OptimizerConfig};
use sst_core::train_eval::{
    evaluate, evaluate_pairs, summarize, train, train_step, EvalConfig, MetricsRecord, TrainConfig,
};

fn desk_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.005,
        ..OptimizerConfig::default()
    }
}

#[test]
fn zero_lambda_total_equals_main() {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let batch: Vec<_> = (0..2)
        .map(|s| sample_episode(&split, Mode::Train, 1, s, (32, 32)).unwrap())
        .collect();
    let mut p = init_parameters(&ModelSpec::arch(), 0).unwrap();
    let r = train_step(&batch, &mut p, &ModelSpec::default(), &desk_optimizer(), 0.0).unwrap();
    assert_eq!(r.total, r.main_loss);
    assert!(r.aux_loss > 0.0);
    let r = train_step(&batch, &mut p, &ModelSpec::default(), &desk_optimizer(), 1.0).unwrap();
    assert_eq!(r.total, r.main_loss + r.aux_loss);
}

#[test]
fn one_episode_is_overfit_within_300_steps() {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let ep = sample_episode(&split, Mode::Train, 1, 17, (32, 32)).unwrap();
    let mut p = init_parameters(&ModelSpec::arch(), 1).unwrap();
    let opt = OptimizerConfig {
        learning_rate: 0.01,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let batch = [ep];
    let mut last = None;
    for _ in 0..300 {
        last = Some(train_step(&batch, &mut p, &ModelSpec::default(), &opt, 1.0).unwrap());
    }
    let last = last.unwrap();
    assert!(last.main_loss < 0.1, "{last:?}");
}

#[test]
fn thousand_default_steps_stay_finite() {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let source = EpisodeSource::Synthetic { size: (64, 64) };
    let mut p = init_parameters(&ModelSpec::arch(), 5).unwrap();
    let cfg = TrainConfig {
        n_episodes: 4000,
        seed: 5,
        ..TrainConfig::default()
    };
    let log = train(
        &split,
        &source,
        &mut p,
        &ModelSpec::default(),
        &desk_optimizer(),
        &cfg,
        |_, _| {},
    )
    .unwrap();
    assert_eq!(log.len(), 1000);
    assert!(log.iter().all(|r| r.is_finite()));
    assert!(p.iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn oracle_and_empty_predictors() {
    let split = make_fold(1, FoldStride::Five).unwrap();
    let source = EpisodeSource::Synthetic { size: (32, 32) };
    let cfg = EvalConfig {
        n_episodes: 40,
        k: 1,
        seed: 3,
    };
    let labels = vec!["oracle".to_string(), "background".to_string()];
    let evals = evaluate_pairs(&split, &source, Mode::Test, &cfg, &labels, |ep| {
        Ok(vec![
            (ep.query_mask.clone(), ep.query_mask.clone()),
            (ep.query_mask.map(|_| 0.0), ep.query_mask.clone()),
        ])
    })
    .unwrap();
    assert_eq!(evals[0].summary.mean_iou, 1.0);
    assert_eq!(evals[0].summary.fb_iou, 1.0);
    assert_eq!(evals[1].summary.mean_iou, 0.0);
    assert!(evals
        .iter()
        .all(|e| e.records.iter().all(|r| split.test_classes.contains(&r.class_id))));
}

#[test]
fn evaluation_is_deterministic() {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let source = EpisodeSource::Synthetic { size: (32, 32) };
    let p = init_parameters(&ModelSpec::arch(), 2).unwrap();
    let cfg = EvalConfig {
        n_episodes: 12,
        k: 1,
        seed: 8,
    };
    let a = evaluate(&split, &source, &p, &ModelSpec::default(), &cfg, &[]).unwrap();
    let b = evaluate(&split, &source, &p, &ModelSpec::default(), &cfg, &[]).unwrap();
    assert_eq!(a[0].records, b[0].records);
    let ids: Vec<u64> = a[0].records.iter().map(|r| r.episode_id).collect();
    assert_eq!(ids, (0..12).collect::<Vec<_>>());
}

#[test]
fn zero_episodes_is_rejected() {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let source = EpisodeSource::Synthetic { size: (32, 32) };
    let p = init_parameters(&ModelSpec::arch(), 2).unwrap();
    let cfg = EvalConfig {
        n_episodes: 0,
        k: 1,
        seed: 0,
    };
    assert!(evaluate(&split, &source, &p, &ModelSpec::default(), &cfg, &[]).is_err());
}

fn record(class_id: u8, iou_fg: f64) -> MetricsRecord {
    MetricsRecord {
        episode_id: 0,
        class_id,
        fg_intersection: 0,
        fg_union: 0,
        bg_intersection: 0,
        bg_union: 0,
        iou_fg,
    }
}

proptest! {
    #[test]
    fn mean_iou_ignores_episode_counts(
        ious in proptest::collection::vec(0.0f64..=1.0, 1..6),
        repeats in proptest::collection::vec(1usize..20, 6),
    ) {
        let mut records = Vec::new();
        for (c, &v) in ious.iter().enumerate() {
            records.extend(std::iter::repeat_with(|| record(c as u8 + 1, v)).take(repeats[c]));
        }
        let expected = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert!((summarize(&records).mean_iou - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_grows_with_lambda(main in 0.0f32..5.0, aux in 0.001f32..5.0, l1 in 0.0f32..2.0, dl in 0.01f32..2.0) {
        let a = sst_core::train_eval::LossReport::new(main, aux, l1);
        let b = sst_core::train_eval::LossReport::new(main, aux, l1 + dl);
        prop_assert!(b.total > a.total);
    }
}
