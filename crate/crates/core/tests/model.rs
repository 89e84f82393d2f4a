use sst_core::episodes::{make_fold, sample_episode, Episode, FoldStride, Mode, Shot};
use sst_core::model::{
    build_descriptor, encode, forward_one_shot, forward_without_tuning, fuse_five_shot, fuse_relations,
    multi_shot_relations, post_tuning_self_segment, self_segment, self_segment_in, tune_support_features, FusionMode,
    ModelError, ModelSpec,
};
use sst_core::nn::{init_parameters, sgd_step, OptimizerConfig, ParameterStore};
use sst_core::tensor::{Graph, Tensor};

fn params(seed: u64) -> ParameterStore {
    init_parameters(&ModelSpec::arch(), seed).unwrap()
}

fn episode(seed: u64, k: usize, size: usize) -> Episode {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let mode = if seed.is_multiple_of(2) { Mode::Train } else { Mode::Test };
    sample_episode(&split, mode, k, seed, (size, size)).unwrap()
}

#[test]
fn tuning_leaves_parameters_untouched() {
    for seed in 0..10 {
        let p = params(seed);
        let snapshot = p.clone();
        let ep = episode(seed, 1, 32);
        let r = encode(&ep.supports[0].image, &p).unwrap();
        tune_support_features(&r, &ep.supports[0].mask, &p, 1.0, 2).unwrap();
        forward_one_shot(&ep, &p, &ModelSpec::default()).unwrap();
        assert!(p.bitwise_eq(&snapshot));
    }
}

#[test]
fn zero_step_is_a_no_op() {
    for seed in 0..10 {
        let p = params(seed);
        let ep = episode(seed, 1, 32);
        let r = encode(&ep.supports[0].image, &p).unwrap();
        let t = tune_support_features(&r, &ep.supports[0].mask, &p, 0.0, 1).unwrap();
        assert!(t.features.bitwise_eq(&r));
        let spec = ModelSpec {
            eta: 0.0,
            ..ModelSpec::default()
        };
        let tuned = forward_one_shot(&ep, &p, &spec).unwrap();
        let ablated = forward_without_tuning(&ep, &p).unwrap();
        assert!(tuned.query.bitwise_eq(&ablated));
    }
}

#[test]
fn small_step_decreases_self_segmentation_loss() {
    let mut decreased = 0;
    for seed in 0..200 {
        let p = params(seed);
        let ep = episode(seed, 1, 32);
        let mask = &ep.supports[0].mask;
        let r = encode(&ep.supports[0].image, &p).unwrap();
        let t = tune_support_features(&r, mask, &p, 1e-3, 1).unwrap();
        let after = self_segment(&t.features, mask, &p).unwrap().loss;
        decreased += (after < t.self_seg.loss) as usize;
    }
    assert!(decreased >= 190, "{decreased}/200");
}

/// Self-segmentation loss at `features`, evaluated on a fresh graph.
fn loss_at(features: &Tensor, mask: &Tensor, p: &ParameterStore) -> f64 {
    self_segment(features, mask, p).unwrap().loss as f64
}

#[test]
fn gradient_map_matches_finite_differences() {
    let p = params(11);
    let ep = episode(5, 1, 32);
    let mask = &ep.supports[0].mask;
    let r = encode(&ep.supports[0].image, &p).unwrap();
    assert_eq!(r.shape(), &[64, 8, 8]);
    let t = tune_support_features(&r, mask, &p, 1.0, 1).unwrap();
    let h = 1e-3f32;
    let mut worst = 0.0f64;
    // Every fifth element keeps the test quick; the acceptance suite covers all.
    for i in (0..r.len()).step_by(5) {
        let mut plus = r.clone();
        plus.data_mut()[i] += h;
        let mut minus = r.clone();
        minus.data_mut()[i] -= h;
        let step = (plus.data()[i] - minus.data()[i]) as f64;
        let numeric = (loss_at(&plus, mask, &p) - loss_at(&minus, mask, &p)) / step;
        let analytic = t.gradient.data()[i] as f64;
        worst = worst.max((analytic - numeric).abs() / (1.0 + analytic.abs()));
    }
    assert!(worst < 1e-3, "worst error {worst}");

    // Directional derivative along the gradient is large enough to compare relatively.
    let norm = t
        .gradient
        .data()
        .iter()
        .map(|&g| (g as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let eps = 1e-2 / norm;
    let shifted = |sign: f64| {
        let mut x = r.clone();
        for (v, g) in x.data_mut().iter_mut().zip(t.gradient.data()) {
            *v += (sign * eps * *g as f64) as f32;
        }
        loss_at(&x, mask, &p)
    };
    let directional = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
    let rel = (directional - norm * norm).abs() / (norm * norm);
    assert!(rel < 2e-2, "directional {directional} vs {}", norm * norm);
}

#[test]
fn query_equal_to_support_reproduces_tuned_self_segmentation() {
    let p = params(2);
    let base = episode(8, 1, 32);
    let shot = base.supports[0].clone();
    let ep = Episode {
        query_image: shot.image.clone(),
        query_mask: shot.mask.clone(),
        ..base
    };
    let out = forward_one_shot(&ep, &p, &ModelSpec::default()).unwrap();
    let t = out.tuning.as_ref().unwrap();
    let own = post_tuning_self_segment(&out.support_features, &t.features, &shot.mask, &p).unwrap();
    assert!(out.query.bitwise_eq(&own));
}

fn replicated(ep: &Episode) -> Episode {
    let shot = ep.supports[0].clone();
    Episode {
        supports: vec![shot; 5],
        ..ep.clone()
    }
}

#[test]
fn identical_supports_make_fusion_modes_agree() {
    let p = params(4);
    let ep = replicated(&episode(3, 1, 32));
    let spec = ModelSpec::default();
    let single = forward_one_shot(
        &Episode {
            supports: vec![ep.supports[0].clone()],
            ..ep.clone()
        },
        &p,
        &spec,
    )
    .unwrap();
    for mode in FusionMode::ALL {
        let fused = fuse_five_shot(&ep, &p, &spec, mode).unwrap();
        assert!(fused.bitwise_eq(&single.query), "{mode:?}");
    }
}

#[test]
fn equal_scores_make_weighted_equal_average() {
    let p = params(6);
    let ep = episode(7, 5, 32);
    let shots = multi_shot_relations(&ep, &p, &ModelSpec::default()).unwrap();
    let equal = vec![0.37; 5];
    let w = fuse_relations(&shots.relations, &equal, FusionMode::Weighted).unwrap();
    let a = fuse_relations(&shots.relations, &equal, FusionMode::Average).unwrap();
    assert!(w.bitwise_eq(&a));
}

#[test]
fn untrained_self_segmentation_loss_envelope() {
    let bound = 5.0 * std::f32::consts::LN_2;
    let ep = episode(1, 1, 32);
    for seed in 0..100 {
        let p = params(seed);
        let r = encode(&ep.supports[0].image, &p).unwrap();
        let l = self_segment(&r, &ep.supports[0].mask, &p).unwrap().loss;
        assert!(l > 0.0 && l <= bound, "seed {seed}: {l}");
    }
}

#[test]
fn dedicated_steps_overfit_one_support() {
    let mut p = params(0);
    let ep = episode(2, 1, 32);
    let shot: &Shot = &ep.supports[0];
    let opt = OptimizerConfig {
        learning_rate: 0.01,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut last = f32::INFINITY;
    for _ in 0..200 {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(shot.image.clone());
        let r = sst_core::model::encode_in(&mut g, &bound, x).unwrap();
        let (_, loss, _) = self_segment_in(&mut g, &bound, r, &shot.mask).unwrap();
        last = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        p.accumulate_grads(&bound, &grads);
        sgd_step(&mut p, &opt).unwrap();
    }
    let r = encode(&shot.image, &p).unwrap();
    let final_loss = self_segment(&r, &shot.mask, &p).unwrap().loss;
    assert!(final_loss < 0.05, "loss {final_loss} (last step {last})");
}

#[test]
fn descriptor_of_full_mask_is_tiled_mean() {
    let p = params(1);
    let ep = episode(4, 1, 32);
    let r = encode(&ep.query_image, &p).unwrap();
    let d = build_descriptor(&r, &Tensor::full(&[1, 32, 32], 1.0)).unwrap();
    let plane = 64;
    for c in 0..64 {
        let mean = r.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / plane as f64;
        let row = &d.features.data()[c * plane..(c + 1) * plane];
        assert!(row.iter().all(|&v| v == row[0]));
        assert!((row[0] as f64 - mean).abs() < 1e-5);
    }
}

#[test]
fn non_finite_features_are_reported() {
    let p = params(1);
    let ep = episode(4, 1, 32);
    let mut r = encode(&ep.supports[0].image, &p).unwrap();
    r.data_mut()[0] = f32::NAN;
    let err = tune_support_features(&r, &ep.supports[0].mask, &p, 1.0, 1).unwrap_err();
    assert!(matches!(err, ModelError::NonFiniteGradient), "{err}");
}

#[test]
fn shot_count_is_checked() {
    let p = params(1);
    let ep = episode(4, 5, 32);
    assert!(forward_one_shot(&ep, &p, &ModelSpec::default()).is_err());
    let one = episode(4, 1, 32);
    assert!(fuse_five_shot(&one, &p, &ModelSpec::default(), FusionMode::Average).is_err());
}
