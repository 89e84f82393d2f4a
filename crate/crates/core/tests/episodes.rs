use proptest::prelude::*;
use sst_core::episodes::{
    generate_instance, make_fold, sample_episode, FoldStride, Mode, ShapeClass, DEFAULT_IMAGE_SIZE, MAX_AREA_FRACTION,
    MIN_AREA_FRACTION,
};

#[test]
fn thousand_episodes_satisfy_invariants() {
    let mut rng_seed = 0u64;
    for fold in 0..4 {
        let split = make_fold(fold, FoldStride::Five).unwrap();
        for i in 0..250u64 {
            rng_seed = rng_seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407 + i);
            let mode = if i % 2 == 0 { Mode::Train } else { Mode::Test };
            let k = if i % 5 == 0 { 5 } else { 1 };
            let ep = sample_episode(&split, mode, k, rng_seed, DEFAULT_IMAGE_SIZE).unwrap();
            ep.validate().unwrap();
            assert_eq!(ep.shots(), k);
            assert!(split.classes(mode).contains(&ep.class_id));
            let masks = std::iter::once(&ep.query_mask).chain(ep.supports.iter().map(|s| &s.mask));
            for m in masks {
                let frac = m.data().iter().sum::<f32>() / m.len() as f32;
                assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac), "area {frac}");
            }
        }
    }
}

#[test]
fn test_class_frequencies_are_balanced() {
    let split = make_fold(0, FoldStride::Five).unwrap();
    let draw = || -> Vec<u8> {
        (0..1000u64)
            .map(|s| sample_episode(&split, Mode::Test, 1, s, (32, 32)).unwrap().class_id)
            .collect()
    };
    let a = draw();
    assert_eq!(a, draw());
    for class in 1..=5u8 {
        let n = a.iter().filter(|&&c| c == class).count();
        assert!((150..=250).contains(&n), "class {class}: {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_are_disjoint_and_cover(fold in 0u8..4, four in any::<bool>()) {
        let stride = if four { FoldStride::Four } else { FoldStride::Five };
        let split = make_fold(fold, stride).unwrap();
        prop_assert_eq!(split.test_classes.len(), 5);
        prop_assert_eq!(split.train_classes.len(), 15);
        let mut all: Vec<u8> = split.test_classes.iter().chain(&split.train_classes).copied().collect();
        all.sort();
        prop_assert_eq!(all, (1..=20).collect::<Vec<u8>>());
    }

    #[test]
    fn instances_are_deterministic_and_in_range(
        class_id in 1u8..=20,
        seed in any::<u64>(),
        h in 32usize..80,
        w in 32usize..80,
    ) {
        let class = ShapeClass::get(class_id).unwrap();
        let (img, mask) = generate_instance(&class, seed, (h, w)).unwrap();
        let (img2, mask2) = generate_instance(&class, seed, (h, w)).unwrap();
        prop_assert!(img.bitwise_eq(&img2) && mask.bitwise_eq(&mask2));
        prop_assert_eq!(img.shape(), &[3, h, w]);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let frac = mask.data().iter().sum::<f32>() / (h * w) as f32;
        prop_assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac));
    }

    #[test]
    fn train_mode_never_yields_test_classes(fold in 0u8..4, seed in any::<u64>()) {
        let split = make_fold(fold, FoldStride::Four).unwrap();
        let ep = sample_episode(&split, Mode::Train, 1, seed, (32, 32)).unwrap();
        prop_assert!(!split.test_classes.contains(&ep.class_id));
        let ep = sample_episode(&split, Mode::Test, 1, seed, (32, 32)).unwrap();
        prop_assert!(split.test_classes.contains(&ep.class_id));
    }
}
