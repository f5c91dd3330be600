mod common;

use lorot::data::{imbalance_counts, ImbalanceSpec};
use lorot::eval::{auroc, kl_to_uniform, max_softmax};
use lorot::model::{DualHeadModel, InputSpec, ModelSpec, PoolingMode};
use lorot::nn::BackboneSpec;
use lorot::train::{pgd_attack, PgdConfig};
use lorot::transforms::{sample_patch_i, transform_sample, PretextTask, Variant};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

proptest! {
    #[test]
    fn rotation_is_a_patch_local_permutation(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        prop_assert_eq!(common::transform_case(&mut rng), Ok(()));
    }

    #[test]
    fn lorot_e_labels_are_a_bijection(seed in any::<u64>(), half in 2usize..10, channels in 1usize..4) {
        let mut rng = StdRng::seed_from_u64(seed);
        let img = common::random_image(&mut rng, 2 * half, channels);
        prop_assert_eq!(common::check_lorot_e_labels(&img, &mut rng), Ok(()));
    }

    #[test]
    fn lorot_i_patches_stay_in_range(seed in any::<u64>(), side in 4usize..40) {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = sample_patch_i(&mut rng, side, side).unwrap();
        prop_assert!(p.side >= 2 && p.side <= side / 2);
        prop_assert!(p.top_x + p.side <= side && p.top_y + p.side <= side);
    }

    #[test]
    fn sampled_transforms_keep_the_primary_label(seed in any::<u64>(), label in 0usize..10) {
        let mut rng = StdRng::seed_from_u64(seed);
        let img = common::random_image(&mut rng, 8, 3);
        for v in [Variant::LoRotI, Variant::LoRotE, Variant::GlobalRotation] {
            let task = PretextTask::new(v);
            let s = transform_sample(&img, label, &task, &mut rng).unwrap();
            prop_assert_eq!(s.primary_label, label);
            prop_assert!(s.pretext_label.index() < task.num_classes());
            prop_assert_eq!(common::check_rotation_case(&img, &s.patch, s.pretext_label.rotation()), Ok(()));
        }
    }

    #[test]
    fn auroc_matches_pair_counting(seed in any::<u64>(), n in 1usize..40, m in 1usize..40) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = common::tied_scores(&mut rng, n);
        let b = common::tied_scores(&mut rng, m);
        let fast = auroc(&a, &b).unwrap();
        prop_assert_eq!(fast, common::pair_count_auroc(&a, &b));
        let swapped = auroc(&b, &a).unwrap();
        prop_assert_eq!(swapped, common::pair_count_auroc(&b, &a));
        prop_assert!((swapped - (1.0 - fast)).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_rescaling(seed in any::<u64>(), n in 1usize..30, m in 1usize..30) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = common::tied_scores(&mut rng, n);
        let b = common::tied_scores(&mut rng, m);
        let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() + 1.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&a, &b).unwrap(), auroc(&f(&a), &f(&b)).unwrap());
    }

    #[test]
    fn kl_to_uniform_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-3;
        let mut row: Vec<f64> = raw.iter().map(|x| (x + 1e-3 / raw.len() as f64) / total).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        let kl = kl_to_uniform(&row).unwrap();
        let c = row.len() as f64;
        prop_assert!(kl >= 0.0);
        prop_assert!(kl <= c.ln() + 1e-9);
        let msp = max_softmax(&row).unwrap();
        prop_assert!(msp >= 1.0 / c - 1e-12 && msp <= 1.0 + 1e-12);
    }

    #[test]
    fn imbalance_counts_follow_the_exponential_profile(
        per_class in 1usize..3000,
        mu in 0.001f64..1.0,
        classes in 2usize..20,
    ) {
        let counts = imbalance_counts(&vec![per_class; classes], &ImbalanceSpec::exponential(mu)).unwrap();
        prop_assert_eq!(counts[0], per_class);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        for (i, &c) in counts.iter().enumerate() {
            let exact = per_class as f64 * mu.powf(i as f64 / (classes - 1) as f64);
            prop_assert!(c >= 1 && c <= per_class);
            prop_assert!(c as f64 <= exact.max(1.0) + 1e-9 && c as f64 > exact - 1.0 - 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn multitask_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (worst, params) = common::gradient_check(&mut rng, 40);
        prop_assert!(params <= 1000);
        prop_assert!(worst < 1e-5, "relative error {}", worst);
    }

    #[test]
    fn pgd_stays_in_the_feasible_set(seed in any::<u64>(), eps_255 in 0u32..16, steps in 0usize..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let spec = ModelSpec {
            backbone: BackboneSpec::Reference { channels: vec![4] },
            input: InputSpec { mean: vec![0.5; 3], std: vec![0.25; 3], ..InputSpec::unnormalized(8, 8, 3) },
            num_classes: 4,
            pretext_classes: 4,
            primary_pooling: PoolingMode::Gap,
            pretext_pooling: PoolingMode::Gap,
        };
        let model = DualHeadModel::<f32>::new(spec, rng.gen()).unwrap();
        let images = common::random_batch(&mut rng, 6, 8, 3);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        let eps = f64::from(eps_255) / 255.0;
        let cfg = PgdConfig { epsilon: eps, alpha: 2.0 / 255.0, steps, random_start: true };
        let adv = pgd_attack(&model, &images, &labels, &cfg, &mut rng).unwrap();
        for (a, x) in adv.iter().zip(&images) {
            for (&p, &q) in a.data().iter().zip(x.data()) {
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!((f64::from(p) - f64::from(q)).abs() <= eps);
            }
            if eps == 0.0 || steps == 0 {
                prop_assert_eq!(a, x);
            }
        }
    }
}
