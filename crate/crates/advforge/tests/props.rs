//! Randomized invariant checks over the numeric core.

use advforge::attack::{craft_dataset, fgsm, mssim, AttackConfig};
use advforge::data::{build_mixed_dataset, synth_blobs, MixedBuildConfig, SizeMode};
use advforge::nn::{forward, init_network, predict, NetworkSpec};
use advforge::tensor::Tensor;
use proptest::prelude::*;

fn unit_tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..=1.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(batch in unit_tensor(5, 12), seed in 0u64..1000) {
        let spec = NetworkSpec::mlp(&[12, 8, 4]).unwrap();
        let net = init_network(&spec, seed).unwrap();
        let (probs, picks) = predict(&net, &batch).unwrap();
        for i in 0..probs.rows() {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!(picks[i] < 4);
        }
    }

    #[test]
    fn fgsm_respects_the_infinity_norm_and_the_box(
        batch in unit_tensor(4, 16),
        eps in 0.0f64..0.5,
        seed in 0u64..1000,
    ) {
        let spec = NetworkSpec::mlp(&[16, 8, 3]).unwrap();
        let net = init_network(&spec, seed).unwrap();
        let labels = vec![0usize, 1, 2, 0];
        let adv = fgsm(&net, &batch, &labels, &AttackConfig::new(eps)).unwrap();
        for (a, x) in adv.data().iter().zip(batch.data()) {
            prop_assert!((a - x).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn mssim_is_symmetric_and_one_on_identity(a in unit_tensor(8, 8), b in unit_tensor(8, 8)) {
        let aa = mssim(&a, &a).unwrap();
        prop_assert_eq!(aa, 1.0);
        let ab = mssim(&a, &b).unwrap();
        let ba = mssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn forward_is_deterministic(batch in unit_tensor(3, 12), seed in 0u64..1000) {
        let spec = NetworkSpec::mlp(&[12, 6, 3]).unwrap();
        let net = init_network(&spec, seed).unwrap();
        let a = forward(&net, &batch).unwrap();
        let b = forward(&net, &batch).unwrap();
        prop_assert_eq!(a.logits().data(), b.logits().data());
    }

    #[test]
    fn mixed_full_size_is_clean_plus_s_copies(
        s in 1usize..4,
        seed in 0u64..1000,
    ) {
        let clean = synth_blobs(3, 20, 16, 4.0, seed).unwrap();
        let spec = NetworkSpec::mlp(&[16, 8, 3]).unwrap();
        let net = init_network(&spec, seed).unwrap();
        let strengths: Vec<f64> = (1..=s).map(|k| 0.05 * k as f64).collect();
        let adv: Vec<_> = strengths
            .iter()
            .map(|&e| craft_dataset(&net, &clean, &AttackConfig::new(e)).unwrap())
            .collect();
        let cfg = MixedBuildConfig {
            strengths,
            size_mode: SizeMode::Full,
            seed,
        };
        let mixed = build_mixed_dataset(&clean, &adv, &cfg).unwrap();
        prop_assert_eq!(mixed.len(), clean.len() * (1 + s));
    }
}
