//! Invariants checked over generated inputs.

use std::path::Path;

use absorb_core::analysis::{metric_m, MetricVariant};
use absorb_core::io::{from_json, to_json};
use absorb_core::probes::{self, match_latents_to_probe, ClassMetrics, LabeledData, ProbeConfig, ProbeKind, ProbeModel};
use absorb_core::sae::{Nonlinearity, SaeModel};
use absorb_core::synthgen::{make_dictionary, sample_batch, split_tags, FeatureDictionary, FiringSpec, Split};
use absorb_core::theory::{case_activations, sparsity_loss_closed_form, DeltaSae, FiringCase, HierarchyProbabilities};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn vector(len: usize, range: f64) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(-range..range, len).prop_map(Array1::from)
}

/// A random SAE with `d` inputs and `h` latents plus an `n`-row batch.
fn sae_and_batch(nonlinearity: Nonlinearity) -> impl Strategy<Value = (SaeModel, Array2<f64>)> {
    (1usize..6, 1usize..6, 1usize..8).prop_flat_map(move |(d, h, n)| {
        let nl = match nonlinearity {
            Nonlinearity::BatchTopK { .. } => Nonlinearity::BatchTopK { k: h.min(2) },
            relu => relu,
        };
        (matrix(h, d, 2.0), vector(h, 1.0), matrix(h, d, 2.0), vector(d, 1.0), matrix(n, d, 3.0))
            .prop_map(move |(we, be, wd, bd, x)| (SaeModel::new(we, be, wd, bd, nl).unwrap(), x))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dictionaries_are_orthonormal_and_reproducible(dim in 1usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let count = 1 + ((dim - 1) as f64 * frac) as usize;
        let dict = make_dictionary(dim, count, seed).unwrap();
        prop_assert!(dict.orthonormality_error() <= 1e-12);
        let again = make_dictionary(dim, count, seed).unwrap();
        prop_assert!(dict.directions.iter().zip(again.directions.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let back: FeatureDictionary = from_json(&to_json(&dict).unwrap(), Path::new("mem")).unwrap();
        prop_assert!(back.orthonormality_error() <= 1e-12);
        prop_assert_eq!(back, dict);
    }

    #[test]
    fn strict_children_never_fire_without_parent(
        parent_p in 0.0f64..1.0, cond in 0.0f64..1.0, others in prop::collection::vec(0.0f64..1.0, 2), seed in any::<u64>()
    ) {
        let dict = make_dictionary(6, 4, seed).unwrap();
        let spec = FiringSpec::independent(vec![parent_p, 0.0, others[0], others[1]]).with_child(0, 1, cond, 0.0);
        let batch = sample_batch(&dict, &spec, 300, seed).unwrap();
        for i in 0..batch.len() {
            prop_assert!(!batch.fires(i, 1) || batch.fires(i, 0));
        }
        // activations are firings times directions
        let mut worst: f64 = 0.0;
        for i in 0..batch.len() {
            for j in 0..dict.dim {
                let rebuilt: f64 = (0..dict.count).map(|f| batch.firings[[i, f]] * dict.directions[[f, j]]).sum();
                worst = worst.max((rebuilt - batch.activations[[i, j]]).abs());
            }
        }
        prop_assert!(worst <= 1e-12);
        let again = sample_batch(&dict, &spec, 300, seed).unwrap();
        prop_assert_eq!(again, batch);
    }

    #[test]
    fn split_is_eighty_twenty_and_seeded(n in 1usize..2000, seed in any::<u64>()) {
        let tags = split_tags(n, seed);
        let train = tags.iter().filter(|t| **t == Split::Train).count() as f64;
        prop_assert!((train - 0.8 * n as f64).abs() <= 1.0);
        prop_assert_eq!(split_tags(n, seed), tags);
    }

    #[test]
    fn relu_forward_is_nonnegative_and_exact((sae, x) in sae_and_batch(Nonlinearity::Relu)) {
        let acts = sae.forward(x.view()).unwrap();
        prop_assert!(acts.latents.iter().all(|&z| z >= 0.0));
        let rebuilt = &acts.reconstruction + &acts.error;
        prop_assert!(rebuilt.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
        let report = sae.loss(x.view(), 0.37).unwrap();
        prop_assert_eq!(report.total, report.recon_mse + 0.37 * report.sparsity_l1);
    }

    #[test]
    fn batch_topk_respects_its_budget((sae, x) in sae_and_batch(Nonlinearity::BatchTopK { k: 1 })) {
        let Nonlinearity::BatchTopK { k } = sae.nonlinearity else { unreachable!() };
        let z = sae.encode(x.view()).unwrap();
        prop_assert!(z.iter().filter(|&&v| v != 0.0).count() <= k * x.nrows());
        prop_assert!(z.iter().all(|&v| v >= 0.0));
        let report = sae.loss(x.view(), 5.0).unwrap();
        prop_assert_eq!(report.total, report.recon_mse);
    }

    #[test]
    fn decode_is_affine(
        (sae, _) in sae_and_batch(Nonlinearity::Relu), alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>()
    ) {
        let h = sae.width();
        let z1 = Array2::from_shape_fn((1, h), |(_, j)| ((seed >> (j % 60)) & 7) as f64 / 3.0);
        let z2 = Array2::from_shape_fn((1, h), |(_, j)| ((seed >> ((j + 3) % 60)) & 5) as f64 / 2.0);
        let mixed = sae.decode((&z1 * alpha + &z2 * beta).view()).unwrap();
        let combo = sae.decode(z1.view()).unwrap() * alpha + sae.decode(z2.view()).unwrap() * beta - &sae.b_dec * (alpha + beta - 1.0);
        prop_assert!(mixed.iter().zip(combo.iter()).all(|(a, b)| (a - b).abs() <= 1e-10));
    }

    #[test]
    fn latent_matching_ignores_positive_rescaling((sae, _) in sae_and_batch(Nonlinearity::Relu), scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let probe = ProbeModel {
            weights: sae.w_enc.mapv(|v| v + 0.3),
            bias: Array1::zeros(sae.width()),
            l1_coeff: 0.0,
            kind: ProbeKind::OneVsRest,
            feature_mask: None,
        };
        let mut scaled = sae.clone();
        for (mut row, s) in scaled.w_enc.outer_iter_mut().zip(scales.iter().cycle()) {
            row *= *s;
        }
        let a: Vec<usize> = match_latents_to_probe(&sae, &probe).unwrap().iter().map(|m| m.latent).collect();
        let b: Vec<usize> = match_latents_to_probe(&scaled, &probe).unwrap().iter().map(|m| m.latent).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metric_is_shift_invariant_and_max_is_stricter(logits in prop::collection::vec(-5.0f64..5.0, 2..8), shift in -3.0f64..3.0, pick in any::<prop::sample::Index>()) {
        let g = Array1::from(logits);
        let y = pick.index(g.len());
        let mean = metric_m(g.view(), y, MetricVariant::Mean).unwrap();
        let max = metric_m(g.view(), y, MetricVariant::Max).unwrap();
        prop_assert!(max <= mean + 1e-12);
        let shifted = &g + shift;
        prop_assert!((metric_m(shifted.view(), y, MetricVariant::Mean).unwrap() - mean).abs() <= 1e-9);
        prop_assert!((metric_m(shifted.view(), y, MetricVariant::Max).unwrap() - max).abs() <= 1e-9);
    }

    #[test]
    fn f1_is_the_harmonic_mean(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
        let m = ClassMetrics::from_counts(0, tp, fp, fn_, tn);
        prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, tp + fp + fn_ + tn);
        let expected = if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
        prop_assert!((m.f1 - expected).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn delta_sae_reconstructs_every_case(delta in 0.0f64..=1.0, dim in 2usize..20, seed in any::<u64>()) {
        let dsae = DeltaSae::new(delta, dim, seed).unwrap();
        for case in FiringCase::ALL {
            prop_assert!(case_activations(&dsae, case).unwrap().reconstruction_error_norm <= 1e-9);
        }
        let both = case_activations(&dsae, FiringCase::Both).unwrap();
        prop_assert!((both.z1 - (1.0 - delta)).abs() <= 1e-12 && (both.z2 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn closed_form_loss_is_bounded_by_its_endpoints(p11 in 0.0f64..0.5, p10 in 0.0f64..0.5, delta in 0.0f64..=1.0) {
        let probs = HierarchyProbabilities::new(p11, p10).unwrap();
        let v = sparsity_loss_closed_form(probs, delta).unwrap();
        prop_assert!(v <= 2.0 * p11 + p10 + 1e-15 && v >= p11 + p10 - 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn masked_probes_use_at_most_k_coordinates(k in 1usize..4, seed in any::<u64>()) {
        let dict = make_dictionary(5, 5, seed).unwrap();
        let spec = FiringSpec::independent(vec![0.0, 0.0, 0.0, 0.5, 0.5]).with_group(None, vec![0, 1, 2], vec![0.4, 0.3, 0.3]);
        let batch = absorb_core::synthgen::make_labeled_task(&dict, &spec, 3, 600, seed).unwrap();
        let data = LabeledData::from_batch(&batch, 3).unwrap();
        let cfg = ProbeConfig { max_iters: 60, ..ProbeConfig::default() };
        let selector = probes::train_probe(&data, 0.01, &cfg).unwrap();
        let mask = probes::select_k_sparse(&selector, k).unwrap();
        let probe = probes::train_masked_probe(&data, &mask, &cfg).unwrap();
        prop_assert!(probe.nonzero_weights() <= k * 3);
        for (c, row) in probe.weights.outer_iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                prop_assert!(w == 0.0 || mask[c].contains(&j));
            }
        }
        // deterministic refit
        prop_assert_eq!(probes::train_masked_probe(&data, &mask, &cfg).unwrap(), probe);
    }
}
