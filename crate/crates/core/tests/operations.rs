//! End-to-end behaviour of the analysis operations on constructed and
//! trained worlds.

use std::collections::BTreeSet;
use std::path::Path;

use absorb_core::analysis::{
    absorption_alt_with_splits, detect_splitting, edit_class, AbsorptionConfig, AbsorptionReport, ClassLatents, SplitConfig,
};
use absorb_core::io::{self, from_json, to_json};
use absorb_core::probes::{self, evaluate, Classifier, LabeledData, ProbeConfig};
use absorb_core::sae::{Nonlinearity, SaeModel};
use absorb_core::scenarios::{
    audit_labeled, materialize, run_scenario, run_sweep, ExperimentConfig, LabeledAudit, Scenario, SweepAxis, SweepSpec, World, WorldData,
};
use absorb_core::synthgen::{make_dictionary, make_labeled_task, sample_batch, FiringSpec, Split};
use absorb_core::trainer::{train, DecoderNormPolicy, SaeShape, TrainConfig};
use ndarray::Axis;

fn delta_world(delta: f64, eval_samples: usize) -> (ExperimentConfig, WorldData) {
    let mut cfg = ExperimentConfig::preset(Scenario::DeltaWorld, 0);
    if let World::Delta { world, eval_samples: n, .. } = &mut cfg.world {
        world.delta = delta;
        *n = eval_samples;
    }
    cfg.absorption.fn_sample_cap = usize::MAX;
    let data = materialize(&cfg).unwrap();
    (cfg, data)
}

fn audit(cfg: &ExperimentConfig, data: &WorldData) -> LabeledAudit {
    audit_labeled(data.constructed.as_ref().unwrap(), &data.eval, data.classes, cfg).unwrap()
}

fn rates_are_bounded(report: &AbsorptionReport) -> bool {
    report.classes.iter().filter_map(|c| c.absorption_rate).all(|r| (0.0..=1.0).contains(&r))
}

/// Children of the parent class in the default constructed world.
fn both_firing(data: &WorldData, row: usize) -> bool {
    data.eval.fires(row, 0) && (10..20).any(|c| data.eval.fires(row, c))
}

#[test]
fn delta_sweep_flips_verdicts_from_none_to_every_both_firing_sample() {
    for delta in [0.0, 0.5] {
        let (cfg, data) = delta_world(delta, 20_000);
        let a = audit(&cfg, &data);
        for report in [&a.main, a.alt.as_ref().unwrap()] {
            assert!(report.classes.iter().all(|c| c.absorption_count == 0), "δ = {delta}");
            assert!(rates_are_bounded(report));
        }
        assert_eq!(a.main.class(0).unwrap().false_negative_count, 0, "δ = {delta}");
    }

    let (cfg, data) = delta_world(1.0, 20_000);
    let a = audit(&cfg, &data);
    let parent = a.main.class(0).unwrap();
    let flagged: BTreeSet<usize> = parent.verdicts.iter().filter(|v| v.absorbed).map(|v| v.sample_id).collect();
    let expected: BTreeSet<usize> = data.eval.rows_in(Split::Test).into_iter().filter(|&i| both_firing(&data, i)).collect();
    assert_eq!(parent.true_positives, data.eval.rows_in(Split::Test).iter().filter(|&&i| data.eval.fires(i, 0)).count());
    assert_eq!(flagged, expected);
    assert_eq!(parent.sampled_count, parent.false_negative_count);
    assert!(rates_are_bounded(&a.main) && rates_are_bounded(a.alt.as_ref().unwrap()));

    // persisted report keeps its canonical JSON form
    let text = to_json(&a.main).unwrap();
    let back: AbsorptionReport = from_json(&text, Path::new("mem")).unwrap();
    assert_eq!(to_json(&back).unwrap(), text);
}

#[test]
fn parent_latent_recall_under_full_absorption() {
    let (_, data) = delta_world(1.0, 20_000);
    let sae = data.constructed.as_ref().unwrap();
    let latents = LabeledData::from_batch(&data.eval, data.classes).unwrap().latents(sae).unwrap();
    let report = evaluate(Classifier::Latent { column: 0, class: 0, threshold: 0.0 }, &latents).unwrap();
    let m = &report.per_class[0];
    let (p11, p10) = (0.05, 0.20);
    let expected = p10 / (p10 + p11);
    let positives = (m.tp + m.fn_) as f64;
    let sigma = (expected * (1.0 - expected) / positives).sqrt();
    assert_eq!(m.precision, 1.0);
    assert!((m.recall - expected).abs() <= 3.0 * sigma, "recall {} vs {expected} ± {}", m.recall, 3.0 * sigma);
}

#[test]
fn edits_on_a_clean_world_move_probability_between_classes() {
    let (cfg, data) = delta_world(0.0, 20_000);
    let sae = data.constructed.as_ref().unwrap();
    let a = audit(&cfg, &data);
    let map = probes::match_latents_to_probe(sae, &a.probe).unwrap().into_iter().map(|m| Some(m.latent)).collect();
    let class_latents = ClassLatents::estimate(&a.data.latents(sae).unwrap(), map).unwrap();
    let rows: Vec<usize> = data.eval.rows_in(Split::Test).into_iter().filter(|&i| a.data.labels[i] == 3).take(200).collect();
    let success = rows
        .iter()
        .filter(|&&i| {
            let (drop, rise) = edit_class(sae, &a.readout, a.data.inputs.row(i), 3, 5, &class_latents).unwrap();
            drop > 0.0 && rise > 0.0
        })
        .count();
    assert!(success as f64 >= 0.9 * rows.len() as f64, "{success} of {}", rows.len());
    let (same_drop, same_rise) = edit_class(sae, &a.readout, a.data.inputs.row(rows[0]), 3, 3, &class_latents).unwrap();
    assert_eq!((same_drop, same_rise), (0.0, 0.0));
}

#[test]
fn three_sub_features_split_a_class_three_ways() {
    let dict = make_dictionary(10, 8, 5).unwrap();
    let spec = FiringSpec::independent(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5])
        .with_group(None, vec![0, 1, 2], vec![1.0 / 3.0; 3])
        .with_group(Some(0), vec![3, 4, 5], vec![1.0 / 3.0; 3]);
    let batch = make_labeled_task(&dict, &spec, 3, 6000, 5).unwrap();
    // ground-truth latents: the three sub-features plus two uninformative spectators.
    // Other-class indicators would identify class 0 by elimination.
    let inputs = batch.firings.select(Axis(1), &[3, 4, 5, 6, 7]);
    let data = LabeledData::from_batch(&batch, 3).unwrap().with_inputs(inputs).unwrap();
    let splits = detect_splitting(&data, &SplitConfig::default()).unwrap();
    assert_eq!(splits[0].split_k, 3, "{:?}", splits[0]);
    let mut picked = splits[0].latents.clone();
    picked.sort_unstable();
    assert_eq!(picked, vec![0, 1, 2]);
}

#[test]
fn split_scenario_curves_jump_once_and_stay_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::preset(Scenario::ToySplit, 0);
    let outcome = run_scenario(&cfg, dir.path()).unwrap();
    assert!(outcome.checks.iter().find(|c| c.name == "selection_tracks_subfeatures").unwrap().passed);
    let sae: SaeModel = io::load_json(&dir.path().join("sae.json")).unwrap();
    let data = materialize(&cfg).unwrap();
    let latents = LabeledData::from_batch(&data.eval, 3).unwrap().latents(&sae).unwrap();
    let curve = probes::k_sparse_curve(&latents, 5, probes::DEFAULT_SELECTION_L1, &ProbeConfig::default()).unwrap();
    let f1 = |class: usize, k: usize| curve[k - 1].per_class_f1[class];
    assert!(f1(0, 2) - f1(0, 1) >= 0.03);
    for k in 2..5 {
        assert!((f1(0, k + 1) - f1(0, k)).abs() <= 0.01, "class 0 k={k}");
    }
    for class in [1, 2] {
        for k in 1..5 {
            assert!((f1(class, k + 1) - f1(class, k)).abs() < 0.03, "class {class} k={k}");
        }
    }
}

#[test]
fn sae_round_trip_encodes_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let dict = make_dictionary(12, 4, 2).unwrap();
    let spec = FiringSpec::independent(vec![0.3; 4]);
    let cfg = TrainConfig { total_samples: 20_000, learning_rate: 1e-3, l1_coeff: 1e-2, ..TrainConfig::default() };
    let shape = SaeShape { width: 4, nonlinearity: Nonlinearity::Relu };
    let sae = train(&dict, &spec, shape, &cfg).unwrap().model;
    let path = dir.path().join("sae.json");
    io::save_json(&path, &sae).unwrap();
    let back: SaeModel = io::load_json(&path).unwrap();
    let batch = sample_batch(&dict, &spec, 500, 9).unwrap();
    let (a, b) = (sae.encode(batch.activations.view()).unwrap(), back.encode(batch.activations.view()).unwrap());
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn shipped_training_runs_reduce_their_loss() {
    for scenario in Scenario::ALL {
        let cfg = ExperimentConfig::preset(scenario, 0);
        let World::Trained { shape, train: t, .. } = &cfg.world else { continue };
        let data = materialize(&cfg).unwrap();
        let trace = train(&data.dict, &data.firing, *shape, t).unwrap();
        let totals: Vec<f64> = trace.checkpoints.iter().map(|c| c.report.total).collect();
        let window = (totals.len() / 10).max(1);
        let head = totals[..window].iter().sum::<f64>() / window as f64;
        let tail = totals[totals.len() - window..].iter().sum::<f64>() / window as f64;
        assert!(tail <= head, "{scenario}: {tail} > {head}");
        assert!(trace.checkpoints.windows(2).all(|w| w[0].step < w[1].step));
    }
}

#[test]
fn l1_sweep_lowers_l0_and_width_sweep_records_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = ExperimentConfig::preset(Scenario::ToyHierarchical, 0);
    if let World::Trained { train, .. } = &mut base.world {
        train.total_samples = 300_000;
    }
    let spec = SweepSpec { base, axis: SweepAxis::L1Coeff, values: vec![1e-3, 1e-2, 1e-1] };
    let points = run_sweep(&spec, &dir.path().join("l1")).unwrap();
    let l0: Vec<f64> = points.iter().map(|p| p.l0_mean.unwrap()).collect();
    assert!(l0.windows(2).all(|w| w[1] <= w[0]), "{l0:?}");
    let csv = std::fs::read_to_string(dir.path().join("l1/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let mut base = ExperimentConfig::preset(Scenario::ToySplit, 0);
    if let World::Trained { train, .. } = &mut base.world {
        train.total_samples = 300_000;
    }
    let spec = SweepSpec { base, axis: SweepAxis::Width, values: vec![4.0, 8.0, 16.0] };
    let points = run_sweep(&spec, &dir.path().join("width")).unwrap();
    for p in &points {
        assert!(p.error.is_none(), "{:?}", p.error);
        assert_eq!(p.split_k.len(), 3);
        assert!(p.split_k.iter().all(|&k| k >= 1));
    }
}

#[test]
fn raising_main_tolerance_flags_weak_parent_firing() {
    // parent class with magnitude variance and a strict child; the other class fills the remaining rows
    let dict = make_dictionary(20, 5, 0).unwrap();
    let spec = FiringSpec::independent(vec![0.0, 0.0, 0.0, 0.05, 0.05])
        .with_group(None, vec![0, 1], vec![0.25, 0.75])
        .with_child(0, 2, 0.2, 0.0)
        .with_magnitude(0, 1.0, 0.1f64.sqrt());
    let train_cfg = TrainConfig {
        l1_coeff: 1e-2,
        learning_rate: 1e-3,
        total_samples: 2_000_000,
        decoder_norm_policy: DecoderNormPolicy::UnitRenormEachStep,
        ..TrainConfig::default()
    };
    let shape = SaeShape { width: 5, nonlinearity: Nonlinearity::Relu };
    let sae = train(&dict, &spec, shape, &train_cfg).unwrap().model;
    let batch = make_labeled_task(&dict, &spec, 2, 20_000, 1).unwrap();
    let data = LabeledData::from_batch(&batch, 2).unwrap();
    let probe = probes::train_probe(&data, 0.0, &ProbeConfig::default()).unwrap();
    let cfg = AbsorptionConfig::default();
    let splits = detect_splitting(&data.latents(&sae).unwrap(), &cfg.split_config()).unwrap();
    let count = |tau_m: f64| {
        let mut c = cfg.clone();
        c.alt_metric.as_mut().unwrap().tau_m = tau_m;
        absorption_alt_with_splits(&sae, &probe, &data, &splits, &c).unwrap().class(0).unwrap().absorption_count
    };
    let (strict, loose) = (count(0.0), count(0.3));
    assert!(loose > strict, "τ_m = 0.3 flags {loose}, τ_m = 0 flags {strict}");
}

#[test]
fn theory_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_scenario(&ExperimentConfig::preset(Scenario::TheoryVerify, 0), dir.path()).unwrap();
    assert!(outcome.passed);
    assert!(dir.path().join("theory.json").exists());
}

#[test]
fn sampled_rates_match_the_firing_spec() {
    let n = 100_000;
    let dict = make_dictionary(8, 4, 0).unwrap();
    let spec = FiringSpec::independent(vec![0.25, 0.0, 0.05, 0.05]).with_child(0, 1, 0.2, 0.0);
    let batch = sample_batch(&dict, &spec, n, 0).unwrap();
    for (feature, p) in [(0, 0.25), (1, 0.05), (2, 0.05), (3, 0.05)] {
        let rate = (0..n).filter(|&i| batch.fires(i, feature)).count() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() <= 3.0 * sigma, "feature {feature}: {rate} vs {p}");
    }
}

#[test]
fn labels_follow_the_class_group() {
    let n = 20_000;
    let dict = make_dictionary(4, 3, 1).unwrap();
    let two = FiringSpec::independent(vec![0.0, 0.0, 0.1]).with_group(None, vec![0, 1], vec![0.5, 0.5]);
    let labels = make_labeled_task(&dict, &two, 2, n, 1).unwrap().labels.unwrap();
    let ones = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
    assert!((ones - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "{ones}");

    let one = FiringSpec::independent(vec![0.0, 0.1, 0.1]).with_group(None, vec![0], vec![1.0]);
    let labels = make_labeled_task(&dict, &one, 1, 500, 1).unwrap().labels.unwrap();
    assert!(labels.iter().all(|&l| l == 0));
}
