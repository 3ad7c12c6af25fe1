//! Absorption detection over a linear readout: cosine maps, the metric `m`,
//! latent ablation, feature-splitting detection, absorption rates and
//! latent-swap editing.
//!
//! The readout is a multinomial probe on raw activations. Everything that
//! feeds it goes through `decode(latents) + error`, where `error` is the SAE
//! reconstruction error of the unedited input, so edits and ablations only
//! change what the SAE contributes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{self, LabeledData, ProbeConfig, ProbeKind, ProbeModel};
use crate::sae::SaeModel;
use crate::synthgen::Split;
use crate::util;

/// Class-logit readout standing in for a downstream model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub probe: ProbeModel,
}

impl Readout {
    pub fn new(probe: ProbeModel) -> Result<Self> {
        if probe.kind != ProbeKind::Multinomial {
            return Err(Error::InvalidArgument("readout must be a multinomial probe".into()));
        }
        if probe.num_classes() < 2 {
            return Err(Error::InvalidArgument("readout needs at least 2 classes".into()));
        }
        if !util::all_finite(probe.weights.iter().chain(probe.bias.iter())) {
            return Err(Error::Probe("readout parameters are not finite".into()));
        }
        Ok(Readout { probe })
    }

    /// Unpenalized multinomial probe on the train split of raw activations.
    pub fn train(data: &LabeledData, cfg: &ProbeConfig) -> Result<Self> {
        let cfg = ProbeConfig { kind: ProbeKind::Multinomial, ..*cfg };
        Self::new(probes::train_probe(data, 0.0, &cfg)?)
    }

    pub fn num_classes(&self) -> usize {
        self.probe.num_classes()
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.probe.input_dim() {
            return Err(Error::Shape(format!(
                "readout expects {} inputs, got {}",
                self.probe.input_dim(),
                x.len()
            )));
        }
        Ok(self.probe.logits(x))
    }

    pub fn probabilities(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(softmax(self.logits(x)?.view()))
    }
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let mx = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let e = logits.mapv(|v| (v - mx).exp());
    let s = e.sum();
    e / s
}

/// `(i, j) = cos(a_i, b_j)`; zero-norm rows give 0.
pub fn cosine_map(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("row widths {} and {} differ", a.ncols(), b.ncols())));
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| util::cosine(a.row(i), b.row(j))))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricVariant {
    /// Correct logit minus the mean of the incorrect ones.
    #[default]
    Mean,
    /// Correct logit minus the largest incorrect one.
    Max,
}

pub fn metric_m(logits: ArrayView1<f64>, correct: usize, variant: MetricVariant) -> Result<f64> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::InvalidArgument("metric needs at least 2 classes".into()));
    }
    if correct >= c {
        return Err(Error::InvalidArgument(format!("class {correct} not among {c} classes")));
    }
    let others = logits.iter().enumerate().filter(|&(i, _)| i != correct).map(|(_, &v)| v);
    let reference = match variant {
        MetricVariant::Mean => others.sum::<f64>() / (c - 1) as f64,
        MetricVariant::Max => others.fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(logits[correct] - reference)
}

fn check_dims(sae: &SaeModel, readout: &Readout) -> Result<()> {
    if sae.input_dim() != readout.probe.input_dim() {
        return Err(Error::Shape(format!(
            "SAE input dim {} vs readout input dim {}",
            sae.input_dim(),
            readout.probe.input_dim()
        )));
    }
    Ok(())
}

/// Drop in `m` when every latent in `ablated` is set to 0, keeping the
/// error term of the unedited row fixed.
pub fn ablate_latents(
    sae: &SaeModel,
    readout: &Readout,
    row: ArrayView1<f64>,
    correct: usize,
    ablated: &[usize],
    variant: MetricVariant,
) -> Result<f64> {
    check_dims(sae, readout)?;
    if let Some(&bad) = ablated.iter().find(|&&l| l >= sae.width()) {
        return Err(Error::InvalidArgument(format!("latent {bad} >= width {}", sae.width())));
    }
    let x = row.insert_axis(Axis(0));
    let acts = sae.forward(x)?;
    let baseline = &acts.reconstruction.row(0) + &acts.error.row(0);
    let before = metric_m(readout.logits(baseline.view())?.view(), correct, variant)?;
    let mut latents = acts.latents.clone();
    for &l in ablated {
        latents[[0, l]] = 0.0;
    }
    let edited = &sae.decode(latents.view())?.row(0) + &acts.error.row(0);
    let after = metric_m(readout.logits(edited.view())?.view(), correct, variant)?;
    Ok(before - after)
}

pub fn ablate_latent(
    sae: &SaeModel,
    readout: &Readout,
    row: ArrayView1<f64>,
    correct: usize,
    latent: usize,
    variant: MetricVariant,
) -> Result<f64> {
    ablate_latents(sae, readout, row, correct, &[latent], variant)
}

/// Precomputed readout response to each decoder row, for ablating every
/// latent of many samples cheaply. The readout is affine, so ablating
/// latent `l` shifts the logits by `-z_l · (W_read d_l)`.
pub struct AblationSweep<'a> {
    readout: &'a Readout,
    /// `C × H`
    response: Array2<f64>,
    variant: MetricVariant,
}

impl<'a> AblationSweep<'a> {
    pub fn new(sae: &SaeModel, readout: &'a Readout, variant: MetricVariant) -> Result<Self> {
        check_dims(sae, readout)?;
        Ok(AblationSweep {
            readout,
            response: readout.probe.weights.dot(&sae.w_dec.t()),
            variant,
        })
    }

    /// Effect of ablating each latent alone. `input` is the row itself,
    /// which equals reconstruction plus error.
    pub fn effects(&self, input: ArrayView1<f64>, latents: ArrayView1<f64>, correct: usize) -> Result<Vec<f64>> {
        if latents.len() != self.response.ncols() {
            return Err(Error::Shape(format!("{} latents for width {}", latents.len(), self.response.ncols())));
        }
        let base = self.readout.logits(input)?;
        let before = metric_m(base.view(), correct, self.variant)?;
        latents
            .iter()
            .enumerate()
            .map(|(l, &z)| {
                if z == 0.0 {
                    return Ok(0.0);
                }
                let shifted = &base - &(&self.response.column(l) * z);
                Ok(before - metric_m(shifted.view(), correct, self.variant)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub tau_split: f64,
    /// Largest k probed; `None` means `min(15, width)`.
    pub k_max: Option<usize>,
    pub selection_l1: f64,
    pub probe: ProbeConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            tau_split: 0.03,
            k_max: None,
            selection_l1: probes::DEFAULT_SELECTION_L1,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub class: usize,
    pub split_k: usize,
    /// Latents selected at `split_k`, by decreasing selection weight.
    pub latents: Vec<usize>,
    /// `f1_curve[k - 1]` is the test F1 of the k-sparse probe, for every k
    /// scanned (up to the first step without a jump).
    pub f1_curve: Vec<f64>,
}

/// Number of latents a class is split across: grow k from 1 while each
/// step raises F1 by more than `tau_split`.
pub fn detect_splitting(latents: &LabeledData, cfg: &SplitConfig) -> Result<Vec<SplitResult>> {
    let width = latents.inputs.ncols();
    let k_max = cfg.k_max.unwrap_or(probes::DEFAULT_K_MAX.min(width));
    if k_max == 0 || k_max > width {
        return Err(Error::InvalidArgument(format!("k_max = {k_max} outside 1..={width}")));
    }
    let selector_cfg = ProbeConfig { kind: ProbeKind::OneVsRest, ..cfg.probe };
    let selector = probes::train_probe(latents, cfg.selection_l1, &selector_cfg)?;
    let ranking = probes::select_k_sparse(&selector, k_max)?;
    ranking
        .into_iter()
        .enumerate()
        .map(|(class, order)| {
            let mut f1_curve = vec![probes::masked_class_f1(latents, class, &order[..1], &cfg.probe)?];
            let mut split_k = 1;
            for k in 2..=k_max {
                let f1 = probes::masked_class_f1(latents, class, &order[..k], &cfg.probe)?;
                let jump = f1 - f1_curve[k - 2];
                f1_curve.push(f1);
                if jump <= cfg.tau_split {
                    break;
                }
                split_k = k;
            }
            Ok(SplitResult {
                class,
                split_k,
                latents: order[..split_k].to_vec(),
                f1_curve,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltMetricConfig {
    /// Minimum probe-projection fraction carried by the absorbing latents.
    pub tau_c: f64,
    /// Maximum fraction the main latents may still carry.
    pub tau_m: f64,
    pub n_absorbers: usize,
    /// Main latents per class; `None` uses all split latents.
    pub n_main: Option<usize>,
}

impl Default for AltMetricConfig {
    fn default() -> Self {
        AltMetricConfig {
            tau_c: 0.5,
            tau_m: 0.0,
            n_absorbers: 1,
            n_main: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionConfig {
    pub tau_split: f64,
    pub tau_cos: f64,
    pub ablation_lead: f64,
    pub fn_sample_cap: usize,
    pub metric_variant: MetricVariant,
    pub alt_metric: Option<AltMetricConfig>,
    pub k_max: Option<usize>,
    pub selection_l1: f64,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for AbsorptionConfig {
    fn default() -> Self {
        AbsorptionConfig {
            tau_split: 0.03,
            tau_cos: 0.025,
            ablation_lead: 1.0,
            fn_sample_cap: 200,
            metric_variant: MetricVariant::Mean,
            alt_metric: Some(AltMetricConfig::default()),
            k_max: None,
            selection_l1: probes::DEFAULT_SELECTION_L1,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl AbsorptionConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.tau_split, self.tau_cos, self.ablation_lead, self.selection_l1];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("absorption thresholds must be finite and nonnegative".into()));
        }
        if let Some(alt) = &self.alt_metric {
            if !(alt.tau_c > 0.0 && alt.tau_c <= 1.0) || !(alt.tau_m >= 0.0) || alt.n_absorbers == 0 || alt.n_main == Some(0) {
                return Err(Error::InvalidArgument(format!("invalid alternate-metric settings {alt:?}")));
            }
        }
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            tau_split: self.tau_split,
            k_max: self.k_max,
            selection_l1: self.selection_l1,
            probe: self.probe,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionMethod {
    Ablation,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    /// Row index in the audited data.
    pub sample_id: usize,
    /// Top-effect latent (ablation) or top candidate absorber (projection).
    pub top_latent: Option<usize>,
    pub effect: Option<f64>,
    pub runner_up_effect: Option<f64>,
    /// Cosine of the top latent's decoder row with the class probe.
    pub probe_cosine: Option<f64>,
    /// Share of the probe projection carried by the top latent (ablation)
    /// or by the top `n_absorbers` candidates (projection).
    pub projection_fraction: Option<f64>,
    /// Share carried by the main (split) latents; projection method only.
    pub main_fraction: Option<f64>,
    pub absorbed: bool,
}

impl SampleVerdict {
    /// Ablation verdict under the given thresholds.
    pub fn judge(&self, tau_cos: f64, ablation_lead: f64) -> bool {
        match (self.effect, self.runner_up_effect, self.probe_cosine) {
            (Some(e), Some(r), Some(c)) => c > tau_cos && e - r >= ablation_lead,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAbsorption {
    pub class: usize,
    pub split_k: usize,
    pub split_latents: Vec<usize>,
    pub true_positives: usize,
    pub false_negative_count: usize,
    pub sampled_count: usize,
    pub absorption_count: usize,
    /// `absorption_count × false_negative_count / sampled_count`.
    pub absorption_count_extrapolated: f64,
    /// Absent when the probe has no true positives for the class.
    pub absorption_rate: Option<f64>,
    /// Samples with `a · d_p ≤ 0`, skipped by the projection method.
    pub skipped_nonpositive_projection: usize,
    pub verdicts: Vec<SampleVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub method: AbsorptionMethod,
    pub config: AbsorptionConfig,
    pub classes: Vec<ClassAbsorption>,
    /// Mean over classes with a defined rate.
    pub mean_absorption_rate: Option<f64>,
}

impl AbsorptionReport {
    fn new(method: AbsorptionMethod, config: &AbsorptionConfig, classes: Vec<ClassAbsorption>) -> Self {
        let rates: Vec<f64> = classes.iter().filter_map(|c| c.absorption_rate).collect();
        let mean_absorption_rate = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
        AbsorptionReport {
            method,
            config: config.clone(),
            classes,
            mean_absorption_rate,
        }
    }

    pub fn class(&self, class: usize) -> Option<&ClassAbsorption> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Share of `a · d_p` carried by latent `l`: `z_l (d_l · d_p) / (a · d_p)`.
fn projection_fraction(sae: &SaeModel, latents: ArrayView1<f64>, l: usize, probe_dir: ArrayView1<f64>, denom: f64) -> f64 {
    latents[l] * util::dot(sae.w_dec.row(l), probe_dir) / denom
}

/// Test rows of `class` that the probe classifies correctly.
fn true_positive_rows(probe: &ProbeModel, data: &LabeledData, scores: &Array2<f64>, class: usize) -> Vec<usize> {
    (0..data.labels.len())
        .filter(|&i| data.split[i] == Split::Test && data.labels[i] == class)
        .filter(|&i| probe.says_class(scores.row(i), class))
        .collect()
}

fn check_inputs(sae: &SaeModel, probe: &ProbeModel, data: &LabeledData) -> Result<()> {
    if sae.input_dim() != data.inputs.ncols() || probe.input_dim() != data.inputs.ncols() {
        return Err(Error::Shape(format!(
            "SAE ({}) / probe ({}) / data ({}) input dims disagree",
            sae.input_dim(),
            probe.input_dim(),
            data.inputs.ncols()
        )));
    }
    if probe.num_classes() != data.num_classes {
        return Err(Error::Shape(format!(
            "probe has {} classes, data has {}",
            probe.num_classes(),
            data.num_classes
        )));
    }
    Ok(())
}

fn check_splits(splits: &[SplitResult], data: &LabeledData) -> Result<()> {
    let classes: Vec<usize> = splits.iter().map(|s| s.class).collect();
    if classes != (0..data.num_classes).collect::<Vec<_>>() {
        return Err(Error::Shape(format!("split results cover classes {classes:?}, data has {}", data.num_classes)));
    }
    Ok(())
}

fn rate(count: f64, true_positives: usize) -> Option<f64> {
    (true_positives > 0).then(|| count / true_positives as f64)
}

/// Ablation-based absorption rate per class.
///
/// `probe` is a one-vs-rest probe on raw activations and `data` the labeled
/// raw activations the SAE and probes were fit to.
pub fn absorption_rate_main(
    sae: &SaeModel,
    readout: &Readout,
    probe: &ProbeModel,
    data: &LabeledData,
    cfg: &AbsorptionConfig,
) -> Result<AbsorptionReport> {
    let splits = detect_splitting(&data.latents(sae)?, &cfg.split_config())?;
    absorption_main_with_splits(sae, readout, probe, data, &splits, cfg)
}

/// As [`absorption_rate_main`], reusing split sets from [`detect_splitting`]
/// on the SAE latents of `data`.
pub fn absorption_main_with_splits(
    sae: &SaeModel,
    readout: &Readout,
    probe: &ProbeModel,
    data: &LabeledData,
    splits: &[SplitResult],
    cfg: &AbsorptionConfig,
) -> Result<AbsorptionReport> {
    cfg.validate()?;
    check_inputs(sae, probe, data)?;
    check_dims(sae, readout)?;
    check_splits(splits, data)?;
    let acts = sae.forward(data.inputs.view())?;
    let scores = probe.scores(data.inputs.view())?;
    let sweep = AblationSweep::new(sae, readout, cfg.metric_variant)?;

    let mut classes = Vec::with_capacity(data.num_classes);
    for split in splits.iter().cloned() {
        let class = split.class;
        let tp = true_positive_rows(probe, data, &scores, class);
        let fns: Vec<usize> = tp
            .iter()
            .copied()
            .filter(|&i| split.latents.iter().all(|&l| acts.latents[[i, l]] <= 0.0))
            .collect();
        let mut sampled = fns.clone();
        if sampled.len() > cfg.fn_sample_cap {
            sampled.shuffle(&mut util::rng(util::derive_seed(cfg.seed, class as u64)));
            sampled.truncate(cfg.fn_sample_cap);
            sampled.sort_unstable();
        }
        let probe_dir = probe.weights.row(class);
        let verdicts = sampled
            .iter()
            .map(|&i| {
                let latents = acts.latents.row(i);
                let effects = sweep.effects(data.inputs.row(i), latents, class)?;
                let (top, runner_up) = top_two(&effects);
                let denom = util::dot(data.inputs.row(i), probe_dir);
                let mut v = SampleVerdict {
                    sample_id: i,
                    top_latent: Some(top),
                    effect: Some(effects[top]),
                    runner_up_effect: Some(runner_up),
                    probe_cosine: Some(util::cosine(sae.w_dec.row(top), probe_dir)),
                    projection_fraction: (denom > 0.0).then(|| projection_fraction(sae, latents, top, probe_dir, denom)),
                    main_fraction: None,
                    absorbed: false,
                };
                v.absorbed = v.judge(cfg.tau_cos, cfg.ablation_lead);
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let absorption_count = verdicts.iter().filter(|v| v.absorbed).count();
        let extrapolated = if sampled.is_empty() {
            0.0
        } else {
            absorption_count as f64 * fns.len() as f64 / sampled.len() as f64
        };
        classes.push(ClassAbsorption {
            class,
            split_k: split.split_k,
            split_latents: split.latents,
            true_positives: tp.len(),
            false_negative_count: fns.len(),
            sampled_count: sampled.len(),
            absorption_count,
            absorption_count_extrapolated: extrapolated,
            absorption_rate: rate(extrapolated, tp.len()),
            skipped_nonpositive_projection: 0,
            verdicts,
        });
    }
    Ok(AbsorptionReport::new(AbsorptionMethod::Ablation, cfg, classes))
}

/// Largest entry (ties to the lower index) and the largest of the rest.
fn top_two(values: &[f64]) -> (usize, f64) {
    let top = probes::argmax(ArrayView1::from(values));
    let runner_up = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (top, if runner_up.is_finite() { runner_up } else { 0.0 })
}

/// Projection-based absorption rate per class: every true positive is
/// audited, with no readout and no ablation.
pub fn absorption_rate_alt(sae: &SaeModel, probe: &ProbeModel, data: &LabeledData, cfg: &AbsorptionConfig) -> Result<AbsorptionReport> {
    let splits = detect_splitting(&data.latents(sae)?, &cfg.split_config())?;
    absorption_alt_with_splits(sae, probe, data, &splits, cfg)
}

/// As [`absorption_rate_alt`], reusing split sets.
pub fn absorption_alt_with_splits(
    sae: &SaeModel,
    probe: &ProbeModel,
    data: &LabeledData,
    splits: &[SplitResult],
    cfg: &AbsorptionConfig,
) -> Result<AbsorptionReport> {
    cfg.validate()?;
    check_inputs(sae, probe, data)?;
    check_splits(splits, data)?;
    let alt = cfg
        .alt_metric
        .ok_or_else(|| Error::InvalidArgument("alternate metric is not configured".into()))?;
    let latents = sae.encode(data.inputs.view())?;
    let scores = probe.scores(data.inputs.view())?;

    let mut classes = Vec::with_capacity(data.num_classes);
    for split in splits.iter().cloned() {
        let class = split.class;
        let main: Vec<usize> = split.latents.iter().copied().take(alt.n_main.unwrap_or(split.split_k)).collect();
        let tp = true_positive_rows(probe, data, &scores, class);
        let probe_dir = probe.weights.row(class);
        let mut skipped = 0;
        let mut verdicts = Vec::with_capacity(tp.len());
        for &i in &tp {
            let denom = util::dot(data.inputs.row(i), probe_dir);
            if denom <= 0.0 {
                skipped += 1;
                continue;
            }
            let z = latents.row(i);
            let frac = |l: usize| projection_fraction(sae, z, l, probe_dir, denom);
            let main_fraction: f64 = main.iter().map(|&l| frac(l)).sum();
            let mut candidates: Vec<(usize, f64)> = (0..sae.width())
                .filter(|l| z[*l] > 0.0 && !main.contains(l))
                .map(|l| (l, frac(l)))
                .collect();
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let absorber_fraction: f64 = candidates.iter().take(alt.n_absorbers).map(|c| c.1).sum();
            let top = candidates.first().map(|c| c.0);
            verdicts.push(SampleVerdict {
                sample_id: i,
                top_latent: top,
                effect: None,
                runner_up_effect: None,
                probe_cosine: top.map(|l| util::cosine(sae.w_dec.row(l), probe_dir)),
                projection_fraction: Some(absorber_fraction),
                main_fraction: Some(main_fraction),
                absorbed: absorber_fraction > alt.tau_c && main_fraction <= alt.tau_m,
            });
        }
        let absorption_count = verdicts.iter().filter(|v| v.absorbed).count();
        classes.push(ClassAbsorption {
            class,
            split_k: split.split_k,
            split_latents: split.latents,
            true_positives: tp.len(),
            false_negative_count: verdicts.iter().filter(|v| v.main_fraction.is_some_and(|m| m <= alt.tau_m)).count(),
            sampled_count: verdicts.len(),
            absorption_count,
            absorption_count_extrapolated: absorption_count as f64,
            absorption_rate: rate(absorption_count as f64, tp.len()),
            skipped_nonpositive_projection: skipped,
            verdicts,
        });
    }
    Ok(AbsorptionReport::new(AbsorptionMethod::Projection, cfg, classes))
}

/// Class-to-latent assignment for editing, with the mean activation of each
/// class latent over rows of its class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLatents {
    pub latent: Vec<Option<usize>>,
    pub mean_activation: Vec<f64>,
}

impl ClassLatents {
    /// Means computed on the train split of `latents`.
    pub fn estimate(latents: &LabeledData, map: Vec<Option<usize>>) -> Result<Self> {
        if map.len() != latents.num_classes {
            return Err(Error::Shape(format!("map covers {} of {} classes", map.len(), latents.num_classes)));
        }
        let mean_activation = map
            .iter()
            .enumerate()
            .map(|(class, l)| {
                let Some(l) = *l else { return Ok(0.0) };
                if l >= latents.inputs.ncols() {
                    return Err(Error::InvalidArgument(format!("latent {l} out of range")));
                }
                let rows: Vec<usize> = latents
                    .rows(Split::Train)
                    .into_iter()
                    .filter(|&i| latents.labels[i] == class)
                    .collect();
                Ok(if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().map(|&i| latents.inputs[[i, l]]).sum::<f64>() / rows.len() as f64
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassLatents { latent: map, mean_activation })
    }

    fn latent_for(&self, class: usize) -> Result<usize> {
        self.latent
            .get(class)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("no latent mapped for class {class}")))
    }
}

/// Swap a row from one class to another by zeroing the source-class latent
/// and setting the target-class latent to its mean. Returns the drop in the
/// source-class probability and the rise in the target-class probability.
pub fn edit_class(
    sae: &SaeModel,
    readout: &Readout,
    row: ArrayView1<f64>,
    from_class: usize,
    to_class: usize,
    map: &ClassLatents,
) -> Result<(f64, f64)> {
    let (before, after) = edit_probabilities(sae, readout, row, from_class, to_class, map)?;
    Ok((before[from_class] - after[from_class], after[to_class] - before[to_class]))
}

/// Readout probabilities before and after the edit of [`edit_class`].
pub fn edit_probabilities(
    sae: &SaeModel,
    readout: &Readout,
    row: ArrayView1<f64>,
    from_class: usize,
    to_class: usize,
    map: &ClassLatents,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_dims(sae, readout)?;
    let from = map.latent_for(from_class)?;
    let to = map.latent_for(to_class)?;
    let acts = sae.forward(row.insert_axis(Axis(0)))?;
    let before = readout.probabilities((&acts.reconstruction.row(0) + &acts.error.row(0)).view())?;
    if from_class == to_class {
        return Ok((before.clone(), before));
    }
    let mut latents = acts.latents.clone();
    latents[[0, from]] = 0.0;
    latents[[0, to]] = map.mean_activation[to_class];
    let edited = &sae.decode(latents.view())?.row(0) + &acts.error.row(0);
    let after = readout.probabilities(edited.view())?;
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::DeltaSae;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn readout(weights: Array2<f64>) -> Readout {
        let c = weights.nrows();
        Readout::new(ProbeModel {
            weights,
            bias: Array1::zeros(c),
            l1_coeff: 0.0,
            kind: ProbeKind::Multinomial,
            feature_mask: None,
        })
        .unwrap()
    }

    #[test]
    fn metric_examples() {
        let uniform = array![0.7, 0.7, 0.7];
        for v in [MetricVariant::Mean, MetricVariant::Max] {
            assert_eq!(metric_m(uniform.view(), 1, v).unwrap(), 0.0);
        }
        let g = array![3.0, 1.0, 1.0];
        assert_eq!(metric_m(g.view(), 0, MetricVariant::Mean).unwrap(), 2.0);
        assert_eq!(metric_m(g.view(), 0, MetricVariant::Max).unwrap(), 2.0);
        let g = array![3.0, 2.0, 0.0];
        assert_eq!(metric_m(g.view(), 0, MetricVariant::Mean).unwrap(), 2.0);
        assert_eq!(metric_m(g.view(), 0, MetricVariant::Max).unwrap(), 1.0);
        assert!(metric_m(g.view(), 3, MetricVariant::Mean).is_err());
        assert!(metric_m(array![1.0].view(), 0, MetricVariant::Mean).is_err());
    }

    #[test]
    fn cosine_map_of_delta_one_geometry() {
        let dsae = DeltaSae::new(1.0, 20, 4).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let dec = cosine_map(dsae.model.w_dec.view(), dsae.dictionary.view()).unwrap();
        assert!((dec[[1, 0]] - h).abs() < 1e-12 && (dec[[1, 1]] - h).abs() < 1e-12);
        let enc = cosine_map(dsae.model.w_enc.view(), dsae.dictionary.view()).unwrap();
        assert!((enc[[0, 0]] - h).abs() < 1e-12 && (enc[[0, 1]] + h).abs() < 1e-12);
        let ident = cosine_map(dsae.dictionary.view(), dsae.dictionary.view()).unwrap();
        assert!((ident - Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-12));
        assert!(cosine_map(dsae.dictionary.view(), Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn ablation_of_silent_latent_is_zero() {
        let sae = SaeModel::bias_free(Array::eye(3), Array::eye(3)).unwrap();
        let r = readout(array![[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]);
        let row = array![0.5, 0.0, 0.3];
        assert_eq!(ablate_latent(&sae, &r, row.view(), 0, 1, MetricVariant::Mean).unwrap(), 0.0);
        assert!(ablate_latent(&sae, &r, row.view(), 0, 3, MetricVariant::Mean).is_err());
    }

    #[test]
    fn delta_one_child_ablation_dominates() {
        let dsae = DeltaSae::new(1.0, 10, 2).unwrap();
        let d = &dsae.dictionary;
        // parent-vs-rest readout pointing along the parent direction
        let mut w = Array2::zeros((2, 10));
        w.row_mut(0).assign(&(&d.row(0) * 3.0));
        let r = readout(w);
        let both = dsae.input(crate::theory::FiringCase::Both);
        let effects: Vec<f64> = (0..2)
            .map(|l| ablate_latent(&dsae.model, &r, both.view(), 0, l, MetricVariant::Mean).unwrap())
            .collect();
        assert!(effects[1] > 0.0 && effects[1] > effects[0], "{effects:?}");
        assert_eq!(effects[0], 0.0);
    }

    #[test]
    fn orthogonal_spectator_has_no_effect() {
        let q = crate::synthgen::make_dictionary(6, 3, 9).unwrap().directions;
        let sae = SaeModel::bias_free(q.clone(), q.clone()).unwrap();
        let mut w = Array2::zeros((2, 6));
        w.row_mut(0).assign(&q.row(0));
        w.row_mut(1).assign(&(&q.row(1) * -2.0));
        let r = readout(w);
        let row = &q.row(0) + &q.row(1) + &q.row(2);
        let e = ablate_latent(&sae, &r, row.view(), 0, 2, MetricVariant::Max).unwrap();
        assert!(e.abs() < 1e-10, "{e}");
    }

    #[test]
    fn same_class_edit_is_noop_and_missing_map_errors() {
        let sae = SaeModel::bias_free(Array::eye(2), Array::eye(2)).unwrap();
        let r = readout(array![[1.0, 0.0], [0.0, 1.0]]);
        let map = ClassLatents { latent: vec![Some(0), None], mean_activation: vec![1.0, 0.0] };
        assert_eq!(edit_class(&sae, &r, array![1.0, 0.0].view(), 0, 0, &map).unwrap(), (0.0, 0.0));
        assert!(edit_class(&sae, &r, array![1.0, 0.0].view(), 0, 1, &map).is_err());
        let map = ClassLatents { latent: vec![Some(0), Some(1)], mean_activation: vec![1.0, 1.0] };
        let (dp_from, dp_to) = edit_class(&sae, &r, array![1.0, 0.0].view(), 0, 1, &map).unwrap();
        assert!(dp_from > 0.0 && dp_to > 0.0);
    }

    #[test]
    fn verdict_needs_cosine_and_lead() {
        let v = SampleVerdict {
            sample_id: 0,
            top_latent: Some(1),
            effect: Some(2.0),
            runner_up_effect: Some(0.5),
            probe_cosine: Some(0.3),
            projection_fraction: None,
            main_fraction: None,
            absorbed: true,
        };
        assert!(v.judge(0.025, 1.0));
        assert!(!v.judge(0.3, 1.0));
        assert!(v.judge(0.025, 1.5));
        assert!(!v.judge(0.025, 1.6));
    }

    fn small_world() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>, Vec<f64>, usize)> {
        let h = 4;
        let d = 3;
        let c = 3;
        (
            prop::collection::vec(-1.0f64..1.0, h * d),
            prop::collection::vec(-1.0f64..1.0, h * d),
            prop::collection::vec(-2.0f64..2.0, c * d),
            prop::collection::vec(-1.0f64..1.0, d),
            0..c,
        )
            .prop_map(move |(e, dd, w, x, y)| {
                (
                    Array2::from_shape_vec((h, d), e).unwrap(),
                    Array2::from_shape_vec((h, d), dd).unwrap(),
                    Array2::from_shape_vec((c, d), w).unwrap(),
                    x,
                    y,
                )
            })
    }

    proptest! {
        #[test]
        fn single_effects_sum_to_joint_effect((enc, dec, w, x, y) in small_world()) {
            let sae = SaeModel::bias_free(enc, dec).unwrap();
            let r = readout(w);
            let row = Array1::from(x);
            let all: Vec<usize> = (0..sae.width()).collect();
            let joint = ablate_latents(&sae, &r, row.view(), y, &all, MetricVariant::Mean).unwrap();
            let singles: f64 = all
                .iter()
                .map(|&l| ablate_latent(&sae, &r, row.view(), y, l, MetricVariant::Mean).unwrap())
                .sum();
            prop_assert!((joint - singles).abs() <= 1e-8, "{} vs {}", joint, singles);
        }

        #[test]
        fn sweep_matches_direct_ablation((enc, dec, w, x, y) in small_world(), max in any::<bool>()) {
            let variant = if max { MetricVariant::Max } else { MetricVariant::Mean };
            let sae = SaeModel::bias_free(enc, dec).unwrap();
            let r = readout(w);
            let row = Array1::from(x);
            let z = sae.encode(row.view().insert_axis(Axis(0))).unwrap();
            let sweep = AblationSweep::new(&sae, &r, variant).unwrap();
            let fast = sweep.effects(row.view(), z.row(0), y).unwrap();
            for (l, &f) in fast.iter().enumerate() {
                let direct = ablate_latent(&sae, &r, row.view(), y, l, variant).unwrap();
                prop_assert!((f - direct).abs() <= 1e-10, "latent {}: {} vs {}", l, f, direct);
            }
        }

        #[test]
        fn stricter_thresholds_never_add_absorptions(
            records in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0), 1..40),
            tau_cos in 0.0f64..0.5, lead in 0.0f64..2.0, d_cos in 0.0f64..0.5, d_lead in 0.0f64..2.0,
        ) {
            let verdicts: Vec<SampleVerdict> = records
                .iter()
                .enumerate()
                .map(|(i, &(e, r, c))| SampleVerdict {
                    sample_id: i,
                    top_latent: Some(0),
                    effect: Some(e.max(r)),
                    runner_up_effect: Some(e.min(r)),
                    probe_cosine: Some(c),
                    projection_fraction: None,
                    main_fraction: None,
                    absorbed: false,
                })
                .collect();
            let count = |tc: f64, l: f64| verdicts.iter().filter(|v| v.judge(tc, l)).count();
            let base = count(tau_cos, lead);
            prop_assert!(count(tau_cos + d_cos, lead) <= base);
            prop_assert!(count(tau_cos, lead + d_lead) <= base);
        }
    }
}
