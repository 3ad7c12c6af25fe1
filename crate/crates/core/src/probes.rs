//! Linear logistic-regression probes, k-sparse probing and classifier metrics.
//!
//! Probes are fit by full-batch accelerated proximal gradient descent
//! (FISTA) with step `1/L`, where `L` bounds the curvature of the logistic
//! loss. The L1 term is handled by soft-thresholding, so penalized weights
//! are exactly zero. Biases are never penalized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeModel;
use crate::synthgen::{ActivationBatch, Split};
use crate::util::{self, serde_matrix, serde_vector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// One binary logistic probe per class.
    #[default]
    OneVsRest,
    /// A single softmax classifier over all classes.
    Multinomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub max_iters: usize,
    /// Stop once the proximal gradient step moves parameters by less than this (scaled by `L`).
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::OneVsRest,
            max_iters: 300,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `C × M`, one weight row per class.
    #[serde(with = "serde_matrix")]
    pub weights: Array2<f64>,
    #[serde(with = "serde_vector")]
    pub bias: Array1<f64>,
    pub l1_coeff: f64,
    pub kind: ProbeKind,
    /// Per-class selected coordinates when the probe is k-sparse.
    pub feature_mask: Option<Vec<Vec<usize>>>,
}

impl ProbeModel {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Class scores (logits) for every row, `N × C`.
    pub fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "probe expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&x) + &self.bias
    }

    /// Whether class `c`'s probe says "yes" for a scored row.
    pub fn says_class(&self, scores: ArrayView1<f64>, c: usize) -> bool {
        match self.kind {
            ProbeKind::OneVsRest => scores[c] > 0.0,
            ProbeKind::Multinomial => argmax(scores) == c,
        }
    }

    /// Number of nonzero weight coordinates.
    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inputs with class labels and train/test tags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub num_classes: usize,
}

impl LabeledData {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, split: Vec<Split>, num_classes: usize) -> Result<Self> {
        let n = inputs.nrows();
        if labels.len() != n || split.len() != n {
            return Err(Error::Shape(format!(
                "{n} input rows but {} labels and {} split tags",
                labels.len(),
                split.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(LabeledData {
            inputs,
            labels,
            split,
            num_classes,
        })
    }

    /// Raw activations of a labeled batch.
    pub fn from_batch(batch: &ActivationBatch, num_classes: usize) -> Result<Self> {
        let labels = batch
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidArgument("batch carries no labels".into()))?;
        Self::new(batch.activations.clone(), labels, batch.split.clone(), num_classes)
    }

    /// Same labels and split over different inputs (e.g. SAE latents).
    pub fn with_inputs(&self, inputs: Array2<f64>) -> Result<Self> {
        Self::new(inputs, self.labels.clone(), self.split.clone(), self.num_classes)
    }

    /// SAE latents of these inputs.
    pub fn latents(&self, sae: &SaeModel) -> Result<Self> {
        self.with_inputs(sae.encode(self.inputs.view())?)
    }

    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.split[i] == split).collect()
    }

    fn part(&self, split: Split) -> (Array2<f64>, Vec<usize>) {
        let rows = self.rows(split);
        (
            self.inputs.select(Axis(0), &rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1] / n` by power iteration.
fn curvature_bound(x: ArrayView2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let m = x.ncols();
    let mut gram = Array2::<f64>::zeros((m + 1, m + 1));
    gram.slice_mut(ndarray::s![..m, ..m]).assign(&(x.t().dot(&x) / n));
    let col_means = x.sum_axis(Axis(0)) / n;
    gram.slice_mut(ndarray::s![..m, m]).assign(&col_means);
    gram.slice_mut(ndarray::s![m, ..m]).assign(&col_means);
    gram[[m, m]] = 1.0;
    let mut v = Array1::<f64>::from_elem(m + 1, 1.0 / ((m + 1) as f64).sqrt());
    let mut lambda = 1.0;
    for _ in 0..200 {
        let w = gram.dot(&v);
        let nw = util::norm(w.view());
        if nw == 0.0 {
            break;
        }
        lambda = nw;
        v = w / nw;
    }
    // power iteration approaches from below
    lambda * 1.05
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// FISTA over a parameter block `(W: C × M, b: C)` for a smooth loss with
/// gradient `grad(W, b) -> (dW, db)` and curvature bound `lipschitz`.
fn fista<G>(
    classes: usize,
    m: usize,
    l1_coeff: f64,
    lipschitz: f64,
    cfg: &ProbeConfig,
    mut grad: G,
) -> (Array2<f64>, Array1<f64>)
where
    G: FnMut(&Array2<f64>, &Array1<f64>) -> (Array2<f64>, Array1<f64>),
{
    let step = 1.0 / lipschitz;
    let mut w = Array2::<f64>::zeros((classes, m));
    let mut b = Array1::<f64>::zeros(classes);
    let mut yw = w.clone();
    let mut yb = b.clone();
    let mut t = 1.0f64;
    for _ in 0..cfg.max_iters {
        let (gw, gb) = grad(&yw, &yb);
        let mut w_next = &yw - &(&gw * step);
        w_next.mapv_inplace(|v| soft_threshold(v, step * l1_coeff));
        let b_next = &yb - &(&gb * step);
        let moved = (&w_next - &w).iter().chain((&b_next - &b).iter()).map(|d| d * d).sum::<f64>().sqrt();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        yw = &w_next + &((&w_next - &w) * momentum);
        yb = &b_next + &((&b_next - &b) * momentum);
        w = w_next;
        b = b_next;
        t = t_next;
        if moved * lipschitz < cfg.tol {
            break;
        }
    }
    (w, b)
}

fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::<f64>::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l < classes {
            y[[i, l]] = 1.0;
        }
    }
    y
}

/// Independent binary logistic regressions, one per column of the 0/1
/// target matrix `y`, solved together so each step is a matrix product.
fn fit_binary_block(x: ArrayView2<f64>, y: &Array2<f64>, l1_coeff: f64, cfg: &ProbeConfig) -> (Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let lipschitz = 0.25 * curvature_bound(x);
    fista(y.ncols(), x.ncols(), l1_coeff, lipschitz, cfg, |w, b| {
        let mut r = x.dot(&w.t().as_standard_layout());
        ndarray::Zip::from(r.rows_mut()).and(y.rows()).for_each(|mut row, t| {
            ndarray::Zip::from(&mut row).and(b).and(t).for_each(|s, &bias, &target| *s = sigmoid(*s + bias) - target);
        });
        (r.t().dot(&x) / n, r.sum_axis(Axis(0)) / n)
    })
}

fn fit_multinomial(x: ArrayView2<f64>, labels: &[usize], classes: usize, l1_coeff: f64, cfg: &ProbeConfig) -> (Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let lipschitz = 0.5 * curvature_bound(x);
    let onehot = one_hot(labels, classes);
    fista(classes, x.ncols(), l1_coeff, lipschitz, cfg, |w, b| {
        let mut r = x.dot(&w.t().as_standard_layout());
        ndarray::Zip::from(r.rows_mut()).and(onehot.rows()).for_each(|mut row, target| {
            row += b;
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            ndarray::Zip::from(&mut row).and(target).for_each(|p, &t| *p = *p / s - t);
        });
        (r.t().dot(&x) / n, r.sum_axis(Axis(0)) / n)
    })
}

fn check_trainable(data: &LabeledData) -> Result<(Array2<f64>, Vec<usize>)> {
    if !util::all_finite(data.inputs.iter()) {
        return Err(Error::Probe("inputs contain non-finite values".into()));
    }
    let (x, y) = data.part(Split::Train);
    let first = y.first().ok_or_else(|| Error::Probe("empty train split".into()))?;
    if y.iter().all(|l| l == first) {
        return Err(Error::Probe("train split contains a single class".into()));
    }
    Ok((x, y))
}

/// Fit a probe on the train split of `data`.
pub fn train_probe(data: &LabeledData, l1_coeff: f64, cfg: &ProbeConfig) -> Result<ProbeModel> {
    if !(l1_coeff >= 0.0) {
        return Err(Error::InvalidArgument(format!("l1 coefficient {l1_coeff} < 0")));
    }
    let (x, y) = check_trainable(data)?;
    let c = data.num_classes;
    let (weights, bias) = match cfg.kind {
        ProbeKind::OneVsRest => fit_binary_block(x.view(), &one_hot(&y, c), l1_coeff, cfg),
        ProbeKind::Multinomial => fit_multinomial(x.view(), &y, c, l1_coeff, cfg),
    };
    Ok(ProbeModel {
        weights,
        bias,
        l1_coeff,
        kind: cfg.kind,
        feature_mask: None,
    })
}

fn fit_masked_class(x: ArrayView2<f64>, y: &[usize], class: usize, mask: &[usize], cfg: &ProbeConfig) -> Result<(Array1<f64>, f64)> {
    if let Some(&bad) = mask.iter().find(|&&j| j >= x.ncols()) {
        return Err(Error::InvalidArgument(format!("mask index {bad} out of range")));
    }
    let sub = x.select(Axis(1), mask);
    let target: Array2<f64> = y.iter().map(|&l| f64::from(u8::from(l == class))).collect::<Array1<f64>>().insert_axis(Axis(1));
    let (wc, bc) = fit_binary_block(sub.view(), &target, 0.0, cfg);
    let mut w = Array1::zeros(x.ncols());
    for (&j, &v) in mask.iter().zip(wc.row(0).iter()) {
        w[j] = v;
    }
    Ok((w, bc[0]))
}

/// Per-class one-vs-rest probes restricted to `mask[c]`, unpenalized.
pub fn train_masked_probe(data: &LabeledData, mask: &[Vec<usize>], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let (x, y) = check_trainable(data)?;
    let c = data.num_classes;
    if mask.len() != c {
        return Err(Error::Shape(format!("mask covers {} classes, data has {c}", mask.len())));
    }
    let mut weights = Array2::zeros((c, x.ncols()));
    let mut bias = Array1::zeros(c);
    for class in 0..c {
        let (w, b) = fit_masked_class(x.view(), &y, class, &mask[class], cfg)?;
        weights.row_mut(class).assign(&w);
        bias[class] = b;
    }
    Ok(ProbeModel {
        weights,
        bias,
        l1_coeff: 0.0,
        kind: ProbeKind::OneVsRest,
        feature_mask: Some(mask.to_vec()),
    })
}

/// Test F1 of an unpenalized binary probe for one class restricted to `mask`.
pub fn masked_class_f1(data: &LabeledData, class: usize, mask: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    if class >= data.num_classes {
        return Err(Error::InvalidArgument(format!("class {class} >= {}", data.num_classes)));
    }
    let (x, y) = check_trainable(data)?;
    let (w, b) = fit_masked_class(x.view(), &y, class, mask, cfg)?;
    let test = data.rows(Split::Test);
    if test.is_empty() {
        return Err(Error::Probe("empty test split".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for &i in &test {
        let fires = util::dot(data.inputs.row(i), w.view()) + b > 0.0;
        match (fires, data.labels[i] == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ClassMetrics::from_counts(class, tp, fp, fn_, tn).f1)
}

/// Per class, the `k` coordinates with the largest `|weight|`, in
/// decreasing magnitude; ties go to the lower index.
pub fn select_k_sparse(probe: &ProbeModel, k: usize) -> Result<Vec<Vec<usize>>> {
    let m = probe.input_dim();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={m}")));
    }
    Ok(probe
        .weights
        .outer_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ClassMetrics {
    pub fn from_counts(class: usize, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            class,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_f1: f64,
    pub test_size: usize,
}

/// What to evaluate: a probe (all classes) or one latent used as a
/// classifier for one class ("fires" = activation > threshold).
#[derive(Clone, Copy, Debug)]
pub enum Classifier<'a> {
    Probe(&'a ProbeModel),
    Latent { column: usize, class: usize, threshold: f64 },
}

/// Confusion-matrix metrics on the test split only.
pub fn evaluate(classifier: Classifier<'_>, data: &LabeledData) -> Result<EvalReport> {
    let rows = data.rows(Split::Test);
    if rows.is_empty() {
        return Err(Error::Probe("empty test split".into()));
    }
    let x = data.inputs.select(Axis(0), &rows);
    let labels: Vec<usize> = rows.iter().map(|&i| data.labels[i]).collect();
    let decisions: Vec<(usize, Vec<bool>)> = match classifier {
        Classifier::Probe(probe) => {
            let scores = probe.scores(x.view())?;
            (0..probe.num_classes())
                .map(|c| (c, scores.outer_iter().map(|s| probe.says_class(s, c)).collect()))
                .collect()
        }
        Classifier::Latent { column, class, threshold } => {
            if column >= x.ncols() || class >= data.num_classes {
                return Err(Error::InvalidArgument(format!("latent {column} / class {class} out of range")));
            }
            if !threshold.is_finite() {
                return Err(Error::InvalidArgument("threshold must be finite".into()));
            }
            vec![(class, x.column(column).iter().map(|&v| v > threshold).collect())]
        }
    };
    let per_class: Vec<ClassMetrics> = decisions
        .into_iter()
        .map(|(c, pred)| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for (&p, &l) in pred.iter().zip(&labels) {
                match (p, l == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            ClassMetrics::from_counts(c, tp, fp, fn_, tn)
        })
        .collect();
    let mean_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        per_class,
        mean_f1,
        test_size: rows.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSparsePoint {
    pub k: usize,
    pub mean_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Selected coordinates per class, by decreasing L1-probe weight.
    pub mask: Vec<Vec<usize>>,
}

pub const DEFAULT_K_MAX: usize = 15;
pub const DEFAULT_SELECTION_L1: f64 = 0.01;

/// F1 of k-sparse probes for `k = 1..=k_max`: select with an L1 probe,
/// retrain unpenalized on the selection, score on the test split.
pub fn k_sparse_curve(data: &LabeledData, k_max: usize, l1_coeff: f64, cfg: &ProbeConfig) -> Result<Vec<KSparsePoint>> {
    let m = data.inputs.ncols();
    if k_max == 0 || k_max > m {
        return Err(Error::InvalidArgument(format!("k_max = {k_max} outside 1..={m}")));
    }
    let selector_cfg = ProbeConfig { kind: ProbeKind::OneVsRest, ..*cfg };
    let selector = train_probe(data, l1_coeff, &selector_cfg)?;
    (1..=k_max)
        .map(|k| {
            let mask = select_k_sparse(&selector, k)?;
            let probe = train_masked_probe(data, &mask, cfg)?;
            let report = evaluate(Classifier::Probe(&probe), data)?;
            Ok(KSparsePoint {
                k,
                mean_f1: report.mean_f1,
                per_class_f1: report.per_class.iter().map(|c| c.f1).collect(),
                mask,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMatch {
    pub class: usize,
    pub latent: usize,
    pub cosine: f64,
    /// Best cosine among the remaining latents.
    pub runner_up_cosine: f64,
}

/// Per class, the latent whose encoder row is most cosine-similar to the
/// class probe; ties go to the lower index.
pub fn match_latents_to_probe(sae: &SaeModel, probe: &ProbeModel) -> Result<Vec<LatentMatch>> {
    if sae.input_dim() != probe.input_dim() {
        return Err(Error::Shape(format!(
            "SAE input dim {} vs probe input dim {}",
            sae.input_dim(),
            probe.input_dim()
        )));
    }
    Ok(probe
        .weights
        .outer_iter()
        .enumerate()
        .map(|(class, w)| {
            let cos: Vec<f64> = sae.w_enc.outer_iter().map(|e| util::cosine(e, w)).collect();
            let latent = argmax(ArrayView1::from(&cos));
            let runner_up_cosine = cos
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != latent)
                .map(|(_, &c)| c)
                .fold(f64::NEG_INFINITY, f64::max);
            LatentMatch {
                class,
                latent,
                cosine: cos[latent],
                runner_up_cosine,
            }
        })
        .collect())
}
