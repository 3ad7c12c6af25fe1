//! Deterministic mini-batch Adam training of SAEs on streamed synthetic data.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sae::{LossReport, Nonlinearity, SaeModel};
use crate::synthgen::{FeatureDictionary, FiringSampler, FiringSpec};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderNormPolicy {
    #[default]
    None,
    UnitRenormEachStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l1_coeff: f64,
    pub learning_rate: f64,
    pub total_samples: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub decoder_norm_policy: DecoderNormPolicy,
    pub seed: u64,
    /// Steps between recorded checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l1_coeff: 3e-5,
            learning_rate: 3e-4,
            total_samples: 2_000_000,
            batch_size: 256,
            adam: AdamConfig::default(),
            decoder_norm_policy: DecoderNormPolicy::None,
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_coeff >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "l1_coeff must be >= 0 and learning_rate > 0".into(),
            ));
        }
        if self.batch_size == 0 || self.total_samples < self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "total_samples ({}) must be at least batch_size ({}) > 0",
                self.total_samples, self.batch_size
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaeShape {
    pub width: usize,
    pub nonlinearity: Nonlinearity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub samples_seen: u64,
    /// Mean of the per-batch reports since the previous checkpoint.
    pub report: LossReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainTrace {
    pub checkpoints: Vec<Checkpoint>,
    pub model: SaeModel,
    pub steps: usize,
    pub samples_seen: u64,
    /// Not persisted, so saved traces are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Parameter gradients, same shapes as the model.
#[derive(Clone, Debug)]
pub struct SaeGrads {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

/// Analytic gradient of the total loss (`recon_mse + λ·l1`, or just
/// `recon_mse` for BatchTopK, whose selection mask is held fixed).
pub fn gradients(model: &SaeModel, x: ArrayView2<f64>, l1_coeff: f64) -> Result<(LossReport, SaeGrads)> {
    let pre = model.pre_activations(x)?;
    let latents = model.activate(pre.clone());
    let reconstruction = model.decode(latents.view())?;
    let error = &x - &reconstruction;
    let acts = crate::sae::SaeActivations {
        latents,
        reconstruction,
        error,
    };
    let report = model.loss_from(x, &acts, l1_coeff);

    let n = x.nrows() as f64;
    // d total / d reconstruction
    let g_rec = acts.error.mapv(|e| -2.0 * e / n);
    let w_dec = acts.latents.t().dot(&g_rec);
    let b_dec = g_rec.sum_axis(Axis(0));
    let mut g_lat = g_rec.dot(&model.w_dec.t());
    let l1_grad = match model.nonlinearity {
        Nonlinearity::Relu => l1_coeff / n,
        Nonlinearity::BatchTopK { .. } => 0.0,
    };
    ndarray::Zip::from(&mut g_lat)
        .and(&acts.latents)
        .for_each(|g, &z| {
            // active entries are exactly the nonzero latents
            *g = if z > 0.0 { *g + l1_grad } else { 0.0 };
        });
    let w_enc = g_lat.t().dot(&x);
    let b_enc = g_lat.sum_axis(Axis(0));
    Ok((
        report,
        SaeGrads {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        },
    ))
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    m: SaeGrads,
    v: SaeGrads,
}

impl Adam {
    fn new(model: &SaeModel, cfg: AdamConfig, lr: f64) -> Self {
        let zeros = || SaeGrads {
            w_enc: Array2::zeros(model.w_enc.dim()),
            b_enc: Array1::zeros(model.b_enc.len()),
            w_dec: Array2::zeros(model.w_dec.dim()),
            b_dec: Array1::zeros(model.b_dec.len()),
        };
        Adam {
            cfg,
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn step(&mut self, model: &mut SaeModel, g: &SaeGrads) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        ndarray::Zip::from(&mut model.w_enc)
            .and(&mut self.m.w_enc)
            .and(&mut self.v.w_enc)
            .and(&g.w_enc)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut model.b_enc)
            .and(&mut self.m.b_enc)
            .and(&mut self.v.b_enc)
            .and(&g.b_enc)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut model.w_dec)
            .and(&mut self.m.w_dec)
            .and(&mut self.v.w_dec)
            .and(&g.w_dec)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut model.b_dec)
            .and(&mut self.m.b_dec)
            .and(&mut self.v.b_dec)
            .and(&g.b_dec)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
}

/// Encoder ~ N(0, (0.1/√d)²), decoder = encoder (tied transpose), zero biases.
pub fn init_model(dim: usize, shape: SaeShape, seed: u64) -> Result<SaeModel> {
    let std = 0.1 / (dim as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = util::rng(seed);
    let w_enc = Array2::from_shape_simple_fn((shape.width, dim), || normal.sample(&mut rng));
    let w_dec = w_enc.clone();
    SaeModel::new(
        w_enc,
        Array1::zeros(shape.width),
        w_dec,
        Array1::zeros(dim),
        shape.nonlinearity,
    )
}

/// Hex SHA-256 (first 16 bytes) of the training inputs.
pub fn provenance_digest(
    dict: &FeatureDictionary,
    spec: &FiringSpec,
    shape: &SaeShape,
    config: &TrainConfig,
) -> String {
    let payload = serde_json::json!({
        "dictionary_seed": dict.seed,
        "dim": dict.dim,
        "count": dict.count,
        "spec": spec,
        "shape": shape,
        "config": config,
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

fn renormalize_decoder(model: &mut SaeModel) {
    for mut row in model.w_dec.outer_iter_mut() {
        let n = util::norm(row.view());
        if n > 0.0 {
            row /= n;
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let k = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    LossReport {
        recon_mse: avg(|r| r.recon_mse),
        sparsity_l1: avg(|r| r.sparsity_l1),
        l1_coeff: reports[0].l1_coeff,
        total: avg(|r| r.total),
        l0_mean: avg(|r| r.l0_mean),
        explained_variance: avg(|r| r.explained_variance),
    }
}

/// Train an SAE on freshly sampled batches; never reuses a sample.
pub fn train(
    dict: &FeatureDictionary,
    spec: &FiringSpec,
    shape: SaeShape,
    config: &TrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    let started = Instant::now();
    let mut model = init_model(dict.dim, shape, util::derive_seed(config.seed, 1))?;
    model.provenance = provenance_digest(dict, spec, &shape, config);
    let mut sampler = FiringSampler::new(dict, spec, util::derive_seed(config.seed, 2))?;
    let mut adam = Adam::new(&model, config.adam, config.learning_rate);
    let steps = config.total_samples / config.batch_size;
    let mut window: Vec<LossReport> = Vec::with_capacity(config.checkpoint_every);
    let mut checkpoints = Vec::new();

    for step in 0..steps {
        let (x, _) = sampler.next_batch(config.batch_size);
        let (report, grads) = gradients(&model, x.view(), config.l1_coeff)?;
        if !report.total.is_finite() {
            let trace = TrainTrace {
                checkpoints,
                model,
                steps: step,
                samples_seen: sampler.rows_drawn(),
                wall_clock_secs: started.elapsed().as_secs_f64(),
            };
            return Err(Error::NonFinite {
                step,
                trace: Box::new(trace),
            });
        }
        window.push(report);
        adam.step(&mut model, &grads);
        if config.decoder_norm_policy == DecoderNormPolicy::UnitRenormEachStep {
            renormalize_decoder(&mut model);
        }
        if window.len() == config.checkpoint_every || step + 1 == steps {
            checkpoints.push(Checkpoint {
                step: step + 1,
                samples_seen: sampler.rows_drawn(),
                report: mean_report(&window),
            });
            window.clear();
        }
    }
    Ok(TrainTrace {
        checkpoints,
        model,
        steps,
        samples_seen: sampler.rows_drawn(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug)]
enum Param {
    WEnc(usize, usize),
    BEnc(usize),
    WDec(usize, usize),
    BDec(usize),
}

fn param_mut(model: &mut SaeModel, p: Param) -> &mut f64 {
    match p {
        Param::WEnc(i, j) => &mut model.w_enc[[i, j]],
        Param::BEnc(i) => &mut model.b_enc[i],
        Param::WDec(i, j) => &mut model.w_dec[[i, j]],
        Param::BDec(i) => &mut model.b_dec[i],
    }
}

fn grad_at(g: &SaeGrads, p: Param) -> f64 {
    match p {
        Param::WEnc(i, j) => g.w_enc[[i, j]],
        Param::BEnc(i) => g.b_enc[i],
        Param::WDec(i, j) => g.w_dec[[i, j]],
        Param::BDec(i) => g.b_dec[i],
    }
}

/// Which latents are active; identical patterns mean no kink was crossed.
fn active_pattern(model: &SaeModel, x: ArrayView2<f64>) -> Result<(Vec<bool>, f64)> {
    let pre = model.pre_activations(x)?;
    let min_gap = pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let z = model.activate(pre);
    Ok((z.iter().map(|&v| v > 0.0).collect(), min_gap))
}

const FD_STEP: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-6;

/// Largest relative error between analytic and central-difference
/// gradients at `probe_points` randomly chosen parameters.
pub fn grad_check(model: &SaeModel, x: ArrayView2<f64>, l1_coeff: f64, probe_points: usize) -> Result<f64> {
    grad_check_seeded(model, x, l1_coeff, probe_points, 0)
}

pub fn grad_check_seeded(
    model: &SaeModel,
    x: ArrayView2<f64>,
    l1_coeff: f64,
    probe_points: usize,
    seed: u64,
) -> Result<f64> {
    if probe_points == 0 {
        return Err(Error::InvalidArgument("grad_check needs at least one probe point".into()));
    }
    let (_, grads) = gradients(model, x, l1_coeff)?;
    let (h, d) = model.w_enc.dim();
    let total = 2 * h * d + h + d;
    let mut rng = util::rng(seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    let (base_pattern, _) = active_pattern(model, x)?;
    while checked < probe_points && attempts < probe_points * 100 {
        attempts += 1;
        let mut k = rng.random_range(0..total);
        let p = if k < h * d {
            Param::WEnc(k / d, k % d)
        } else {
            k -= h * d;
            if k < h {
                Param::BEnc(k)
            } else {
                k -= h;
                if k < h * d {
                    Param::WDec(k / d, k % d)
                } else {
                    Param::BDec(k - h * d)
                }
            }
        };
        let original = *param_mut(&mut probe, p);
        *param_mut(&mut probe, p) = original + FD_STEP;
        let (pat_plus, gap_plus) = active_pattern(&probe, x)?;
        let plus = probe.loss(x, l1_coeff)?.total;
        *param_mut(&mut probe, p) = original - FD_STEP;
        let (pat_minus, gap_minus) = active_pattern(&probe, x)?;
        let minus = probe.loss(x, l1_coeff)?.total;
        *param_mut(&mut probe, p) = original;

        let near_kink =
            matches!(model.nonlinearity, Nonlinearity::Relu) && gap_plus.min(gap_minus) < KINK_MARGIN;
        if pat_plus != base_pattern || pat_minus != base_pattern || near_kink {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grad_at(&grads, p);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::InvalidArgument(
            "every probed parameter sat on an activation kink".into(),
        ));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_dictionary, sample_batch};

    fn small_problem(seed: u64) -> (SaeModel, Array2<f64>) {
        let dict = make_dictionary(8, 6, seed).unwrap();
        let spec = FiringSpec::independent(vec![0.3; 6]);
        let batch = sample_batch(&dict, &spec, 32, seed).unwrap();
        let mut model = init_model(8, SaeShape { width: 4, nonlinearity: Nonlinearity::Relu }, seed).unwrap();
        // move off the tiny-init regime so every term matters
        model.w_enc.mapv_inplace(|v| v * 20.0);
        model.w_dec.mapv_inplace(|v| v * 15.0 + 0.05);
        model.b_enc.fill(0.05);
        model.b_dec.fill(-0.02);
        (model, batch.activations)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, x) = small_problem(4);
        let err = grad_check(&model, x.view(), 0.1, 120).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn smooth_case_is_tighter() {
        let (model, x) = small_problem(5);
        let err = grad_check(&model, x.view(), 0.0, 120).unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }

    #[test]
    fn batch_topk_gradients_match_with_fixed_selection() {
        let (mut model, x) = small_problem(6);
        model.nonlinearity = Nonlinearity::BatchTopK { k: 2 };
        let err = grad_check(&model, x.view(), 0.0, 100).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_batch_has_zero_encoder_gradient() {
        let (model, _) = small_problem(7);
        let x = Array2::zeros((5, 8));
        let mut m = model.clone();
        m.b_enc.fill(0.0);
        let (_, g) = gradients(&m, x.view(), 0.0).unwrap();
        assert!(g.w_enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_probe_points_is_rejected() {
        let (model, x) = small_problem(8);
        assert!(grad_check(&model, x.view(), 0.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig { total_samples: 10, batch_size: 20, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c.total_samples = 20;
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_streams_fresh_rows() {
        let dict = make_dictionary(10, 3, 1).unwrap();
        let spec = FiringSpec::independent(vec![0.3, 0.2, 0.1]);
        let shape = SaeShape { width: 3, nonlinearity: Nonlinearity::Relu };
        let cfg = TrainConfig {
            total_samples: 6400,
            batch_size: 64,
            learning_rate: 1e-2,
            l1_coeff: 1e-3,
            checkpoint_every: 10,
            ..TrainConfig::default()
        };
        let a = train(&dict, &spec, shape, &cfg).unwrap();
        let b = train(&dict, &spec, shape, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.samples_seen, 6400);
        let steps: Vec<usize> = a.checkpoints.iter().map(|c| c.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        let first = a.checkpoints.first().unwrap().report.total;
        let last = a.checkpoints.last().unwrap().report.total;
        assert!(last <= first, "{last} > {first}");
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let dict = make_dictionary(4, 2, 1).unwrap();
        let mut spec = FiringSpec::independent(vec![0.5, 0.5]);
        spec.magnitude_mean = vec![1e200, 1e200];
        let shape = SaeShape { width: 2, nonlinearity: Nonlinearity::Relu };
        let cfg = TrainConfig { total_samples: 64, batch_size: 8, ..TrainConfig::default() };
        let err = train(&dict, &spec, shape, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
