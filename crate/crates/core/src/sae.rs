//! Sparse autoencoder models: encode, decode, loss and summary statistics.
//!
//! Convention: encoder and decoder are both stored `H × d`, so row `i` of
//! `w_enc` is the encoder vector of latent `i` and row `i` of `w_dec` its
//! decoder vector. Batches are `N × d` with one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, serde_matrix, serde_vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    /// Keep the `k · N` largest positive pre-activations across a batch of `N` rows.
    BatchTopK { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeModel {
    #[serde(with = "serde_matrix")]
    pub w_enc: Array2<f64>,
    #[serde(with = "serde_vector")]
    pub b_enc: Array1<f64>,
    #[serde(with = "serde_matrix")]
    pub w_dec: Array2<f64>,
    #[serde(with = "serde_vector")]
    pub b_dec: Array1<f64>,
    pub nonlinearity: Nonlinearity,
    /// Digest of the configuration that produced the weights.
    pub provenance: String,
}

/// Result of a full forward pass.
#[derive(Clone, Debug)]
pub struct SaeActivations {
    pub latents: Array2<f64>,
    pub reconstruction: Array2<f64>,
    /// `input − reconstruction`
    pub error: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_mse: f64,
    pub sparsity_l1: f64,
    pub l1_coeff: f64,
    pub total: f64,
    pub l0_mean: f64,
    pub explained_variance: f64,
}

impl SaeModel {
    /// Model with the given weights; validates shapes and finiteness.
    pub fn new(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let model = SaeModel {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            nonlinearity,
            provenance: String::new(),
        };
        model.validate()?;
        Ok(model)
    }

    /// ReLU model with zero biases and the given encoder/decoder rows.
    pub fn bias_free(w_enc: Array2<f64>, w_dec: Array2<f64>) -> Result<Self> {
        let (h, d) = w_enc.dim();
        Self::new(w_enc, Array1::zeros(h), w_dec, Array1::zeros(d), Nonlinearity::Relu)
    }

    pub fn width(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = self.w_enc.dim();
        if h == 0 || d == 0 {
            return Err(Error::Shape("SAE needs at least one latent and one input dimension".into()));
        }
        if self.w_dec.dim() != (h, d) || self.b_enc.len() != h || self.b_dec.len() != d {
            return Err(Error::Shape(format!(
                "encoder {h}x{d}, decoder {:?}, b_enc {}, b_dec {}",
                self.w_dec.dim(),
                self.b_enc.len(),
                self.b_dec.len()
            )));
        }
        if let Nonlinearity::BatchTopK { k } = self.nonlinearity {
            if k == 0 || k > h {
                return Err(Error::InvalidArgument(format!("BatchTopK k={k} must lie in 1..={h}")));
            }
        }
        let finite = util::all_finite(self.w_enc.iter())
            && util::all_finite(self.w_dec.iter())
            && util::all_finite(self.b_enc.iter())
            && util::all_finite(self.b_dec.iter());
        if !finite {
            return Err(Error::InvalidArgument("SAE parameters must be finite".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, SAE expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `W_enc a + b_enc` for every row.
    pub fn pre_activations(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(x.dot(&self.w_enc.t()) + &self.b_enc)
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let pre = self.pre_activations(x)?;
        Ok(self.activate(pre))
    }

    /// Apply the nonlinearity to a batch of pre-activations.
    pub fn activate(&self, mut pre: Array2<f64>) -> Array2<f64> {
        match self.nonlinearity {
            Nonlinearity::Relu => {
                pre.mapv_inplace(|v| v.max(0.0));
                pre
            }
            Nonlinearity::BatchTopK { k } => {
                let keep = batch_topk_mask(&pre, k * pre.nrows());
                let mut out = Array2::zeros(pre.dim());
                for (flat, &on) in keep.iter().enumerate() {
                    if on {
                        let (r, c) = (flat / pre.ncols(), flat % pre.ncols());
                        out[[r, c]] = pre[[r, c]];
                    }
                }
                out
            }
        }
    }

    pub fn decode(&self, latents: ArrayView2<f64>) -> Result<Array2<f64>> {
        if latents.ncols() != self.width() {
            return Err(Error::Shape(format!(
                "latents have {} columns, SAE has {} latents",
                latents.ncols(),
                self.width()
            )));
        }
        Ok(latents.dot(&self.w_dec) + &self.b_dec)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<SaeActivations> {
        let latents = self.encode(x)?;
        let reconstruction = self.decode(latents.view())?;
        let error = &x - &reconstruction;
        Ok(SaeActivations {
            latents,
            reconstruction,
            error,
        })
    }

    /// Loss and statistics on a batch. The `λ` term only enters `total`
    /// for ReLU models; BatchTopK sparsity is structural.
    pub fn loss(&self, x: ArrayView2<f64>, l1_coeff: f64) -> Result<LossReport> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("loss of an empty batch".into()));
        }
        if !(l1_coeff >= 0.0) {
            return Err(Error::InvalidArgument(format!("l1 coefficient {l1_coeff} < 0")));
        }
        let acts = self.forward(x)?;
        Ok(self.loss_from(x, &acts, l1_coeff))
    }

    pub(crate) fn loss_from(&self, x: ArrayView2<f64>, acts: &SaeActivations, l1_coeff: f64) -> LossReport {
        let n = x.nrows() as f64;
        let recon_mse = acts.error.iter().map(|e| e * e).sum::<f64>() / n;
        let sparsity_l1 = acts.latents.iter().map(|z| z.abs()).sum::<f64>() / n;
        let l0_mean = acts.latents.iter().filter(|&&z| z > 0.0).count() as f64 / n;
        let lambda_term = match self.nonlinearity {
            Nonlinearity::Relu => l1_coeff * sparsity_l1,
            Nonlinearity::BatchTopK { .. } => 0.0,
        };
        let variance = total_variance(x);
        let explained_variance = if variance > 0.0 {
            1.0 - recon_mse / variance
        } else if recon_mse == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        LossReport {
            recon_mse,
            sparsity_l1,
            l1_coeff,
            total: recon_mse + lambda_term,
            l0_mean,
            explained_variance,
        }
    }
}

/// Mean squared distance of the rows from their centroid.
pub fn total_variance(x: ArrayView2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    (&x - &mean).iter().map(|v| v * v).sum::<f64>() / n
}

/// Row-major flat mask of the `budget` largest strictly positive entries.
/// Ties at the boundary go to the lower flat index.
pub fn batch_topk_mask(pre: &Array2<f64>, budget: usize) -> Vec<bool> {
    let flat: Vec<f64> = pre.iter().copied().collect();
    let mut candidates: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] > 0.0).collect();
    let mut keep = vec![false; flat.len()];
    let order = |a: &usize, b: &usize| flat[*b].total_cmp(&flat[*a]).then(a.cmp(b));
    if candidates.len() > budget {
        if budget == 0 {
            return keep;
        }
        candidates.select_nth_unstable_by(budget - 1, order);
        candidates.truncate(budget);
    }
    for i in candidates {
        keep[i] = true;
    }
    keep
}
