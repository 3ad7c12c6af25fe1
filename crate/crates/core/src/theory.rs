//! The δ-absorption construction for a parent/child feature pair.
//!
//! With orthonormal `f1` (parent) and `f2` (child), the bias-free ReLU SAE
//!
//! ```text
//! encoder rows: f1 − δ·f2,  f2
//! decoder rows: f1,         f2 + δ·f1
//! ```
//!
//! reconstructs `0`, `f1` and `f1 + f2` exactly for every δ in [0, 1], while
//! its expected L1 cost is `p11·(2 − δ) + p10`, which falls as δ grows.

use ndarray::{stack, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeModel;
use crate::synthgen::make_dictionary;
use crate::util;

/// Probabilities of the admissible (parent, child) firing cases. The
/// child-without-parent case has probability 0 and is not stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyProbabilities {
    pub p11: f64,
    pub p10: f64,
    pub p00: f64,
}

impl HierarchyProbabilities {
    pub fn new(p11: f64, p10: f64) -> Result<Self> {
        let p00 = 1.0 - p11 - p10;
        let probs = HierarchyProbabilities { p11, p10, p00 };
        probs.validate()?;
        Ok(probs)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.p11) || !in_unit(self.p10) || !(self.p00 >= -1e-12 && self.p00 <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid case probabilities {self:?}")));
        }
        if (self.p11 + self.p10 + self.p00 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("case probabilities must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiringCase {
    ParentOnly,
    Both,
    Neither,
}

impl FiringCase {
    pub const ALL: [FiringCase; 3] = [FiringCase::ParentOnly, FiringCase::Both, FiringCase::Neither];
}

#[derive(Clone, Debug)]
pub struct DeltaSae {
    pub delta: f64,
    pub dictionary: Array2<f64>,
    pub model: SaeModel,
}

pub const DEFAULT_DIM: usize = 50;

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("δ = {delta} outside [0, 1]")));
    }
    Ok(())
}

impl DeltaSae {
    /// `f1`, `f2` are the first two rows of a seeded orthonormal dictionary in `R^dim`.
    pub fn new(delta: f64, dim: usize, seed: u64) -> Result<Self> {
        let dict = make_dictionary(dim, 2, seed)?;
        Self::from_pair(delta, dict.directions)
    }

    /// Build from a `2 × d` matrix whose rows are `f1`, `f2`.
    pub fn from_pair(delta: f64, pair: Array2<f64>) -> Result<Self> {
        check_delta(delta)?;
        if pair.nrows() != 2 {
            return Err(Error::Shape("δ-SAE needs exactly two feature rows".into()));
        }
        let f1 = pair.row(0);
        let f2 = pair.row(1);
        let enc1 = &f1 - &(&f2 * delta);
        let dec2 = &f2 + &(&f1 * delta);
        let w_enc = stack(Axis(0), &[enc1.view(), f2]).expect("equal lengths");
        let w_dec = stack(Axis(0), &[f1, dec2.view()]).expect("equal lengths");
        let mut model = SaeModel::bias_free(w_enc, w_dec)?;
        model.provenance = format!("delta-sae:{delta}");
        Ok(DeltaSae {
            delta,
            dictionary: pair,
            model,
        })
    }

    pub fn input(&self, case: FiringCase) -> ndarray::Array1<f64> {
        let f1 = self.dictionary.row(0);
        let f2 = self.dictionary.row(1);
        match case {
            FiringCase::ParentOnly => f1.to_owned(),
            FiringCase::Both => &f1 + &f2,
            FiringCase::Neither => ndarray::Array1::zeros(f1.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub z1: f64,
    pub z2: f64,
    pub reconstruction_error_norm: f64,
}

/// Latents and reconstruction error for one case, through the real encode/decode path.
pub fn case_activations(dsae: &DeltaSae, case: FiringCase) -> Result<CaseOutcome> {
    let x = dsae.input(case).insert_axis(Axis(0));
    let acts = dsae.model.forward(x.view())?;
    Ok(CaseOutcome {
        z1: acts.latents[[0, 0]],
        z2: acts.latents[[0, 1]],
        reconstruction_error_norm: util::norm(acts.error.row(0)),
    })
}

/// `p11·(2 − δ) + p10`
pub fn sparsity_loss_closed_form(probs: HierarchyProbabilities, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    probs.validate()?;
    Ok(probs.p11 * (2.0 - delta) + probs.p10)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Monte Carlo `E[|z1| + |z2|]`, sampling cases with `probs` and encoding each input.
pub fn sparsity_loss_empirical(
    dsae: &DeltaSae,
    probs: HierarchyProbabilities,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    probs.validate()?;
    let mut rng = util::rng(seed);
    let d = dsae.model.input_dim();
    let mut x = Array2::<f64>::zeros((n_samples, d));
    let both = dsae.input(FiringCase::Both);
    let parent = dsae.input(FiringCase::ParentOnly);
    for mut row in x.outer_iter_mut() {
        let u: f64 = rng.random();
        if u < probs.p11 {
            row.assign(&both);
        } else if u < probs.p11 + probs.p10 {
            row.assign(&parent);
        }
    }
    let z = dsae.model.encode(x.view())?;
    let per_sample: Vec<f64> = z.outer_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    let n = n_samples as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = if n_samples > 1 {
        per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
    })
}

/// `(−p11, central difference of the closed form at δ with step h)`.
pub fn loss_derivative_check(probs: HierarchyProbabilities, delta: f64, h: f64) -> Result<(f64, f64)> {
    if !(h > 0.0) || delta - h < 0.0 || delta + h > 1.0 {
        return Err(Error::InvalidArgument(format!("δ ± h = {delta} ± {h} leaves [0, 1]")));
    }
    let up = sparsity_loss_closed_form(probs, delta + h)?;
    let down = sparsity_loss_closed_form(probs, delta - h)?;
    Ok((-probs.p11, (up - down) / (2.0 * h)))
}

/// Evenly spaced grid of `points` values on [0, 1].
pub fn delta_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSuite {
    pub grid_points: usize,
    pub max_error_norm: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPoint {
    pub p11: f64,
    pub p10: f64,
    pub delta: f64,
    pub closed_form: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySuite {
    pub n_samples: usize,
    pub points: Vec<SparsityPoint>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySuite {
    pub p11: f64,
    pub p10: f64,
    pub at_zero: f64,
    pub at_one: f64,
    pub strictly_decreasing: bool,
    pub analytic_slope: f64,
    pub numeric_slope: f64,
    pub slope_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub reconstruction: ReconstructionSuite,
    pub sparsity: SparsitySuite,
    pub monotonicity: Vec<MonotonicitySuite>,
    pub pass: bool,
}

pub const RECONSTRUCTION_TOL: f64 = 1e-9;
pub const SLOPE_TOL: f64 = 1e-12;
pub const SIGMA_BOUND: f64 = 3.0;

/// Exact reconstruction for every grid δ and admissible case.
pub fn verify_reconstruction(grid_points: usize, dim: usize, seed: u64) -> Result<ReconstructionSuite> {
    let mut worst: f64 = 0.0;
    for delta in delta_grid(grid_points) {
        let dsae = DeltaSae::new(delta, dim, seed)?;
        for case in FiringCase::ALL {
            worst = worst.max(case_activations(&dsae, case)?.reconstruction_error_norm);
        }
    }
    Ok(ReconstructionSuite {
        grid_points,
        max_error_norm: worst,
        tolerance: RECONSTRUCTION_TOL,
        pass: worst <= RECONSTRUCTION_TOL,
    })
}

pub fn verify_sparsity(
    cases: &[(f64, f64)],
    deltas: &[f64],
    n_samples: usize,
    dim: usize,
    seed: u64,
) -> Result<SparsitySuite> {
    let mut points = Vec::new();
    for (ci, &(p11, p10)) in cases.iter().enumerate() {
        let probs = HierarchyProbabilities::new(p11, p10)?;
        for (di, &delta) in deltas.iter().enumerate() {
            let dsae = DeltaSae::new(delta, dim, seed)?;
            let closed_form = sparsity_loss_closed_form(probs, delta)?;
            let stream = util::derive_seed(seed, (ci * 1000 + di) as u64 + 1);
            let mc = sparsity_loss_empirical(&dsae, probs, n_samples, stream)?;
            let gap = (mc.estimate - closed_form).abs();
            let z_score = if mc.std_error > 0.0 { gap / mc.std_error } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
            points.push(SparsityPoint {
                p11,
                p10,
                delta,
                closed_form,
                estimate: mc.estimate,
                std_error: mc.std_error,
                z_score,
                pass: gap <= SIGMA_BOUND * mc.std_error,
            });
        }
    }
    let pass = points.iter().all(|p| p.pass);
    Ok(SparsitySuite {
        n_samples,
        points,
        pass,
    })
}

pub fn verify_monotonicity(p11: f64, p10: f64, grid_points: usize) -> Result<MonotonicitySuite> {
    let probs = HierarchyProbabilities::new(p11, p10)?;
    let values: Vec<f64> = delta_grid(grid_points)
        .into_iter()
        .map(|d| sparsity_loss_closed_form(probs, d))
        .collect::<Result<_>>()?;
    let strictly_decreasing = values.windows(2).all(|w| w[1] < w[0]);
    let nonincreasing = values.windows(2).all(|w| w[1] <= w[0]);
    let (analytic_slope, numeric_slope) = loss_derivative_check(probs, 0.5, 0.01)?;
    let slope_error = (analytic_slope - numeric_slope).abs();
    let at_zero = sparsity_loss_closed_form(probs, 0.0)?;
    let at_one = sparsity_loss_closed_form(probs, 1.0)?;
    let endpoints = (at_zero - (2.0 * p11 + p10)).abs() <= 1e-15 && (at_one - (p11 + p10)).abs() <= 1e-15;
    let shape_ok = if p11 > 0.0 { strictly_decreasing } else { nonincreasing && !strictly_decreasing };
    Ok(MonotonicitySuite {
        p11,
        p10,
        at_zero,
        at_one,
        strictly_decreasing,
        analytic_slope,
        numeric_slope,
        slope_error,
        pass: shape_ok && endpoints && slope_error <= SLOPE_TOL,
    })
}

/// Run all three suites with the standard settings.
pub fn verify_theory(seed: u64) -> Result<TheoryReport> {
    let reconstruction = verify_reconstruction(101, DEFAULT_DIM, seed)?;
    let sparsity = verify_sparsity(
        &[(0.3, 0.2), (0.05, 0.20)],
        &[0.0, 0.25, 0.5, 0.75, 1.0],
        200_000,
        DEFAULT_DIM,
        seed,
    )?;
    let monotonicity = vec![
        verify_monotonicity(0.3, 0.2, 11)?,
        verify_monotonicity(0.05, 0.20, 11)?,
        verify_monotonicity(0.0, 0.4, 11)?,
    ];
    let pass = reconstruction.pass && sparsity.pass && monotonicity.iter().all(|m| m.pass);
    Ok(TheoryReport {
        reconstruction,
        sparsity,
        monotonicity,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn both_case_keeps_one_minus_delta_on_the_parent() {
        let dsae = DeltaSae::new(0.4, 50, 0).unwrap();
        let out = case_activations(&dsae, FiringCase::Both).unwrap();
        assert!(close(out.z1, 0.6) && close(out.z2, 1.0), "{out:?}");
        assert!(out.reconstruction_error_norm < 1e-12);
    }

    #[test]
    fn parent_only_case_at_full_absorption() {
        let dsae = DeltaSae::new(1.0, 50, 0).unwrap();
        let out = case_activations(&dsae, FiringCase::ParentOnly).unwrap();
        assert!(close(out.z1, 1.0) && out.z2.abs() < 1e-12);
        assert!(out.reconstruction_error_norm < 1e-12);
    }

    #[test]
    fn neither_case_is_silent() {
        for delta in [0.0, 0.3, 1.0] {
            let dsae = DeltaSae::new(delta, 50, 2).unwrap();
            let out = case_activations(&dsae, FiringCase::Neither).unwrap();
            assert_eq!((out.z1, out.z2, out.reconstruction_error_norm), (0.0, 0.0, 0.0));
        }
    }

    /// Weighted enumeration of the three cases, independent of the closed form.
    fn enumerate_cases(p11: f64, p10: f64, delta: f64) -> f64 {
        let both = (1.0 - delta) + 1.0;
        let parent = 1.0;
        p11 * both + p10 * parent
    }

    #[test]
    fn closed_form_matches_case_enumeration() {
        let probs = HierarchyProbabilities::new(0.3, 0.2).unwrap();
        assert!(close(sparsity_loss_closed_form(probs, 0.0).unwrap(), 0.8));
        assert!(close(enumerate_cases(0.3, 0.2, 0.0), 0.8));
        let probs = HierarchyProbabilities::new(0.05, 0.20).unwrap();
        assert!(close(sparsity_loss_closed_form(probs, 1.0).unwrap(), 0.25));
        assert!(close(enumerate_cases(0.05, 0.20, 1.0), 0.25));
        for d in delta_grid(11) {
            let v = sparsity_loss_closed_form(probs, d).unwrap();
            assert!(close(v, enumerate_cases(0.05, 0.20, d)));
        }
    }

    #[test]
    fn no_child_means_flat_loss() {
        let probs = HierarchyProbabilities::new(0.0, 0.35).unwrap();
        for d in delta_grid(5) {
            assert!(close(sparsity_loss_closed_form(probs, d).unwrap(), 0.35));
        }
        let (a, n) = loss_derivative_check(probs, 0.5, 0.1).unwrap();
        assert_eq!(a, 0.0);
        assert!(n.abs() < 1e-12);
    }

    #[test]
    fn derivative_is_minus_p11() {
        let probs = HierarchyProbabilities::new(0.25, 0.25).unwrap();
        let (a, n) = loss_derivative_check(probs, 0.5, 0.01).unwrap();
        assert_eq!(a, -0.25);
        assert!((n + 0.25).abs() <= 1e-12, "{n}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let probs = HierarchyProbabilities::new(0.2, 0.2).unwrap();
        assert!(sparsity_loss_closed_form(probs, 1.5).is_err());
        assert!(HierarchyProbabilities::new(0.7, 0.5).is_err());
        assert!(loss_derivative_check(probs, 0.995, 0.01).is_err());
        assert!(DeltaSae::new(-0.1, 50, 0).is_err());
    }

    #[test]
    fn empirical_loss_edge_cases() {
        let dsae = DeltaSae::new(0.5, 50, 0).unwrap();
        let silent = HierarchyProbabilities::new(0.0, 0.0).unwrap();
        let mc = sparsity_loss_empirical(&dsae, silent, 1000, 1).unwrap();
        assert_eq!(mc.estimate, 0.0);

        let dsae = DeltaSae::new(1.0, 50, 0).unwrap();
        let half = HierarchyProbabilities::new(0.5, 0.5).unwrap();
        let mc = sparsity_loss_empirical(&dsae, half, 20_000, 3).unwrap();
        // every sample costs exactly 1 at full absorption
        assert!((mc.estimate - 1.0).abs() < 1e-12, "{mc:?}");
    }

    #[test]
    fn empirical_loss_tracks_closed_form() {
        let probs = HierarchyProbabilities::new(0.3, 0.2).unwrap();
        for delta in [0.0, 0.5, 1.0] {
            let dsae = DeltaSae::new(delta, 50, 0).unwrap();
            let mc = sparsity_loss_empirical(&dsae, probs, 200_000, 17).unwrap();
            let cf = sparsity_loss_closed_form(probs, delta).unwrap();
            assert!((mc.estimate - cf).abs() <= 3.0 * mc.std_error, "δ={delta}: {mc:?} vs {cf}");
        }
    }
}
