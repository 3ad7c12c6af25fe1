//! Ground-truth feature dictionaries and synthetic activation batches.
//!
//! A [`FeatureDictionary`] holds `count` orthonormal directions in `R^dim`.
//! A [`FiringSpec`] says how often each feature fires, which features are
//! children of which parents, which features are mutually exclusive, and
//! how strongly each one fires. Activations are the magnitude-weighted sum
//! of the firing directions; nothing else (no noise) is added.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, serde_matrix, Rng};

const PROB_TOL: f64 = 1e-9;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    pub dim: usize,
    pub count: usize,
    /// `count × dim`, one unit feature direction per row.
    #[serde(with = "serde_matrix")]
    pub directions: Array2<f64>,
    pub seed: u64,
}

impl FeatureDictionary {
    pub fn direction(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.directions.row(i)
    }

    /// Largest deviation of `directions · directionsᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.directions.dot(&self.directions.t());
        gram.indexed_iter()
            .map(|((i, j), &g)| (g - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }
}

/// Draw a seeded Gaussian `count × dim` matrix and orthonormalize its rows
/// by Gram–Schmidt in row order.
pub fn make_dictionary(dim: usize, count: usize, seed: u64) -> Result<FeatureDictionary> {
    if dim == 0 || count == 0 {
        return Err(Error::Dimension(format!(
            "dictionary needs positive dim and count, got dim={dim}, count={count}"
        )));
    }
    if count > dim {
        return Err(Error::Dimension(format!(
            "cannot fit {count} orthonormal features in {dim} dimensions"
        )));
    }
    let mut rng = util::rng(seed);
    let mut directions = Array2::<f64>::zeros((count, dim));
    let mut i = 0;
    while i < count {
        let mut v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes of modified Gram-Schmidt keep the Gram error near 1e-16
        for _ in 0..2 {
            for j in 0..i {
                let prev = directions.row(j);
                let proj = util::dot(v.view(), prev);
                v.scaled_add(-proj, &prev);
            }
        }
        let n = util::norm(v.view());
        if n < 1e-8 {
            // numerically dependent draw; take the next one
            continue;
        }
        v /= n;
        directions.row_mut(i).assign(&v);
        i += 1;
    }
    Ok(FeatureDictionary {
        dim,
        count,
        directions,
        seed,
    })
}

/// The first `count` standard basis vectors of `R^dim`. Products and sums
/// of these are exact in floating point, which hand-built SAEs rely on.
pub fn standard_dictionary(dim: usize, count: usize) -> Result<FeatureDictionary> {
    if dim == 0 || count == 0 || count > dim {
        return Err(Error::Dimension(format!("need 0 < count <= dim, got dim={dim}, count={count}")));
    }
    let directions = Array2::from_shape_fn((count, dim), |(i, j)| if i == j { 1.0 } else { 0.0 });
    Ok(FeatureDictionary { dim, count, directions, seed: 0 })
}

/// Child fires with `cond_prob_given_parent` when its parent fired and with
/// `prob_without_parent` otherwise. A strict hierarchy has `prob_without_parent = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyEdge {
    pub parent_index: usize,
    pub child_index: usize,
    pub cond_prob_given_parent: f64,
    pub prob_without_parent: f64,
}

/// At most one member fires per row, chosen with probability `weights[i]`
/// (when `parent` is set, only on rows where the parent fired). If the
/// weights sum to 1, exactly one member fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusiveGroup {
    pub parent: Option<usize>,
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiringSpec {
    /// Firing probability of each feature that is neither a hierarchy child
    /// nor an exclusive-group member. Ignored for those features.
    pub base_prob: Vec<f64>,
    #[serde(default)]
    pub hierarchy: Vec<HierarchyEdge>,
    pub magnitude_mean: Vec<f64>,
    pub magnitude_std: Vec<f64>,
    #[serde(default)]
    pub exclusive_groups: Vec<ExclusiveGroup>,
}

impl FiringSpec {
    /// Independent features with unit magnitude and no variance.
    pub fn independent(base_prob: Vec<f64>) -> Self {
        let n = base_prob.len();
        FiringSpec {
            base_prob,
            hierarchy: Vec::new(),
            magnitude_mean: vec![1.0; n],
            magnitude_std: vec![0.0; n],
            exclusive_groups: Vec::new(),
        }
    }

    pub fn with_child(mut self, parent: usize, child: usize, cond: f64, without: f64) -> Self {
        self.hierarchy.push(HierarchyEdge {
            parent_index: parent,
            child_index: child,
            cond_prob_given_parent: cond,
            prob_without_parent: without,
        });
        self
    }

    pub fn with_group(mut self, parent: Option<usize>, members: Vec<usize>, weights: Vec<f64>) -> Self {
        self.exclusive_groups.push(ExclusiveGroup {
            parent,
            members,
            weights,
        });
        self
    }

    pub fn with_magnitude(mut self, feature: usize, mean: f64, std: f64) -> Self {
        self.magnitude_mean[feature] = mean;
        self.magnitude_std[feature] = std;
        self
    }

    pub fn len(&self) -> usize {
        self.base_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_prob.is_empty()
    }

    /// Exact overall firing rate of every feature implied by this firing spec.
    pub fn marginal_rates(&self) -> Result<Vec<f64>> {
        let plan = DrawPlan::build(self)?;
        let mut rate = vec![0.0; self.len()];
        for unit in &plan.order {
            match unit {
                Unit::Root(f) => rate[*f] = self.base_prob[*f],
                Unit::Child(e) => {
                    let e = &self.hierarchy[*e];
                    let p = rate[e.parent_index];
                    rate[e.child_index] =
                        p * e.cond_prob_given_parent + (1.0 - p) * e.prob_without_parent;
                }
                Unit::Group(g) => {
                    let g = &self.exclusive_groups[*g];
                    let gate = g.parent.map_or(1.0, |p| rate[p]);
                    for (&m, &w) in g.members.iter().zip(&g.weights) {
                        rate[m] = gate * w;
                    }
                }
            }
        }
        Ok(rate)
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        DrawPlan::build(self)?;
        if self.len() != count {
            return Err(Error::Shape(format!(
                "firing spec covers {} features, dictionary has {count}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Conditional probability that keeps a child's overall rate at `overall`
/// when it may only fire alongside a parent of rate `parent_rate`.
pub fn conditional_from_overall(overall: f64, parent_rate: f64) -> f64 {
    overall / parent_rate
}

#[derive(Clone, Copy, Debug)]
enum Unit {
    Root(usize),
    Child(usize),
    Group(usize),
}

/// Draw order resolving hierarchy and group dependencies.
#[derive(Clone, Debug)]
struct DrawPlan {
    order: Vec<Unit>,
}

impl DrawPlan {
    fn build(spec: &FiringSpec) -> Result<Self> {
        let n = spec.len();
        if spec.magnitude_mean.len() != n || spec.magnitude_std.len() != n {
            return Err(Error::Shape(format!(
                "firing spec vectors disagree: base_prob {n}, magnitude_mean {}, magnitude_std {}",
                spec.magnitude_mean.len(),
                spec.magnitude_std.len()
            )));
        }
        let check_prob = |p: f64, what: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Spec(format!("{what} = {p} is not a probability")));
            }
            Ok(())
        };
        for (i, &p) in spec.base_prob.iter().enumerate() {
            check_prob(p, &format!("base_prob[{i}]"))?;
        }
        for i in 0..n {
            let (m, s) = (spec.magnitude_mean[i], spec.magnitude_std[i]);
            if !m.is_finite() || m <= 0.0 || !s.is_finite() || s < 0.0 {
                return Err(Error::Spec(format!(
                    "feature {i}: magnitude mean must be positive and std nonnegative, got ({m}, {s})"
                )));
            }
        }

        // owner[f] = unit that decides feature f
        let mut owner: Vec<Option<Unit>> = vec![None; n];
        let mut parent_of_unit: Vec<(Unit, Option<usize>)> = Vec::new();
        for (ei, e) in spec.hierarchy.iter().enumerate() {
            if e.parent_index >= n || e.child_index >= n {
                return Err(Error::Spec(format!("hierarchy entry {ei} references a missing feature")));
            }
            if e.parent_index == e.child_index {
                return Err(Error::Spec(format!("feature {} is its own parent", e.child_index)));
            }
            check_prob(e.cond_prob_given_parent, "cond_prob_given_parent")?;
            check_prob(e.prob_without_parent, "prob_without_parent")?;
            if owner[e.child_index].is_some() {
                return Err(Error::Spec(format!(
                    "feature {} appears as a child more than once",
                    e.child_index
                )));
            }
            owner[e.child_index] = Some(Unit::Child(ei));
            parent_of_unit.push((Unit::Child(ei), Some(e.parent_index)));
        }
        for (gi, g) in spec.exclusive_groups.iter().enumerate() {
            if g.members.is_empty() || g.members.len() != g.weights.len() {
                return Err(Error::Spec(format!(
                    "exclusive group {gi} needs one weight per member"
                )));
            }
            if let Some(p) = g.parent {
                if p >= n || g.members.contains(&p) {
                    return Err(Error::Spec(format!("exclusive group {gi} has an invalid parent")));
                }
            }
            for &w in &g.weights {
                check_prob(w, "exclusive group weight")?;
            }
            let total: f64 = g.weights.iter().sum();
            if total > 1.0 + PROB_TOL {
                return Err(Error::Spec(format!(
                    "exclusive group {gi} weights sum to {total} > 1"
                )));
            }
            for &m in &g.members {
                if m >= n {
                    return Err(Error::Spec(format!("exclusive group {gi} references a missing feature")));
                }
                if owner[m].is_some() {
                    return Err(Error::Spec(format!(
                        "feature {m} is constrained by more than one hierarchy entry or group"
                    )));
                }
                owner[m] = Some(Unit::Group(gi));
            }
            parent_of_unit.push((Unit::Group(gi), g.parent));
        }

        // Kahn's algorithm over units; roots first in index order.
        let mut done = vec![false; n];
        let mut order: Vec<Unit> = Vec::new();
        for f in 0..n {
            if owner[f].is_none() {
                order.push(Unit::Root(f));
                done[f] = true;
            }
        }
        let mut pending = parent_of_unit;
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for (unit, parent) in pending {
                if parent.is_none_or(|p| done[p]) {
                    order.push(unit);
                    match unit {
                        Unit::Child(ei) => done[spec.hierarchy[ei].child_index] = true,
                        Unit::Group(gi) => {
                            for &m in &spec.exclusive_groups[gi].members {
                                done[m] = true;
                            }
                        }
                        Unit::Root(_) => unreachable!(),
                    }
                } else {
                    rest.push((unit, parent));
                }
            }
            if rest.len() == before {
                return Err(Error::Spec("hierarchy contains a cycle".into()));
            }
            pending = rest;
        }
        Ok(DrawPlan { order })
    }
}

/// Endless stream of rows drawn from a spec. Rows are never repeated:
/// `rows_drawn` only grows.
pub struct FiringSampler<'a> {
    dict: &'a FeatureDictionary,
    spec: &'a FiringSpec,
    plan: DrawPlan,
    rng: Rng,
    rows_drawn: u64,
}

impl<'a> FiringSampler<'a> {
    pub fn new(dict: &'a FeatureDictionary, spec: &'a FiringSpec, seed: u64) -> Result<Self> {
        spec.validate(dict.count)?;
        Ok(FiringSampler {
            dict,
            spec,
            plan: DrawPlan::build(spec)?,
            rng: util::rng(seed),
            rows_drawn: 0,
        })
    }

    pub fn rows_drawn(&self) -> u64 {
        self.rows_drawn
    }

    /// Next `n` rows of firing magnitudes (`n × count`).
    pub fn next_firings(&mut self, n: usize) -> Array2<f64> {
        let count = self.dict.count;
        let mut firings = Array2::<f64>::zeros((n, count));
        let mut fired = vec![false; count];
        for mut row in firings.outer_iter_mut() {
            fired.iter_mut().for_each(|f| *f = false);
            for unit in &self.plan.order {
                match *unit {
                    Unit::Root(f) => {
                        fired[f] = self.rng.random::<f64>() < self.spec.base_prob[f];
                    }
                    Unit::Child(ei) => {
                        let e = &self.spec.hierarchy[ei];
                        let p = if fired[e.parent_index] {
                            e.cond_prob_given_parent
                        } else {
                            e.prob_without_parent
                        };
                        fired[e.child_index] = self.rng.random::<f64>() < p;
                    }
                    Unit::Group(gi) => {
                        let g = &self.spec.exclusive_groups[gi];
                        let u = self.rng.random::<f64>();
                        if g.parent.is_none_or(|p| fired[p]) {
                            let mut acc = 0.0;
                            for (&m, &w) in g.members.iter().zip(&g.weights) {
                                acc += w;
                                if u < acc {
                                    fired[m] = true;
                                    break;
                                }
                            }
                        }
                    }
                }
            }
            for f in 0..count {
                if fired[f] {
                    row[f] = self.magnitude(f);
                }
            }
            self.rows_drawn += 1;
        }
        firings
    }

    /// Next `n` rows as `(activations, firings)`.
    pub fn next_batch(&mut self, n: usize) -> (Array2<f64>, Array2<f64>) {
        let firings = self.next_firings(n);
        (activations_from_firings(&firings, self.dict), firings)
    }

    fn magnitude(&mut self, f: usize) -> f64 {
        let mean = self.spec.magnitude_mean[f];
        let std = self.spec.magnitude_std[f];
        if std == 0.0 {
            return mean;
        }
        let normal = Normal::new(mean, std).expect("validated magnitude law");
        // truncated at 0 by rejection; mean > 0 keeps acceptance above 1/2
        loop {
            let m = normal.sample(&mut self.rng);
            if m > 0.0 {
                return m;
            }
        }
    }
}

/// `firings · directions`, the only way activations are ever formed.
pub fn activations_from_firings(firings: &Array2<f64>, dict: &FeatureDictionary) -> Array2<f64> {
    firings.dot(&dict.directions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationBatch {
    /// `n × dim`
    #[serde(with = "serde_matrix")]
    pub activations: Array2<f64>,
    /// `n × count` ground-truth firing magnitudes, 0 where a feature is silent.
    #[serde(with = "serde_matrix")]
    pub firings: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub split: Vec<Split>,
}

impl ActivationBatch {
    pub fn len(&self) -> usize {
        self.activations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Largest absolute entry of `activations − firings · directions`.
    pub fn reconstruction_residual(&self, dict: &FeatureDictionary) -> f64 {
        let rebuilt = activations_from_firings(&self.firings, dict);
        (&self.activations - &rebuilt)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn fires(&self, row: usize, feature: usize) -> bool {
        self.firings[[row, feature]] > 0.0
    }

    /// Subset of rows, preserving order.
    pub fn select(&self, rows: &[usize]) -> ActivationBatch {
        ActivationBatch {
            activations: self.activations.select(Axis(0), rows),
            firings: self.firings.select(Axis(0), rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&i| l[i]).collect()),
            split: rows.iter().map(|&i| self.split[i]).collect(),
        }
    }
}

/// Seeded 80/20 train/test assignment; `round(0.8 n)` rows are train.
pub fn split_tags(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut util::rng(util::derive_seed(seed, 0x5_9117)));
    let mut tags = vec![Split::Test; n];
    for &i in &idx[..n_train] {
        tags[i] = Split::Train;
    }
    tags
}

pub fn sample_batch(
    dict: &FeatureDictionary,
    spec: &FiringSpec,
    n: usize,
    seed: u64,
) -> Result<ActivationBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut sampler = FiringSampler::new(dict, spec, seed)?;
    let (activations, firings) = sampler.next_batch(n);
    Ok(ActivationBatch {
        activations,
        firings,
        labels: None,
        split: split_tags(n, seed),
    })
}

/// Batch whose label is the one class feature (indices `0..classes`) firing
/// in each row. The firing spec must contain a root exclusive group over exactly
/// those features whose weights sum to 1.
pub fn make_labeled_task(
    dict: &FeatureDictionary,
    spec: &FiringSpec,
    classes: usize,
    n: usize,
    seed: u64,
) -> Result<ActivationBatch> {
    if classes == 0 || classes > dict.count {
        return Err(Error::InvalidArgument(format!(
            "need 1..={} classes, got {classes}",
            dict.count
        )));
    }
    spec.validate(dict.count)?;
    let wanted: BTreeSet<usize> = (0..classes).collect();
    let group = spec
        .exclusive_groups
        .iter()
        .find(|g| g.members.iter().any(|m| wanted.contains(m)))
        .ok_or_else(|| {
            Error::Spec("class features are not drawn from an exclusive group, so a row may carry zero or several classes".into())
        })?;
    let members: BTreeSet<usize> = group.members.iter().copied().collect();
    let total: f64 = group.weights.iter().sum();
    if group.parent.is_some() || members != wanted || (total - 1.0).abs() > PROB_TOL {
        return Err(Error::Spec(format!(
            "class features 0..{classes} must form one unconditional exclusive group with weights summing to 1"
        )));
    }
    let mut batch = sample_batch(dict, spec, n, seed)?;
    let mut labels = Vec::with_capacity(n);
    for (i, row) in batch.firings.outer_iter().enumerate() {
        let firing: Vec<usize> = (0..classes).filter(|&c| row[c] > 0.0).collect();
        match firing.as_slice() {
            [c] => labels.push(*c),
            _ => {
                return Err(Error::Spec(format!(
                    "row {i} carries {} class features",
                    firing.len()
                )))
            }
        }
    }
    batch.labels = Some(labels);
    Ok(batch)
}
