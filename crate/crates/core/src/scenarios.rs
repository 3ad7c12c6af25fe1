//! Shipped experiments, their pass/fail checks, artifact output and sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    absorption_alt_with_splits, absorption_main_with_splits, cosine_map, detect_splitting, AbsorptionConfig, AbsorptionReport, Readout,
    SplitResult,
};
use crate::error::{Error, Result};
use crate::io::{self, Persist};
use crate::probes::{self, Classifier, LabeledData, ProbeConfig};
use crate::sae::{Nonlinearity, SaeModel};
use crate::synthgen::{make_dictionary, make_labeled_task, standard_dictionary, sample_batch, ActivationBatch, FeatureDictionary, FiringSpec};
use crate::theory::verify_theory;
use crate::trainer::{train, DecoderNormPolicy, SaeShape, TrainConfig};
use crate::{svg, util};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ToyIndependent,
    ToyHierarchical,
    ToyPartial,
    ToyImperfect,
    ToyTopk,
    ToySplit,
    DeltaWorld,
    TheoryVerify,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::ToyIndependent,
        Scenario::ToyHierarchical,
        Scenario::ToyPartial,
        Scenario::ToyImperfect,
        Scenario::ToyTopk,
        Scenario::ToySplit,
        Scenario::DeltaWorld,
        Scenario::TheoryVerify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ToyIndependent => "toy-independent",
            Scenario::ToyHierarchical => "toy-hierarchical",
            Scenario::ToyPartial => "toy-partial",
            Scenario::ToyImperfect => "toy-imperfect",
            Scenario::ToyTopk => "toy-topk",
            Scenario::ToySplit => "toy-split",
            Scenario::DeltaWorld => "delta-world",
            Scenario::TheoryVerify => "theory-verify",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// A hand-built world where a parent class feature has been absorbed with
/// strength `delta` into each of several child features.
///
/// Feature layout: `0` is the parent class, `1..=other_classes` the other
/// classes, then the children (which fire only with the parent, at most one
/// at a time), then independent spectators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaWorldConfig {
    pub delta: f64,
    /// P(parent and some child).
    pub p11: f64,
    /// P(parent without a child).
    pub p10: f64,
    pub children: usize,
    pub other_classes: usize,
    pub spectators: usize,
    pub spectator_prob: f64,
}

impl Default for DeltaWorldConfig {
    fn default() -> Self {
        DeltaWorldConfig {
            delta: 1.0,
            p11: 0.05,
            p10: 0.20,
            children: 10,
            other_classes: 9,
            spectators: 2,
            spectator_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeltaWorld {
    pub dict: FeatureDictionary,
    pub spec: FiringSpec,
    pub sae: SaeModel,
    pub classes: usize,
    pub children: Vec<usize>,
}

impl DeltaWorldConfig {
    pub fn feature_count(&self) -> usize {
        1 + self.other_classes + self.children + self.spectators
    }

    pub fn expected_parent_rate(&self) -> f64 {
        if self.delta == 1.0 {
            self.p11 / (self.p11 + self.p10)
        } else {
            0.0
        }
    }

    /// Features sit on the standard basis so that absorbed pre-activations
    /// cancel to exactly 0.
    pub fn build(&self, dim: usize) -> Result<DeltaWorld> {
        let parent_rate = self.p11 + self.p10;
        if !(0.0..=1.0).contains(&self.delta) || self.children == 0 || self.other_classes == 0 || !(parent_rate > 0.0 && parent_rate < 1.0) {
            return Err(Error::InvalidArgument(format!("invalid delta world {self:?}")));
        }
        let classes = 1 + self.other_classes;
        let children: Vec<usize> = (classes..classes + self.children).collect();
        let dict = standard_dictionary(dim, self.feature_count())?;
        let mut base = vec![0.0; self.feature_count()];
        base[classes + self.children..].fill(self.spectator_prob);
        let other = (1.0 - parent_rate) / self.other_classes as f64;
        let mut class_weights = vec![other; classes];
        class_weights[0] = parent_rate;
        let child_weight = self.p11 / parent_rate / self.children as f64;
        let spec = FiringSpec::independent(base)
            .with_group(None, (0..classes).collect(), class_weights)
            .with_group(Some(0), children.clone(), vec![child_weight; self.children]);
        spec.validate(dict.count)?;

        let mut w_enc = dict.directions.clone();
        let mut w_dec = dict.directions.clone();
        for &c in &children {
            let child = dict.directions.row(c).to_owned();
            let parent = dict.directions.row(0).to_owned();
            w_enc.row_mut(0).scaled_add(-self.delta, &child);
            w_dec.row_mut(c).scaled_add(self.delta, &parent);
        }
        let mut sae = SaeModel::bias_free(w_enc, w_dec)?;
        sae.provenance = format!("delta-world:{}", self.delta);
        Ok(DeltaWorld { dict, spec, sae, classes, children })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum World {
    /// Train an SAE on `firing` over a seeded dictionary. `classes > 0`
    /// means the first `classes` features label each row.
    Trained {
        dim: usize,
        firing: FiringSpec,
        shape: SaeShape,
        train: TrainConfig,
        eval_samples: usize,
        classes: usize,
    },
    Delta {
        dim: usize,
        world: DeltaWorldConfig,
        eval_samples: usize,
    },
    Theory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub world: World,
    pub probe: ProbeConfig,
    pub absorption: AbsorptionConfig,
}

impl Persist for ExperimentConfig {
    const FORMAT: &'static str = "experiment_config";
}

const DIM: usize = 50;
const EVAL_SAMPLES: usize = 20_000;

fn relu_train(l1_coeff: f64, policy: DecoderNormPolicy) -> TrainConfig {
    TrainConfig {
        l1_coeff,
        learning_rate: 1e-3,
        total_samples: 2_000_000,
        batch_size: 256,
        decoder_norm_policy: policy,
        checkpoint_every: 500,
        ..TrainConfig::default()
    }
}

fn four_feature_toy() -> FiringSpec {
    FiringSpec::independent(vec![0.25, 0.05, 0.05, 0.05])
}

fn trained(firing: FiringSpec, width: usize, nonlinearity: Nonlinearity, train: TrainConfig, classes: usize) -> World {
    World::Trained {
        dim: DIM,
        firing,
        shape: SaeShape { width, nonlinearity },
        train,
        eval_samples: EVAL_SAMPLES,
        classes,
    }
}

impl ExperimentConfig {
    /// The shipped configuration of a scenario.
    pub fn preset(scenario: Scenario, seed: u64) -> Self {
        let relu = Nonlinearity::Relu;
        let world = match scenario {
            Scenario::ToyIndependent => trained(four_feature_toy(), 4, relu, relu_train(1e-2, DecoderNormPolicy::None), 0),
            Scenario::ToyHierarchical => trained(
                four_feature_toy().with_child(0, 1, 0.2, 0.0),
                4,
                relu,
                relu_train(1e-2, DecoderNormPolicy::None),
                0,
            ),
            Scenario::ToyPartial => trained(
                four_feature_toy().with_child(0, 1, 0.2, 0.0).with_magnitude(0, 1.0, 0.1f64.sqrt()),
                4,
                relu,
                relu_train(1e-2, DecoderNormPolicy::UnitRenormEachStep),
                0,
            ),
            Scenario::ToyImperfect => trained(
                four_feature_toy().with_child(0, 1, 0.19, 0.0025 / 0.75),
                4,
                relu,
                relu_train(1e-2, DecoderNormPolicy::UnitRenormEachStep),
                0,
            ),
            Scenario::ToyTopk => {
                let mut p = vec![0.15; 12];
                p[0] = 0.4;
                trained(
                    FiringSpec::independent(p).with_child(0, 1, 0.6, 0.0),
                    12,
                    Nonlinearity::BatchTopK { k: 2 },
                    relu_train(0.0, DecoderNormPolicy::None),
                    0,
                )
            }
            Scenario::ToySplit => trained(
                FiringSpec::independent(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.2])
                    .with_group(None, vec![0, 1, 2], vec![1.0 / 3.0; 3])
                    .with_group(Some(0), vec![3, 4], vec![0.5, 0.5]),
                7,
                relu,
                relu_train(1e-2, DecoderNormPolicy::None),
                3,
            ),
            Scenario::DeltaWorld => World::Delta {
                dim: DIM,
                world: DeltaWorldConfig::default(),
                eval_samples: 100_000,
            },
            Scenario::TheoryVerify => World::Theory,
        };
        let mut cfg = ExperimentConfig {
            scenario,
            seed,
            world,
            probe: ProbeConfig::default(),
            absorption: AbsorptionConfig::default(),
        };
        cfg.reseed(seed);
        cfg
    }

    /// Set the global seed and every seed derived from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.absorption.seed = util::derive_seed(seed, 4);
        if let World::Trained { train, .. } = &mut self.world {
            train.seed = seed;
        }
    }
}

/// A world's fixed ingredients: dictionary, firing law and held-out batch,
/// plus the SAE when the world constructs one instead of training it.
#[derive(Clone, Debug)]
pub struct WorldData {
    pub dict: FeatureDictionary,
    pub firing: FiringSpec,
    pub eval: ActivationBatch,
    pub constructed: Option<SaeModel>,
    pub classes: usize,
}

pub fn materialize(cfg: &ExperimentConfig) -> Result<WorldData> {
    let eval_seed = util::derive_seed(cfg.seed, 3);
    match &cfg.world {
        World::Trained { dim, firing, eval_samples, classes, .. } => {
            let dict = make_dictionary(*dim, firing.len(), cfg.seed)?;
            let eval = if *classes > 0 {
                make_labeled_task(&dict, firing, *classes, *eval_samples, eval_seed)?
            } else {
                sample_batch(&dict, firing, *eval_samples, eval_seed)?
            };
            Ok(WorldData { dict, firing: firing.clone(), eval, constructed: None, classes: *classes })
        }
        World::Delta { dim, world, eval_samples } => {
            let built = world.build(*dim)?;
            let eval = make_labeled_task(&built.dict, &built.spec, built.classes, *eval_samples, eval_seed)?;
            Ok(WorldData { dict: built.dict, firing: built.spec, eval, constructed: Some(built.sae), classes: built.classes })
        }
        World::Theory => Err(Error::InvalidArgument("the theory scenario has no data world".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), passed, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub artifacts: Vec<String>,
}

impl Persist for ScenarioOutcome {
    const FORMAT: &'static str = "scenario_outcome";
}

/// Index of the row of `cos` (latents × features) that best matches a feature.
fn best_latent(cos: &Array2<f64>, feature: usize) -> usize {
    probes::argmax(cos.column(feature))
}

/// Feature → latent assignment maximizing the summed cosine (exhaustive;
/// meant for toy sizes).
pub fn best_permutation(cos: &Array2<f64>) -> Result<Vec<usize>> {
    let (latents, features) = cos.dim();
    if features > latents || features > 9 {
        return Err(Error::InvalidArgument(format!("cannot assign {features} features to {latents} latents exhaustively")));
    }
    fn search(cos: &Array2<f64>, f: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>), acc: f64) {
        if f == cos.ncols() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for l in 0..cos.nrows() {
            if !used[l] {
                used[l] = true;
                cur.push(l);
                search(cos, f + 1, used, cur, best, acc + cos[[l, f]]);
                cur.pop();
                used[l] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    search(cos, 0, &mut vec![false; latents], &mut Vec::new(), &mut best, 0.0);
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// `assignment[f]` is the latent matched to feature `f`.
    pub assignment: Vec<usize>,
    pub decoder_cosines: Vec<f64>,
    pub encoder_argmax_matches: bool,
}

pub fn recovery(sae: &SaeModel, dict: &FeatureDictionary) -> Result<Recovery> {
    let dec = cosine_map(sae.w_dec.view(), dict.directions.view())?;
    let enc = cosine_map(sae.w_enc.view(), dict.directions.view())?;
    let assignment = best_permutation(&dec)?;
    let decoder_cosines = assignment.iter().enumerate().map(|(f, &l)| dec[[l, f]]).collect();
    let encoder_argmax_matches = assignment.iter().enumerate().all(|(f, &l)| best_latent(&enc, f) == l);
    Ok(Recovery { assignment, decoder_cosines, encoder_argmax_matches })
}

/// Geometry and firing of a parent/child pair inside a trained SAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchySignature {
    pub parent_latent: usize,
    pub child_latent: usize,
    pub child_decoder_cos_parent: f64,
    pub parent_encoder_cos_child: f64,
    pub parent_only_mean: f64,
    pub both_firing_rows: usize,
    /// Parent-latent activation on each both-firing row, with the parent magnitude.
    pub both_firing: Vec<(f64, f64)>,
}

impl HierarchySignature {
    /// Fraction of both-firing rows where the parent latent is at most
    /// `ratio` times its parent-only mean.
    pub fn silenced_fraction(&self, ratio: f64) -> f64 {
        if self.both_firing.is_empty() {
            return 0.0;
        }
        let bound = ratio * self.parent_only_mean;
        self.both_firing.iter().filter(|(z, _)| *z <= bound).count() as f64 / self.both_firing.len() as f64
    }

    pub fn weak_rows(&self, ratio: f64) -> usize {
        let bound = ratio * self.parent_only_mean;
        self.both_firing.iter().filter(|(z, _)| *z > 0.0 && *z < bound).count()
    }

    pub fn zero_rows(&self) -> usize {
        self.both_firing.iter().filter(|(z, _)| *z == 0.0).count()
    }

    /// Mean parent magnitude over both-firing rows selected by `keep`.
    pub fn mean_parent_magnitude(&self, keep: impl Fn(f64) -> bool) -> Option<f64> {
        let m: Vec<f64> = self.both_firing.iter().filter(|(z, _)| keep(*z)).map(|(_, m)| *m).collect();
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }
}

/// Parent latent: best decoder match to the parent feature. Child latent:
/// best decoder match to the child feature.
pub fn hierarchy_signature(
    sae: &SaeModel,
    dict: &FeatureDictionary,
    eval: &ActivationBatch,
    parent: usize,
    child: usize,
) -> Result<HierarchySignature> {
    let dec = cosine_map(sae.w_dec.view(), dict.directions.view())?;
    let enc = cosine_map(sae.w_enc.view(), dict.directions.view())?;
    let parent_latent = best_latent(&dec, parent);
    let child_latent = best_latent(&dec, child);
    let z = sae.encode(eval.activations.view())?;
    let mut parent_only = Vec::new();
    let mut both_firing = Vec::new();
    for i in 0..eval.len() {
        match (eval.fires(i, parent), eval.fires(i, child)) {
            (true, false) => parent_only.push(z[[i, parent_latent]]),
            (true, true) => both_firing.push((z[[i, parent_latent]], eval.firings[[i, parent]])),
            _ => {}
        }
    }
    let parent_only_mean = if parent_only.is_empty() { 0.0 } else { parent_only.iter().sum::<f64>() / parent_only.len() as f64 };
    Ok(HierarchySignature {
        parent_latent,
        child_latent,
        child_decoder_cos_parent: dec[[child_latent, parent]],
        parent_encoder_cos_child: enc[[parent_latent, child]],
        parent_only_mean,
        both_firing_rows: both_firing.len(),
        both_firing,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Writer<'_> {
    fn json<T: Persist>(&mut self, name: &str, value: &T) -> Result<()> {
        io::save_json(&self.dir.join(name), value)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        io::write_text(&self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn cosine_maps(&mut self, sae: &SaeModel, dict: &FeatureDictionary) -> Result<()> {
        for (part, w) in [("encoder", &sae.w_enc), ("decoder", &sae.w_dec)] {
            let m = cosine_map(w.view(), dict.directions.view())?;
            self.text(&format!("cos_{part}.csv"), &io::matrix_csv(&m, "latent", "feature")?)?;
            self.text(
                &format!("cos_{part}.svg"),
                &svg::heatmap(&m, &format!("SAE {part} vs true features"), "latent", "feature"),
            )?;
        }
        Ok(())
    }
}

/// Everything a labeled world yields for probing and absorption audits.
pub struct LabeledAudit {
    pub data: LabeledData,
    pub probe: probes::ProbeModel,
    pub readout: Readout,
    pub splits: Vec<SplitResult>,
    pub main: AbsorptionReport,
    pub alt: Option<AbsorptionReport>,
}

pub fn audit_labeled(sae: &SaeModel, batch: &ActivationBatch, classes: usize, cfg: &ExperimentConfig) -> Result<LabeledAudit> {
    let data = LabeledData::from_batch(batch, classes)?;
    let probe = probes::train_probe(&data, 0.0, &cfg.probe)?;
    let readout = Readout::train(&data, &cfg.probe)?;
    let splits = detect_splitting(&data.latents(sae)?, &cfg.absorption.split_config())?;
    let main = absorption_main_with_splits(sae, &readout, &probe, &data, &splits, &cfg.absorption)?;
    let alt = match cfg.absorption.alt_metric {
        Some(_) => Some(absorption_alt_with_splits(sae, &probe, &data, &splits, &cfg.absorption)?),
        None => None,
    };
    Ok(LabeledAudit { data, probe, readout, splits, main, alt })
}

/// Samples audited by both methods whose verdicts differ.
pub fn verdict_disagreements(main: &AbsorptionReport, alt: &AbsorptionReport) -> (usize, usize) {
    let mut compared = 0;
    let mut differ = 0;
    for c in &main.classes {
        let Some(a) = alt.class(c.class) else { continue };
        for v in &c.verdicts {
            if let Some(w) = a.verdicts.iter().find(|w| w.sample_id == v.sample_id) {
                compared += 1;
                differ += usize::from(w.absorbed != v.absorbed);
            }
        }
    }
    (compared, differ)
}

fn write_audit(w: &mut Writer<'_>, audit: &LabeledAudit) -> Result<()> {
    w.json("probe.json", &audit.probe)?;
    w.json("readout.json", &audit.readout)?;
    w.json("splits.json", &audit.splits)?;
    w.text("k_curve.csv", &io::split_curve_csv(&audit.splits)?)?;
    w.json("absorption_main.json", &audit.main)?;
    w.text("verdicts_main.csv", &io::verdict_csv(&audit.main)?)?;
    if let Some(alt) = &audit.alt {
        w.json("absorption_alt.json", alt)?;
        w.text("verdicts_alt.csv", &io::verdict_csv(alt)?)?;
    }
    Ok(())
}

/// Run a scenario, write its artifacts under `out_dir` and report checks.
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ScenarioOutcome> {
    let mut w = Writer { dir: out_dir, written: Vec::new() };
    w.json("config.json", cfg)?;
    let checks = match &cfg.world {
        World::Theory => {
            let report = verify_theory(cfg.seed)?;
            w.json("theory.json", &report)?;
            vec![
                Check::new("reconstruction", report.reconstruction.pass, format!("max error norm {:e}", report.reconstruction.max_error_norm)),
                Check::new(
                    "sparsity_loss",
                    report.sparsity.pass,
                    format!("max |z| {}", fmt(report.sparsity.points.iter().fold(0.0, |m, p| m.max(p.z_score.abs())))),
                ),
                Check::new("monotonicity", report.monotonicity.iter().all(|m| m.pass), format!("{} cases", report.monotonicity.len())),
            ]
        }
        World::Delta { dim, world, eval_samples } => {
            let built = world.build(*dim)?;
            w.json("dictionary.json", &built.dict)?;
            w.json("sae.json", &built.sae)?;
            w.cosine_maps(&built.sae, &built.dict)?;
            let batch = make_labeled_task(&built.dict, &built.spec, built.classes, *eval_samples, util::derive_seed(cfg.seed, 3))?;
            let audit = audit_labeled(&built.sae, &batch, built.classes, cfg)?;
            write_audit(&mut w, &audit)?;
            delta_world_checks(world, &audit)
        }
        World::Trained { dim, firing, shape, train: train_cfg, eval_samples, classes } => {
            let dict = make_dictionary(*dim, firing.len(), cfg.seed)?;
            w.json("dictionary.json", &dict)?;
            w.json("firing_spec.json", firing)?;
            let trace = train(&dict, firing, *shape, train_cfg)?;
            w.json("sae.json", &trace.model)?;
            w.text("trace.csv", &io::trace_csv(&trace)?)?;
            w.cosine_maps(&trace.model, &dict)?;
            let eval_seed = util::derive_seed(cfg.seed, 3);
            let eval = if *classes > 0 {
                make_labeled_task(&dict, firing, *classes, *eval_samples, eval_seed)?
            } else {
                sample_batch(&dict, firing, *eval_samples, eval_seed)?
            };
            let mut checks = trained_checks(cfg.scenario, &trace.model, &dict, &eval)?;
            if *classes > 0 {
                let audit = audit_labeled(&trace.model, &eval, *classes, cfg)?;
                write_audit(&mut w, &audit)?;
                if cfg.scenario == Scenario::ToySplit {
                    checks.extend(split_checks(&trace.model, &audit, &eval)?);
                }
            }
            checks
        }
    };
    let passed = checks.iter().all(|c| c.passed);
    let mut outcome = ScenarioOutcome {
        scenario: cfg.scenario,
        checks,
        passed,
        artifacts: Vec::new(),
    };
    w.written.push("outcome.json".into());
    outcome.artifacts = w.written.clone();
    w.json("outcome.json", &outcome)?;
    Ok(outcome)
}

fn trained_checks(scenario: Scenario, sae: &SaeModel, dict: &FeatureDictionary, eval: &ActivationBatch) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    match scenario {
        Scenario::ToyIndependent => {
            let r = recovery(sae, dict)?;
            let min = r.decoder_cosines.iter().copied().fold(f64::INFINITY, f64::min);
            checks.push(Check::new("decoder_recovery", min >= 0.99, format!("min matched cosine {}", fmt(min))));
            checks.push(Check::new("encoder_matches", r.encoder_argmax_matches, format!("assignment {:?}", r.assignment)));
        }
        Scenario::ToyHierarchical | Scenario::ToyTopk => {
            let s = hierarchy_signature(sae, dict, eval, 0, 1)?;
            checks.push(Check::new("child_decoder_absorbs_parent", s.child_decoder_cos_parent >= 0.5, fmt(s.child_decoder_cos_parent)));
            checks.push(Check::new("parent_encoder_excludes_child", s.parent_encoder_cos_child <= -0.2, fmt(s.parent_encoder_cos_child)));
            if scenario == Scenario::ToyHierarchical {
                let silenced = s.silenced_fraction(1e-3);
                checks.push(Check::new("parent_silenced_when_both_fire", silenced >= 0.95, fmt(silenced)));
                let dec = cosine_map(sae.w_dec.view(), dict.directions.view())?;
                let spectators = (2..dict.count).map(|f| dec.column(f).fold(f64::NEG_INFINITY, |a, &v| a.max(v))).fold(f64::INFINITY, f64::min);
                checks.push(Check::new("independent_features_recovered", spectators >= 0.99, fmt(spectators)));
            }
        }
        Scenario::ToyPartial => {
            let s = hierarchy_signature(sae, dict, eval, 0, 1)?;
            let weak = s.weak_rows(0.25);
            let zero = s.zero_rows();
            checks.push(Check::new("weak_parent_firing", weak > 0, format!("{weak} of {} both-firing rows", s.both_firing_rows)));
            checks.push(Check::new("zero_parent_firing", zero > 0, format!("{zero} of {} both-firing rows", s.both_firing_rows)));
            let zero_mag = s.mean_parent_magnitude(|z| z == 0.0);
            let all_mag = s.mean_parent_magnitude(|_| true);
            let low = matches!((zero_mag, all_mag), (Some(a), Some(b)) if a < b);
            checks.push(Check::new("zeros_at_low_parent_magnitude", low, format!("{zero_mag:?} vs {all_mag:?}")));
        }
        Scenario::ToyImperfect => {
            let s = hierarchy_signature(sae, dict, eval, 0, 1)?;
            checks.push(Check::new("child_decoder_leans_to_parent", s.child_decoder_cos_parent > 0.03, fmt(s.child_decoder_cos_parent)));
            checks.push(Check::new("parent_encoder_leans_from_child", s.parent_encoder_cos_child < -0.03, fmt(s.parent_encoder_cos_child)));
            let both = s.mean_parent_magnitude(|_| true).map(|_| s.both_firing.iter().map(|p| p.0).sum::<f64>() / s.both_firing.len() as f64);
            let weaker = both.is_some_and(|b| b < s.parent_only_mean);
            checks.push(Check::new("parent_weaker_when_both_fire", weaker, format!("{both:?} vs {}", fmt(s.parent_only_mean))));
        }
        _ => {}
    }
    Ok(checks)
}

fn split_checks(sae: &SaeModel, audit: &LabeledAudit, eval: &ActivationBatch) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let split = &audit.splits[0];
    let jump = split.f1_curve.get(1).map(|f2| f2 - split.f1_curve[0]).unwrap_or(0.0);
    checks.push(Check::new(
        "split_class_k2",
        split.split_k == 2 && jump >= 0.03,
        format!("split_k {} jump {}", split.split_k, fmt(jump)),
    ));
    let ks: Vec<usize> = audit.splits.iter().map(|s| s.split_k).collect();
    checks.push(Check::new("clean_classes_k1", ks[1..].iter().all(|&k| k == 1), format!("split_k per class {ks:?}")));
    let z = sae.encode(eval.activations.view())?;
    let mut truth: Vec<usize> = [3, 4].iter().map(|&f| cofiring_latent(&z, eval, f)).collect();
    truth.sort_unstable();
    let mut picked = split.latents.clone();
    picked.sort_unstable();
    checks.push(Check::new(
        "selection_tracks_subfeatures",
        picked == truth,
        format!("selected {picked:?}, sub-feature latents {truth:?}"),
    ));
    Ok(checks)
}

/// Latent whose firing set overlaps most (Jaccard) with a feature's.
pub fn cofiring_latent(latents: &Array2<f64>, batch: &ActivationBatch, feature: usize) -> usize {
    let scores: Vec<f64> = latents
        .axis_iter(Axis(1))
        .map(|col| {
            let (mut both, mut either) = (0usize, 0usize);
            for (i, &z) in col.iter().enumerate() {
                let (a, b) = (z > 0.0, batch.fires(i, feature));
                both += usize::from(a && b);
                either += usize::from(a || b);
            }
            if either == 0 { 0.0 } else { both as f64 / either as f64 }
        })
        .collect();
    probes::argmax(ndarray::ArrayView1::from(&scores))
}

fn delta_world_checks(world: &DeltaWorldConfig, audit: &LabeledAudit) -> Vec<Check> {
    let expected = world.expected_parent_rate();
    let rate = audit.main.class(0).and_then(|c| c.absorption_rate);
    let ok = rate.is_some_and(|r| (r - expected).abs() <= 0.02);
    let mut checks = vec![Check::new("parent_rate", ok, format!("{rate:?} vs expected {}", fmt(expected)))];
    if let Some(alt) = &audit.alt {
        let (compared, differ) = verdict_disagreements(&audit.main, alt);
        checks.push(Check::new("alt_agrees_with_main", differ == 0, format!("{differ} of {compared} verdicts differ")));
    }
    checks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    L1Coeff,
    Width,
    TopkK,
    Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Persist for SweepSpec {
    const FORMAT: &'static str = "sweep_spec";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub l0_mean: Option<f64>,
    pub explained_variance: Option<f64>,
    pub mean_f1: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub absorption_rate: Option<f64>,
    pub split_k: Vec<usize>,
    pub error: Option<String>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        let ok = match (&self.base.world, self.axis) {
            (World::Trained { .. }, SweepAxis::L1Coeff | SweepAxis::Width) => true,
            (World::Trained { shape, .. }, SweepAxis::TopkK) => matches!(shape.nonlinearity, Nonlinearity::BatchTopK { .. }),
            (World::Delta { .. }, SweepAxis::Delta) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("axis {:?} does not apply to {}", self.axis, self.base.scenario)));
        }
        Ok(())
    }

    fn point_config(&self, index: usize, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        cfg.seed = util::derive_seed(self.base.seed, 1000 + index as u64);
        cfg.absorption.seed = util::derive_seed(cfg.seed, 4);
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!("{v} is not a positive integer")))
            }
        };
        match (&mut cfg.world, self.axis) {
            (World::Trained { train, .. }, SweepAxis::L1Coeff) => train.l1_coeff = value,
            (World::Trained { shape, .. }, SweepAxis::Width) => shape.width = as_count(value)?,
            (World::Trained { shape, .. }, SweepAxis::TopkK) => shape.nonlinearity = Nonlinearity::BatchTopK { k: as_count(value)? },
            (World::Delta { world, .. }, SweepAxis::Delta) => world.delta = value,
            _ => unreachable!("validated"),
        }
        if let World::Trained { train, .. } = &mut cfg.world {
            train.seed = cfg.seed;
        }
        Ok(cfg)
    }
}

fn sweep_point(cfg: &ExperimentConfig, value: f64) -> Result<SweepPoint> {
    let mut point = SweepPoint {
        value,
        seed: cfg.seed,
        l0_mean: None,
        explained_variance: None,
        mean_f1: None,
        mean_precision: None,
        mean_recall: None,
        absorption_rate: None,
        split_k: Vec::new(),
        error: None,
    };
    let data = materialize(cfg)?;
    let sae = match (&cfg.world, data.constructed) {
        (World::Trained { shape, train: t, .. }, _) => train(&data.dict, &data.firing, *shape, t)?.model,
        (_, Some(sae)) => sae,
        _ => return Err(Error::InvalidArgument("world has no SAE".into())),
    };
    let (batch, classes) = (data.eval, data.classes);
    let report = sae.loss(batch.activations.view(), 0.0)?;
    point.l0_mean = Some(report.l0_mean);
    point.explained_variance = Some(report.explained_variance);
    if classes > 0 {
        let audit = audit_labeled(&sae, &batch, classes, cfg)?;
        let latents = audit.data.latents(&sae)?;
        let matches = probes::match_latents_to_probe(&sae, &audit.probe)?;
        let mut f1 = 0.0;
        let mut precision = 0.0;
        let mut recall = 0.0;
        for m in &matches {
            let r = probes::evaluate(Classifier::Latent { column: m.latent, class: m.class, threshold: 0.0 }, &latents)?;
            f1 += r.per_class[0].f1;
            precision += r.per_class[0].precision;
            recall += r.per_class[0].recall;
        }
        let n = matches.len() as f64;
        point.mean_f1 = Some(f1 / n);
        point.mean_precision = Some(precision / n);
        point.mean_recall = Some(recall / n);
        point.absorption_rate = audit.main.mean_absorption_rate;
        point.split_k = audit.splits.iter().map(|s| s.split_k).collect();
    }
    Ok(point)
}

pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let opt = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
    io::csv_string(
        &["value", "seed", "l0", "explained_variance", "mean_f1", "mean_precision", "mean_recall", "absorption_rate", "split_k", "error"],
        points.iter().map(|p| {
            vec![
                io::fmt_f64(p.value),
                p.seed.to_string(),
                opt(p.l0_mean),
                opt(p.explained_variance),
                opt(p.mean_f1),
                opt(p.mean_precision),
                opt(p.mean_recall),
                opt(p.absorption_rate),
                p.split_k.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
                p.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// One trained (or constructed) SAE and audit per grid value. A failing
/// point is recorded in its `error` column; the CSV is rewritten after
/// every point so a crash leaves the completed rows on disk.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    io::save_json(&out_dir.join("sweep_spec.json"), spec)?;
    let csv_path = out_dir.join("sweep.csv");
    let mut points = Vec::with_capacity(spec.values.len());
    for (i, &value) in spec.values.iter().enumerate() {
        let point = spec
            .point_config(i, value)
            .and_then(|cfg| sweep_point(&cfg, value))
            .unwrap_or_else(|e| SweepPoint {
                value,
                seed: util::derive_seed(spec.base.seed, 1000 + i as u64),
                l0_mean: None,
                explained_variance: None,
                mean_f1: None,
                mean_precision: None,
                mean_recall: None,
                absorption_rate: None,
                split_k: Vec::new(),
                error: Some(e.to_string()),
            });
        points.push(point);
        io::write_text(&csv_path, &sweep_csv(&points)?)?;
    }
    let l0: Vec<(f64, f64)> = points.iter().filter_map(|p| p.l0_mean.map(|l| (p.value, l))).collect();
    if !l0.is_empty() {
        io::write_text(&out_dir.join("sweep_l0.svg"), &svg::line_chart(&l0, "L0 across the sweep", &format!("{:?}", spec.axis), "mean L0"))?;
    }
    Ok(points)
}
