use std::path::{Path, PathBuf};

use absorb_core::analysis::{
    absorption_alt_with_splits, absorption_main_with_splits, cosine_map, detect_splitting, edit_probabilities, AbsorptionConfig,
    ClassLatents, Readout,
};
use absorb_core::io::{self, Persist};
use absorb_core::probes::{self, argmax, Classifier, LabeledData, ProbeConfig, ProbeModel};
use absorb_core::sae::{Nonlinearity, SaeModel};
use absorb_core::scenarios::{materialize, run_scenario, run_sweep, ExperimentConfig, SweepSpec, World};
use absorb_core::synthgen::{ActivationBatch, Split};
use absorb_core::trainer::{self, DecoderNormPolicy};
use absorb_core::{svg, theory, Error};
use anyhow::{bail, Context};

use crate::{AuditArgs, Command, DataArgs, ExperimentArgs, MethodArg, ProbeArgs};

/// `Ok(false)` means the command ran but a check failed.
pub fn dispatch(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Generate { experiment, out } => generate(&experiment, &out),
        Command::TrainSae { experiment, out } => train_sae(&experiment, &out),
        Command::TrainProbe { data, l1, k, probe, out } => train_probe(&data, l1, k, &probe, &out),
        Command::ProbeCurve { data, k_max, l1, probe, out } => probe_curve(&data, k_max, l1, &probe, &out),
        Command::DetectSplitting { data, audit, out } => split(&data, &audit, &out),
        Command::DetectAbsorption { data, audit, probe_model, readout, method, out } => {
            absorption(&data, &audit, probe_model.as_deref(), readout.as_deref(), method, &out)
        }
        Command::Edit { data, readout, from, to, limit, min_success, probe, out } => {
            edit(&data, readout.as_deref(), (from, to), limit, min_success, &probe, &out)
        }
        Command::VerifyTheory { seed, out } => verify_theory(seed, &out),
        Command::Run { scenario_name, mut experiment, out } => {
            if let Some(s) = scenario_name {
                experiment.scenario = s;
            }
            run(&experiment, out)
        }
        Command::Sweep { spec, experiment, axis, values, out } => sweep(spec.as_deref(), &experiment, axis, values, &out),
    }
}

/// 2 for bad input (usage, files, configs), 1 for failed computations.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::NonFinite { .. } | Error::Probe(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn save<T: Persist>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    Ok(io::save_json(&dir.join(name), value)?)
}

fn text(dir: &Path, name: &str, body: &str) -> anyhow::Result<()> {
    Ok(io::write_text(&dir.join(name), body)?)
}

impl ProbeArgs {
    fn apply(&self, cfg: &mut ProbeConfig) {
        if let Some(kind) = self.probe_kind {
            cfg.kind = kind.into();
        }
        if let Some(iters) = self.probe_iters {
            cfg.max_iters = iters;
        }
    }
}

impl AuditArgs {
    fn resolve(&self) -> anyhow::Result<(AbsorptionConfig, ProbeConfig)> {
        let (mut abs, mut probe) = match &self.audit_config {
            Some(path) => {
                let cfg: ExperimentConfig = io::load_json(path)?;
                (cfg.absorption, cfg.probe)
            }
            None => (AbsorptionConfig::default(), ProbeConfig::default()),
        };
        self.apply(&mut abs, &mut probe);
        abs.validate()?;
        Ok((abs, probe))
    }

    fn apply(&self, abs: &mut AbsorptionConfig, probe: &mut ProbeConfig) {
        self.probe.apply(probe);
        self.probe.apply(&mut abs.probe);
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut abs.tau_split, self.tau_split);
        set(&mut abs.tau_cos, self.tau_cos);
        set(&mut abs.ablation_lead, self.ablation_lead);
        set(&mut abs.selection_l1, self.selection_l1);
        if let Some(cap) = self.fn_sample_cap {
            abs.fn_sample_cap = cap;
        }
        if let Some(v) = self.metric_variant {
            abs.metric_variant = v.into();
        }
        if self.k_max.is_some() {
            abs.k_max = self.k_max;
        }
        if let Some(seed) = self.audit_seed {
            abs.seed = seed;
        }
        if let Some(alt) = abs.alt_metric.as_mut() {
            set(&mut alt.tau_c, self.tau_c);
            set(&mut alt.tau_m, self.tau_m);
            if let Some(n) = self.n_absorbers {
                alt.n_absorbers = n;
            }
            if self.n_main.is_some() {
                alt.n_main = self.n_main;
            }
        }
    }
}

impl ExperimentArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => io::load_json::<ExperimentConfig>(path)?,
            None => ExperimentConfig::preset(self.scenario, self.seed.unwrap_or(0)),
        };
        if let Some(seed) = self.seed {
            cfg.reseed(seed);
        }
        let trained_only = [
            ("--l1-coeff", self.l1_coeff.is_some()),
            ("--learning-rate", self.learning_rate.is_some()),
            ("--total-samples", self.total_samples.is_some()),
            ("--batch-size", self.batch_size.is_some()),
            ("--width", self.width.is_some()),
            ("--topk", self.topk.is_some()),
            ("--renorm", self.renorm.is_some()),
        ];
        match &mut cfg.world {
            World::Trained { train, shape, eval_samples, .. } => {
                if self.delta.is_some() {
                    return Err(usage("--delta only applies to the delta-world scenario"));
                }
                if let Some(v) = self.l1_coeff {
                    train.l1_coeff = v;
                }
                if let Some(v) = self.learning_rate {
                    train.learning_rate = v;
                }
                if let Some(v) = self.total_samples {
                    train.total_samples = v;
                }
                if let Some(v) = self.batch_size {
                    train.batch_size = v;
                }
                if let Some(v) = self.width {
                    shape.width = v;
                }
                if let Some(k) = self.topk {
                    shape.nonlinearity = Nonlinearity::BatchTopK { k };
                }
                if let Some(r) = self.renorm {
                    train.decoder_norm_policy = if r { DecoderNormPolicy::UnitRenormEachStep } else { DecoderNormPolicy::None };
                }
                if let Some(n) = self.eval_samples {
                    *eval_samples = n;
                }
                train.validate()?;
            }
            World::Delta { world, eval_samples, .. } => {
                if let Some((flag, _)) = trained_only.iter().find(|f| f.1) {
                    return Err(usage(format!("{flag} does not apply to a constructed world")));
                }
                if let Some(d) = self.delta {
                    if !(0.0..=1.0).contains(&d) {
                        return Err(usage(format!("--delta {d} outside [0, 1]")));
                    }
                    world.delta = d;
                }
                if let Some(n) = self.eval_samples {
                    *eval_samples = n;
                }
            }
            World::Theory => {
                if trained_only.iter().any(|f| f.1) || self.delta.is_some() || self.eval_samples.is_some() {
                    return Err(usage("world flags do not apply to the theory scenario"));
                }
            }
        }
        self.audit.apply(&mut cfg.absorption, &mut cfg.probe);
        cfg.absorption.validate()?;
        Ok(cfg)
    }
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<(ActivationBatch, LabeledData)> {
        let batch: ActivationBatch = io::load_json(&self.batch)?;
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| usage(format!("{} carries no labels", self.batch.display())))?;
        let classes = match self.classes {
            Some(c) => c,
            None => labels.iter().max().map_or(0, |m| m + 1),
        };
        let data = LabeledData::from_batch(&batch, classes)?;
        Ok((batch, data))
    }

    fn sae(&self) -> anyhow::Result<SaeModel> {
        let path = self.sae.as_ref().ok_or_else(|| usage("this command needs --sae"))?;
        let sae: SaeModel = io::load_json(path)?;
        sae.validate()?;
        Ok(sae)
    }
}

fn write_cosine_maps(dir: &Path, sae: &SaeModel, dict: &absorb_core::synthgen::FeatureDictionary) -> anyhow::Result<()> {
    for (part, w) in [("encoder", &sae.w_enc), ("decoder", &sae.w_dec)] {
        let m = cosine_map(w.view(), dict.directions.view())?;
        text(dir, &format!("cos_{part}.csv"), &io::matrix_csv(&m, "latent", "feature")?)?;
        text(dir, &format!("cos_{part}.svg"), &svg::heatmap(&m, &format!("SAE {part} vs true features"), "latent", "feature"))?;
    }
    Ok(())
}

fn generate(args: &ExperimentArgs, out: &Path) -> anyhow::Result<bool> {
    let cfg = args.resolve()?;
    let world = materialize(&cfg)?;
    save(out, "config.json", &cfg)?;
    save(out, "dictionary.json", &world.dict)?;
    save(out, "firing_spec.json", &world.firing)?;
    save(out, "batch.json", &world.eval)?;
    if let Some(sae) = &world.constructed {
        save(out, "sae.json", sae)?;
    }
    println!("{} rows over {} features written to {}", world.eval.len(), world.dict.count, out.display());
    Ok(true)
}

fn train_sae(args: &ExperimentArgs, out: &Path) -> anyhow::Result<bool> {
    let cfg = args.resolve()?;
    let World::Trained { shape, train, .. } = &cfg.world else {
        return Err(usage(format!("{} does not train an SAE", cfg.scenario)));
    };
    let world = materialize(&cfg)?;
    let trace = trainer::train(&world.dict, &world.firing, *shape, train)?;
    save(out, "config.json", &cfg)?;
    save(out, "dictionary.json", &world.dict)?;
    save(out, "firing_spec.json", &world.firing)?;
    save(out, "batch.json", &world.eval)?;
    save(out, "sae.json", &trace.model)?;
    save(out, "trace.json", &trace)?;
    text(out, "trace.csv", &io::trace_csv(&trace)?)?;
    write_cosine_maps(out, &trace.model, &world.dict)?;
    let report = trace.model.loss(world.eval.activations.view(), train.l1_coeff)?;
    println!(
        "trained {} steps: held-out mse {:.6}, L0 {:.4}, explained variance {:.4}",
        trace.checkpoints.last().map_or(0, |c| c.step),
        report.recon_mse,
        report.l0_mean,
        report.explained_variance
    );
    Ok(true)
}

fn train_probe(data: &DataArgs, l1: f64, k: Option<usize>, probe_args: &ProbeArgs, out: &Path) -> anyhow::Result<bool> {
    let (_, mut labeled) = data.load()?;
    if data.on_latents {
        labeled = labeled.latents(&data.sae()?)?;
    }
    let mut cfg = ProbeConfig::default();
    probe_args.apply(&mut cfg);
    let probe = match k {
        None => probes::train_probe(&labeled, l1, &cfg)?,
        Some(k) => {
            let selector = probes::train_probe(&labeled, l1, &ProbeConfig { kind: probes::ProbeKind::OneVsRest, ..cfg })?;
            let mask = probes::select_k_sparse(&selector, k)?;
            probes::train_masked_probe(&labeled, &mask, &cfg)?
        }
    };
    let report = probes::evaluate(Classifier::Probe(&probe), &labeled)?;
    save(out, "probe.json", &probe)?;
    save(out, "eval_report.json", &report)?;
    println!("mean test F1 {:.4} over {} test rows", report.mean_f1, report.test_size);
    for c in &report.per_class {
        println!("  class {}: precision {:.4} recall {:.4} f1 {:.4}", c.class, c.precision, c.recall, c.f1);
    }
    Ok(true)
}

fn probe_curve(data: &DataArgs, k_max: usize, l1: f64, probe_args: &ProbeArgs, out: &Path) -> anyhow::Result<bool> {
    let (_, labeled) = data.load()?;
    let latents = labeled.latents(&data.sae()?)?;
    let mut cfg = ProbeConfig::default();
    probe_args.apply(&mut cfg);
    let curve = probes::k_sparse_curve(&latents, k_max, l1, &cfg)?;
    save(out, "k_curve.json", &curve)?;
    text(out, "k_curve.csv", &io::k_curve_csv(&curve)?)?;
    let points: Vec<(f64, f64)> = curve.iter().map(|p| (p.k as f64, p.mean_f1)).collect();
    text(out, "k_curve.svg", &svg::line_chart(&points, "k-sparse probing", "k", "mean F1"))?;
    for p in &curve {
        println!("k={:<3} mean F1 {:.4}", p.k, p.mean_f1);
    }
    Ok(true)
}

fn split(data: &DataArgs, audit: &AuditArgs, out: &Path) -> anyhow::Result<bool> {
    let (_, labeled) = data.load()?;
    let (abs, _) = audit.resolve()?;
    let splits = detect_splitting(&labeled.latents(&data.sae()?)?, &abs.split_config())?;
    save(out, "splits.json", &splits)?;
    text(out, "split_curve.csv", &io::split_curve_csv(&splits)?)?;
    for s in &splits {
        println!("class {}: split_k {} latents {:?}", s.class, s.split_k, s.latents);
    }
    Ok(true)
}

fn load_or<T: Persist>(path: Option<&Path>, fit: impl FnOnce() -> absorb_core::Result<T>) -> anyhow::Result<T> {
    match path {
        Some(p) => io::load_json(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(fit()?),
    }
}

fn absorption(
    data: &DataArgs,
    audit: &AuditArgs,
    probe_path: Option<&Path>,
    readout_path: Option<&Path>,
    method: MethodArg,
    out: &Path,
) -> anyhow::Result<bool> {
    let (_, labeled) = data.load()?;
    let sae = data.sae()?;
    let (abs, probe_cfg) = audit.resolve()?;
    let probe: ProbeModel = load_or(probe_path, || probes::train_probe(&labeled, 0.0, &probe_cfg))?;
    let splits = detect_splitting(&labeled.latents(&sae)?, &abs.split_config())?;
    save(out, "splits.json", &splits)?;
    let mut reports = Vec::new();
    if matches!(method, MethodArg::Main | MethodArg::Both) {
        let readout = match readout_path {
            Some(p) => Readout::new(io::load_json::<Readout>(p)?.probe)?,
            None => Readout::train(&labeled, &probe_cfg)?,
        };
        reports.push(("main", absorption_main_with_splits(&sae, &readout, &probe, &labeled, &splits, &abs)?));
    }
    if matches!(method, MethodArg::Alt | MethodArg::Both) {
        if abs.alt_metric.is_none() {
            bail!(usage("the audit config disables the alternate metric"));
        }
        reports.push(("alt", absorption_alt_with_splits(&sae, &probe, &labeled, &splits, &abs)?));
    }
    for (name, report) in &reports {
        save(out, &format!("absorption_{name}.json"), report)?;
        text(out, &format!("verdicts_{name}.csv"), &io::verdict_csv(report)?)?;
        println!("{name}: mean absorption rate {:?}", report.mean_absorption_rate);
        for c in &report.classes {
            println!(
                "  class {}: split_k {} rate {:?} ({} of {} audited)",
                c.class, c.split_k, c.absorption_rate, c.absorption_count, c.sampled_count
            );
        }
    }
    Ok(true)
}

fn edit(
    data: &DataArgs,
    readout_path: Option<&Path>,
    (from, to): (usize, usize),
    limit: Option<usize>,
    min_success: Option<f64>,
    probe_args: &ProbeArgs,
    out: &Path,
) -> anyhow::Result<bool> {
    let (batch, labeled) = data.load()?;
    let sae = data.sae()?;
    if from >= labeled.num_classes || to >= labeled.num_classes {
        return Err(usage(format!("classes must be below {}", labeled.num_classes)));
    }
    let mut cfg = ProbeConfig::default();
    probe_args.apply(&mut cfg);
    let readout = match readout_path {
        Some(p) => Readout::new(io::load_json::<Readout>(p)?.probe)?,
        None => Readout::train(&labeled, &cfg)?,
    };
    let probe = probes::train_probe(&labeled, 0.0, &cfg)?;
    let map = probes::match_latents_to_probe(&sae, &probe)?.into_iter().map(|m| Some(m.latent)).collect();
    let class_latents = ClassLatents::estimate(&labeled.latents(&sae)?, map)?;
    let rows: Vec<usize> = batch
        .rows_in(Split::Test)
        .into_iter()
        .filter(|&i| labeled.labels[i] == from)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if rows.is_empty() {
        return Err(usage(format!("no test rows of class {from}")));
    }
    let mut lines = Vec::with_capacity(rows.len());
    let mut flipped = 0usize;
    for &i in &rows {
        let (before, after) = edit_probabilities(&sae, &readout, labeled.inputs.row(i), from, to, &class_latents)?;
        let ok = argmax(after.view()) == to;
        flipped += usize::from(ok);
        lines.push(vec![
            i.to_string(),
            io::fmt_f64(before[from] - after[from]),
            io::fmt_f64(after[to] - before[to]),
            ok.to_string(),
        ]);
    }
    text(out, "edits.csv", &io::csv_string(&["sample_id", "from_prob_drop", "to_prob_rise", "flipped"], lines)?)?;
    let rate = flipped as f64 / rows.len() as f64;
    println!(
        "class {from} -> {to} via latents {:?} -> {:?}: {flipped} of {} rows flipped ({rate:.4})",
        class_latents.latent[from],
        class_latents.latent[to],
        rows.len()
    );
    Ok(min_success.is_none_or(|m| rate >= m))
}

fn verify_theory(seed: u64, out: &Path) -> anyhow::Result<bool> {
    let report = theory::verify_theory(seed)?;
    save(out, "theory.json", &report)?;
    println!(
        "reconstruction {} (max error {:e}), sparsity loss {}, monotonicity {}",
        verdict(report.reconstruction.pass),
        report.reconstruction.max_error_norm,
        verdict(report.sparsity.pass),
        verdict(report.monotonicity.iter().all(|m| m.pass))
    );
    Ok(report.pass)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn run(args: &ExperimentArgs, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let cfg = args.resolve()?;
    let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.scenario, cfg.seed)));
    let outcome = run_scenario(&cfg, &out)?;
    for c in &outcome.checks {
        println!("{} {}: {}", verdict(c.passed), c.name, c.detail);
    }
    println!("{} {} -> {}", verdict(outcome.passed), cfg.scenario, out.display());
    Ok(outcome.passed)
}

fn sweep(
    spec_path: Option<&Path>,
    args: &ExperimentArgs,
    axis: Option<crate::AxisArg>,
    values: Vec<f64>,
    out: &Path,
) -> anyhow::Result<bool> {
    let spec = match spec_path {
        Some(p) => {
            if axis.is_some() || !values.is_empty() {
                return Err(usage("--spec replaces --axis and --values"));
            }
            io::load_json::<SweepSpec>(p)?
        }
        None => SweepSpec {
            base: args.resolve()?,
            axis: axis.ok_or_else(|| usage("--axis is required without --spec"))?.into(),
            values,
        },
    };
    let points = run_sweep(&spec, out)?;
    let mut ok = true;
    for p in &points {
        match &p.error {
            Some(e) => {
                ok = false;
                println!("value {}: error {e}", p.value);
            }
            None => println!(
                "value {}: L0 {:?} mean F1 {:?} absorption {:?} split_k {:?}",
                p.value, p.l0_mean, p.mean_f1, p.absorption_rate, p.split_k
            ),
        }
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(ok)
}
