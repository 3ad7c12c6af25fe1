//! `absorb`: command-line driver for the toy-model absorption laboratory.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails or a
//! computation breaks down, 2 for usage and input errors.

use std::path::PathBuf;
use std::process::ExitCode;

use absorb_core::analysis::MetricVariant;
use absorb_core::probes::ProbeKind;
use absorb_core::scenarios::{Scenario, SweepAxis};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "absorb", version, about = "Feature absorption and splitting in toy sparse autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a world: dictionary, firing spec and a held-out batch.
    Generate {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an SAE on a scenario's world.
    TrainSae {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear probe on a labeled batch (or its SAE latents).
    TrainProbe {
        #[command(flatten)]
        data: DataArgs,
        /// L1 penalty on the probe weights.
        #[arg(long, default_value_t = 0.0)]
        l1: f64,
        /// Restrict each class to its k largest-magnitude coordinates of the L1 probe.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test F1 of k-sparse probes on SAE latents for k = 1..=k_max.
    ProbeCurve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = absorb_core::probes::DEFAULT_K_MAX)]
        k_max: usize,
        /// L1 penalty of the selection probe.
        #[arg(long, default_value_t = absorb_core::probes::DEFAULT_SELECTION_L1)]
        l1: f64,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count how many latents each class is split across.
    DetectSplitting {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        audit: AuditArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablation- and projection-based absorption rates per class.
    DetectAbsorption {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        audit: AuditArgs,
        /// Probe on input activations; trained unpenalized when absent.
        #[arg(long)]
        probe_model: Option<PathBuf>,
        /// Multinomial readout; trained when absent.
        #[arg(long)]
        readout: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap test rows from one class to another through their class latents.
    Edit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        readout: Option<PathBuf>,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        /// Edit at most this many rows.
        #[arg(long)]
        limit: Option<usize>,
        /// Fail (exit 1) when fewer edits than this fraction flip the readout.
        #[arg(long)]
        min_success: Option<f64>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the closed-form absorption theory numerically.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a shipped scenario end to end and evaluate its checks.
    Run {
        /// Scenario name; `--config` takes precedence over it.
        scenario_name: Option<Scenario>,
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Defaults to `runs/<scenario>-<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and audit one SAE per grid value along one axis.
    Sweep {
        /// Sweep spec (JSON); replaces the experiment flags, axis and values.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Experiment selection. A config file replaces the scenario preset;
/// individual flags then override fields of either.
#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy-hierarchical")]
    scenario: Scenario,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    l1_coeff: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    total_samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Switch to BatchTopK with this k.
    #[arg(long)]
    topk: Option<usize>,
    /// Renormalize decoder rows after every step.
    #[arg(long)]
    renorm: Option<bool>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Absorption strength of the constructed world.
    #[arg(long)]
    delta: Option<f64>,
    #[command(flatten)]
    audit: AuditArgs,
}

/// Artifacts consumed by the analysis commands.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Labeled activation batch (JSON).
    #[arg(long)]
    batch: PathBuf,
    /// SAE model (JSON). Required for latent-space commands.
    #[arg(long)]
    sae: Option<PathBuf>,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    /// Probe the SAE latents instead of the raw activations (train-probe only).
    #[arg(long)]
    on_latents: bool,
}

#[derive(Args, Debug, Clone)]
struct ProbeArgs {
    #[arg(long, value_enum)]
    probe_kind: Option<KindArg>,
    #[arg(long)]
    probe_iters: Option<usize>,
}

/// Absorption-audit settings; defaults come from `--audit-config` or the
/// built-in configuration.
#[derive(Args, Debug, Clone)]
struct AuditArgs {
    /// Experiment config whose probe and absorption sections seed these settings.
    #[arg(long)]
    audit_config: Option<PathBuf>,
    #[arg(long)]
    tau_split: Option<f64>,
    #[arg(long)]
    tau_cos: Option<f64>,
    #[arg(long)]
    ablation_lead: Option<f64>,
    #[arg(long)]
    fn_sample_cap: Option<usize>,
    #[arg(long, value_enum)]
    metric_variant: Option<VariantArg>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    selection_l1: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    tau_m: Option<f64>,
    #[arg(long)]
    n_absorbers: Option<usize>,
    #[arg(long)]
    n_main: Option<usize>,
    #[arg(long)]
    audit_seed: Option<u64>,
    #[command(flatten)]
    probe: ProbeArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Main,
    Alt,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VariantArg {
    Mean,
    Max,
}

impl From<VariantArg> for MetricVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Mean => MetricVariant::Mean,
            VariantArg::Max => MetricVariant::Max,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    OneVsRest,
    Multinomial,
}

impl From<KindArg> for ProbeKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::OneVsRest => ProbeKind::OneVsRest,
            KindArg::Multinomial => ProbeKind::Multinomial,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    L1Coeff,
    Width,
    TopkK,
    Delta,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::L1Coeff => SweepAxis::L1Coeff,
            AxisArg::Width => SweepAxis::Width,
            AxisArg::TopkK => SweepAxis::TopkK,
            AxisArg::Delta => SweepAxis::Delta,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
