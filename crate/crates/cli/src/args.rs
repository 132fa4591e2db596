//! Command-line arguments. Flags override fields of the run config loaded
//! with `--config` (or of the built-in default config).

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lpsr_core::detector::GateConfig;
use lpsr_core::engine::Mode;

use crate::commands::SweepAxis;
use crate::config::{BackendSpec, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lpsr", version, about = "Latent phase-shift rollback experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a steering basis from the calibration problem set.
    Calibrate(RunArgs),
    /// Decode the problem set and write traces plus a summary row.
    Run(RunArgs),
    /// Compare two trace files problem by problem.
    Eval(EvalArgs),
    /// Sweep one axis and write one row per cell.
    Sweep(SweepArgs),
    /// Export a basis file as cosine-matrix and vector CSVs.
    ExportBasis(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lpsr,
    Greedy,
    StaticSteer,
    BestOfN,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lpsr => Mode::Lpsr,
            ModeArg::Greedy => Mode::Greedy,
            ModeArg::StaticSteer => Mode::StaticSteer,
            ModeArg::BestOfN => Mode::BestOfN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Simulator,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Layers,
    Hparams,
    BasisK,
    RollbackDepth,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Layers => SweepAxis::Layers,
            AxisArg::Hparams => SweepAxis::Hparams,
            AxisArg::BasisK => SweepAxis::BasisK,
            AxisArg::RollbackDepth => SweepAxis::RollbackDepth,
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Switch backend (resets its parameters to defaults).
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub basis_path: Option<PathBuf>,
    /// Number of evaluation problems.
    #[arg(long)]
    pub count: Option<usize>,
    /// Number of calibration problems.
    #[arg(long)]
    pub calibration_count: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub l_crit: Option<usize>,
    #[arg(long)]
    pub tau_phi: Option<f64>,
    #[arg(long)]
    pub tau_h: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub max_t: Option<usize>,
    #[arg(long)]
    pub rollback_depth: Option<usize>,
    #[arg(long)]
    pub rollback_budget: Option<usize>,
    /// Best-of-n rollout count.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Basis cluster count.
    #[arg(long)]
    pub k: Option<usize>,
}

impl RunArgs {
    /// Load the config (or the default) and apply flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        match self.backend {
            Some(BackendArg::Simulator) if !matches!(cfg.backend, BackendSpec::Simulator { .. }) => {
                cfg.backend = BackendSpec::Simulator { world: Default::default() }
            }
            Some(BackendArg::Toy) if !matches!(cfg.backend, BackendSpec::Toy { .. }) => {
                cfg.backend = BackendSpec::Toy { model: Default::default() }
            }
            _ => {}
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(p) = &self.basis_path {
            cfg.basis_path = Some(p.clone());
        }
        if let Some(c) = self.count {
            cfg.problems.count = c;
        }
        if let Some(c) = self.calibration_count {
            cfg.calibration.get_or_insert_with(Default::default).count = c;
        }
        let e = &mut cfg.engine;
        if let Some(m) = self.mode {
            e.mode = m.into();
        }
        if let Some(l) = self.l_crit {
            e.l_crit = l;
        }
        if self.tau_phi.is_some() || self.tau_h.is_some() {
            e.gate = GateConfig::new(
                self.tau_phi.unwrap_or(e.gate.tau_phi()),
                self.tau_h.unwrap_or(e.gate.tau_h()),
            )?;
        }
        if let Some(a) = self.alpha_max {
            e.alpha_max = a;
        }
        if let Some(t) = self.max_t {
            e.max_t = t;
        }
        if let Some(d) = self.rollback_depth {
            e.rollback_depth = d;
        }
        if let Some(b) = self.rollback_budget {
            e.rollback_budget = Some(b);
        }
        if let Some(n) = self.n {
            e.n = n;
        }
        if let Some(t) = self.temperature {
            e.temperature = t;
        }
        if let Some(k) = self.k {
            cfg.basis.k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Traces of method a (JSONL).
    pub traces_a: PathBuf,
    /// Traces of method b (JSONL).
    pub traces_b: PathBuf,
    #[arg(long, default_value = "lpsr-out")]
    pub output_dir: PathBuf,
    /// Metadata tag for stratified accuracy.
    #[arg(long, default_value = "difficulty")]
    pub tag: String,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ExportArgs {
    /// Basis file to export.
    pub basis: PathBuf,
    #[arg(long, default_value = "lpsr-out")]
    pub output_dir: PathBuf,
}
