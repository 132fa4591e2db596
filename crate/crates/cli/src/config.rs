//! Run configuration: one JSON file describing the backend, problem sets,
//! engine settings, basis location, outputs and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lpsr_core::engine::EngineConfig;
use lpsr_core::eval::GridSpec;
use lpsr_core::kvcache::stable_hash;
use lpsr_core::model::simulator::{SimWorld, SuiteSpec};
use lpsr_core::model::transformer::ModelConfig;
use lpsr_core::steering::BasisConfig;
use serde::{Deserialize, Serialize};

/// Which model decodes the problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Scripted hidden-state simulator with ground-truth error onsets.
    Simulator {
        #[serde(default)]
        world: SimWorld,
    },
    /// Small random-weight decoder with a KV cache.
    Toy {
        #[serde(default)]
        model: ModelConfig,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Simulator {
            world: SimWorld::default(),
        }
    }
}

/// A seeded problem set. `suite` shapes simulator schedules; `prompt_len`
/// and `max_new` shape toy-transformer problems. Its seed is derived from the
/// run seed, so `suite.seed` and `suite.count` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemSet {
    pub count: usize,
    pub suite: SuiteSpec,
    pub prompt_len: usize,
    pub max_new: usize,
}

impl Default for ProblemSet {
    fn default() -> Self {
        Self {
            count: 200,
            suite: SuiteSpec::default(),
            prompt_len: 4,
            max_new: 32,
        }
    }
}

/// Clustering settings for calibration. The k-means seed comes from the run
/// seed and the delta threshold from the engine gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisSettings {
    pub k: usize,
    pub restarts: usize,
    pub ortho_threshold: f64,
}

impl Default for BasisSettings {
    fn default() -> Self {
        let d = BasisConfig::default();
        Self {
            k: d.k,
            restarts: d.restarts,
            ortho_threshold: d.ortho_threshold,
        }
    }
}

/// Axis values for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// Layers for the layer sweep; `None` means every layer.
    pub layers: Option<Vec<usize>>,
    pub grid: GridSpec,
    pub basis_k: Vec<usize>,
    pub rollback_depth: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            layers: None,
            grid: GridSpec {
                tau_phi: vec![0.3, 0.45, 0.6, 0.75],
                tau_h: vec![1.5, 2.0, 2.5, 3.0],
                alpha_max: vec![0.05, 0.10, 0.15, 0.22],
                l_crit: vec![2, 3, 4, 5, 6],
            },
            basis_k: vec![4, 8, 16, 32],
            rollback_depth: vec![0, 1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root of every random stream in the run. Required in config files.
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub problems: ProblemSet,
    /// Held-out problems for `calibrate` and calibrating sweeps.
    #[serde(default)]
    pub calibration: Option<ProblemSet>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub basis: BasisSettings,
    /// Basis file written by `calibrate` and read by `run`. Defaults to
    /// `basis.lpsb` in the output directory.
    #[serde(default)]
    pub basis_path: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("lpsr-out")
}

/// Onset strength per layer in the default simulator suites: peaked at
/// layer 4 with weaker neighbours, so every layer of the default grid can be
/// calibrated.
pub const DEFAULT_LAYER_PROFILE: [f32; 8] = [0.0, 0.0, 0.85, 0.9, 1.0, 0.9, 0.85, 0.0];

impl Default for RunConfig {
    fn default() -> Self {
        let suite = SuiteSpec {
            layer_strength: Some(DEFAULT_LAYER_PROFILE.to_vec()),
            ..SuiteSpec::default()
        };
        Self {
            seed: 0,
            backend: BackendSpec::default(),
            problems: ProblemSet {
                suite: suite.clone(),
                ..ProblemSet::default()
            },
            calibration: Some(ProblemSet {
                suite: SuiteSpec { p_error: 0.8, ..suite },
                ..ProblemSet::default()
            }),
            engine: EngineConfig::default(),
            basis: BasisSettings {
                k: 16,
                restarts: 5,
                ..BasisSettings::default()
            },
            basis_path: None,
            output_dir: default_output_dir(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Which derived stream a seed feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Problems,
    Calibration,
    Basis,
}

impl Stream {
    fn tag(self) -> &'static [u8] {
        match self {
            Stream::Problems => b"problems",
            Stream::Calibration => b"calibration",
            Stream::Basis => b"basis",
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("invalid run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("problems", Some(&self.problems)), ("calibration", self.calibration.as_ref())] {
            if let Some(set) = set {
                if set.count == 0 {
                    bail!("{name}.count must be positive");
                }
                if matches!(self.backend, BackendSpec::Toy { .. }) && (set.prompt_len == 0 || set.max_new == 0) {
                    bail!("{name}: prompt_len and max_new must be positive");
                }
            }
        }
        if self.basis.k == 0 || self.basis.restarts == 0 {
            bail!("basis.k and basis.restarts must be positive");
        }
        if !(self.basis.ortho_threshold > 0.0 && self.basis.ortho_threshold <= 1.0) {
            bail!("basis.ortho_threshold must be in (0, 1]");
        }
        if let Some(layers) = &self.sweep.layers {
            if layers.is_empty() {
                bail!("sweep.layers must not be empty");
            }
        }
        Ok(())
    }

    /// Seed for one derived stream, a pure function of the run seed.
    pub fn derived_seed(&self, stream: Stream) -> u64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(stream.tag());
        stable_hash(&bytes)
    }

    pub fn basis_config(&self) -> BasisConfig {
        BasisConfig {
            k: self.basis.k,
            restarts: self.basis.restarts,
            ortho_threshold: self.basis.ortho_threshold,
            seed: self.derived_seed(Stream::Basis),
            tau_phi: self.engine.gate.tau_phi(),
        }
    }

    pub fn basis_file(&self) -> PathBuf {
        self.basis_path.clone().unwrap_or_else(|| self.output_dir.join("basis.lpsb"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn seed_is_required() {
        assert!(RunConfig::from_json("{}").is_err());
        let cfg = RunConfig::from_json(r#"{"seed": 5}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.output_dir, PathBuf::from("lpsr-out"));
    }

    #[test]
    fn invalid_gate_is_rejected() {
        let bad = r#"{"seed": 1, "engine": {"gate": {"tau_phi": 1.5, "tau_h": 2.5}}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.derived_seed(Stream::Problems), a.derived_seed(Stream::Calibration));
        assert_ne!(a.derived_seed(Stream::Problems), b.derived_seed(Stream::Problems));
        assert_eq!(a.derived_seed(Stream::Basis), RunConfig::default().derived_seed(Stream::Basis));
    }

    #[test]
    fn toy_backend_parses() {
        let cfg = RunConfig::from_json(r#"{"seed": 2, "backend": {"kind": "toy"}}"#).unwrap();
        assert_eq!(cfg.backend, BackendSpec::Toy { model: ModelConfig::default() });
    }
}
