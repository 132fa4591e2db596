//! Dual-gate phase-shift authentication.
//!
//! A step is flagged when the residual-stream direction reverses sharply
//! (cosine with the previous step below `-tau_phi`) and the logit-lens
//! distribution at that layer is uncertain (entropy above `tau_h`). Both
//! comparisons are strict.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::numerics::cosine;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGate")]
pub struct GateConfig {
    tau_phi: f64,
    tau_h: f64,
}

#[derive(Deserialize)]
struct RawGate {
    tau_phi: f64,
    tau_h: f64,
}

impl TryFrom<RawGate> for GateConfig {
    type Error = crate::error::LpsrError;

    fn try_from(r: RawGate) -> Result<Self> {
        GateConfig::new(r.tau_phi, r.tau_h)
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau_phi: 0.6,
            tau_h: 2.5,
        }
    }
}

impl GateConfig {
    /// `tau_phi` must lie in (0, 1) and `tau_h` must be nonnegative;
    /// `tau_h = 0` disables the entropy gate.
    pub fn new(tau_phi: f64, tau_h: f64) -> Result<Self> {
        if !(tau_phi > 0.0 && tau_phi < 1.0) {
            return Err(config(format!("tau_phi must be in (0, 1), got {tau_phi}")));
        }
        if !(tau_h >= 0.0 && tau_h.is_finite()) {
            return Err(config(format!("tau_h must be finite and >= 0, got {tau_h}")));
        }
        Ok(Self { tau_phi, tau_h })
    }

    pub fn tau_phi(&self) -> f64 {
        self.tau_phi
    }

    pub fn tau_h(&self) -> f64 {
        self.tau_h
    }

    pub fn entropy_gate_enabled(&self) -> bool {
        self.tau_h > 0.0
    }

    pub fn cosine_fires(&self, c: f64) -> bool {
        c < -self.tau_phi
    }

    /// With the gate disabled every entropy passes, including zero.
    pub fn entropy_fires(&self, h: f64) -> bool {
        !self.entropy_gate_enabled() || h > self.tau_h
    }
}

/// Per-step gate telemetry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub step: usize,
    pub c_t: f64,
    pub h_t: f64,
    pub authenticated: bool,
}

pub fn authenticate(step: usize, c: f64, h: f64, cfg: &GateConfig) -> GateDecision {
    GateDecision {
        step,
        c_t: c,
        h_t: h,
        authenticated: cfg.cosine_fires(c) && cfg.entropy_fires(h),
    }
}

/// Cosine between consecutive residual directions. A missing or zero
/// previous direction yields 0, so the first step can never fire.
pub fn step_cosine(prev: Option<&[f32]>, cur: &[f32]) -> f64 {
    match prev {
        Some(p) => cosine(p, cur).unwrap_or(0.0),
        None => 0.0,
    }
}

/// Minimum cosine over a generation; lower means a stronger error signal.
pub fn detection_score(cosines: &[f64]) -> Result<f64> {
    if cosines.is_empty() {
        return Err(domain("detection score of an empty trace"));
    }
    Ok(cosines.iter().copied().fold(f64::INFINITY, f64::min))
}
