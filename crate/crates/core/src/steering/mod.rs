//! Steering basis calibration and runtime selection.
//!
//! Calibration collects one correction delta per wrong trajectory (the
//! correct-minus-wrong hidden state at the first phase shift), clusters the
//! deltas with k-means, unit-normalizes the centroids and greedily drops
//! near-duplicates. At runtime the basis vector with the largest inner
//! product against the current hidden state is injected with an adaptive
//! step size.

pub mod format;

use serde::{Deserialize, Serialize};

use crate::detector::step_cosine;
use crate::error::{config, domain, Result};
use crate::kvcache::stable_hash;
use crate::numerics::{cosine, dot, kmeans, unit_normalize, Vector};

/// Tolerance on `|‖δ‖ - 1|` for basis vectors.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// An ordered set of unit-norm steering directions tied to one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringBasis {
    vectors: Vec<Vector>,
    layer: usize,
    cfg_digest: u64,
}

impl SteeringBasis {
    /// Vectors must be nonempty, share a dimension and be unit-norm.
    pub fn new(vectors: Vec<Vector>, layer: usize, cfg_digest: u64) -> Result<Self> {
        let dim = vectors
            .first()
            .ok_or_else(|| config("steering basis must be nonempty"))?
            .dim();
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(domain(format!("basis vector {i} has dimension {}, expected {dim}", v.dim())));
            }
            if (v.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(domain(format!("basis vector {i} has norm {}", v.norm())));
            }
        }
        Ok(Self {
            vectors,
            layer,
            cfg_digest,
        })
    }

    /// A basis of `count` zero vectors. Injecting any of them is a no-op,
    /// which makes rollback observable without changing emitted tokens.
    pub fn null(dim: usize, count: usize, layer: usize) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(config("null basis needs positive dim and count"));
        }
        Ok(Self {
            vectors: vec![Vector::zeros(dim); count],
            layer,
            cfg_digest: 0,
        })
    }

    pub fn vectors(&self) -> &[Vector] {
        &self.vectors
    }

    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn cfg_digest(&self) -> u64 {
        self.cfg_digest
    }

    /// Normalized mean of all vectors (the single direction used by static
    /// steering). A basis whose vectors cancel yields the zero vector.
    pub fn mean_direction(&self) -> Vector {
        let mut acc = vec![0.0f64; self.dim()];
        for v in &self.vectors {
            for (a, &x) in acc.iter_mut().zip(v.iter()) {
                *a += x as f64;
            }
        }
        let mean: Vec<f32> = acc.iter().map(|&a| a as f32).collect();
        unit_normalize(&mean).unwrap_or_else(|_| Vector::zeros(self.dim()))
    }
}

/// A correction delta harvested from one wrong trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionDelta {
    pub delta: Vector,
    pub problem_id: String,
    /// 1-based step of the first phase shift on the wrong trajectory.
    pub t_star: usize,
}

/// Outcome of [`extract_delta`].
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaExtraction {
    Found(CorrectionDelta),
    /// The wrong trajectory never crosses the cosine gate.
    NoShift,
    /// The shift lies past the end of the reference trajectory.
    BeyondReference { t_star: usize, reference_len: usize },
}

impl DeltaExtraction {
    pub fn found(self) -> Option<CorrectionDelta> {
        match self {
            DeltaExtraction::Found(d) => Some(d),
            _ => None,
        }
    }
}

/// 1-based index of the first step whose cosine with its predecessor is
/// below `-tau_phi`.
pub fn first_phase_shift(trajectory: &[Vector], tau_phi: f64) -> Option<usize> {
    (1..trajectory.len())
        .find(|&i| step_cosine(Some(&trajectory[i - 1]), &trajectory[i]) < -tau_phi)
        .map(|i| i + 1)
}

pub fn extract_delta(
    problem_id: &str,
    wrong: &[Vector],
    right: &[Vector],
    tau_phi: f64,
) -> Result<DeltaExtraction> {
    if wrong.is_empty() || right.is_empty() {
        return Err(domain("delta extraction needs nonempty trajectories"));
    }
    let Some(t_star) = first_phase_shift(wrong, tau_phi) else {
        return Ok(DeltaExtraction::NoShift);
    };
    if t_star > right.len() {
        return Ok(DeltaExtraction::BeyondReference {
            t_star,
            reference_len: right.len(),
        });
    }
    let (r, w) = (&right[t_star - 1], &wrong[t_star - 1]);
    if r.dim() != w.dim() {
        return Err(domain("wrong and reference hidden states differ in dimension"));
    }
    let delta = Vector::new(r.iter().zip(w.iter()).map(|(a, b)| a - b).collect())?;
    Ok(DeltaExtraction::Found(CorrectionDelta {
        delta,
        problem_id: problem_id.to_string(),
        t_star,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub k: usize,
    pub restarts: usize,
    pub ortho_threshold: f64,
    pub seed: u64,
    /// Cosine threshold used when the deltas were extracted.
    pub tau_phi: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            k: 256,
            restarts: 20,
            ortho_threshold: 0.95,
            seed: 0,
            tau_phi: 0.6,
        }
    }
}

impl BasisConfig {
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(32);
        bytes.extend_from_slice(&self.tau_phi.to_le_bytes());
        bytes.extend_from_slice(&(self.k as u64).to_le_bytes());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&self.ortho_threshold.to_le_bytes());
        stable_hash(&bytes)
    }
}

/// A built basis plus clustering diagnostics.
#[derive(Clone, Debug)]
pub struct BasisBuild {
    pub basis: SteeringBasis,
    pub inertia: f64,
    /// Population of each kept vector's cluster, in basis order.
    pub populations: Vec<usize>,
    /// Centroids dropped as near-duplicates (or for having zero norm).
    pub pruned: usize,
}

pub fn build_basis(deltas: &[CorrectionDelta], layer: usize, cfg: &BasisConfig) -> Result<BasisBuild> {
    if !(cfg.ortho_threshold > 0.0 && cfg.ortho_threshold <= 1.0) {
        return Err(config("ortho_threshold must be in (0, 1]"));
    }
    if deltas.len() < cfg.k {
        return Err(config(format!(
            "basis of size K={} needs at least K deltas, got {}",
            cfg.k,
            deltas.len()
        )));
    }
    let points: Vec<Vector> = deltas.iter().map(|d| d.delta.clone()).collect();
    let clusters = kmeans(&points, cfg.k, cfg.restarts, cfg.seed)?;
    let pops = clusters.populations();

    // Largest clusters first; stable sort keeps index order on ties.
    let mut order: Vec<usize> = (0..cfg.k).collect();
    order.sort_by(|&a, &b| pops[b].cmp(&pops[a]));

    let mut kept: Vec<Vector> = Vec::new();
    let mut kept_pops = Vec::new();
    for i in order {
        let Ok(unit) = unit_normalize(&clusters.centroids[i]) else {
            continue;
        };
        let distinct = kept
            .iter()
            .all(|v| cosine(v, &unit).map(f64::abs).unwrap_or(0.0) <= cfg.ortho_threshold);
        if distinct {
            kept.push(unit);
            kept_pops.push(pops[i]);
        }
    }
    if kept.is_empty() {
        return Err(domain("every centroid had zero norm"));
    }
    let pruned = cfg.k - kept.len();
    Ok(BasisBuild {
        basis: SteeringBasis::new(kept, layer, cfg.digest())?,
        inertia: clusters.inertia,
        populations: kept_pops,
        pruned,
    })
}

fn argmax_by(basis: &SteeringBasis, score: impl Fn(&Vector) -> f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, v) in basis.vectors.iter().enumerate() {
        let s = score(v);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

fn check_dim(basis: &SteeringBasis, h: &[f32]) -> Result<()> {
    if h.len() != basis.dim() {
        return Err(domain(format!(
            "hidden state has dimension {}, basis has {}",
            h.len(),
            basis.dim()
        )));
    }
    Ok(())
}

/// The basis vector with the largest raw inner product against `h`, lowest
/// index on ties.
pub fn select_delta<'a>(basis: &'a SteeringBasis, h: &[f32]) -> Result<(usize, &'a Vector)> {
    check_dim(basis, h)?;
    let i = argmax_by(basis, |v| dot(v, h));
    Ok((i, &basis.vectors[i]))
}

/// The basis vector best aligned with the displacement `target - h`. For a
/// unit-norm basis and any fixed step size this minimizes the distance from
/// `h + alpha * delta` to `target`.
pub fn select_for_target<'a>(
    basis: &'a SteeringBasis,
    h: &[f32],
    target: &[f32],
) -> Result<(usize, &'a Vector)> {
    check_dim(basis, h)?;
    check_dim(basis, target)?;
    let i = argmax_by(basis, |v| {
        v.iter()
            .zip(h.iter().zip(target))
            .map(|(&d, (&a, &b))| d as f64 * (b as f64 - a as f64))
            .sum()
    });
    Ok((i, &basis.vectors[i]))
}

/// Step size `min(alpha_max, |c| / tau_phi * alpha_max)`.
pub fn adaptive_alpha(c: f64, tau_phi: f64, alpha_max: f64) -> f64 {
    (c.abs() / tau_phi * alpha_max).min(alpha_max)
}

/// Bound `exp(-d * tau_phi^2 / 2)` on the probability that a random
/// direction in `d` dimensions has cosine below `-tau_phi` with a fixed one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationBound {
    pub exponent: f64,
    /// `None` when `exp(exponent)` is below the smallest normal `f64`.
    pub bound: Option<f64>,
    pub log10_bound: f64,
}

pub fn concentration_bound(d: usize, tau_phi: f64) -> ConcentrationBound {
    let exponent = -(d as f64) * tau_phi * tau_phi / 2.0;
    let bound = (exponent >= f64::MIN_POSITIVE.ln()).then(|| exponent.exp());
    ConcentrationBound {
        exponent,
        bound,
        log10_bound: exponent / std::f64::consts::LN_10,
    }
}
