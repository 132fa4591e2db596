//! Run summaries, layer sweeps, hyperparameter grids and rollback timing.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{roc_auc, Confusion};
use crate::detector::{authenticate, detection_score, GateConfig, GateDecision};
use crate::engine::{generate_greedy_watch, run_tasks, EngineConfig, GenerationTrace, LayerTelemetry, Mode, Task};
use crate::error::{config, domain, LpsrError, Result};
use crate::steering::SteeringBasis;

/// Aggregate outcome of one run over a problem set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problems: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_token_cost: f64,
    /// Fraction of problems with at least one rollback.
    pub rollback_rate: f64,
    pub mean_rollbacks: f64,
}

/// Summaries use integer totals only, so they do not depend on trace order.
pub fn summarize(traces: &[GenerationTrace]) -> Result<RunSummary> {
    if traces.is_empty() {
        return Err(domain("summary of an empty run"));
    }
    let n = traces.len();
    let correct = traces.iter().filter(|t| t.correct == Some(true)).count();
    let cost: usize = traces.iter().map(|t| t.token_cost).sum();
    let with_rollback = traces.iter().filter(|t| !t.events.is_empty()).count();
    let rollbacks: usize = traces.iter().map(|t| t.events.len()).sum();
    Ok(RunSummary {
        problems: n,
        correct,
        accuracy: correct as f64 / n as f64,
        mean_token_cost: cost as f64 / n as f64,
        rollback_rate: with_rollback as f64 / n as f64,
        mean_rollbacks: rollbacks as f64 / n as f64,
    })
}

/// Summaries per value of a metadata tag; traces without the tag fall under
/// `"unknown"`.
pub fn group_by_tag(traces: &[GenerationTrace], tag: &str) -> Result<BTreeMap<String, RunSummary>> {
    let mut groups: BTreeMap<String, Vec<GenerationTrace>> = BTreeMap::new();
    for t in traces {
        let key = t.tags.get(tag).cloned().unwrap_or_else(|| "unknown".to_string());
        groups.entry(key).or_default().push(t.clone());
    }
    groups.into_iter().map(|(k, ts)| Ok((k, summarize(&ts)?))).collect()
}

/// Problem-level detector confusion: a problem is flagged when any of its
/// recorded gate values authenticates under `gate`, and is positive when its
/// answer is wrong. Traces without a gold answer are skipped.
pub fn problem_confusion(traces: &[GenerationTrace], gate: &GateConfig) -> Confusion {
    let mut conf = Confusion::default();
    for t in traces {
        if let Some(correct) = t.correct {
            let flagged = t
                .gates
                .iter()
                .any(|g| authenticate(g.step, g.c_t, g.h_t, gate).authenticated);
            conf.record(flagged, !correct);
        }
    }
    conf
}

/// Step-level detector confusion against a ground-truth error flag.
pub fn step_confusion(
    decisions: &[GateDecision],
    gate: &GateConfig,
    is_error: impl Fn(usize) -> bool,
) -> Confusion {
    let mut conf = Confusion::default();
    for g in decisions {
        let fired = authenticate(g.step, g.c_t, g.h_t, gate).authenticated;
        conf.record(fired, is_error(g.step));
    }
    conf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Minimum-cosine AUC for predicting a wrong answer; `None` when only
    /// one outcome class is present.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    /// Problem-level confusion of the dual gate at this layer.
    pub confusion: Confusion,
}

/// One greedy pass per problem with every layer in `layers` hooked at once,
/// scoring each layer by its minimum step cosine.
pub fn layer_sweep(tasks: &[Task<'_>], cfg: &EngineConfig, layers: &[usize]) -> Result<Vec<LayerRecord>> {
    if layers.is_empty() {
        return Err(config("layer sweep needs at least one layer"));
    }
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    let cfg = EngineConfig {
        mode: Mode::Greedy,
        l_crit: layers[0],
        ..cfg.clone()
    };
    let runs: Vec<(Option<bool>, LayerTelemetry)> = tasks
        .par_iter()
        .map(|t| {
            let (trace, telemetry) = generate_greedy_watch(t.backend, t.problem, &cfg, &layers)?;
            Ok((trace.correct, telemetry))
        })
        .collect::<Result<_>>()?;

    layers
        .iter()
        .map(|&layer| {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            let mut confusion = Confusion::default();
            for (correct, telemetry) in &runs {
                let Some(correct) = correct else { continue };
                let gates = &telemetry[&layer];
                let cosines: Vec<f64> = gates.iter().map(|g| g.c_t).collect();
                // Lower minimum cosine means a stronger error signal.
                scores.push(-detection_score(&cosines)?);
                labels.push(!correct);
                confusion.record(gates.iter().any(|g| g.authenticated), !correct);
            }
            let auc = match roc_auc(&scores, &labels) {
                Ok(a) => Some(a),
                Err(LpsrError::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            let positives = labels.iter().filter(|&&l| l).count();
            Ok(LayerRecord {
                layer,
                auc,
                positives,
                negatives: labels.len() - positives,
                confusion,
            })
        })
        .collect()
}

/// Cartesian grid over gate thresholds, step size and monitored layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub tau_phi: Vec<f64>,
    pub tau_h: Vec<f64>,
    pub alpha_max: Vec<f64>,
    pub l_crit: Vec<usize>,
}

impl GridSpec {
    /// Cells in row-major order: `tau_phi` outermost, `l_crit` innermost.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &tau_phi in &self.tau_phi {
            for &tau_h in &self.tau_h {
                for &alpha_max in &self.alpha_max {
                    for &l_crit in &self.l_crit {
                        out.push(GridCell {
                            tau_phi,
                            tau_h,
                            alpha_max,
                            l_crit,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau_phi: f64,
    pub tau_h: f64,
    pub alpha_max: f64,
    pub l_crit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub summary: RunSummary,
}

/// Rollback decoding at every grid cell. `bases` supplies the basis for
/// each monitored layer in the grid.
pub fn grid_search(
    grid: &GridSpec,
    tasks: &[Task<'_>],
    base: &EngineConfig,
    bases: &BTreeMap<usize, SteeringBasis>,
) -> Result<Vec<GridRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(config("empty hyperparameter grid"));
    }
    for l in &grid.l_crit {
        if !bases.contains_key(l) {
            return Err(config(format!("no steering basis for layer {l}")));
        }
    }
    cells
        .par_iter()
        .map(|cell| {
            let cfg = EngineConfig {
                mode: Mode::Lpsr,
                gate: GateConfig::new(cell.tau_phi, cell.tau_h)?,
                alpha_max: cell.alpha_max,
                l_crit: cell.l_crit,
                ..base.clone()
            };
            let traces = run_tasks(tasks, &cfg, Some(&bases[&cell.l_crit]), None)?;
            Ok(GridRow {
                cell: *cell,
                summary: summarize(&traces)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackBucket {
    /// `"0"`, `"1"`, `"2"`, `"3"` or `"4+"`.
    pub rollbacks: String,
    pub problems: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackStats {
    pub events: usize,
    pub mean_fraction: Option<f64>,
    pub median_fraction: Option<f64>,
    /// Nonempty buckets only, in bucket order.
    pub buckets: Vec<RollbackBucket>,
}

pub fn rollback_stats(traces: &[GenerationTrace]) -> Result<RollbackStats> {
    if traces.is_empty() {
        return Err(domain("rollback statistics of an empty run"));
    }
    let mut fractions: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.events.iter().map(|e| e.position_fraction))
        .collect();
    fractions.sort_by(f64::total_cmp);
    let (mean_fraction, median_fraction) = if fractions.is_empty() {
        (None, None)
    } else {
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        (Some(mean), Some(super::stats::quantile(&fractions, 0.5)))
    };
    let mut counts = [(0usize, 0usize); 5];
    for t in traces {
        let b = t.events.len().min(4);
        counts[b].0 += 1;
        if t.correct == Some(true) {
            counts[b].1 += 1;
        }
    }
    let buckets = counts
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(b, &(n, c))| RollbackBucket {
            rollbacks: if b == 4 { "4+".to_string() } else { b.to_string() },
            problems: n,
            correct: c,
            accuracy: Some(c as f64 / n as f64),
        })
        .collect();
    Ok(RollbackStats {
        events: fractions.len(),
        mean_fraction,
        median_fraction,
        buckets,
    })
}
