//! Basis calibration from wrong greedy generations.
//!
//! Each calibration problem is decoded greedily. For every wrong answer the
//! free-running hidden states at the monitored layer are paired with the
//! backend's correct reference trajectory, one correction delta is taken at
//! the first phase shift, and the deltas are clustered into a basis.

use rayon::prelude::*;

use crate::engine::{generate_greedy_hiddens, EngineConfig, Task};
use crate::error::{config, Result};
use crate::steering::{build_basis, extract_delta, BasisBuild, BasisConfig, CorrectionDelta, DeltaExtraction};

#[derive(Clone, Debug)]
pub struct Calibration {
    pub build: BasisBuild,
    pub deltas: Vec<CorrectionDelta>,
    /// Greedy answers that were wrong.
    pub wrong: usize,
    /// Wrong trajectories without a phase shift.
    pub no_shift: usize,
    /// Wrong trajectories whose shift lies past the reference's end.
    pub beyond_reference: usize,
}

/// Harvest correction deltas, in task order.
pub fn collect_deltas(
    tasks: &[Task<'_>],
    engine: &EngineConfig,
) -> Result<(Vec<CorrectionDelta>, usize, usize, usize)> {
    let outcomes: Vec<Option<DeltaExtraction>> = tasks
        .par_iter()
        .map(|t| {
            let (trace, hiddens) = generate_greedy_hiddens(t.backend, t.problem, engine)?;
            if trace.correct != Some(false) {
                return Ok(None);
            }
            let reference = t.backend.reference_trajectory(t.problem, engine.l_crit)?;
            extract_delta(&t.problem.id, &hiddens, &reference, engine.gate.tau_phi()).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut deltas = Vec::new();
    let (mut wrong, mut no_shift, mut beyond) = (0, 0, 0);
    for o in outcomes.into_iter().flatten() {
        wrong += 1;
        match o {
            DeltaExtraction::Found(d) => deltas.push(d),
            DeltaExtraction::NoShift => no_shift += 1,
            DeltaExtraction::BeyondReference { .. } => beyond += 1,
        }
    }
    Ok((deltas, wrong, no_shift, beyond))
}

pub fn calibrate(tasks: &[Task<'_>], engine: &EngineConfig, basis: &BasisConfig) -> Result<Calibration> {
    let (deltas, wrong, no_shift, beyond_reference) = collect_deltas(tasks, engine)?;
    if deltas.is_empty() {
        return Err(config(format!(
            "no correction deltas extracted: {} problems, {wrong} wrong, {no_shift} without a phase shift \
             below -{}, {beyond_reference} with the shift past the reference",
            tasks.len(),
            engine.gate.tau_phi()
        )));
    }
    let cfg = BasisConfig {
        tau_phi: engine.gate.tau_phi(),
        ..basis.clone()
    };
    let build = build_basis(&deltas, engine.l_crit, &cfg)?;
    Ok(Calibration {
        build,
        deltas,
        wrong,
        no_shift,
        beyond_reference,
    })
}
