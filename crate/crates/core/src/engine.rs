//! Generation loops: phase-shift rollback plus the baseline decoders.
//!
//! Every decoder shares one step loop. Each step hooks the monitored layer,
//! evaluates the dual gate against the previous emitted direction and, for
//! the rollback decoder, on an authenticated shift discards the step's cache
//! rows, injects a steering vector and re-decodes. The re-decoded token is
//! emitted without re-gating.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{authenticate, step_cosine, GateConfig, GateDecision};
use crate::error::{config, LpsrError, Result};
use crate::kvcache::{stable_hash, KvCheckpoint};
use crate::model::{final_answer, Backend, Problem, StepOutput, Token, EOS};
use crate::numerics::{argmax, norm, Vector};
use crate::steering::{adaptive_alpha, select_delta, SteeringBasis};

/// Version tag written into every serialized trace.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lpsr,
    Greedy,
    StaticSteer,
    BestOfN,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Lpsr => "lpsr",
            Mode::Greedy => "greedy",
            Mode::StaticSteer => "static_steer",
            Mode::BestOfN => "best_of_n",
        }
    }
}

/// Which direction becomes the previous direction after a re-decode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VPrevSource {
    /// The re-decoded hidden state with the injection added.
    #[default]
    Redecoded,
    /// The re-decoded hidden state before the injection.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub mode: Mode,
    pub l_crit: usize,
    pub gate: GateConfig,
    pub alpha_max: f64,
    /// Maximum number of generated tokens.
    pub max_t: usize,
    /// Steps discarded per rollback; 0 keeps gate telemetry but never acts.
    pub rollback_depth: usize,
    /// Maximum rollbacks per problem; `None` is unlimited.
    pub rollback_budget: Option<usize>,
    pub v_prev: VPrevSource,
    /// Rollouts for best-of-n.
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lpsr,
            l_crit: 4,
            gate: GateConfig::default(),
            alpha_max: 0.1,
            max_t: 128,
            rollback_depth: 1,
            rollback_budget: None,
            v_prev: VPrevSource::Redecoded,
            n: 16,
            temperature: 0.7,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, backend: &(impl Backend + ?Sized)) -> Result<()> {
        if self.l_crit >= backend.num_layers() {
            return Err(config(format!(
                "l_crit {} out of range for a {}-layer model",
                self.l_crit,
                backend.num_layers()
            )));
        }
        if self.max_t == 0 {
            return Err(config("max_t must be positive"));
        }
        if self.rollback_depth > self.max_t {
            return Err(config("rollback_depth exceeds max_t"));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max.is_finite()) {
            return Err(config("alpha_max must be positive and finite"));
        }
        if self.n == 0 {
            return Err(config("best-of-n needs n >= 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(config("temperature must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackEvent {
    /// 1-based step whose gate fired.
    pub step: usize,
    pub c_t: f64,
    pub h_t: f64,
    pub delta_index: usize,
    pub alpha: f64,
    /// Re-decoded position over final length.
    pub position_fraction: f64,
    /// Steps actually discarded.
    pub depth: usize,
    /// Cache digest immediately before the re-decode.
    pub cache_digest: u64,
    /// `‖h + αδ‖ / ‖h‖` at the monitored layer.
    pub magnitude_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub schema_version: u32,
    pub problem_id: String,
    pub mode: Mode,
    pub tokens: Vec<Token>,
    pub gates: Vec<GateDecision>,
    pub events: Vec<RollbackEvent>,
    pub final_length: usize,
    /// Forward passes spent, re-decodes and discarded steps included.
    pub token_cost: usize,
    pub answer: Option<Token>,
    pub gold: Option<Token>,
    pub correct: Option<bool>,
    /// Generation stopped without emitting EOS.
    pub truncated: bool,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    /// Per-rollout answers for best-of-n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<Option<Token>>>,
}

impl GenerationTrace {
    pub fn rollbacks(&self) -> usize {
        self.events.len()
    }

    /// Gate cosines in step order, for detection scoring.
    pub fn cosines(&self) -> Vec<f64> {
        self.gates.iter().map(|g| g.c_t).collect()
    }
}

enum Policy<'a> {
    Plain,
    Rollback(&'a SteeringBasis),
    Static(&'a [f32]),
    Sample(ChaCha8Rng, f64),
}

/// Extra per-layer gate telemetry collected alongside a generation.
pub type LayerTelemetry = BTreeMap<usize, Vec<GateDecision>>;

fn sample_token(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> Token {
    if temperature == 0.0 {
        return argmax(logits) as Token;
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as Token;
        }
        u -= w;
    }
    argmax(logits) as Token
}

fn add_scaled(h: &[f32], dir: &[f32], alpha: f64) -> Vec<f32> {
    h.iter().zip(dir).map(|(&a, &d)| a + (alpha * d as f64) as f32).collect()
}

fn decode(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
    mut policy: Policy<'_>,
    watch: &[usize],
) -> Result<(GenerationTrace, LayerTelemetry, Vec<Vector>)> {
    cfg.validate(backend)?;
    let Some((&first_input, prefix)) = problem.prompt.split_last() else {
        return Err(config(format!("problem {} has an empty prompt", problem.id)));
    };
    let mode = match &policy {
        Policy::Plain => Mode::Greedy,
        Policy::Rollback(_) => Mode::Lpsr,
        Policy::Static(_) => Mode::StaticSteer,
        Policy::Sample(..) => Mode::BestOfN,
    };
    let l = cfg.l_crit;
    let mut hooks: Vec<usize> = watch.to_vec();
    hooks.push(l);
    hooks.sort_unstable();
    hooks.dedup();

    let mut cache = backend.new_cache()?;
    let mut truncated = false;
    for &t in prefix {
        match backend.step(&mut cache, t, &[]) {
            Ok(_) => {}
            Err(LpsrError::GenerationLength { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let mut tokens: Vec<Token> = Vec::new();
    let mut gates = Vec::new();
    let mut events: Vec<RollbackEvent> = Vec::new();
    let mut telemetry: LayerTelemetry = watch.iter().map(|&w| (w, Vec::new())).collect();
    // Direction of every emitted step at each watched layer and at l_crit.
    let mut dirs: Vec<Vector> = Vec::new();
    let mut watch_prev: BTreeMap<usize, Vector> = BTreeMap::new();
    // `boundaries[s]` is the cache state before generation step `s + 1`.
    let mut boundaries: Vec<KvCheckpoint> = Vec::new();
    let mut cost = 0usize;
    let mut redecode_positions: Vec<usize> = Vec::new();

    while !truncated && tokens.len() < cfg.max_t && tokens.last() != Some(&EOS) {
        let step = tokens.len() + 1;
        let input = if step == 1 { first_input } else { tokens[step - 2] };
        boundaries.truncate(step - 1);
        boundaries.push(cache.checkpoint());

        let out = match &policy {
            Policy::Static(dir) => {
                let add = add_scaled(&vec![0.0; dir.len()], dir, cfg.alpha_max);
                backend.step_with_injection(&mut cache, input, &hooks, l, &add)
            }
            _ => backend.step(&mut cache, input, &hooks),
        };
        let out = match out {
            Ok(o) => o,
            Err(LpsrError::GenerationLength { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        cost += 1;

        let h = out.hidden_at(l)?.clone();
        let c = step_cosine(dirs.last().map(|v| v.as_slice()), &h);
        let entropy = backend.lens_entropy(l, &out)?;
        let decision = authenticate(step, c, entropy, &cfg.gate);
        gates.push(decision);
        for &w in watch {
            let hw = out.hidden_at(w)?;
            let cw = step_cosine(watch_prev.get(&w).map(|v| v.as_slice()), hw);
            let ew = backend.lens_entropy(w, &out)?;
            telemetry.get_mut(&w).expect("watched").push(authenticate(step, cw, ew, &cfg.gate));
            watch_prev.insert(w, hw.clone());
        }

        let budget_left = cfg.rollback_budget.is_none_or(|b| events.len() < b);
        let after_last = events.last().is_none_or(|e| step > e.step);
        let basis = match &policy {
            Policy::Rollback(b) => Some(*b),
            _ => None,
        };
        let fire = decision.authenticated && budget_left && after_last && cfg.rollback_depth > 0;

        match basis.filter(|_| fire) {
            Some(basis) => {
                let depth = cfg.rollback_depth.min(step);
                let target = boundaries[step - depth];
                cache.rollback_to(&target)?;
                if cache.digest() != target.digest {
                    return Err(LpsrError::StaleCheckpoint {
                        len: target.len,
                        expected: target.digest,
                        found: cache.digest(),
                    });
                }
                let cache_digest = cache.digest();
                tokens.truncate(step - depth);
                dirs.truncate(step - depth);
                let redo = step - depth + 1;
                let redo_input = if redo == 1 { first_input } else { tokens[redo - 2] };

                let (delta_index, delta) = select_delta(basis, &h)?;
                let alpha = adaptive_alpha(c, cfg.gate.tau_phi(), cfg.alpha_max);
                let add = add_scaled(&vec![0.0; delta.dim()], delta, alpha);
                let out2: StepOutput =
                    match backend.step_with_injection(&mut cache, redo_input, &hooks, l, &add) {
                        Ok(o) => o,
                        Err(LpsrError::GenerationLength { .. }) => {
                            truncated = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    };
                cost += 1;
                let h2 = out2.hidden_at(l)?;
                let injected = Vector::new(add_scaled(h2, delta, alpha))?;
                let magnitude_ratio = if h2.norm() > 0.0 {
                    norm(&injected) / h2.norm()
                } else {
                    1.0
                };
                dirs.push(match cfg.v_prev {
                    VPrevSource::Redecoded => injected,
                    VPrevSource::Original => h2.clone(),
                });
                tokens.push(out2.token);
                redecode_positions.push(redo);
                events.push(RollbackEvent {
                    step,
                    c_t: c,
                    h_t: entropy,
                    delta_index,
                    alpha,
                    position_fraction: 0.0,
                    depth,
                    cache_digest,
                    magnitude_ratio,
                });
            }
            None => {
                let token = match &mut policy {
                    Policy::Sample(rng, temp) => sample_token(&out.logits, *temp, rng),
                    _ => out.token,
                };
                dirs.push(h);
                tokens.push(token);
            }
        }
    }

    let final_length = tokens.len();
    for (e, &pos) in events.iter_mut().zip(&redecode_positions) {
        e.position_fraction = if final_length == 0 {
            0.0
        } else {
            (pos as f64 / final_length as f64).min(1.0)
        };
    }
    let answer = final_answer(&tokens);
    let correct = problem.gold.map(|g| answer == Some(g));
    let trace = GenerationTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        problem_id: problem.id.clone(),
        mode,
        truncated: truncated || tokens.last() != Some(&EOS),
        tokens,
        gates,
        events,
        final_length,
        token_cost: cost,
        answer,
        gold: problem.gold,
        correct,
        tags: problem.tags.clone(),
        votes: None,
    };
    Ok((trace, telemetry, dirs))
}

/// Greedy decoding with gate telemetry and no interventions.
pub fn generate_greedy(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
) -> Result<GenerationTrace> {
    decode(backend, problem, cfg, Policy::Plain, &[]).map(|(t, ..)| t)
}

/// Greedy decoding that also records gate telemetry at every `layers` entry.
pub fn generate_greedy_watch(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
    layers: &[usize],
) -> Result<(GenerationTrace, LayerTelemetry)> {
    decode(backend, problem, cfg, Policy::Plain, layers).map(|(t, w, _)| (t, w))
}

/// Greedy decoding that also returns the hidden state at `cfg.l_crit` for
/// every emitted step.
pub fn generate_greedy_hiddens(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
) -> Result<(GenerationTrace, Vec<Vector>)> {
    decode(backend, problem, cfg, Policy::Plain, &[]).map(|(t, _, h)| (t, h))
}

/// Phase-shift rollback decoding.
pub fn generate_lpsr(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
    basis: &SteeringBasis,
) -> Result<GenerationTrace> {
    if basis.layer() != cfg.l_crit {
        return Err(config(format!(
            "basis was calibrated at layer {}, engine monitors layer {}",
            basis.layer(),
            cfg.l_crit
        )));
    }
    if basis.dim() != backend.hidden_dim() {
        return Err(config("basis dimension does not match the model"));
    }
    decode(backend, problem, cfg, Policy::Rollback(basis), &[]).map(|(t, ..)| t)
}

/// Inject `alpha_max * delta` at every step, with no detection or rollback.
pub fn generate_static_steer(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
    delta: &[f32],
) -> Result<GenerationTrace> {
    if delta.len() != backend.hidden_dim() {
        return Err(config("steering vector dimension does not match the model"));
    }
    decode(backend, problem, cfg, Policy::Static(delta), &[]).map(|(t, ..)| t)
}

fn rollout_rng(seed: u64, problem_id: &str, rollout: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(problem_id.as_bytes()));
    rng.set_stream(rollout as u64);
    rng
}

/// Majority answer, ties to the answer whose first vote came earliest.
/// Rollouts without an answer do not vote.
pub fn majority_vote(answers: &[Option<Token>]) -> Option<Token> {
    let mut counts: Vec<(Token, usize)> = Vec::new();
    for a in answers.iter().flatten() {
        match counts.iter_mut().find(|(t, _)| t == a) {
            Some((_, n)) => *n += 1,
            None => counts.push((*a, 1)),
        }
    }
    let mut best: Option<(Token, usize)> = None;
    for (t, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((t, n));
        }
    }
    best.map(|(t, ..)| t)
}

/// `n` sampled rollouts and a majority vote over their answers. The returned
/// trace carries the first rollout agreeing with the vote, the summed cost
/// of all rollouts and every rollout's answer.
pub fn generate_best_of_n(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
) -> Result<GenerationTrace> {
    cfg.validate(backend)?;
    let rollouts: Vec<GenerationTrace> = (0..cfg.n)
        .into_par_iter()
        .map(|r| {
            let policy = Policy::Sample(rollout_rng(cfg.seed, &problem.id, r), cfg.temperature);
            decode(backend, problem, cfg, policy, &[]).map(|(t, ..)| t)
        })
        .collect::<Result<_>>()?;
    let answers: Vec<Option<Token>> = rollouts.iter().map(|t| t.answer).collect();
    let winner = majority_vote(&answers);
    let total_cost = rollouts.iter().map(|t| t.token_cost).sum();
    let pick = rollouts
        .iter()
        .position(|t| t.answer == winner)
        .unwrap_or(0);
    let mut trace = rollouts.into_iter().nth(pick).expect("n >= 1");
    trace.token_cost = total_cost;
    trace.answer = winner;
    trace.correct = problem.gold.map(|g| winner == Some(g));
    trace.votes = Some(answers);
    Ok(trace)
}

/// A problem paired with the backend that decodes it.
#[derive(Clone, Copy)]
pub struct Task<'a> {
    pub backend: &'a dyn Backend,
    pub problem: &'a Problem,
}

/// Run every task in parallel; traces come back in task order.
pub fn run_tasks(
    tasks: &[Task<'_>],
    cfg: &EngineConfig,
    basis: Option<&SteeringBasis>,
    steer: Option<&[f32]>,
) -> Result<Vec<GenerationTrace>> {
    tasks
        .par_iter()
        .map(|t| generate(t.backend, t.problem, cfg, basis, steer))
        .collect()
}

/// Dispatch on `cfg.mode`. Rollback needs `basis`; static steering uses
/// `steer` when given and the basis mean direction otherwise.
pub fn generate(
    backend: &(impl Backend + ?Sized),
    problem: &Problem,
    cfg: &EngineConfig,
    basis: Option<&SteeringBasis>,
    steer: Option<&[f32]>,
) -> Result<GenerationTrace> {
    match cfg.mode {
        Mode::Greedy => generate_greedy(backend, problem, cfg),
        Mode::BestOfN => generate_best_of_n(backend, problem, cfg),
        Mode::Lpsr => {
            let basis = basis.ok_or_else(|| config("rollback mode needs a steering basis"))?;
            generate_lpsr(backend, problem, cfg, basis)
        }
        Mode::StaticSteer => match (steer, basis) {
            (Some(d), _) => generate_static_steer(backend, problem, cfg, d),
            (None, Some(b)) => generate_static_steer(backend, problem, cfg, &b.mean_direction()),
            (None, None) => Err(config("static steering needs a steering vector or basis")),
        },
    }
}
