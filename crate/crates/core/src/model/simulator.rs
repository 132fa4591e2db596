//! Synthetic trajectory simulator with ground-truth error onsets.
//!
//! Each layer's hidden state follows a small-angle random walk on the unit
//! sphere inside a "walk" subspace. A schedule marks some steps as error
//! onsets: there the walk direction turns sharply (a phase shift), an
//! error-type signature appears in a separate signature subspace, and the
//! token distribution flattens with the error symbol [`ERR_TOKEN`] on top.
//! Emitting the error symbol derails the trajectory, which makes the final
//! answer wrong.
//!
//! The correct (reference) trajectory carries the same signature with extra
//! gain, so correction deltas point along the signature. Injecting a vector
//! whose cosine with the onset's signature reaches the configured threshold
//! averts the error; injecting a signature-aligned vector at a step with no
//! error overcorrects and emits the error symbol instead.
//!
//! Walk increments are drawn from per-(seed, position, layer) streams, so a
//! trajectory does not depend on the order in which steps are (re)computed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_layer, Backend, Injection, Problem, StepOutput, Token, EOS};
use crate::error::{config, domain, LpsrError, Result};
use crate::kvcache::{KvCache, LayerKv};
use crate::numerics::{argmax, cosine, softmax_entropy, Vector};

/// The wrong-step symbol.
pub const ERR_TOKEN: Token = 1;
/// Symbol emitted on ordinary working steps.
pub const WORK_TOKEN: Token = 2;
/// Answers are drawn from `FIRST_ANSWER..vocab`.
pub const FIRST_ANSWER: Token = 3;

const MASKED: f32 = -1e9;

/// Geometry and response parameters shared by every simulated problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimWorld {
    pub layers: usize,
    pub dim: usize,
    pub vocab: usize,
    /// Number of error types; each owns one signature axis.
    pub error_types: usize,
    /// Norm of the walk component of every hidden state.
    pub hidden_scale: f32,
    /// Weight of the error signature at an onset (full-strength layer).
    pub signature_weight: f32,
    /// Extra signature weight carried by the correct trajectory.
    pub correction_gain: f32,
    /// Minimum cosine between an injection and a signature for it to act.
    pub correction_threshold: f32,
}

impl Default for SimWorld {
    fn default() -> Self {
        Self {
            layers: 8,
            dim: 64,
            vocab: 64,
            error_types: 8,
            hidden_scale: 1.0,
            signature_weight: 0.4,
            correction_gain: 1.0,
            correction_threshold: 0.7,
        }
    }
}

impl SimWorld {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.error_types == 0 {
            return Err(config("simulator needs layers and error types"));
        }
        if self.dim < self.error_types + 2 {
            return Err(config("simulator dim must exceed error_types + 1"));
        }
        if self.vocab < FIRST_ANSWER as usize + 2 {
            return Err(config("simulator vocab too small"));
        }
        if !(self.correction_threshold > 0.0 && self.correction_threshold <= 1.0) {
            return Err(config("correction_threshold must be in (0, 1]"));
        }
        Ok(())
    }

    /// Unit signature axis of error type `k`.
    pub fn signature(&self, k: usize) -> Vector {
        let mut s = vec![0.0f32; self.dim];
        s[k] = 1.0;
        Vector::new(s).expect("finite")
    }

    fn walk_dims(&self) -> std::ops::Range<usize> {
        self.error_types..self.dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Nominal,
    ErrorOnset,
    PostError,
    /// A sharp turn that is not an error (e.g. a structural token).
    BenignShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub regime: Regime,
    /// Cosine between consecutive walk directions at a full-strength layer.
    pub turn_cos: f32,
    /// The token distribution is flat over this many symbols.
    pub entropy_symbols: u32,
    #[serde(default)]
    pub error_type: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSchedule {
    pub seed: u64,
    pub steps: Vec<StepSpec>,
    pub gold: Token,
    /// Per-layer strength of onsets and benign shifts (0 = plain walk).
    pub layer_strength: Vec<f32>,
    /// Cosine of the nominal drift angle.
    pub nominal_cos: f32,
    /// Flat-set size for corrected onsets.
    pub nominal_symbols: u32,
    /// Isotropic noise on the reference trajectory.
    pub noise: f32,
}

impl SimSchedule {
    pub fn validate(&self, world: &SimWorld) -> Result<()> {
        let v = world.vocab as u32;
        if self.steps.len() < 2 {
            return Err(config("schedule needs an answer step and an EOS step"));
        }
        if self.layer_strength.len() != world.layers {
            return Err(config("layer_strength must have one entry per layer"));
        }
        if !(FIRST_ANSWER..v).contains(&self.gold) {
            return Err(config(format!("gold answer {} out of range", self.gold)));
        }
        if self.nominal_symbols == 0 || self.nominal_symbols > v - 2 {
            return Err(config("nominal_symbols out of range"));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if !(-1.0..=1.0).contains(&s.turn_cos) {
                return Err(config(format!("step {}: turn_cos outside [-1, 1]", i + 1)));
            }
            let onset = s.regime == Regime::ErrorOnset;
            let cap = if onset { v - 1 } else { v - 2 };
            if s.entropy_symbols == 0 || s.entropy_symbols > cap {
                return Err(config(format!("step {}: entropy_symbols out of range", i + 1)));
            }
            match (onset, s.error_type) {
                (true, Some(k)) if k < world.error_types => {}
                (true, _) => return Err(config(format!("step {}: onset needs a valid error type", i + 1))),
                (false, Some(_)) => {
                    return Err(config(format!("step {}: error type on a non-onset step", i + 1)))
                }
                (false, None) => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// 1-based steps carrying the ground-truth error flag.
    pub fn error_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.regime == Regime::ErrorOnset)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn is_error_step(&self, step: usize) -> bool {
        step >= 1
            && self
                .steps
                .get(step - 1)
                .is_some_and(|s| s.regime == Regime::ErrorOnset)
    }

    /// The answer the greedy (uncorrected) decoder produces.
    pub fn greedy_answer(&self, world: &SimWorld) -> Token {
        if self.error_steps().is_empty() {
            self.gold
        } else {
            wrong_answer(self.gold, world.vocab)
        }
    }
}

fn wrong_answer(gold: Token, vocab: usize) -> Token {
    let span = vocab as Token - FIRST_ANSWER;
    FIRST_ANSWER + (gold - FIRST_ANSWER + 1) % span
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, pos: u64, layer: u64, purpose: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed ^ purpose.rotate_left(48)) ^ pos) ^ layer);
    ChaCha8Rng::seed_from_u64(key)
}

/// One simulated problem: a schedule evaluated in a world.
#[derive(Clone, Copy, Debug)]
pub struct Simulator<'a> {
    pub world: &'a SimWorld,
    pub schedule: &'a SimSchedule,
}

/// Free-running record of one simulated step, with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SimRecord {
    pub step: usize,
    pub regime: Regime,
    pub is_error: bool,
    pub hidden: Vec<Vector>,
    pub logits: Vec<f32>,
    pub token: Token,
}

impl<'a> Simulator<'a> {
    pub fn new(world: &'a SimWorld, schedule: &'a SimSchedule) -> Result<Self> {
        world.validate()?;
        schedule.validate(world)?;
        Ok(Self { world, schedule })
    }

    fn initial_direction(&self, layer: usize) -> Vec<f64> {
        let mut rng = stream(self.schedule.seed, u64::MAX, layer as u64, 0);
        let mut u = vec![0.0f64; self.world.dim];
        for i in self.world.walk_dims() {
            u[i] = rng.sample(StandardNormal);
        }
        normalize(u).into_iter().map(|x| x as f32 as f64).collect()
    }

    /// Turn cosine of step `pos` (0-based) at `layer`.
    fn turn_cos(&self, pos: usize, layer: usize) -> f64 {
        let spec = &self.schedule.steps[pos];
        let nominal = self.schedule.nominal_cos as f64;
        match spec.regime {
            Regime::Nominal | Regime::PostError => spec.turn_cos as f64,
            Regime::ErrorOnset | Regime::BenignShift => {
                let s = self.schedule.layer_strength[layer].clamp(0.0, 1.0) as f64;
                let a = nominal.clamp(-1.0, 1.0).acos();
                let b = (spec.turn_cos as f64).clamp(-1.0, 1.0).acos();
                (a + s * (b - a)).cos()
            }
        }
    }

    fn advance(&self, prev: &[f64], pos: usize, layer: usize) -> Vec<f64> {
        let mut rng = stream(self.schedule.seed, pos as u64, layer as u64, 1);
        let mut w = vec![0.0f64; self.world.dim];
        for i in self.world.walk_dims() {
            w[i] = rng.sample(StandardNormal);
        }
        let along: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
        for (wi, pi) in w.iter_mut().zip(prev) {
            *wi -= along * pi;
        }
        let w = normalize(w);
        let c = self.turn_cos(pos, layer);
        let s = (1.0 - c * c).max(0.0).sqrt();
        // Rounded to storage precision so that cached and recomputed walks agree.
        normalize(prev.iter().zip(&w).map(|(p, q)| c * p + s * q).collect())
            .into_iter()
            .map(|x| x as f32 as f64)
            .collect()
    }

    fn signature_weight(&self, pos: usize, layer: usize) -> f64 {
        match self.schedule.steps[pos].regime {
            Regime::ErrorOnset => {
                self.world.signature_weight as f64 * self.schedule.layer_strength[layer].clamp(0.0, 1.0) as f64
            }
            _ => 0.0,
        }
    }

    fn hidden_from(&self, dir: &[f64], pos: usize, layer: usize, extra_gain: f64) -> Vec<f32> {
        let mut h: Vec<f64> = dir.iter().map(|x| x * self.world.hidden_scale as f64).collect();
        if let Some(k) = self.schedule.steps[pos].error_type {
            let w = self.signature_weight(pos, layer);
            if w > 0.0 || extra_gain > 0.0 {
                h[k] += w + extra_gain;
            }
        }
        h.into_iter().map(|x| x as f32).collect()
    }

    fn flat(&self, start: Token, count: u32) -> Vec<f32> {
        let mut l = vec![MASKED; self.world.vocab];
        for t in start..start + count {
            l[t as usize] = 0.0;
        }
        l
    }

    fn one_hot(&self, t: Token) -> Vec<f32> {
        let mut l = vec![MASKED; self.world.vocab];
        l[t as usize] = 0.0;
        l
    }

    fn max_signature_cos(&self, add: &[f32]) -> Option<(usize, f64)> {
        (0..self.world.error_types)
            .filter_map(|k| cosine(add, &self.world.signature(k)).ok().map(|c| (k, c)))
            .fold(None, |best, (k, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((k, c)),
            })
    }

    fn logits_for(&self, pos: usize, derailed: bool, injection: Option<Injection<'_>>) -> Vec<f32> {
        let last = self.schedule.steps.len() - 1;
        let spec = &self.schedule.steps[pos];
        let onset = spec.regime == Regime::ErrorOnset;
        let threshold = self.world.correction_threshold as f64;
        let acting = injection.filter(|inj| {
            self.schedule.layer_strength[inj.layer] > 0.0 && inj.add.iter().any(|&x| x != 0.0)
        });
        let corrected = onset
            && acting.is_some_and(|inj| {
                let k = spec.error_type.expect("validated");
                cosine(inj.add, &self.world.signature(k)).is_ok_and(|c| c >= threshold)
            });
        let overcorrected = !onset
            && pos < last
            && acting.is_some_and(|inj| self.max_signature_cos(inj.add).is_some_and(|(_, c)| c >= threshold));

        if pos == last {
            self.one_hot(EOS)
        } else if overcorrected {
            self.one_hot(ERR_TOKEN)
        } else if pos + 1 == last {
            let answer = if derailed {
                wrong_answer(self.schedule.gold, self.world.vocab)
            } else {
                self.schedule.gold
            };
            self.one_hot(answer)
        } else if onset && !corrected {
            self.flat(ERR_TOKEN, spec.entropy_symbols)
        } else if onset {
            self.flat(WORK_TOKEN, self.schedule.nominal_symbols)
        } else {
            self.flat(WORK_TOKEN, spec.entropy_symbols)
        }
    }

    /// Greedy free-running record at 1-based `step`, computed from scratch.
    pub fn sim_step(&self, step: usize) -> Result<SimRecord> {
        if step == 0 || step > self.schedule.steps.len() {
            return Err(domain(format!(
                "step {step} outside schedule of length {}",
                self.schedule.steps.len()
            )));
        }
        let pos = step - 1;
        let mut hidden = Vec::with_capacity(self.world.layers);
        for layer in 0..self.world.layers {
            let mut dir = self.initial_direction(layer);
            for p in 0..=pos {
                dir = self.advance(&dir, p, layer);
            }
            hidden.push(Vector::new(self.hidden_from(&dir, pos, layer, 0.0))?);
        }
        let derailed = self.schedule.steps[..pos]
            .iter()
            .any(|s| s.regime == Regime::ErrorOnset);
        let logits = self.logits_for(pos, derailed, None);
        let regime = self.schedule.steps[pos].regime;
        Ok(SimRecord {
            step,
            regime,
            is_error: regime == Regime::ErrorOnset,
            token: argmax(&logits) as Token,
            hidden,
            logits,
        })
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl Backend for Simulator<'_> {
    fn num_layers(&self) -> usize {
        self.world.layers
    }

    fn hidden_dim(&self) -> usize {
        self.world.dim
    }

    fn vocab_size(&self) -> usize {
        self.world.vocab
    }

    fn new_cache(&self) -> Result<KvCache> {
        KvCache::new(self.world.layers, self.world.dim, self.schedule.steps.len())
    }

    fn forward(
        &self,
        cache: &mut KvCache,
        input: Token,
        hooks: &[usize],
        injection: Option<Injection<'_>>,
    ) -> Result<StepOutput> {
        if input as usize >= self.world.vocab {
            return Err(domain(format!("token {input} outside vocabulary")));
        }
        for &l in hooks {
            check_layer(l, self.world.layers)?;
        }
        if let Some(inj) = &injection {
            check_layer(inj.layer, self.world.layers)?;
            if inj.add.len() != self.world.dim {
                return Err(domain("injection dimension mismatch"));
            }
        }
        if cache.is_full() {
            return Err(LpsrError::GenerationLength {
                capacity: cache.capacity(),
            });
        }
        let pos = cache.len();
        let derailed = input == ERR_TOKEN || (pos > 0 && cache.value_at(0, pos - 1)[0] > 0.5);

        let mut hidden = BTreeMap::new();
        let mut kv_delta = Vec::with_capacity(self.world.layers);
        for layer in 0..self.world.layers {
            let prev: Vec<f64> = if pos == 0 {
                self.initial_direction(layer)
            } else {
                cache.key_at(layer, pos - 1).iter().map(|&x| x as f64).collect()
            };
            let dir = self.advance(&prev, pos, layer);
            if hooks.contains(&layer) {
                hidden.insert(layer, Vector::new(self.hidden_from(&dir, pos, layer, 0.0))?);
            }
            let mut value = vec![0.0f32; self.world.dim];
            if layer == 0 {
                value[0] = if derailed { 1.0 } else { 0.0 };
                value[1] = input as f32;
            }
            kv_delta.push(LayerKv {
                key: dir.iter().map(|&x| x as f32).collect(),
                value,
            });
        }
        cache.append(&kv_delta)?;

        let logits = self.logits_for(pos, derailed, injection);
        Ok(StepOutput {
            token: argmax(&logits) as Token,
            hidden,
            logits,
            kv_delta,
        })
    }

    fn lens_entropy(&self, layer: usize, out: &StepOutput) -> Result<f64> {
        check_layer(layer, self.world.layers)?;
        Ok(softmax_entropy(&out.logits))
    }

    fn reference_trajectory(&self, _problem: &Problem, layer: usize) -> Result<Vec<Vector>> {
        check_layer(layer, self.world.layers)?;
        let gain = self.world.correction_gain as f64;
        let mut dir = self.initial_direction(layer);
        let mut out = Vec::with_capacity(self.schedule.steps.len());
        for pos in 0..self.schedule.steps.len() {
            dir = self.advance(&dir, pos, layer);
            let strength = self.schedule.layer_strength[layer].clamp(0.0, 1.0) as f64;
            let mut h = self.hidden_from(&dir, pos, layer, gain * strength);
            let mut rng = stream(self.schedule.seed, pos as u64, layer as u64, 2);
            for x in h.iter_mut() {
                *x += rng.sample::<f32, _>(StandardNormal) * self.schedule.noise;
            }
            out.push(Vector::new(h)?);
        }
        Ok(out)
    }
}

/// Recipe for a seeded suite of simulated problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub count: usize,
    pub seed: u64,
    /// Inclusive range of schedule lengths (answer and EOS steps included).
    pub min_steps: usize,
    pub max_steps: usize,
    pub drift_deg: f32,
    pub nominal_symbols: u32,
    /// Base per-problem error probability (scaled by difficulty level).
    pub p_error: f64,
    pub onset_cos: f32,
    /// Flat-set size at loud onsets; 0 means every non-EOS symbol.
    pub onset_symbols: u32,
    /// Fraction of errors that arrive with a low-entropy distribution.
    pub p_silent_error: f64,
    /// Per-problem probability of one benign shift.
    pub p_benign: f64,
    pub benign_cos: f32,
    pub benign_symbols: u32,
    /// Fraction of benign shifts that arrive with a high-entropy distribution.
    pub p_benign_loud: f64,
    /// Layer whose walk carries onsets when `layer_strength` is unset.
    pub error_layer: usize,
    pub layer_strength: Option<Vec<f32>>,
    pub noise: f32,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            min_steps: 24,
            max_steps: 48,
            drift_deg: 5.0,
            nominal_symbols: 3,
            p_error: 0.4,
            onset_cos: -0.98,
            onset_symbols: 0,
            p_silent_error: 0.0,
            p_benign: 0.4,
            benign_cos: -0.98,
            benign_symbols: 2,
            p_benign_loud: 0.0,
            error_layer: 4,
            layer_strength: None,
            noise: 0.02,
        }
    }
}

/// A simulated problem with its schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimProblem {
    pub problem: Problem,
    pub schedule: SimSchedule,
}

impl SimProblem {
    pub fn simulator<'a>(&'a self, world: &'a SimWorld) -> Result<Simulator<'a>> {
        Simulator::new(world, &self.schedule)
    }
}

impl SuiteSpec {
    pub fn build(&self, world: &SimWorld) -> Result<Vec<SimProblem>> {
        world.validate()?;
        if self.min_steps < 6 || self.max_steps < self.min_steps {
            return Err(config("suite needs 6 <= min_steps <= max_steps"));
        }
        let strength = match &self.layer_strength {
            Some(s) => s.clone(),
            None => {
                check_layer(self.error_layer, world.layers)?;
                (0..world.layers)
                    .map(|l| if l == self.error_layer { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        let v = world.vocab as u32;
        let onset_symbols = if self.onset_symbols == 0 { v - 1 } else { self.onset_symbols };
        let nominal_cos = self.drift_deg.to_radians().cos();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.count);

        for i in 0..self.count {
            let len = rng.random_range(self.min_steps..=self.max_steps);
            let level: u32 = rng.random_range(1..=5);
            let p_err = (self.p_error * (0.5 + 0.25 * (level as f64 - 1.0))).min(1.0);
            let mut steps: Vec<StepSpec> = (0..len)
                .map(|_| StepSpec {
                    regime: Regime::Nominal,
                    turn_cos: nominal_cos,
                    entropy_symbols: self.nominal_symbols,
                    error_type: None,
                })
                .collect();
            // Shifts live strictly between step 2 and the answer step.
            let working = 2..len - 2;
            let onset = rng.random_bool(p_err).then(|| {
                let lo = (len / 4).max(working.start);
                let hi = (3 * len / 4).min(working.end - 1).max(lo);
                rng.random_range(lo..=hi)
            });
            let error_type = rng.random_range(0..world.error_types);
            if let Some(pos) = onset {
                let silent = rng.random_bool(self.p_silent_error);
                steps[pos] = StepSpec {
                    regime: Regime::ErrorOnset,
                    turn_cos: self.onset_cos,
                    entropy_symbols: if silent { 1 } else { onset_symbols },
                    error_type: Some(error_type),
                };
                for s in &mut steps[pos + 1..] {
                    s.regime = Regime::PostError;
                }
            }
            if rng.random_bool(self.p_benign) {
                let pos = rng.random_range(working.clone());
                if Some(pos) != onset {
                    let loud = rng.random_bool(self.p_benign_loud);
                    steps[pos] = StepSpec {
                        regime: Regime::BenignShift,
                        turn_cos: self.benign_cos,
                        entropy_symbols: if loud { v - 2 } else { self.benign_symbols },
                        error_type: None,
                    };
                }
            }
            let gold = rng.random_range(FIRST_ANSWER..v);
            let schedule = SimSchedule {
                seed: rng.random(),
                steps,
                gold,
                layer_strength: strength.clone(),
                nominal_cos,
                nominal_symbols: self.nominal_symbols,
                noise: self.noise,
            };
            schedule.validate(world)?;
            let mut tags = BTreeMap::new();
            tags.insert("difficulty".to_string(), level.to_string());
            tags.insert("has_error".to_string(), onset.is_some().to_string());
            if onset.is_some() {
                tags.insert("error_type".to_string(), error_type.to_string());
            }
            out.push(SimProblem {
                problem: Problem {
                    id: format!("sim-{i:05}"),
                    prompt: vec![WORK_TOKEN],
                    gold: Some(gold),
                    solution: None,
                    tags,
                },
                schedule,
            });
        }
        Ok(out)
    }
}
