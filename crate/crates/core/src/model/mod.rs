//! Model backends behind a single step interface.
//!
//! Two implementations exist: a small deterministic transformer decoder
//! ([`transformer::ToyTransformer`]) used to exercise the mechanics of
//! hooking, injection and cache rollback, and a trajectory simulator
//! ([`simulator::Simulator`]) whose error onsets are known by construction.

pub mod simulator;
pub mod transformer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kvcache::{KvCache, LayerKv};
use crate::numerics::Vector;

pub type Token = u32;

/// Index 0 of every vocabulary is end-of-sequence.
pub const EOS: Token = 0;

/// The answer of a generation: its last symbol other than EOS.
pub fn final_answer(tokens: &[Token]) -> Option<Token> {
    tokens.iter().rev().copied().find(|&t| t != EOS)
}

/// Output of one forward step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Greedy (argmax, lowest index on ties) next token.
    pub token: Token,
    /// Post-block residual for every hooked layer, captured before any
    /// injection at that layer.
    pub hidden: BTreeMap<usize, Vector>,
    pub logits: Vec<f32>,
    /// The rows this step appended to the cache.
    pub kv_delta: Vec<LayerKv>,
}

impl StepOutput {
    pub fn hidden_at(&self, layer: usize) -> Result<&Vector> {
        self.hidden
            .get(&layer)
            .ok_or_else(|| domain(format!("layer {layer} was not hooked")))
    }
}

/// An additive edit to the residual stream after block `layer`.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub layer: usize,
    pub add: &'a [f32],
}

/// A problem instance: prompt, optional gold answer and solution, and free
/// form metadata tags used for stratified reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: Vec<Token>,
    #[serde(default)]
    pub gold: Option<Token>,
    /// Gold continuation used for teacher forcing.
    #[serde(default)]
    pub solution: Option<Vec<Token>>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

pub trait Backend: Sync {
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;

    /// A fresh, empty cache sized for this backend's maximum context.
    fn new_cache(&self) -> Result<KvCache>;

    /// Run one position: consume `input`, append its kv rows to `cache`,
    /// and report hidden states at `hooks`.
    fn forward(
        &self,
        cache: &mut KvCache,
        input: Token,
        hooks: &[usize],
        injection: Option<Injection<'_>>,
    ) -> Result<StepOutput>;

    /// Entropy of the token distribution read off `layer`'s hidden state.
    fn lens_entropy(&self, layer: usize, out: &StepOutput) -> Result<f64>;

    /// Hidden states at `layer` along the correct trajectory for `problem`,
    /// aligned with generation steps (element 0 is step 1).
    fn reference_trajectory(&self, problem: &Problem, layer: usize) -> Result<Vec<Vector>>;

    fn step(&self, cache: &mut KvCache, input: Token, hooks: &[usize]) -> Result<StepOutput> {
        self.forward(cache, input, hooks, None)
    }

    fn step_with_injection(
        &self,
        cache: &mut KvCache,
        input: Token,
        hooks: &[usize],
        layer: usize,
        add: &[f32],
    ) -> Result<StepOutput> {
        if !hooks.contains(&layer) {
            return Err(domain(format!("injection layer {layer} is not hooked")));
        }
        if add.len() != self.hidden_dim() {
            return Err(domain(format!(
                "injection has dimension {}, model has {}",
                add.len(),
                self.hidden_dim()
            )));
        }
        self.forward(cache, input, hooks, Some(Injection { layer, add }))
    }
}

pub(crate) fn check_layer(layer: usize, layers: usize) -> Result<()> {
    if layer >= layers {
        return Err(domain(format!("layer {layer} out of range (model has {layers})")));
    }
    Ok(())
}
