#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use lpsr_core::engine::Task;
use lpsr_core::kvcache::KvCache;
use lpsr_core::model::simulator::{SimProblem, SimWorld, Simulator};
use lpsr_core::model::{Backend, Injection, Problem, StepOutput, Token};
use lpsr_core::numerics::Vector;
use lpsr_core::Result;

pub fn simulators<'a>(world: &'a SimWorld, suite: &'a [SimProblem]) -> Vec<Simulator<'a>> {
    suite.iter().map(|sp| sp.simulator(world).unwrap()).collect()
}

pub fn sim_tasks<'a>(sims: &'a [Simulator<'a>], suite: &'a [SimProblem]) -> Vec<Task<'a>> {
    sims.iter()
        .zip(suite)
        .map(|(s, sp)| Task { backend: s, problem: &sp.problem })
        .collect()
}

/// Digest of a fresh cache after feeding `prompt` and then `emitted`, the
/// way the engine does (the last symbol is not yet consumed).
pub fn replay_digest(backend: &dyn Backend, prompt: &[Token], emitted: &[Token]) -> u64 {
    let mut cache = backend.new_cache().unwrap();
    let seq: Vec<Token> = prompt.iter().chain(emitted).copied().collect();
    for &t in &seq[..seq.len() - 1] {
        backend.step(&mut cache, t, &[]).unwrap();
    }
    cache.digest()
}

/// Forwards to an inner backend, counting completed forward passes.
pub struct CountingBackend<'a> {
    inner: &'a dyn Backend,
    calls: AtomicUsize,
}

impl<'a> CountingBackend<'a> {
    pub fn new(inner: &'a dyn Backend) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for CountingBackend<'_> {
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn new_cache(&self) -> Result<KvCache> {
        self.inner.new_cache()
    }

    fn forward(
        &self,
        cache: &mut KvCache,
        input: Token,
        hooks: &[usize],
        injection: Option<Injection<'_>>,
    ) -> Result<StepOutput> {
        let out = self.inner.forward(cache, input, hooks, injection)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(out)
    }

    fn lens_entropy(&self, layer: usize, out: &StepOutput) -> Result<f64> {
        self.inner.lens_entropy(layer, out)
    }

    fn reference_trajectory(&self, problem: &Problem, layer: usize) -> Result<Vec<Vector>> {
        self.inner.reference_trajectory(problem, layer)
    }
}
