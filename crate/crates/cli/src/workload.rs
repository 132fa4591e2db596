//! Materialized problem sets paired with their backend.

use anyhow::Result;
use lpsr_core::engine::Task;
use lpsr_core::model::simulator::{SimProblem, SimWorld, Simulator, SuiteSpec};
use lpsr_core::model::transformer::{toy_problems, ToyTransformer};
use lpsr_core::model::{Backend, Problem};

use crate::config::{BackendSpec, ProblemSet, RunConfig, Stream};

pub enum Workload {
    Sim { world: SimWorld, problems: Vec<SimProblem> },
    Toy { model: ToyTransformer, problems: Vec<Problem> },
}

impl Workload {
    /// Build the problem set `set`, seeded from the run seed's `stream`.
    pub fn build(cfg: &RunConfig, set: &ProblemSet, stream: Stream) -> Result<Self> {
        let seed = cfg.derived_seed(stream);
        Ok(match &cfg.backend {
            BackendSpec::Simulator { world } => {
                let suite = SuiteSpec {
                    count: set.count,
                    seed,
                    ..set.suite.clone()
                };
                Workload::Sim {
                    world: world.clone(),
                    problems: suite.build(world)?,
                }
            }
            BackendSpec::Toy { model } => {
                let model = ToyTransformer::new(model.clone())?;
                let problems = toy_problems(&model, set.count, set.prompt_len, set.max_new, seed)?;
                Workload::Toy { model, problems }
            }
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Workload::Sim { problems, .. } => problems.len(),
            Workload::Toy { problems, .. } => problems.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        match self {
            Workload::Sim { world, .. } => world.layers,
            Workload::Toy { model, .. } => model.num_layers(),
        }
    }

    /// Call `f` with one task per problem, in problem order.
    pub fn with_tasks<R>(&self, f: impl FnOnce(&[Task<'_>]) -> R) -> Result<R> {
        match self {
            Workload::Sim { world, problems } => {
                let sims: Vec<Simulator<'_>> = problems
                    .iter()
                    .map(|p| p.simulator(world))
                    .collect::<lpsr_core::Result<_>>()?;
                let tasks: Vec<Task<'_>> = sims
                    .iter()
                    .zip(problems)
                    .map(|(s, p)| Task {
                        backend: s,
                        problem: &p.problem,
                    })
                    .collect();
                Ok(f(&tasks))
            }
            Workload::Toy { model, problems } => {
                let tasks: Vec<Task<'_>> = problems.iter().map(|p| Task { backend: model, problem: p }).collect();
                Ok(f(&tasks))
            }
        }
    }
}
