//! End-to-end properties of the decoding engine on the simulator and the toy
//! transformer.

mod common;

use std::collections::BTreeMap;

use lpsr_core::calibration::calibrate;
use lpsr_core::detector::GateConfig;
use lpsr_core::engine::{
    generate, generate_best_of_n, generate_greedy, generate_lpsr, generate_static_steer, run_tasks, EngineConfig,
    Mode, Task,
};
use lpsr_core::eval::{grid_search, layer_sweep, summarize, GridSpec};
use lpsr_core::model::simulator::{Regime, SimProblem, SimSchedule, SimWorld, StepSpec, SuiteSpec};
use lpsr_core::model::transformer::{toy_problems, ModelConfig, ToyTransformer};
use lpsr_core::model::{Backend, Problem};
use lpsr_core::steering::{BasisConfig, SteeringBasis};
use lpsr_core::LpsrError;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{replay_digest, sim_tasks, simulators};

/// Basis made of the simulator's error signatures at the onset layer.
fn signature_basis(world: &SimWorld, layer: usize) -> SteeringBasis {
    SteeringBasis::new((0..world.error_types).map(|k| world.signature(k)).collect(), layer, 0).unwrap()
}

fn nominal_step() -> StepSpec {
    StepSpec {
        regime: Regime::Nominal,
        turn_cos: 5f32.to_radians().cos(),
        entropy_symbols: 3,
        error_type: None,
    }
}

/// A hand-built problem of `len` steps with an optional onset at `onset`
/// (1-based).
fn hand_problem(world: &SimWorld, len: usize, onset: Option<usize>) -> SimProblem {
    let mut steps = vec![nominal_step(); len];
    if let Some(at) = onset {
        steps[at - 1] = StepSpec {
            regime: Regime::ErrorOnset,
            turn_cos: -0.98,
            entropy_symbols: world.vocab as u32 - 1,
            error_type: Some(2),
        };
        for s in &mut steps[at..] {
            s.regime = Regime::PostError;
        }
    }
    let mut strength = vec![0.0; world.layers];
    strength[4] = 1.0;
    let schedule = SimSchedule {
        seed: 99,
        steps,
        gold: 17,
        layer_strength: strength,
        nominal_cos: 5f32.to_radians().cos(),
        nominal_symbols: 3,
        noise: 0.02,
    };
    schedule.validate(world).unwrap();
    SimProblem {
        problem: Problem {
            id: "hand".into(),
            prompt: vec![2],
            gold: Some(17),
            solution: None,
            tags: BTreeMap::new(),
        },
        schedule,
    }
}

fn suite(world: &SimWorld, count: usize, seed: u64) -> Vec<SimProblem> {
    SuiteSpec { count, seed, ..SuiteSpec::default() }.build(world).unwrap()
}

#[test]
fn single_onset_triggers_exactly_one_rollback_there() {
    let world = SimWorld::default();
    let sp = hand_problem(&world, 30, Some(10));
    let sim = sp.simulator(&world).unwrap();
    let cfg = EngineConfig::default();
    let basis = signature_basis(&world, cfg.l_crit);

    let greedy = generate_greedy(&sim, &sp.problem, &cfg).unwrap();
    assert_eq!(greedy.correct, Some(false));
    let t = generate_lpsr(&sim, &sp.problem, &cfg, &basis).unwrap();
    assert_eq!(t.events.len(), 1, "{:?}", t.events);
    assert_eq!(t.events[0].step, 10);
    assert_eq!(t.events[0].delta_index, 2);
    assert_eq!(t.correct, Some(true));
    assert_eq!(t.token_cost, t.final_length + 1);
}

#[test]
fn strict_gate_never_fires_on_a_clean_schedule() {
    let world = SimWorld::default();
    let sp = hand_problem(&world, 40, None);
    let sim = sp.simulator(&world).unwrap();
    let cfg = EngineConfig {
        gate: GateConfig::new(0.999, 2.5).unwrap(),
        ..EngineConfig::default()
    };
    let t = generate_lpsr(&sim, &sp.problem, &cfg, &signature_basis(&world, 4)).unwrap();
    assert!(t.events.is_empty());
    assert_eq!(t.correct, Some(true));
}

#[test]
fn every_rollback_restores_the_replayed_prefix() {
    let world = SimWorld::default();
    let problems = suite(&world, 80, 3);
    let sims = simulators(&world, &problems);
    for depth in [1, 2, 3] {
        let cfg = EngineConfig { rollback_depth: depth, ..EngineConfig::default() };
        let basis = signature_basis(&world, cfg.l_crit);
        let mut seen = 0;
        for (sim, sp) in sims.iter().zip(&problems) {
            let t = generate_lpsr(sim, &sp.problem, &cfg, &basis).unwrap();
            for e in &t.events {
                seen += 1;
                let kept = e.step - e.depth;
                let fresh = replay_digest(sim, &sp.problem.prompt, &t.tokens[..kept]);
                assert_eq!(fresh, e.cache_digest, "{} event at step {}", sp.problem.id, e.step);
            }
            let steps: Vec<usize> = t.events.iter().map(|e| e.step).collect();
            assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
        }
        assert!(seen > 0, "depth {depth} exercised no rollbacks");
    }
}

#[test]
fn depth_zero_is_greedy_with_telemetry() {
    let world = SimWorld::default();
    let problems = suite(&world, 40, 4);
    let sims = simulators(&world, &problems);
    let cfg = EngineConfig { rollback_depth: 0, ..EngineConfig::default() };
    let basis = signature_basis(&world, cfg.l_crit);
    for (sim, sp) in sims.iter().zip(&problems) {
        let g = generate_greedy(sim, &sp.problem, &cfg).unwrap();
        let t = generate_lpsr(sim, &sp.problem, &cfg, &basis).unwrap();
        assert_eq!(t.tokens, g.tokens);
        assert_eq!(t.token_cost, g.token_cost);
        assert!(t.events.is_empty());
        assert_eq!(t.gates, g.gates);
    }
}

#[test]
fn rollback_budget_caps_events_and_is_monotone() {
    let world = SimWorld::default();
    let problems = suite(&world, 60, 5);
    let sims = simulators(&world, &problems);
    let tasks = sim_tasks(&sims, &problems);
    // A permissive gate so that several events per problem are possible.
    let base = EngineConfig {
        gate: GateConfig::new(0.05, 0.0).unwrap(),
        ..EngineConfig::default()
    };
    let basis = signature_basis(&world, base.l_crit);
    let mut previous: Option<Vec<usize>> = None;
    for budget in [0, 1, 2, 4, 8] {
        let cfg = EngineConfig { rollback_budget: Some(budget), ..base.clone() };
        let traces = run_tasks(&tasks, &cfg, Some(&basis), None).unwrap();
        let counts: Vec<usize> = traces.iter().map(|t| t.events.len()).collect();
        assert!(counts.iter().all(|&n| n <= budget));
        if let Some(prev) = &previous {
            assert!(counts.iter().sum::<usize>() >= prev.iter().sum::<usize>());
        }
        previous = Some(counts);
    }
}

#[test]
fn rollback_costs_at_least_greedy_and_accounts_each_event() {
    let world = SimWorld::default();
    let problems = suite(&world, 80, 6);
    let sims = simulators(&world, &problems);
    let cfg = EngineConfig::default();
    let basis = signature_basis(&world, cfg.l_crit);
    for (sim, sp) in sims.iter().zip(&problems) {
        let g = generate_greedy(sim, &sp.problem, &cfg).unwrap();
        let t = generate_lpsr(sim, &sp.problem, &cfg, &basis).unwrap();
        assert!(t.token_cost >= g.token_cost);
        assert_eq!(t.token_cost, t.final_length + t.events.len());
        for e in &t.events {
            assert!(e.position_fraction > 0.0 && e.position_fraction <= 1.0);
            assert!(e.alpha > 0.0 && e.alpha <= cfg.alpha_max);
        }
    }
}

#[test]
fn runs_are_deterministic_down_to_serialized_traces() {
    let world = SimWorld::default();
    let problems = suite(&world, 50, 7);
    let sims = simulators(&world, &problems);
    let tasks = sim_tasks(&sims, &problems);
    let basis = signature_basis(&world, 4);
    for mode in [Mode::Greedy, Mode::Lpsr, Mode::StaticSteer, Mode::BestOfN] {
        let cfg = EngineConfig { mode, n: 4, ..EngineConfig::default() };
        let a = run_tasks(&tasks, &cfg, Some(&basis), None).unwrap();
        let b = run_tasks(&tasks, &cfg, Some(&basis), None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for (t, sp) in a.iter().zip(&problems) {
            assert_eq!(t.problem_id, sp.problem.id);
            assert_eq!(t.mode, mode);
        }
    }
}

#[test]
fn summary_ignores_task_order() {
    let world = SimWorld::default();
    let problems = suite(&world, 60, 8);
    let sims = simulators(&world, &problems);
    let tasks = sim_tasks(&sims, &problems);
    let cfg = EngineConfig::default();
    let basis = signature_basis(&world, cfg.l_crit);
    let traces = run_tasks(&tasks, &cfg, Some(&basis), None).unwrap();
    let mut shuffled = tasks.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let again = run_tasks(&shuffled, &cfg, Some(&basis), None).unwrap();
    assert_eq!(summarize(&traces).unwrap(), summarize(&again).unwrap());
}

#[test]
fn best_of_one_at_zero_temperature_is_greedy() {
    let world = SimWorld::default();
    let problems = suite(&world, 30, 9);
    let sims = simulators(&world, &problems);
    let cfg = EngineConfig { mode: Mode::BestOfN, n: 1, temperature: 0.0, ..EngineConfig::default() };
    for (sim, sp) in sims.iter().zip(&problems) {
        let g = generate_greedy(sim, &sp.problem, &cfg).unwrap();
        let b = generate_best_of_n(sim, &sp.problem, &cfg).unwrap();
        assert_eq!(b.tokens, g.tokens);
        assert_eq!(b.answer, g.answer);
        assert_eq!(b.token_cost, g.token_cost);
        assert_eq!(b.votes, Some(vec![g.answer]));
    }
}

#[test]
fn unanimous_rollouts_return_their_answer_and_sum_costs() {
    let world = SimWorld::default();
    let problems = suite(&world, 20, 10);
    let sims = simulators(&world, &problems);
    let cfg = EngineConfig { mode: Mode::BestOfN, n: 5, temperature: 0.0, ..EngineConfig::default() };
    for (sim, sp) in sims.iter().zip(&problems) {
        let g = generate_greedy(sim, &sp.problem, &cfg).unwrap();
        let b = generate_best_of_n(sim, &sp.problem, &cfg).unwrap();
        assert_eq!(b.answer, g.answer);
        assert_eq!(b.votes.as_ref().unwrap().len(), 5);
        assert_eq!(b.token_cost, 5 * g.token_cost);
    }
}

#[test]
fn static_steering_with_zero_vector_is_greedy() {
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    let cfg = EngineConfig { max_t: 24, ..EngineConfig::default() };
    let zero = vec![0.0f32; 64];
    let mut push = vec![0.0f32; 64];
    push[0] = 1.0;
    let push_cfg = EngineConfig { alpha_max: 8.0, ..cfg.clone() };
    let mut differs = 0;
    for p in toy_problems(&model, 12, 4, 16, 3).unwrap() {
        let g = generate_greedy(&model, &p, &cfg).unwrap();
        let s = generate_static_steer(&model, &p, &cfg, &zero).unwrap();
        assert_eq!(s.tokens, g.tokens);
        assert_eq!(s.token_cost, g.token_cost);
        let pushed = generate_static_steer(&model, &p, &push_cfg, &push).unwrap();
        differs += usize::from(pushed.tokens != g.tokens);
    }
    assert!(differs > 0);
}

#[test]
fn mode_dispatch_checks_its_inputs() {
    let world = SimWorld::default();
    let sp = hand_problem(&world, 12, None);
    let sim = sp.simulator(&world).unwrap();
    let lpsr = EngineConfig::default();
    assert!(matches!(generate(&sim, &sp.problem, &lpsr, None, None), Err(LpsrError::Config(_))));
    let stat = EngineConfig { mode: Mode::StaticSteer, ..EngineConfig::default() };
    assert!(matches!(generate(&sim, &sp.problem, &stat, None, None), Err(LpsrError::Config(_))));
    let wrong_layer = signature_basis(&world, 3);
    assert!(generate(&sim, &sp.problem, &lpsr, Some(&wrong_layer), None).is_err());
}

#[test]
fn grid_peaks_at_an_interior_threshold() {
    // Onsets turn to about -0.52 at the monitored layer and loud benign
    // shifts to about -0.35: a loose gate also fires on the benign shifts
    // (and derails them), a tight gate misses the onsets.
    let world = SimWorld::default();
    let problems = SuiteSpec {
        count: 120,
        seed: 13,
        onset_cos: -0.56,
        benign_cos: -0.38,
        p_benign: 0.8,
        p_benign_loud: 1.0,
        ..SuiteSpec::default()
    }
    .build(&world)
    .unwrap();
    let sims = simulators(&world, &problems);
    let tasks = sim_tasks(&sims, &problems);
    let grid = GridSpec {
        tau_phi: vec![0.3, 0.45, 0.6, 0.75],
        tau_h: vec![2.5],
        alpha_max: vec![0.1],
        l_crit: vec![4],
    };
    let bases = BTreeMap::from([(4, signature_basis(&world, 4))]);
    let rows = grid_search(&grid, &tasks, &EngineConfig::default(), &bases).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.summary.accuracy).collect();
    let best = (0..acc.len()).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
    assert_eq!(rows[best].cell.tau_phi, 0.45, "{acc:?}");
    assert!(acc[1] > acc[0] && acc[1] > acc[2], "{acc:?}");
}

#[test]
fn layer_sweep_singles_out_the_error_layer() {
    let world = SimWorld::default();
    let problems = SuiteSpec { count: 100, seed: 14, p_benign: 0.0, ..SuiteSpec::default() }
        .build(&world)
        .unwrap();
    let sims = simulators(&world, &problems);
    let tasks = sim_tasks(&sims, &problems);
    let layers: Vec<usize> = (0..world.layers).collect();
    let records = layer_sweep(&tasks, &EngineConfig::default(), &layers).unwrap();
    assert_eq!(records.len(), world.layers);
    let at = |l: usize| records.iter().find(|r| r.layer == l).unwrap().auc.unwrap();
    for l in layers.iter().filter(|&&l| l != 4) {
        assert!(at(4) > at(*l), "layer 4 auc {} vs layer {l} auc {}", at(4), at(*l));
    }

    // Without errors there is only one class and no AUC.
    let clean = SuiteSpec { count: 20, seed: 15, p_error: 0.0, ..SuiteSpec::default() }
        .build(&world)
        .unwrap();
    let sims = simulators(&world, &clean);
    let tasks = sim_tasks(&sims, &clean);
    for r in layer_sweep(&tasks, &EngineConfig::default(), &[2, 4]).unwrap() {
        assert_eq!(r.auc, None);
        assert_eq!(r.positives, 0);
    }
}

#[test]
fn calibration_needs_enough_corrections() {
    let world = SimWorld::default();
    let clean = SuiteSpec { count: 20, seed: 16, p_error: 0.0, ..SuiteSpec::default() }
        .build(&world)
        .unwrap();
    let sims = simulators(&world, &clean);
    let tasks = sim_tasks(&sims, &clean);
    let err = calibrate(&tasks, &EngineConfig::default(), &BasisConfig::default()).unwrap_err();
    assert!(matches!(err, LpsrError::Config(_)), "{err}");

    let few = SuiteSpec { count: 20, seed: 17, p_error: 1.0, ..SuiteSpec::default() }
        .build(&world)
        .unwrap();
    let sims = simulators(&world, &few);
    let tasks = sim_tasks(&sims, &few);
    let too_many = BasisConfig { k: 10_000, restarts: 1, ..BasisConfig::default() };
    assert!(calibrate(&tasks, &EngineConfig::default(), &too_many).is_err());
    let ok = calibrate(&tasks, &EngineConfig::default(), &BasisConfig { k: 4, restarts: 2, ..Default::default() })
        .unwrap();
    assert!(ok.build.basis.count() <= 4);
    assert_eq!(ok.build.basis.layer(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn budget_and_ordering_hold_for_random_suites(seed in 0u64..1_000, depth in 0usize..4, budget in 0usize..4) {
        let world = SimWorld::default();
        let problems = SuiteSpec { count: 6, seed, ..SuiteSpec::default() }.build(&world).unwrap();
        let sims = simulators(&world, &problems);
        let cfg = EngineConfig {
            rollback_depth: depth,
            rollback_budget: Some(budget),
            gate: GateConfig::new(0.2, 1.0).unwrap(),
            ..EngineConfig::default()
        };
        let basis = signature_basis(&world, cfg.l_crit);
        for (sim, sp) in sims.iter().zip(&problems) {
            let t = generate_lpsr(sim, &sp.problem, &cfg, &basis).unwrap();
            prop_assert!(t.events.len() <= budget);
            // Each event discards `depth` forward passes.
            let discarded: usize = t.events.iter().map(|e| e.depth).sum();
            prop_assert_eq!(t.token_cost, t.final_length + discarded);
            prop_assert!(t.events.windows(2).all(|w| w[0].step < w[1].step));
            prop_assert!(t.events.iter().all(|e| e.depth >= 1 && e.depth <= depth.min(e.step)));
        }
    }
}

#[test]
fn tasks_may_mix_backends() {
    let world = SimWorld::default();
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    let sp = hand_problem(&world, 12, None);
    let sim = sp.simulator(&world).unwrap();
    let toy = toy_problems(&model, 1, 4, 8, 1).unwrap();
    let tasks = [
        Task { backend: &sim, problem: &sp.problem },
        Task { backend: &model, problem: &toy[0] },
    ];
    let cfg = EngineConfig { mode: Mode::Greedy, max_t: 16, ..EngineConfig::default() };
    let traces = run_tasks(&tasks, &cfg, None, None).unwrap();
    assert_eq!(traces[0].problem_id, "hand");
    assert_eq!(traces[1].problem_id, toy[0].id);
    assert_eq!(model.hidden_dim(), sim.hidden_dim());
}
