use shapeparse::approximator::{Init, PolicyNet};
use shapeparse::env::RewardMeter;
use shapeparse::eval::evaluate;
use shapeparse::oracle::{oracle_parse, IgmOracle};
use shapeparse::raster::LabelGrid;
use shapeparse::synthdata::{generate, Dataset, GenConfig};
use shapeparse::training::{train, Algorithm, TrainConfig, TrainContext, TrainOutcome};

const ALL: [Algorithm; 9] = [
    Algorithm::Drag,
    Algorithm::BehaviorCloning,
    Algorithm::DAgger,
    Algorithm::Mcpg,
    Algorithm::Dpg,
    Algorithm::AggreVaTeD,
    Algorithm::AcAggreVaTeD,
    Algorithm::OffMcpg,
    Algorithm::OffAcpg,
];

fn dataset(items: usize, side: usize, seed: u64) -> Dataset {
    generate(&GenConfig {
        items,
        side,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

fn config(algorithm: Algorithm, iterations: usize, max_depth: usize) -> TrainConfig {
    TrainConfig {
        algorithm,
        iterations,
        max_depth,
        batch: 8,
        eval_every: 0,
        seed: 3,
        ..TrainConfig::default()
    }
}

struct Run {
    outcome: TrainOutcome,
    queries: u64,
    reads: u64,
}

fn run(grids: &[&LabelGrid], config: &TrainConfig) -> Run {
    let oracle = IgmOracle::new();
    let rewards = RewardMeter::new();
    let ctx = TrainContext {
        grids,
        oracle: &oracle,
        rewards: &rewards,
    };
    let outcome = train(&ctx, config).unwrap();
    Run {
        outcome,
        queries: oracle.queries(),
        reads: rewards.reads(),
    }
}

#[test]
fn pure_reinforcement_learners_never_consult_the_expert() {
    let data = dataset(4, 16, 1);
    let grids = data.grids();
    for algorithm in [Algorithm::Mcpg, Algorithm::Dpg] {
        let r = run(&grids, &config(algorithm, 4, 3));
        assert_eq!(r.queries, 0, "{algorithm}");
        assert!(r.reads > 0, "{algorithm} trains on returns");
    }
}

#[test]
fn pure_imitation_learners_never_read_rewards() {
    let data = dataset(4, 16, 2);
    let grids = data.grids();
    for algorithm in [Algorithm::BehaviorCloning, Algorithm::DAgger] {
        let r = run(&grids, &config(algorithm, 4, 3));
        assert_eq!(r.reads, 0, "{algorithm}");
        assert!(r.queries > 0, "{algorithm} imitates the expert");
    }
}

#[test]
fn hybrid_learners_use_both_signals() {
    let data = dataset(3, 16, 3);
    let grids = data.grids();
    for algorithm in [Algorithm::Drag, Algorithm::AggreVaTeD, Algorithm::OffMcpg] {
        let r = run(&grids, &config(algorithm, 2, 3));
        assert!(r.reads > 0 && r.queries > 0, "{algorithm}");
    }
}

#[test]
fn zero_iterations_leave_parameters_untouched() {
    let data = dataset(2, 16, 4);
    let grids = data.grids();
    for algorithm in ALL {
        let cfg = config(algorithm, 0, 3);
        let r = run(&grids, &cfg);
        let init = PolicyNet::new(cfg.policy_arch.clone(), Init::Uniform { seed: cfg.seed });
        assert_eq!(r.outcome.policy.params(), init.params(), "{algorithm}");
        assert!(r.outcome.log.is_empty());
        assert_eq!(r.outcome.steps, 0);
        assert_eq!(r.outcome.stored, 0);
    }
}

#[test]
fn each_epoch_stores_one_transition_per_image() {
    let data = dataset(5, 16, 5);
    let grids = data.grids();
    for epochs in [1, 2, 3] {
        let r = run(&grids, &config(Algorithm::Drag, epochs, 3));
        assert_eq!(r.outcome.stored, epochs * grids.len());
        assert_eq!(r.outcome.log.len(), epochs);
        assert_eq!(r.outcome.steps, epochs as u64);
    }
}

#[test]
fn dagger_aggregates_every_expanded_node() {
    let data = dataset(5, 16, 6);
    let grids = data.grids();
    let depth = 3;
    // The first epoch runs with beta = 1, so every visited state is a state
    // of the expert's own parse.
    let expert_nodes: usize = grids.iter().map(|g| oracle_parse(g, depth).len()).sum();
    let one = run(&grids, &config(Algorithm::DAgger, 1, depth));
    assert_eq!(one.outcome.stored, expert_nodes);
    assert!(one.outcome.stored >= grids.len());
    let two = run(&grids, &config(Algorithm::DAgger, 2, depth));
    assert!(two.outcome.stored >= one.outcome.stored + grids.len());
    let bc = run(&grids, &config(Algorithm::BehaviorCloning, 3, depth));
    assert_eq!(bc.outcome.stored, expert_nodes);
}

#[test]
fn training_is_reproducible() {
    let data = dataset(3, 16, 7);
    let grids = data.grids();
    for algorithm in ALL {
        let cfg = config(algorithm, 3, 3);
        let a = run(&grids, &cfg);
        let b = run(&grids, &cfg);
        assert_eq!(
            a.outcome.policy.params(),
            b.outcome.policy.params(),
            "{algorithm}"
        );
        assert_eq!(a.outcome.log, b.outcome.log, "{algorithm}");
        assert_eq!(
            a.outcome.critic.as_ref().map(|c| c.params().to_vec()),
            b.outcome.critic.as_ref().map(|c| c.params().to_vec())
        );
    }
}

#[test]
fn parallel_rollouts_match_serial_ones() {
    let data = dataset(4, 16, 8);
    let grids = data.grids();
    for algorithm in [Algorithm::Drag, Algorithm::DAgger, Algorithm::Mcpg] {
        let serial = config(algorithm, 2, 3);
        let parallel = TrainConfig {
            parallel: true,
            ..serial.clone()
        };
        let a = run(&grids, &serial);
        let b = run(&grids, &parallel);
        assert_eq!(
            a.outcome.policy.params(),
            b.outcome.policy.params(),
            "{algorithm}"
        );
    }
}

#[test]
fn every_learner_records_one_log_row_per_epoch() {
    let data = dataset(2, 16, 9);
    let grids = data.grids();
    for algorithm in ALL {
        let cfg = TrainConfig {
            eval_every: 2,
            ..config(algorithm, 3, 2)
        };
        let r = run(&grids, &cfg);
        let epochs: Vec<usize> = r.outcome.log.iter().map(|row| row.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2]);
        assert!(r
            .outcome
            .log
            .iter()
            .all(|row| row.actor_grad_norm.is_finite()));
        let beta = match algorithm {
            Algorithm::BehaviorCloning => 1.0,
            Algorithm::Mcpg | Algorithm::Dpg => 0.0,
            _ => cfg.beta.at(2),
        };
        assert_eq!(r.outcome.log[2].beta, beta, "{algorithm}");
        assert!(r.outcome.log[2].train_accuracy.is_some());
    }
}

#[test]
fn drag_beats_the_untrained_policy_on_its_training_set() {
    let data = dataset(20, 64, 10);
    let grids = data.grids();
    let cfg = config(Algorithm::Drag, 200, 5);
    let init = PolicyNet::new(cfg.policy_arch.clone(), Init::Uniform { seed: cfg.seed });
    let before = evaluate(&init, &grids, cfg.max_depth, false).unwrap().mean;
    let r = run(&grids, &cfg);
    let after = evaluate(&r.outcome.policy, &grids, cfg.max_depth, false)
        .unwrap()
        .mean;
    assert!(
        after >= before + 0.20,
        "untrained {before:.4}, trained {after:.4}"
    );
}
