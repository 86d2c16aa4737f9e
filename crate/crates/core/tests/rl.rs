use std::collections::HashMap;

use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subasm::asp_graph::{AssemblyGraph, Reward, RewardMode};
use subasm::feasibility::FeasibilityConfig;
use subasm::fixtures::crossed_bars;
use subasm::gnn::{mask_sentinel, NetConfig, QNetParams};
use subasm::rl::*;
use subasm::search::count_feasible_orders;
use subasm::world::{generate_instance, SubassemblyMask};

fn envs(m: usize, seeds: std::ops::Range<u64>) -> Vec<Environment<f64>> {
    seeds
        .map(|s| Environment::new(generate_instance(m, s).unwrap(), FeasibilityConfig::default()))
        .collect()
}

fn mask(parts: &[usize]) -> SubassemblyMask {
    SubassemblyMask::from_parts(parts.iter().copied())
}

fn tr(state: &[usize], action: usize, reward: Reward, done: bool) -> Transition {
    let state = mask(state);
    Transition {
        state,
        action,
        reward,
        next_state: state.with(action),
        done,
        instance: 0,
    }
}

#[test]
fn uniform_exploration_passes_chi_square() {
    let env = &envs(4, 0..1)[0];
    let params = QNetParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 4];
    let n = 1000;
    for _ in 0..n {
        let episode = run_episode(env, 0, &params, 1.0, RewardMode::Delayed, &mut rng);
        counts[episode[0].action] += 1;
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 3 degrees of freedom, p = 0.001.
    assert!(chi2 < 16.27, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn greedy_episode_follows_favored_order_to_success() {
    let g = AssemblyGraph::new(crossed_bars(), FeasibilityConfig::default());
    let favor = |v: SubassemblyMask| (0..9).map(|p| if v.contains(p) { f64::MIN } else { -(p as f64) }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let episode = run_episode_with(&g, 0, &favor, 0.0, RewardMode::Delayed, &mut rng);
    assert_eq!(episode.iter().map(|t| t.action).collect::<Vec<_>>(), (0..9).collect::<Vec<_>>());
    let last = episode.last().unwrap();
    assert_eq!(last.reward, Reward::Success);
    assert!(last.done);
    assert!(episode[..8].iter().all(|t| t.reward == Reward::Neutral && !t.done));
}

#[test]
fn dead_end_ends_delayed_episode_but_not_immediate() {
    let g = AssemblyGraph::new(crossed_bars(), FeasibilityConfig::default());
    // 0 then 2 is feasible but leaves no room for bar 1.
    let favor = |v: SubassemblyMask| {
        let order = [0usize, 2, 1, 3, 4, 5, 6, 7, 8];
        let mut q = vec![f64::MIN; 9];
        for (rank, &p) in order.iter().enumerate() {
            if !v.contains(p) {
                q[p] = -(rank as f64);
            }
        }
        q
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let delayed = run_episode_with(&g, 0, &favor, 0.0, RewardMode::Delayed, &mut rng);
    assert_eq!(delayed.len(), 2);
    assert_eq!(delayed[1].reward, Reward::Fail);
    let immediate = run_episode_with(&g, 0, &favor, 0.0, RewardMode::Immediate, &mut rng);
    assert_eq!(immediate.len(), 3);
    assert_eq!(immediate[1].reward, Reward::Neutral);
    assert_eq!(immediate[2].reward, Reward::Fail);
}

#[test]
fn episodes_are_well_formed() {
    let all = envs(5, 0..6);
    let params = QNetParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, env) in all.iter().enumerate() {
        for eps in [0.0, 0.5, 1.0] {
            for mode in [RewardMode::Delayed, RewardMode::Immediate] {
                let episode = run_episode(env, i, &params, eps, mode, &mut rng);
                assert!(!episode.is_empty() && episode.len() <= 5);
                assert_eq!(episode[0].state, SubassemblyMask::EMPTY);
                for w in episode.windows(2) {
                    assert_eq!(w[1].state, w[0].next_state);
                    assert!(!w[0].done);
                }
                for t in &episode {
                    assert_eq!(t.next_state, t.state.with(t.action));
                    assert_eq!(t.instance, i);
                    let out = env.graph.reward(mode, t.state, t.next_state).unwrap();
                    assert_eq!((t.reward, t.done), (out.reward, out.done));
                }
                let last = episode.last().unwrap();
                assert!(last.done || last.next_state.is_full(5));
            }
        }
    }
}

/// Hand-tabulated double-Q cases: online picks the action, target scores it.
#[test]
fn double_q_targets_match_hand_values() {
    let sentinel = mask_sentinel::<f64>();
    let online: HashMap<u32, Vec<f64>> = HashMap::from([
        (mask(&[0]).bits(), vec![sentinel, 0.2, 0.9, 0.1]),
        (mask(&[0, 1]).bits(), vec![sentinel, sentinel, 0.4, 0.4]),
        (mask(&[1, 2, 3]).bits(), vec![-0.3, sentinel, sentinel, sentinel]),
    ]);
    let target: HashMap<(u32, usize), f64> = HashMap::from([
        ((mask(&[0]).bits(), 1), 0.8),
        ((mask(&[0]).bits(), 2), 0.5),
        ((mask(&[0]).bits(), 3), -0.2),
        ((mask(&[0, 1]).bits(), 2), -0.6),
        ((mask(&[0, 1]).bits(), 3), 0.7),
        ((mask(&[1, 2, 3]).bits(), 0), 0.25),
    ]);
    let batch = [
        tr(&[], 0, Reward::Neutral, false),
        tr(&[0], 1, Reward::Neutral, false),
        tr(&[1, 2], 3, Reward::Neutral, false),
        tr(&[0, 1, 2], 3, Reward::Success, true),
        tr(&[], 2, Reward::Fail, true),
    ];
    let y = double_q_targets(
        &batch,
        0.99,
        |_| 4,
        |_, s| Ok(online[&s.bits()].clone()),
        |_, s, a| Ok(target[&(s.bits(), a)]),
    )
    .unwrap();
    // Online argmax at {0} is part 2 (not the target's best, part 1).
    assert_relative_eq!(y[0], 0.99 * 0.5, epsilon = 1e-15);
    // Online tie between 2 and 3 goes to 2.
    assert_relative_eq!(y[1], 0.99 * -0.6, epsilon = 1e-15);
    assert_relative_eq!(y[2], 0.99 * 0.25, epsilon = 1e-15);
    assert_eq!(y[3], 1.0);
    assert_eq!(y[4], -1.0);
}

#[test]
fn double_q_rejects_undone_terminal_transition() {
    let bad = [tr(&[0, 1, 2], 3, Reward::Neutral, false)];
    let err = double_q_targets::<f64>(&bad, 0.99, |_| 4, |_, _| unreachable!(), |_, _, _| unreachable!());
    assert!(matches!(err, Err(RlError::TerminalNotDone { .. })));
    let empty = double_q_targets::<f64>(&[], 0.99, |_| 4, |_, _| unreachable!(), |_, _, _| unreachable!());
    assert!(matches!(empty, Err(RlError::EmptyBatch)));
}

#[test]
fn network_targets_agree_with_the_lookup_form() {
    let all = envs(4, 0..3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let online = QNetParams::init(NetConfig::default(), &mut rng);
    let target = QNetParams::init(NetConfig::default(), &mut rng);
    let mut batch = Vec::new();
    for (i, env) in all.iter().enumerate() {
        for t in run_episode(env, i, &online, 1.0, RewardMode::Immediate, &mut rng) {
            batch.push(t);
        }
    }
    let y = ddqn_target(&batch, &all, &online, &target, 0.9).unwrap();
    for (t, &yi) in batch.iter().zip(&y) {
        let expected = if t.done {
            t.reward.value()
        } else {
            let q = subasm::gnn::q_values_at(&online, &all[t.instance].features, t.next_state).unwrap();
            let a = subasm::gnn::argmax_admissible(&q, t.next_state).unwrap();
            let qt = subasm::gnn::q_values_at(&target, &all[t.instance].features, t.next_state).unwrap();
            t.reward.value() + 0.9 * qt[a]
        };
        assert_eq!(yi, expected);
    }
}

#[test]
fn single_batch_overfits() {
    let all = envs(4, 0..16);
    let params = QNetParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(5));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut batch = Vec::new();
    'fill: for (i, env) in all.iter().enumerate() {
        for t in run_episode(env, i, &params, 1.0, RewardMode::Immediate, &mut rng) {
            if batch.iter().any(|b: &Transition| (b.instance, b.state, b.action) == (i, t.state, t.action)) {
                continue;
            }
            batch.push(t);
            if batch.len() == 32 {
                break 'fill;
            }
        }
    }
    let targets: Vec<f64> = batch.iter().map(|t| t.reward.value()).collect();
    let config = TrainerConfig { lr: 1e-3, ..TrainerConfig::default() };
    let mut learner = Learner::new(params, &config);
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = learner.fit(&batch, &all, &targets).unwrap();
        if loss < 1e-3 {
            break;
        }
    }
    assert_eq!(batch.len(), 32);
    assert!(loss < 1e-3, "loss {loss}");
}

#[test]
fn first_adam_step_moves_each_weight_by_lr() {
    let mut params = QNetParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(7));
    let before = params.clone();
    for t in params.tensors_mut() {
        let (_, g) = t.values_grad_mut();
        for (i, x) in g.iter_mut().enumerate() {
            *x = if i % 3 == 0 { 0.0 } else if i % 2 == 0 { 2.5 } else { -0.01 };
        }
    }
    let mut adam = Adam::new(&params, 1e-3, 0.9, 0.999, 1e-8);
    adam.step(&mut params);
    assert_eq!(adam.steps(), 1);
    let after: Vec<_> = params.named_tensors().into_iter().map(|(_, t)| t.values().to_vec()).collect();
    for ((_, t0), t1) in before.named_tensors().into_iter().zip(after) {
        for (i, (&a, &b)) in t0.values().iter().zip(&t1).enumerate() {
            let expected = if i % 3 == 0 { 0.0 } else if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert_relative_eq!(b - a, expected, epsilon = 1e-9);
        }
    }
}

#[test]
fn replay_sampling_is_uniform_without_replacement() {
    let mut buffer = ReplayBuffer::new(10, 11);
    for a in 0..10 {
        buffer.push(Transition { instance: a, ..tr(&[], 0, Reward::Neutral, false) });
    }
    assert!(matches!(buffer.sample(11), Err(RlError::BufferTooSmall { have: 10, need: 11 })));
    let draws = 20_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        let batch = buffer.sample(3).unwrap();
        let mut ids: Vec<usize> = batch.iter().map(|t| t.instance).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 3);
        for id in ids {
            counts[id] += 1;
        }
    }
    let p = 0.3;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn replay_buffer_never_exceeds_capacity() {
    let mut buffer = ReplayBuffer::new(5, 1);
    for a in 0..50 {
        buffer.push(Transition { instance: a, ..tr(&[], 0, Reward::Neutral, false) });
        assert!(buffer.len() <= 5);
    }
    assert_eq!(buffer.len(), 5);
    // Overwrites land in random slots, so recent transitions are present but the
    // buffer is not a strict FIFO.
    assert!(buffer.items().iter().any(|t| t.instance >= 45));
}

#[test]
fn target_network_syncs_on_schedule() {
    let all = envs(4, 0..4);
    let config = TrainerConfig { target_sync_every: 10, lr: 1e-3, ..TrainerConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = QNetParams::init(config.net, &mut rng);
    let mut buffer = ReplayBuffer::new(1000, 2);
    for (i, env) in all.iter().enumerate() {
        for _ in 0..20 {
            for t in run_episode(env, i, &params, 1.0, RewardMode::Delayed, &mut rng) {
                buffer.push(t);
            }
        }
    }
    let mut learner = Learner::new(params, &config);
    for step in 1..=25u64 {
        let batch = buffer.sample(32).unwrap();
        learner.train_step(&batch, &all).unwrap();
        assert_eq!(learner.syncs, step / 10);
        assert_eq!(learner.target.values_equal(&learner.online), step % 10 == 0, "step {step}");
    }
}

#[test]
fn epsilon_decays_linearly_then_holds() {
    let config = TrainerConfig {
        epochs: 100,
        episodes_per_epoch: 10,
        ..TrainerConfig::default()
    };
    assert_eq!(config.epsilon(0), 1.0);
    assert_relative_eq!(config.epsilon(250), 0.525, epsilon = 1e-12);
    assert_relative_eq!(config.epsilon(500), 0.05, epsilon = 1e-12);
    assert_relative_eq!(config.epsilon(999), 0.05, epsilon = 1e-12);
    let fixed = TrainerConfig { epsilon_decay_episodes: Some(10), ..config };
    assert_relative_eq!(fixed.epsilon(5), 0.525, epsilon = 1e-12);
}

#[test]
fn trainer_config_reads_toml_and_rejects_unknown_keys() {
    let config: TrainerConfig = toml::from_str("lr = 0.0005\nbatch = 16\nreward_mode = \"immediate\"\n").unwrap();
    assert_eq!(config.lr, 5e-4);
    assert_eq!(config.batch, 16);
    assert_eq!(config.reward_mode, RewardMode::Immediate);
    assert_eq!(config.gamma, 0.99);
    assert!(toml::from_str::<TrainerConfig>("learning_rate = 0.1\n").is_err());
    let text = toml::to_string(&config).unwrap();
    assert_eq!(toml::from_str::<TrainerConfig>(&text).unwrap(), config);

    assert!(TrainerConfig { gamma: 1.5, ..TrainerConfig::default() }.validate().is_err());
    assert!(TrainerConfig { warmup: 4, ..TrainerConfig::default() }.validate().is_err());
    assert!(TrainerConfig::default().validate().is_ok());
}

fn small_run(seed: u64) -> TrainerConfig {
    TrainerConfig {
        epochs: 6,
        episodes_per_epoch: 10,
        warmup: 64,
        batch: 16,
        target_sync_every: 20,
        eval_every_epochs: 3,
        seed,
        ..TrainerConfig::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let all = envs(4, 0..6);
    let (train_set, eval_set) = all.split_at(4);
    let a = train(train_set, eval_set, &small_run(3), |_| {}).unwrap();
    let b = train(train_set, eval_set, &small_run(3), |_| {}).unwrap();
    assert!(a.params.values_equal(&b.params));
    assert_eq!(format!("{:?}", a.curve), format!("{:?}", b.curve));
    assert!(a.steps > 0);
    let c = train(train_set, eval_set, &small_run(4), |_| {}).unwrap();
    assert!(!a.params.values_equal(&c.params));
}

#[test]
fn training_curve_has_one_point_per_epoch() {
    let all = envs(4, 0..6);
    let (train_set, eval_set) = all.split_at(4);
    let mut seen = 0;
    let out = train(train_set, eval_set, &small_run(1), |_| seen += 1).unwrap();
    assert_eq!(seen, 6);
    assert_eq!(out.curve.len(), 6);
    assert_eq!(out.curve.last().unwrap().episodes, 60);
    let evaluated: Vec<usize> = out.curve.iter().filter(|p| p.eval_success.is_some()).map(|p| p.epoch).collect();
    assert_eq!(evaluated, vec![3, 6]);
    for p in &out.curve {
        if let Some(s) = p.eval_success {
            assert!((0.0..=1.0).contains(&s));
        }
    }
    assert_eq!(out.syncs, out.steps / 20);
}

#[test]
fn greedy_success_rate_is_bounded_by_solvable_fraction() {
    let all = envs(4, 0..10);
    let params = QNetParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    let solvable = all.iter().filter(|e| count_feasible_orders(&e.graph) > 0).count() as f64 / 10.0;
    let rate = greedy_success_rate(&params, &all);
    assert!(rate <= solvable);
}

#[test]
fn single_precision_training_runs_and_saves() {
    let all: Vec<subasm::Env32> = (0..6)
        .map(|s| Environment::new(generate_instance(4, s).unwrap(), FeasibilityConfig::default()))
        .collect();
    let (train_set, eval_set) = all.split_at(4);
    let out = train(train_set, eval_set, &small_run(2), |_| {}).unwrap();
    assert!(out.steps > 0);
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("net.json");
    out.params.save(&path).unwrap();
    let back = subasm::QNet32::load(&path).unwrap();
    assert!(back.values_equal(&out.params));
    assert!(subasm::QNet::load(&path).is_err());
}
