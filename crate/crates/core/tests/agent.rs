use iosim::agent::{
    act_only, argmax, compute_loss, select_action, AgentConfig, BranchQ, DeepQAgent, EpsilonSchedule, Experience,
    LossMode, PhysicalAgent, QNetwork, QValues, ReplayBuffer,
};
use iosim::env::{EnvConfig, Environment, IosEnv, JointAction, Observation};
use iosim::ios::presets;
use iosim::neural::NetworkParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_env(rng: &mut ChaCha8Rng) -> IosEnv {
    let cfg = EnvConfig {
        antennas: 3,
        users: 2,
        reflected_users: 1,
        elements: 4,
        ..EnvConfig::default()
    };
    IosEnv::new(cfg, rng).unwrap()
}

fn tiny_agent_config(loss_mode: LossMode, branching: bool) -> AgentConfig {
    AgentConfig {
        hidden: 5,
        loss_mode,
        branching,
        ..AgentConfig::default()
    }
}

fn transitions(env: &mut IosEnv, count: usize, rng: &mut ChaCha8Rng) -> Vec<Experience> {
    let mut obs = env.reset(rng).unwrap();
    (0..count)
        .map(|_| {
            let action = JointAction::new(rng.random_range(0..5), rng.random_range(0..5));
            let (next, reward) = env.transition(action, rng).unwrap();
            let exp = Experience {
                state: obs.clone(),
                action,
                reward,
                next_state: next.clone(),
            };
            obs = next;
            exp
        })
        .collect()
}

/// Loss written out from the Q values alone.
fn scalar_loss(qnet: &QNetwork, online: &NetworkParams, target: &NetworkParams, batch: &[&Experience], gamma: f64, mode: LossMode) -> f64 {
    let mut total = 0.0;
    for e in batch {
        let q = qnet.q_values(online, &e.state).unwrap();
        let next = qnet.q_values(target, &e.next_state).unwrap();
        total += match (q, next) {
            (QValues::Branched(q), QValues::Branched(n)) => {
                let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let d1 = e.reward + gamma * max(&n.q1) - q.q1[e.action.increment];
                let d2 = e.reward + gamma * max(&n.q2) - q.q2[e.action.amplitude];
                match mode {
                    LossMode::SummedTd => (d1 + d2).powi(2),
                    LossMode::SeparateSquares => d1 * d1 + d2 * d2,
                }
            }
            (QValues::Joint { q, amplitudes }, QValues::Joint { q: n, .. }) => {
                let best = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (e.reward + gamma * best - q[e.action.increment * amplitudes + e.action.amplitude]).powi(2)
            }
            _ => unreachable!(),
        };
    }
    total / batch.len() as f64
}

#[test]
fn loss_matches_scalar_oracle() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = tiny_env(&mut rng);
        let data = transitions(&mut env, 3, &mut rng);
        let batch: Vec<&Experience> = data.iter().collect();
        for (mode, branching) in [(LossMode::SummedTd, true), (LossMode::SeparateSquares, true), (LossMode::SummedTd, false)] {
            let cfg = tiny_agent_config(mode, branching);
            let qnet = QNetwork::new(&cfg, env.config().observation_dims(), 5, 5).unwrap();
            let online = qnet.network().init_params(&mut rng);
            let target = qnet.network().init_params(&mut rng);
            let (loss, _) = compute_loss(&qnet, &online, &target, &batch, 0.9, mode).unwrap();
            let oracle = scalar_loss(&qnet, &online, &target, &batch, 0.9, mode);
            assert!((loss - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "{loss} vs {oracle}");
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let h = 1e-5;
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut env = tiny_env(&mut rng);
        let data = transitions(&mut env, 3, &mut rng);
        let batch: Vec<&Experience> = data.iter().collect();
        for (mode, branching) in [(LossMode::SummedTd, true), (LossMode::SeparateSquares, true), (LossMode::SummedTd, false)] {
            let cfg = tiny_agent_config(mode, branching);
            let qnet = QNetwork::new(&cfg, env.config().observation_dims(), 5, 5).unwrap();
            let online = qnet.network().init_params(&mut rng);
            let target = qnet.network().init_params(&mut rng);
            let (_, grad) = compute_loss(&qnet, &online, &target, &batch, 0.9, mode).unwrap();
            for _ in 0..40 {
                let i = rng.random_range(0..online.len());
                let mut p = online.clone();
                p.values[i] += h;
                p.touch();
                let up = compute_loss(&qnet, &p, &target, &batch, 0.9, mode).unwrap().0;
                p.values[i] -= 2.0 * h;
                p.touch();
                let down = compute_loss(&qnet, &p, &target, &batch, 0.9, mode).unwrap().0;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad.0[i]).abs() / fd.abs().max(grad.0[i].abs()).max(1e-2);
                assert!(err < 1e-4, "param {i}: analytic {} fd {fd}", grad.0[i]);
            }
        }
    }
}

#[test]
fn frozen_transition_loss_falls_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut env = IosEnv::new(EnvConfig::default(), &mut rng).unwrap();
    let data = transitions(&mut env, 1, &mut rng);
    let cfg = AgentConfig {
        buffer_capacity: 1,
        batch_size: 1,
        target_period: 1_000,
        ..AgentConfig::default()
    };
    let mut agent = DeepQAgent::new(cfg, env.config().observation_dims(), 5, 5, &mut rng).unwrap();
    agent.store(data[0].clone());
    let losses: Vec<f64> = (0..100).map(|_| agent.train_step(&mut rng).unwrap().unwrap().loss).collect();
    // once the TD error reaches rounding level there is nothing left to reduce
    let floor = 1e-20;
    assert!(losses.windows(2).all(|w| w[1] < w[0] || w[0] < floor), "{losses:?}");
    assert!(losses[99] < 1e-3 * losses[0]);
}

#[test]
fn target_changes_only_at_sync_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut env = tiny_env(&mut rng);
    let cfg = AgentConfig {
        batch_size: 2,
        ..tiny_agent_config(LossMode::SummedTd, true)
    };
    let mut agent = DeepQAgent::new(cfg, env.config().observation_dims(), 5, 5, &mut rng).unwrap();
    for e in transitions(&mut env, 10, &mut rng) {
        agent.store(e);
    }
    let mut held = agent.target().values.clone();
    for step in 1..=45u64 {
        let d = agent.train_step(&mut rng).unwrap().unwrap();
        if step % 20 == 0 {
            assert!(d.synced);
            assert_eq!(agent.target().values, agent.online().values);
            assert_ne!(agent.target().values, held);
            held = agent.target().values.clone();
        } else {
            assert!(!d.synced);
            assert_eq!(agent.target().values, held);
        }
    }
}

#[test]
fn uniform_exploration() {
    let q = BranchQ {
        q1: vec![0.0, 9.0, 1.0, 1.0, 1.0],
        q2: vec![5.0, 0.0, 0.0, 0.0, 0.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 100_000;
    let mut counts = [0usize; 25];
    for _ in 0..draws {
        counts[select_action(&q, 1.0, &mut rng).flat(5)] += 1;
    }
    let tv = 0.5 * counts.iter().map(|&c| (c as f64 / draws as f64 - 0.04).abs()).sum::<f64>();
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn head_sizes_are_a_sum_not_a_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let env = IosEnv::new(EnvConfig::default(), &mut rng).unwrap();
    let cfg = AgentConfig::default();
    let dims = env.config().observation_dims();
    let mut env = env;
    let obs = env.reset(&mut rng).unwrap();
    let q = QNetwork::new(&cfg, dims, 5, 5).unwrap();
    let p = q.network().init_params(&mut rng);
    assert_eq!(q.q_values(&p, &obs).unwrap().evaluated(), 10);

    let big = EnvConfig {
        increments: presets::increments_large(),
        ..EnvConfig::default()
    };
    let mut env = IosEnv::new(big, &mut rng).unwrap();
    let (n1, n2) = env.action_count();
    assert_eq!((n1, n2), (31, 5));
    let obs = env.reset(&mut rng).unwrap();
    let q = QNetwork::new(&cfg, env.config().observation_dims(), n1, n2).unwrap();
    let p = q.network().init_params(&mut rng);
    assert_eq!(q.q_values(&p, &obs).unwrap().evaluated(), 36);
    let joint = AgentConfig {
        branching: false,
        ..AgentConfig::default()
    };
    let q = QNetwork::new(&joint, env.config().observation_dims(), n1, n2).unwrap();
    let p = q.network().init_params(&mut rng);
    assert_eq!(q.q_values(&p, &obs).unwrap().evaluated(), 155);
}

#[test]
fn deployed_copy_decides_like_the_learner() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut env = IosEnv::new(EnvConfig::default(), &mut rng).unwrap();
    let obs: Vec<Observation> = transitions(&mut env, 20, &mut rng).into_iter().map(|e| e.state).collect();
    let mut learner = DeepQAgent::new(AgentConfig::default(), env.config().observation_dims(), 5, 5, &mut rng).unwrap();
    let mut deployed = PhysicalAgent::new(learner.qnet().clone(), learner.online().clone(), EpsilonSchedule::default());
    let mut r1 = ChaCha8Rng::seed_from_u64(12);
    let mut r2 = ChaCha8Rng::seed_from_u64(12);
    for o in &obs {
        assert_eq!(learner.act(o, &mut r1).unwrap(), deployed.act(o, &mut r2).unwrap());
    }
    let greedy = act_only(learner.qnet(), learner.online(), &obs[0], 0.0, &mut r1).unwrap();
    assert_eq!(greedy, act_only(deployed.qnet(), deployed.params(), &obs[0], 0.0, &mut r2).unwrap());
}

#[test]
fn decision_latency() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut env = IosEnv::new(EnvConfig::default(), &mut rng).unwrap();
    let obs = env.reset(&mut rng).unwrap();
    let agent = DeepQAgent::new(AgentConfig::default(), env.config().observation_dims(), 5, 5, &mut rng).unwrap();
    let calls = 50;
    let start = std::time::Instant::now();
    for _ in 0..calls {
        act_only(agent.qnet(), agent.online(), &obs, 0.001, &mut rng).unwrap();
    }
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / calls as f64;
    assert!(mean_ms < 10.0, "{mean_ms} ms per decision");
}

#[test]
fn epsilon_schedule_defaults() {
    let e = EpsilonSchedule::default();
    assert_eq!(e.at(0), 1.0);
    assert!((e.at(10) - 0.99f64.powi(10)).abs() < 1e-15);
    assert_eq!(e.at(100_000), 0.001);
}

proptest! {
    #[test]
    fn greedy_choice_ignores_positive_affine_maps(
        q1 in prop::collection::vec(-100.0f64..100.0, 5),
        q2 in prop::collection::vec(-100.0f64..100.0, 5),
        scale in 1e-3f64..1e3,
        shift in -1e3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = select_action(&BranchQ { q1: q1.clone(), q2: q2.clone() }, 0.0, &mut rng);
        let map = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        // an affine map can merge near-ties in floating point; only compare clear winners
        let margin = |v: &[f64]| {
            let b = argmax(v);
            v.iter().enumerate().filter(|(i, _)| *i != b).map(|(_, x)| v[b] - x).fold(f64::INFINITY, f64::min)
        };
        prop_assume!(margin(&q1) > 1e-6 && margin(&q2) > 1e-6);
        let moved = select_action(&BranchQ { q1: map(&q1), q2: map(&q2) }, 0.0, &mut rng);
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn buffer_never_exceeds_capacity(cap in 1usize..20, inserts in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = tiny_env(&mut rng);
        let obs = env.reset(&mut rng).unwrap();
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..inserts {
            buf.store(Experience { state: obs.clone(), action: JointAction::new(0, 0), reward: i as f64, next_state: obs.clone() });
            prop_assert!(buf.len() <= cap);
        }
        if inserts > 0 {
            let oldest = inserts.saturating_sub(cap);
            prop_assert_eq!(buf.get(0).unwrap().reward, oldest as f64);
        }
    }
}
