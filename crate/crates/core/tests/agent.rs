use adaug::agent::{
    AgentBundle, AgentConfig, AgentState, RewardBreakdown, TransitionRecord,
};

fn bandit_state() -> AgentState {
    AgentState {
        z: vec![0.2, -0.1, 0.4],
        entropy: 1.5,
        progress: 0.0,
    }
}

fn rollout(agent: &AgentBundle, target: &[f64], n: usize, seed: u64) -> Vec<TransitionRecord> {
    let s = bandit_state();
    (0..n as u64)
        .map(|i| {
            let action = agent.act(&s, seed * 10_000 + i).unwrap();
            let r = -action.delta.iter().zip(target).map(|(d, t)| (d - t).powi(2)).sum::<f64>();
            TransitionRecord {
                state: s.clone(),
                value: agent.value_estimate(&s).unwrap(),
                feasible: true,
                sample: action.delta.clone(),
                action,
                reward: RewardBreakdown {
                    entropy_term: 0.0,
                    evasion_term: r,
                    total: r,
                },
            }
        })
        .collect()
}

#[test]
fn ppo_moves_the_mean_to_the_bandit_optimum() {
    let mut cfg = AgentConfig::new(3);
    cfg.lr_policy = 3e-3;
    let mut agent = AgentBundle::new(cfg, 7).unwrap();
    let target = [1.0, 0.0, 0.0];
    for it in 0..50 {
        let traj = rollout(&agent, &target, 256, it);
        agent.ppo_update(&traj, it).unwrap();
    }
    let (mu, _) = agent.distribution(&bandit_state()).unwrap();
    let dist = mu.iter().zip(&target).map(|(m, t)| (m - t).powi(2)).sum::<f64>().sqrt();
    assert!(dist < 0.2, "mean {mu:?} is {dist} from the optimum");
}

#[test]
fn first_surrogate_is_the_mean_advantage() {
    let mut agent = AgentBundle::new(AgentConfig::new(3), 3).unwrap();
    let traj = rollout(&agent, &[0.5, 0.5, 0.5], 64, 1);
    let s = bandit_state();
    let v = agent.value_estimate(&s).unwrap();
    let mean_adv = traj.iter().map(|t| t.reward.total - v).sum::<f64>() / traj.len() as f64;
    let m = agent.ppo_update(&traj, 0).unwrap();
    assert!((m.initial_surrogate - mean_adv).abs() < 1e-12);
    assert!((m.mean_advantage - mean_adv).abs() < 1e-12);
}
