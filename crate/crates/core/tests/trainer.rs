use gradex::envs::{make_suite, SuiteConfig};
use gradex::pipeline::OracleParams;
use gradex::trainer::{finetune_oracle, train_meta, NetConfig, PpoConfig, TrainBudget};

#[test]
fn long_meta_training_solves_the_planted_grid() {
    let suite = make_suite(&SuiteConfig::planted_grid()).unwrap();
    let budget = TrainBudget {
        iterations: 100,
        ..TrainBudget::default()
    };
    let out = train_meta(&suite, &NetConfig::default(), &budget, &PpoConfig::default(), 0, |_| {}).unwrap();
    let last = out.metrics.last().unwrap();
    let mean = last.success_rate_per_task.iter().sum::<f64>() / last.success_rate_per_task.len() as f64;
    assert!(mean >= 0.6, "{:?}", last.success_rate_per_task);
}

#[test]
fn opposite_corner_pair_shows_negative_transfer() {
    let suite = make_suite(&SuiteConfig::planted_grid()).unwrap();
    let ppo = PpoConfig::default();
    let meta = train_meta(&suite, &NetConfig::default(), &TrainBudget::default(), &ppo, 0, |_| {}).unwrap();
    let oracle = OracleParams::default();
    let reward = |subset: &[usize]| {
        finetune_oracle(&meta.policy, &meta.value, &suite, subset, &oracle.budget, &ppo, oracle.eval_episodes, 3)
            .unwrap()
            .mean_reward()
    };
    let (a, b) = (0, suite.n_tasks() - 1);
    let joint = reward(&[a, b]);
    let alone = (reward(&[a]) + reward(&[b])) / 2.0;
    assert!(joint < alone, "joint {joint} separate {alone}");
}
