use evade_core::agent::{collect_real, simulate_step, train_policy_in_sim, ModelEnv, PolicyConfig, PolicyNet, SimEnv, SimSchedule};
use evade_core::env::{Action, EnvSpec, ObjectWorld, CH_AGENT};
use evade_core::world_model::{Dataset, ModelConfig, WorldModel};
use evade_core::{Result, Rng, Tensor};

/// Frames never change; `Right` pays 1 and every other action pays 0.
struct Bandit;

impl SimEnv<f32> for Bandit {
    fn sample_id(&self) -> u64 {
        7
    }

    fn step_batch(&self, obs: &Tensor<f32>, actions: &[usize]) -> Result<(Tensor<f32>, Vec<f64>)> {
        let s = obs.shape();
        let frame = 4 * s[2] * s[3];
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(s[0] * frame);
        for n in 0..s[0] {
            data.extend_from_slice(&obs.data()[n * per + per - frame..(n + 1) * per]);
        }
        let frames = Tensor::new(vec![s[0], 4, s[2], s[3]], data)?;
        let rewards = actions.iter().map(|&a| if a == Action::Right.index() { 1.0 } else { 0.0 }).collect();
        Ok((frames, rewards))
    }
}

fn setup(config: &PolicyConfig, seed: u64) -> (ObjectWorld, PolicyNet<f32>, Dataset<f32>) {
    let env = ObjectWorld::new(EnvSpec::default()).unwrap();
    let mut rng = Rng::new(seed);
    let policy = PolicyNet::<f32>::new([16, 8, 8], 5, config, &mut rng).unwrap();
    let mut real = Dataset::new();
    collect_real(&policy, &env, 40, &mut real, &mut rng).unwrap();
    (env, policy, real)
}

fn right_probability(policy: &PolicyNet<f32>, real: &Dataset<f32>) -> f64 {
    let probs: Vec<f64> = real.records().iter().map(|r| policy.probabilities(&r.obs_stack).unwrap()[Action::Right.index()]).collect();
    probs.iter().sum::<f64>() / probs.len() as f64
}

fn schedule(steps: usize) -> SimSchedule {
    SimSchedule { steps, horizon: 16, update_frequency: 250 }
}

#[test]
fn bandit_policy_converges_to_the_paying_action() {
    let config = PolicyConfig::default();
    let (_, mut policy, real) = setup(&config, 1);
    train_policy_in_sim(&mut policy, &Bandit, &real, schedule(5000), &config, &mut Rng::new(2)).unwrap();
    let p = right_probability(&policy, &real);
    assert!(p > 0.95, "P(right) = {p}");
}

#[test]
fn heavy_entropy_bonus_keeps_the_policy_spread() {
    let config = PolicyConfig { entropy_coef: 10.0, ..PolicyConfig::default() };
    let (_, mut policy, real) = setup(&config, 3);
    train_policy_in_sim(&mut policy, &Bandit, &real, schedule(3000), &config, &mut Rng::new(4)).unwrap();
    for r in real.records() {
        let max = policy.probabilities(&r.obs_stack).unwrap().into_iter().fold(0.0, f64::max);
        assert!(max < 0.4, "max probability {max}");
    }
}

#[test]
fn zero_simulated_steps_leave_the_policy_unchanged() {
    let config = PolicyConfig::default();
    let (_, mut policy, real) = setup(&config, 5);
    let before = policy.params().clone();
    let report = train_policy_in_sim(&mut policy, &Bandit, &real, schedule(0), &config, &mut Rng::new(6)).unwrap();
    assert_eq!(report.steps, 0);
    assert_eq!(report.updates, 0);
    assert_eq!(policy.params(), &before);
}

#[test]
fn rollouts_end_at_the_horizon() {
    let config = PolicyConfig::default();
    let (_, mut policy, real) = setup(&config, 7);
    let report = train_policy_in_sim(&mut policy, &Bandit, &real, schedule(480), &config, &mut Rng::new(8)).unwrap();
    assert_eq!(report.steps, 480);
    assert_eq!(report.rollout_returns.len(), 480 / 16);
    assert_eq!(report.updates, 2);
    assert_eq!(report.sample_ids, vec![7]);
    assert!(report.rollout_returns.iter().all(|&r| (0.0..=16.0).contains(&r)));
}

#[test]
fn model_environment_decodes_one_agent_and_bucket_rewards() {
    let spec = EnvSpec::default();
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, ..ModelConfig::default() };
    let model = WorldModel::<f32>::new(&spec, &config, &mut Rng::new(9)).unwrap();
    let sample = model.draw_reward_sample(&mut Rng::new(10));
    let env = ObjectWorld::new(spec.clone()).unwrap();
    let (_, obs) = env.reset::<f32>(0);
    let sim = ModelEnv::new(&model, &sample, &spec.reward_buckets).unwrap();
    let batch = Tensor::stack(&[&obs, &obs, &obs]).unwrap();
    let (frames, rewards) = sim.step_batch(&batch, &[0, 3, 4]).unwrap();
    assert_eq!(frames.shape(), &[3, 4, 8, 8]);
    assert!(frames.data().iter().all(|&v| v == 0.0 || v == 1.0));
    for (n, reward) in rewards.iter().enumerate() {
        let f = frames.batch_item(n).unwrap();
        let agent: f32 = f.data()[CH_AGENT * 64..(CH_AGENT + 1) * 64].iter().sum();
        assert_eq!(agent, 1.0);
        assert!(spec.reward_buckets.contains(reward));
    }
    let (stack, reward) = simulate_step(&model, &sample, &spec.reward_buckets, &obs, 3).unwrap();
    assert_eq!(reward, rewards[1]);
    assert_eq!(&stack.data()[12 * 64..], frames.batch_item(1).unwrap().data());
    assert!(ModelEnv::new(&model, &sample, &[0.0]).is_err());
}
