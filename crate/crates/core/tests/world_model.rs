use evade_core::env::{push_frame, Action, EnvSpec, ObjectWorld};
use evade_core::world_model::{train_model, Dataset, ModelConfig, TransitionRecord, WorldModel};
use evade_core::{Rng, Tensor};

fn random_records(env: &ObjectWorld, n: usize, rng: &mut Rng) -> Vec<TransitionRecord<f32>> {
    let mut out = Vec::with_capacity(n);
    let (mut state, mut obs) = env.reset::<f32>(0);
    while out.len() < n {
        let action = Action::ALL[rng.below(Action::COUNT)];
        let step = env.step::<f32>(&state, action).unwrap();
        out.push(TransitionRecord {
            obs_stack: obs.clone(),
            action: action.index(),
            reward_class: env.spec().reward_class(step.reward).unwrap(),
            next_frame: step.frame.clone(),
        });
        if step.done {
            (state, obs) = env.reset::<f32>(0);
        } else {
            obs = push_frame(&obs, &step.frame).unwrap();
            state = step.state;
        }
    }
    out
}

fn dataset(records: &[TransitionRecord<f32>]) -> Dataset<f32> {
    let mut d = Dataset::new();
    for r in records {
        d.push(r.clone());
    }
    d
}

fn world() -> ObjectWorld {
    ObjectWorld::new(EnvSpec::default()).unwrap()
}

fn cross_entropy(logits: &Tensor<f32>, label: usize) -> f64 {
    let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - l[label]
}

#[test]
fn learns_held_out_transitions() {
    let env = world();
    let mut rng = Rng::new(1);
    let train = random_records(&env, 500, &mut rng);
    let held_out = random_records(&env, 200, &mut rng);
    let mut model = WorldModel::<f32>::new(env.spec(), &ModelConfig::default(), &mut Rng::new(2)).unwrap();
    let before = model.evaluate(&held_out).unwrap();
    let curve = train_model(&mut model, &dataset(&train), 2000, &Rng::new(3)).unwrap();
    let after = model.evaluate(&held_out).unwrap();
    assert!(after.frame_accuracy > 0.95, "{after:?}");
    assert!(after.reward_accuracy > 0.90, "{after:?}");
    assert!(after.nll < before.nll);
    let head: f64 = curve[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = curve[curve.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn overfits_a_single_transition() {
    let env = world();
    let record = random_records(&env, 3, &mut Rng::new(4)).pop().unwrap();
    let config = ModelConfig { hidden_channels: 8, reward_hidden: 16, ..ModelConfig::default() };
    let mut model = WorldModel::<f32>::new(env.spec(), &config, &mut Rng::new(5)).unwrap();
    train_model(&mut model, &dataset(std::slice::from_ref(&record)), 300, &Rng::new(6)).unwrap();
    let (frame, reward) = model.predict(&model.mean_sample(), &record.obs_stack, record.action).unwrap();
    let decoded = frame.map(|l| if l > 0.0 { 1.0 } else { 0.0 });
    assert_eq!(decoded, record.next_frame);
    assert_eq!(reward.argmax(), record.reward_class);
}

#[test]
fn constant_reward_is_learned_exactly() {
    let env = world();
    let mut records = random_records(&env, 64, &mut Rng::new(7));
    for r in &mut records {
        r.reward_class = 2;
    }
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, ..ModelConfig::default() };
    let mut model = WorldModel::<f32>::new(env.spec(), &config, &mut Rng::new(8)).unwrap();
    train_model(&mut model, &dataset(&records), 400, &Rng::new(9)).unwrap();
    let mean = model.mean_sample();
    let ce = records.iter().map(|r| cross_entropy(&model.predict(&mean, &r.obs_stack, r.action).unwrap().1, 2)).sum::<f64>()
        / records.len() as f64;
    assert!(ce < 0.01, "cross-entropy {ce}");
}

#[test]
fn structural_zeros_survive_training() {
    let env = world();
    let records = random_records(&env, 64, &mut Rng::new(10));
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, ..ModelConfig::default() };
    let mut model = WorldModel::<f32>::new(env.spec(), &config, &mut Rng::new(11)).unwrap();
    train_model(&mut model, &dataset(&records), 100, &Rng::new(12)).unwrap();
    let mut masked = 0;
    for g in model.noisy_groups() {
        for id in [g.theta, g.sigma] {
            let p = model.params().param(id);
            if let Some(mask) = &p.mask {
                for (v, m) in p.value.data().iter().zip(mask.data()) {
                    if *m == 0.0 {
                        assert_eq!(*v, 0.0, "{}", p.name);
                        masked += 1;
                    }
                }
            }
            if id == g.sigma {
                assert!(p.value.data().iter().all(|&s| s >= 0.0), "{}", p.name);
            }
        }
    }
    assert!(masked > 0);
}

#[test]
fn noise_perturbs_only_the_reward_head() {
    let env = world();
    let records = random_records(&env, 8, &mut Rng::new(13));
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, sigma_init: 0.5, ..ModelConfig::default() };
    let model = WorldModel::<f32>::new(env.spec(), &config, &mut Rng::new(14)).unwrap();
    let mut rng = Rng::new(15);
    let (a, b) = (model.draw_reward_sample(&mut rng), model.draw_reward_sample(&mut rng));
    assert_ne!(a.id(), b.id());
    let mut reward_differs = false;
    for r in &records {
        let (fa, ra) = model.predict(&a, &r.obs_stack, r.action).unwrap();
        let (fb, rb) = model.predict(&b, &r.obs_stack, r.action).unwrap();
        assert_eq!(fa, fb);
        reward_differs |= ra != rb;
    }
    assert!(reward_differs);
}

#[test]
fn zero_sigma_makes_samples_irrelevant() {
    let env = world();
    let records = random_records(&env, 4, &mut Rng::new(16));
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, sigma_init: 0.0, train_sigma: false, ..ModelConfig::default() };
    let model = WorldModel::<f32>::new(env.spec(), &config, &mut Rng::new(17)).unwrap();
    let sample = model.draw_reward_sample(&mut Rng::new(18));
    for r in &records {
        assert_eq!(
            model.predict(&sample, &r.obs_stack, r.action).unwrap(),
            model.predict(&model.mean_sample(), &r.obs_stack, r.action).unwrap()
        );
    }
}

#[test]
fn reward_samples_vary_in_proportion_to_sigma() {
    let env = world();
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, sigma_init: 0.2, ..ModelConfig::default() };
    let model = WorldModel::<f32>::new(env.spec(), &config, &mut Rng::new(19)).unwrap();
    let name = model.noisy_groups().find(|g| g.kind.is_some()).unwrap().name.clone();
    let theta = model.perturbed(&name, &model.mean_sample()).unwrap();
    let mut rng = Rng::new(20);
    let draws = 100;
    let mut sq = vec![0.0f64; theta.len()];
    for _ in 0..draws {
        let tilde = model.perturbed(&name, &model.draw_reward_sample(&mut rng)).unwrap();
        for (i, (t, m)) in tilde.data().iter().zip(theta.data()).enumerate() {
            sq[i] += ((t - m) as f64).powi(2);
        }
    }
    for (i, &m) in theta.data().iter().enumerate() {
        let want = (m as f64 * 0.2).abs();
        let got = (sq[i] / draws as f64).sqrt();
        assert!((got - want).abs() <= 0.25 * want, "entry {i}: {got} vs {want}");
    }
}
