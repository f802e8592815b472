//! Policy network, real-environment collection and clipped policy-gradient
//! training inside a simulated environment.

use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::env::{push_frame, Action, ObjectWorld, CH_AGENT};
use crate::error::{Error, Result};
use crate::evade::VariationalSample;
use crate::params::{Adam, AdamConfig, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{GradTape, Var};
use crate::tensor::{argmax, Scalar, Tensor};
use crate::world_model::{Dataset, TransitionRecord, WorldModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_channels: usize,
    pub hidden_units: usize,
    pub optimizer: AdamConfig,
    pub clip_ratio: f64,
    pub discount: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Passes over each collected buffer per update.
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Simulated rollouts advanced together in one batched model query.
    pub sim_envs: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            hidden_units: 64,
            optimizer: AdamConfig { learning_rate: 3e-4, ..AdamConfig::default() },
            clip_ratio: 0.2,
            discount: 0.99,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 3,
            minibatch_size: 50,
            sim_envs: 10,
        }
    }
}

/// Small conv + dense network producing action logits and a state value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<S = f32> {
    params: ParamStore<S>,
    ids: [(ParamId, ParamId); 5],
    actions: usize,
    obs_shape: [usize; 3],
    optimizer: Adam<S>,
}

impl<S: Scalar> PolicyNet<S> {
    pub fn new(obs_shape: [usize; 3], actions: usize, config: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        let [fc, h, w] = obs_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("policy input {h}x{w} is not divisible by 4")));
        }
        if config.hidden_channels == 0 || config.hidden_units == 0 || actions == 0 {
            return Err(Error::Config("policy widths must be positive".into()));
        }
        let (p, u) = (config.hidden_channels, config.hidden_units);
        let flat = p * (h / 4) * (w / 4);
        let mut store = ParamStore::new();
        let mut layer = |name: &str, shape: &[usize], fan_in: usize, gain: f64, bias: usize| {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let wt = Tensor::from_fn(shape, |_| S::lit(rng.uniform_range(-bound, bound)));
            let w = store.add(format!("{name}.w"), wt);
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[bias]));
            (w, b)
        };
        let ids = [
            layer("conv1", &[p, fc, 3, 3], fc * 9, 1.0, p),
            layer("conv2", &[p, p, 3, 3], p * 9, 1.0, p),
            layer("fc", &[flat, u], flat, 1.0, u),
            // Small output weights give a near-uniform initial policy.
            layer("logits", &[u, actions], u, 0.01, actions),
            layer("value", &[u, 1], u, 1.0, 1),
        ];
        let optimizer = Adam::new(config.optimizer, &store);
        Ok(Self { params: store, ids, actions, obs_shape, optimizer })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn optimizer(&self) -> &Adam<S> {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam<S> {
        &mut self.optimizer
    }

    /// Record logits `[N, A]` and values `[N]` for `obs` `[N, F*C, H, W]`.
    pub fn record(&self, tape: &mut GradTape<'_, S>, vars: &[Var], obs: Var) -> Result<(Var, Var)> {
        if tape.shape(obs)[1..] != self.obs_shape {
            return Err(Error::shape("policy", format!("observation {:?}, expected [N,{:?}]", tape.shape(obs), self.obs_shape)));
        }
        let v = |id: ParamId| vars[id.index()];
        let [c1, c2, fc, lg, vl] = self.ids;
        let mut x = obs;
        for (w, b) in [c1, c2] {
            let y = tape.conv2d(x, v(w), 2, Padding::Same)?;
            let y = tape.add_channel_bias(y, v(b))?;
            x = tape.relu(y);
        }
        let x = tape.flatten(x)?;
        let hdn = tape.matmul(x, v(fc.0))?;
        let hdn = tape.add_row_bias(hdn, v(fc.1))?;
        let hdn = tape.relu(hdn);
        let logits = tape.matmul(hdn, v(lg.0))?;
        let logits = tape.add_row_bias(logits, v(lg.1))?;
        let value = tape.matmul(hdn, v(vl.0))?;
        let value = tape.add_row_bias(value, v(vl.1))?;
        let n = tape.shape(value)[0];
        let value = tape.reshape(value, &[n])?;
        Ok((logits, value))
    }

    /// Action log-probabilities `[N, A]` and values `[N]`.
    pub fn evaluate(&self, obs: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, p)| tape.constant_ref(&p.value)).collect();
        let x = tape.constant_ref(obs);
        let (logits, value) = self.record(&mut tape, &vars, x)?;
        let logp = tape.log_softmax(logits)?;
        Ok((tape.value(logp).clone(), tape.value(value).clone()))
    }

    /// Action probabilities for one observation stack.
    pub fn probabilities(&self, obs_stack: &Tensor<S>) -> Result<Vec<f64>> {
        let (logp, _) = self.evaluate(&single(obs_stack)?)?;
        Ok(logp.data().iter().map(|l| l.as_f64().exp()).collect())
    }

    pub fn greedy_action(&self, obs_stack: &Tensor<S>) -> Result<usize> {
        let (logp, _) = self.evaluate(&single(obs_stack)?)?;
        Ok(argmax(logp.data()))
    }

    pub fn sample_action(&self, obs_stack: &Tensor<S>, rng: &mut Rng) -> Result<usize> {
        Ok(rng.categorical(&self.probabilities(obs_stack)?))
    }
}

fn single<S: Scalar>(obs_stack: &Tensor<S>) -> Result<Tensor<S>> {
    let mut shape = vec![1];
    shape.extend_from_slice(obs_stack.shape());
    obs_stack.clone().reshape(&shape)
}

/// Run the stochastic policy in the real environment for exactly `k_real`
/// steps, restarting episodes as they end, and append every transition to
/// `dataset`. Returns the returns of the episodes that finished; if none
/// finished, the return accumulated so far.
pub fn collect_real<S: Scalar>(
    policy: &PolicyNet<S>,
    env: &ObjectWorld,
    k_real: usize,
    dataset: &mut Dataset<S>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut returns = Vec::new();
    let (mut state, mut obs) = env.reset::<S>(rng.next_u64());
    let mut ret = 0.0;
    for _ in 0..k_real {
        let action = policy.sample_action(&obs, rng)?;
        let out = env.step::<S>(&state, Action::from_index(action)?)?;
        let next_obs = push_frame(&obs, &out.frame)?;
        dataset.push(TransitionRecord {
            obs_stack: obs,
            action,
            reward_class: env.spec().reward_class(out.reward)?,
            next_frame: out.frame,
        });
        ret += out.reward;
        if out.done {
            returns.push(ret);
            ret = 0.0;
            (state, obs) = env.reset::<S>(rng.next_u64());
        } else {
            state = out.state;
            obs = next_obs;
        }
    }
    if returns.is_empty() {
        returns.push(ret);
    }
    Ok(returns)
}

/// Greedy episodes in the real environment; returns their returns.
pub fn evaluate_greedy<S: Scalar>(policy: &PolicyNet<S>, env: &ObjectWorld, episodes: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|_| {
            let (mut state, mut obs) = env.reset::<S>(rng.next_u64());
            let mut ret = 0.0;
            loop {
                let a = policy.greedy_action(&obs)?;
                let out = env.step::<S>(&state, Action::from_index(a)?)?;
                ret += out.reward;
                if out.done {
                    return Ok(ret);
                }
                obs = push_frame(&obs, &out.frame)?;
                state = out.state;
            }
        })
        .collect()
}

/// Mean return of the uniform-random policy over `episodes` episodes.
pub fn random_policy_return(env: &ObjectWorld, episodes: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut state, _) = env.reset::<f32>(0);
        let mut ret = 0.0;
        loop {
            let (next, r, done) = env.transition(&state, Action::ALL[rng.below(Action::COUNT)])?;
            ret += r;
            if done {
                break;
            }
            state = next;
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// A batched simulated environment: next frames and rewards for a batch of
/// observation stacks and actions.
pub trait SimEnv<S: Scalar> {
    /// Identifier of the frozen reward model answering the queries.
    fn sample_id(&self) -> u64;

    /// Next frames `[N, C, H, W]` and rewards.
    fn step_batch(&self, obs: &Tensor<S>, actions: &[usize]) -> Result<(Tensor<S>, Vec<f64>)>;
}

/// A world model paired with one frozen reward sample. Object channels are
/// thresholded at zero logit; the agent channel keeps only its most likely cell.
pub struct ModelEnv<'a, S: Scalar> {
    model: &'a WorldModel<S>,
    sample: &'a VariationalSample<S>,
    buckets: Vec<f64>,
}

impl<'a, S: Scalar> ModelEnv<'a, S> {
    pub fn new(model: &'a WorldModel<S>, sample: &'a VariationalSample<S>, buckets: &[f64]) -> Result<Self> {
        if buckets.len() != model.dims().buckets {
            return Err(Error::invalid("bucket list does not match the model's reward head"));
        }
        Ok(Self { model, sample, buckets: buckets.to_vec() })
    }
}

impl<S: Scalar> SimEnv<S> for ModelEnv<'_, S> {
    fn sample_id(&self) -> u64 {
        self.sample.id()
    }

    fn step_batch(&self, obs: &Tensor<S>, actions: &[usize]) -> Result<(Tensor<S>, Vec<f64>)> {
        let (logits, rewards) = self.model.predict_batch(self.sample, obs, actions)?;
        let mut frames = logits.map(|l| if l > S::zero() { S::one() } else { S::zero() });
        let shape = logits.shape().to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let data = frames.data_mut();
        for b in 0..shape[0] {
            let base = (b * c + CH_AGENT) * hw;
            let best = argmax(&logits.data()[base..base + hw]);
            for (j, v) in data[base..base + hw].iter_mut().enumerate() {
                *v = if j == best { S::one() } else { S::zero() };
            }
        }
        let k = self.buckets.len();
        let rewards = rewards.data().chunks(k).map(|row| self.buckets[argmax(row)]).collect();
        Ok((frames, rewards))
    }
}

/// One model step: decoded next frame pushed onto the stack, and the
/// bucket value of the most likely reward class.
pub fn simulate_step<S: Scalar>(
    model: &WorldModel<S>,
    sample: &VariationalSample<S>,
    buckets: &[f64],
    obs_stack: &Tensor<S>,
    action: usize,
) -> Result<(Tensor<S>, f64)> {
    let env = ModelEnv::new(model, sample, buckets)?;
    let (frames, rewards) = env.step_batch(&single(obs_stack)?, &[action])?;
    let frame = frames.batch_item(0)?;
    Ok((push_frame(obs_stack, &frame)?, rewards[0]))
}

/// Outcome of one round of simulated policy training.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    /// Return of every simulated rollout that reached the horizon.
    pub rollout_returns: Vec<f64>,
    pub steps: usize,
    pub updates: usize,
    /// Distinct sample ids seen by reward queries, in first-seen order.
    pub sample_ids: Vec<u64>,
}

impl SimReport {
    pub fn mean_return(&self) -> f64 {
        if self.rollout_returns.is_empty() {
            0.0
        } else {
            self.rollout_returns.iter().sum::<f64>() / self.rollout_returns.len() as f64
        }
    }
}

struct Buffer<S> {
    obs: Vec<Tensor<S>>,
    next: Vec<Tensor<S>>,
    actions: Vec<usize>,
    logp: Vec<f64>,
    rewards: Vec<f64>,
}

impl<S: Scalar> Buffer<S> {
    fn new() -> Self {
        Self { obs: Vec::new(), next: Vec::new(), actions: Vec::new(), logp: Vec::new(), rewards: Vec::new() }
    }

    fn len(&self) -> usize {
        self.actions.len()
    }
}

/// Length of one round of simulated training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimSchedule {
    pub steps: usize,
    pub horizon: usize,
    pub update_frequency: usize,
}

/// Simulate `schedule.steps` steps in `sim` and update `policy` every
/// `update_frequency` steps (plus once for any remainder). Rollouts start
/// from observation stacks drawn uniformly from `real` and end after
/// `horizon` steps.
pub fn train_policy_in_sim<S: Scalar, E: SimEnv<S>>(
    policy: &mut PolicyNet<S>,
    sim: &E,
    real: &Dataset<S>,
    schedule: SimSchedule,
    config: &PolicyConfig,
    rng: &mut Rng,
) -> Result<SimReport> {
    let SimSchedule { steps: k_sim, horizon, update_frequency } = schedule;
    if real.is_empty() {
        return Err(Error::invalid("simulated training needs at least one real observation"));
    }
    if horizon == 0 || update_frequency == 0 || config.sim_envs == 0 || config.minibatch_size == 0 {
        return Err(Error::Config("horizon, update frequency, sim_envs and minibatch size must be positive".into()));
    }
    let mut report = SimReport { rollout_returns: Vec::new(), steps: 0, updates: 0, sample_ids: Vec::new() };
    let lanes = config.sim_envs.min(k_sim.max(1));
    let mut obs: Vec<Tensor<S>> = Vec::with_capacity(lanes);
    let mut t = vec![0usize; lanes];
    let mut ret = vec![0.0f64; lanes];
    for _ in 0..lanes {
        obs.push(real.records()[rng.below(real.len())].obs_stack.clone());
    }
    let mut buffer = Buffer::new();
    while report.steps < k_sim {
        let active = lanes.min(k_sim - report.steps);
        let batch = Tensor::stack(&obs[..active].iter().collect::<Vec<_>>())?;
        let (logp, _) = policy.evaluate(&batch)?;
        let a_count = policy.actions();
        let actions: Vec<usize> = logp
            .data()
            .chunks(a_count)
            .map(|row| {
                let probs: Vec<f64> = row.iter().map(|l| l.as_f64().exp()).collect();
                rng.categorical(&probs)
            })
            .collect();
        let (frames, rewards) = sim.step_batch(&batch, &actions)?;
        let id = sim.sample_id();
        if !report.sample_ids.contains(&id) {
            report.sample_ids.push(id);
        }
        for i in 0..active {
            let next = push_frame(&obs[i], &frames.batch_item(i)?)?;
            buffer.logp.push(logp.data()[i * a_count + actions[i]].as_f64());
            buffer.actions.push(actions[i]);
            buffer.rewards.push(rewards[i]);
            buffer.obs.push(std::mem::replace(&mut obs[i], next.clone()));
            buffer.next.push(next);
            ret[i] += rewards[i];
            t[i] += 1;
            if t[i] == horizon {
                report.rollout_returns.push(ret[i]);
                ret[i] = 0.0;
                t[i] = 0;
                obs[i] = real.records()[rng.below(real.len())].obs_stack.clone();
            }
            report.steps += 1;
            if buffer.len() == update_frequency {
                update_policy(policy, &std::mem::replace(&mut buffer, Buffer::new()), config, rng)?;
                report.updates += 1;
            }
        }
    }
    if buffer.len() > 0 {
        update_policy(policy, &buffer, config, rng)?;
        report.updates += 1;
    }
    Ok(report)
}

/// Clipped-surrogate update with one-step bootstrapped advantages.
fn update_policy<S: Scalar>(policy: &mut PolicyNet<S>, buf: &Buffer<S>, config: &PolicyConfig, rng: &mut Rng) -> Result<()> {
    let n = buf.len();
    let obs_all = Tensor::stack(&buf.obs.iter().collect::<Vec<_>>())?;
    let next_all = Tensor::stack(&buf.next.iter().collect::<Vec<_>>())?;
    let (_, v) = policy.evaluate(&obs_all)?;
    let (_, v_next) = policy.evaluate(&next_all)?;
    let mut targets = Vec::with_capacity(n);
    let mut adv = Vec::with_capacity(n);
    for i in 0..n {
        let target = buf.rewards[i] + config.discount * v_next.data()[i].as_f64();
        targets.push(target);
        adv.push(target - v.data()[i].as_f64());
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std > 1e-8 {
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    } else {
        adv.iter_mut().for_each(|a| *a -= mean);
    }
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for chunk in order.chunks(config.minibatch_size) {
            let obs = Tensor::stack(&chunk.iter().map(|&i| &buf.obs[i]).collect::<Vec<_>>())?;
            let m = chunk.len();
            let pick = |xs: &[f64]| Tensor::from_fn(&[m], |j| S::lit(xs[chunk[j]]));
            let actions: Vec<usize> = chunk.iter().map(|&i| buf.actions[i]).collect();
            let batch = PolicyBatch { obs, actions, old_logp: pick(&buf.logp), advantages: pick(&adv), returns: pick(&targets) };
            policy_step(policy, &batch, config)?;
        }
    }
    Ok(())
}

/// Inputs of the clipped policy objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch<S = f32> {
    pub obs: Tensor<S>,
    pub actions: Vec<usize>,
    pub old_logp: Tensor<S>,
    pub advantages: Tensor<S>,
    pub returns: Tensor<S>,
}

/// `-mean(min(r A, clip(r) A)) + c_v mean((V - R)^2) - c_e H`, where `r` is
/// the probability ratio against the behaviour policy and `H` the mean
/// policy entropy.
pub fn record_policy_loss<'a, S: Scalar>(
    policy: &PolicyNet<S>,
    tape: &mut GradTape<'a, S>,
    vars: &[Var],
    batch: &'a PolicyBatch<S>,
    config: &PolicyConfig,
) -> Result<Var> {
    let obs = tape.constant_ref(&batch.obs);
    let (logits, value) = policy.record(tape, vars, obs)?;
    let logp_all = tape.log_softmax(logits)?;
    let logp = tape.gather_cols(logp_all, &batch.actions)?;
    let old = tape.constant_ref(&batch.old_logp);
    let adv = tape.constant_ref(&batch.advantages);
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    let surr = tape.mul(ratio, adv)?;
    let eps = config.clip_ratio;
    let clipped = tape.clamp(ratio, S::lit(1.0 - eps), S::lit(1.0 + eps));
    let clipped = tape.mul(clipped, adv)?;
    let objective = tape.minimum(surr, clipped)?;
    let objective = tape.mean(objective);
    let ret = tape.constant_ref(&batch.returns);
    let verr = tape.sub(value, ret)?;
    let verr = tape.square(verr);
    let vloss = tape.mean(verr);
    let probs = tape.exp(logp_all);
    let plogp = tape.mul(probs, logp_all)?;
    let plogp = tape.mean(plogp);
    // mean over all entries times the action count is the mean row entropy
    let neg_entropy = tape.scale(plogp, S::lit(policy.actions() as f64));
    let a = tape.scale(objective, -S::one());
    let b = tape.scale(vloss, S::lit(config.value_coef));
    let c = tape.scale(neg_entropy, S::lit(config.entropy_coef));
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

fn policy_step<S: Scalar>(policy: &mut PolicyNet<S>, batch: &PolicyBatch<S>, config: &PolicyConfig) -> Result<()> {
    let (vars, grads) = {
        let mut tape = GradTape::new();
        let vars = policy.params.bind(&mut tape);
        let loss = record_policy_loss(policy, &mut tape, &vars, batch, config)?;
        let value = tape.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("policy loss is {value}")));
        }
        (vars, tape.backward(loss)?)
    };
    policy.optimizer.step(&mut policy.params, &vars, &grads)
}
