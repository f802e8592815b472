//! Joint next-frame and reward network.
//!
//! Layout (defaults `C=4`, `H=W=8`, `F=4`, hidden width `h=16`):
//!
//! ```text
//! obs [F*C,8,8] -> enc1 3x3/2 -> e1 [h,4,4] -> enc2 3x3/2 -> e2 [h,2,2]
//! frame : act0(e2)            -> dec1 4x4/2 -> t1 [h,4,4]
//!         act1(t1 ++ e1)      -> dec2 4x4/2 -> next-frame logits [C,8,8]
//! reward: act0(blockA(e2))    -> dec1       -> r1
//!         act1(blockB(r1) ++ e1) -> dec2 with noisy weights -> r2 [C,8,8]
//!         relu(r2) ++ e2 -> dense -> relu -> dense -> bucket logits
//! ```
//!
//! Each block is translation 3x3, weighting, interaction 1x1. Action
//! conditioning (`act0`, `act1`) is a learned per-channel scale and shift
//! selected by the action. Only the reward path is perturbed: the noisy
//! blocks and the dropout scales on `dec2` are never used by the frame path.

use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::evade::{masked_gaussian, record_layer, structure_mask, LayerKind, VariationalSample};
use crate::params::{Adam, AdamConfig, Param, ParamId, ParamRole, ParamStore};
use crate::rng::{gaussian, Rng};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_channels: usize,
    pub reward_hidden: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub reward_loss_weight: f64,
    pub sigma_init: f64,
    pub train_sigma: bool,
    /// When false the reward head is noiseless: dropout scales are zero and
    /// frozen, and no noise is ever drawn.
    pub noise: bool,
    /// When false the noisy blocks are left out of the reward head entirely.
    pub evade_blocks: bool,
    pub translation_kernel: usize,
    pub interaction_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            reward_hidden: 32,
            batch_size: 16,
            optimizer: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
            reward_loss_weight: 1.0,
            sigma_init: 0.1,
            train_sigma: true,
            noise: true,
            evade_blocks: true,
            translation_kernel: 3,
            interaction_kernel: 1,
        }
    }
}

/// Static sizes derived from the environment and model config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub actions: usize,
    pub buckets: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn from_spec(spec: &EnvSpec, config: &ModelConfig) -> Self {
        Self {
            channels: spec.channels(),
            height: spec.height(),
            width: spec.width(),
            frames: spec.frames,
            actions: spec.actions(),
            buckets: spec.reward_buckets.len(),
            hidden: config.hidden_channels,
        }
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.frames * self.channels, self.height, self.width]
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One noisy parameter group of the reward head: a structured bank or the
/// dropout scales of the final decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyGroup {
    pub name: String,
    pub kind: Option<LayerKind>,
    pub theta: ParamId,
    pub sigma: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    enc1: (ParamId, ParamId),
    enc2: (ParamId, ParamId),
    dec1: (ParamId, ParamId),
    dec2: (ParamId, ParamId),
    act: [(ParamId, ParamId); 2],
    reward_dec1: (ParamId, ParamId),
    reward_dec2: (ParamId, ParamId),
    reward_act: [(ParamId, ParamId); 2],
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Name, input and output of one layer.
pub type LayerMaps<S> = (String, Tensor<S>, Tensor<S>);

/// Tape handles of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub frame_logits: Var,
    pub reward_logits: Var,
    /// `(layer name, input, output)` for every named layer, in order.
    pub taps: Vec<(String, Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord<S = f32> {
    pub obs_stack: Tensor<S>,
    pub action: usize,
    pub reward_class: usize,
    pub next_frame: Tensor<S>,
}

/// Append-only list of transitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset<S = f32> {
    records: Vec<TransitionRecord<S>>,
}

/// Stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S = f32> {
    pub obs: Tensor<S>,
    pub actions: Vec<usize>,
    pub reward_classes: Vec<usize>,
    pub next: Tensor<S>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new() -> Self {
        Self { records: Vec::new() }
    }

    pub fn push(&mut self, record: TransitionRecord<S>) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TransitionRecord<S>] {
        &self.records
    }

    pub fn get(&self, i: usize) -> Option<&TransitionRecord<S>> {
        self.records.get(i)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch<S>> {
        batch_of(idx.iter().map(|&i| &self.records[i]).collect::<Vec<_>>().as_slice())
    }
}

pub fn batch_of<S: Scalar>(records: &[&TransitionRecord<S>]) -> Result<Batch<S>> {
    if records.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let obs: Vec<&Tensor<S>> = records.iter().map(|r| &r.obs_stack).collect();
    let next: Vec<&Tensor<S>> = records.iter().map(|r| &r.next_frame).collect();
    Ok(Batch {
        obs: Tensor::stack(&obs)?,
        next: Tensor::stack(&next)?,
        actions: records.iter().map(|r| r.action).collect(),
        reward_classes: records.iter().map(|r| r.reward_class).collect(),
    })
}

/// Held-out quality of the mean model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub nll: f64,
    pub frame_accuracy: f64,
    pub reward_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel<S = f32> {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamStore<S>,
    ids: Ids,
    blocks: Vec<NoisyGroup>,
    head: NoisyGroup,
    optimizer: Adam<S>,
}

fn uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.uniform_range(-bound, bound)))
}

pub fn build_world_model<S: Scalar>(spec: &EnvSpec, config: &ModelConfig, rng: &mut Rng) -> Result<WorldModel<S>> {
    WorldModel::new(spec, config, rng)
}

impl<S: Scalar> WorldModel<S> {
    pub fn new(spec: &EnvSpec, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = ModelDims::from_spec(spec, config);
        if !d.height.is_multiple_of(4) || !d.width.is_multiple_of(4) {
            return Err(Error::Config(format!("grid {}x{} is not divisible by the encoder stride product 4", d.height, d.width)));
        }
        if config.hidden_channels == 0 || config.reward_hidden == 0 || config.batch_size == 0 {
            return Err(Error::Config("model widths and batch size must be positive".into()));
        }
        if config.sigma_init < 0.0 {
            return Err(Error::Config("sigma_init must be non-negative".into()));
        }
        let (c, h) = (d.channels, d.hidden);
        let fc = d.frames * c;
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore<S>, name: &str, shape: [usize; 4], fan_in: usize, bias: usize| {
            let w = p.add(format!("{name}.w"), uniform_init(&shape, fan_in, rng));
            let b = p.add(format!("{name}.b"), Tensor::zeros(&[bias]));
            (w, b)
        };
        let enc1 = conv(&mut p, "enc1", [h, fc, 3, 3], fc * 9, h);
        let enc2 = conv(&mut p, "enc2", [h, h, 3, 3], h * 9, h);
        let dec1 = conv(&mut p, "dec1", [h, h, 4, 4], h * 4, h);
        let dec2 = conv(&mut p, "dec2", [2 * h, c, 4, 4], 2 * h * 4, c);
        let action_affine = |p: &mut ParamStore<S>, prefix: &str| {
            [h, 2 * h].map(|width| {
                let stage = if width == h { 0 } else { 1 };
                let s = p.add(format!("{prefix}act{stage}.scale"), Tensor::ones(&[d.actions, width]));
                let t = p.add(format!("{prefix}act{stage}.shift"), Tensor::zeros(&[d.actions, width]));
                (s, t)
            })
        };
        let act = action_affine(&mut p, "");
        let reward_act = action_affine(&mut p, "reward.");
        let reward_dec1 = conv(&mut p, "reward.dec1", [h, h, 4, 4], h * 4, h);
        let reward_dec2 = conv(&mut p, "reward.dec2", [2 * h, c, 4, 4], 2 * h * 4, c);
        let sigma0 = if config.noise { config.sigma_init } else { 0.0 };
        let sigma_trainable = config.noise && config.train_sigma;
        let mut blocks = Vec::new();
        if config.evade_blocks {
            for block in ["a", "b"] {
                for (kind, m) in [
                    (LayerKind::Translation, config.translation_kernel),
                    (LayerKind::Weighting, 1),
                    (LayerKind::Interaction, config.interaction_kernel),
                ] {
                    let name = format!("reward.{block}.{}", kind.name());
                    let mask = structure_mask::<S>(kind, h, h, m)?;
                    let mut theta = Tensor::zeros(mask.shape());
                    for k in 0..h {
                        theta.set(&[k, k, m / 2, m / 2], S::one());
                    }
                    let sigma = mask.scale(S::lit(sigma0));
                    let t = p.push(Param {
                        name: format!("{name}.theta"),
                        value: theta,
                        mask: Some(mask.clone()),
                        role: ParamRole::Weight,
                        trainable: true,
                    });
                    let s = p.push(Param {
                        name: format!("{name}.sigma"),
                        value: sigma,
                        mask: Some(mask),
                        role: ParamRole::Sigma,
                        trainable: sigma_trainable,
                    });
                    blocks.push(NoisyGroup { name, kind: Some(kind), theta: t, sigma: s });
                }
            }
        }
        let head_sigma = p.push(Param {
            name: "reward.dec2.sigma".into(),
            value: Tensor::full(&[2 * h, c, 4, 4], S::lit(sigma0)),
            mask: None,
            role: ParamRole::Sigma,
            trainable: sigma_trainable,
        });
        let head = NoisyGroup { name: "reward.dec2".into(), kind: None, theta: reward_dec2.0, sigma: head_sigma };
        let flat = c * d.height * d.width + h * (d.height / 4) * (d.width / 4);
        let rh = config.reward_hidden;
        let fc1 = (p.add("reward.fc1.w", uniform_init(&[flat, rh], flat, rng)), p.add("reward.fc1.b", Tensor::zeros(&[rh])));
        let fc2 = (p.add("reward.fc2.w", uniform_init(&[rh, d.buckets], rh, rng)), p.add("reward.fc2.b", Tensor::zeros(&[d.buckets])));
        let optimizer = Adam::new(config.optimizer, &p);
        Ok(Self {
            config: config.clone(),
            dims: d,
            params: p,
            ids: Ids { enc1, enc2, dec1, dec2, act, reward_dec1, reward_dec2, reward_act, fc1, fc2 },
            blocks,
            head,
            optimizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
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

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_scalars()
    }

    /// Noisy groups in sample order: block banks, then the decoder head.
    pub fn noisy_groups(&self) -> impl Iterator<Item = &NoisyGroup> {
        self.blocks.iter().chain(std::iter::once(&self.head))
    }

    /// Names of layers whose activations can be inspected.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["enc1", "enc2", "dec1", "dec2"].iter().map(|s| s.to_string()).collect();
        names.extend(self.blocks.iter().map(|b| b.name.clone()));
        names.push(self.head.name.clone());
        names
    }

    /// The all-zero-noise sample: the mean reward model.
    pub fn mean_sample(&self) -> VariationalSample<S> {
        let eps = self.noisy_groups().map(|g| Tensor::zeros(self.params.get(g.theta).shape())).collect();
        VariationalSample::new(0, eps)
    }

    /// One joint noise draw for every reward-head group; the transition
    /// parameters are never perturbed.
    pub fn draw_reward_sample(&self, rng: &mut Rng) -> VariationalSample<S> {
        let id = rng.next_u64() | 1;
        let eps = self
            .noisy_groups()
            .map(|g| {
                let p = self.params.param(g.sigma);
                match &p.mask {
                    Some(mask) => masked_gaussian(mask, rng),
                    None => gaussian(rng, p.value.shape()),
                }
            })
            .collect();
        VariationalSample::new(id, eps)
    }

    fn check_sample(&self, sample: &VariationalSample<S>) -> Result<()> {
        let groups: Vec<&NoisyGroup> = self.noisy_groups().collect();
        if sample.epsilon().len() != groups.len() {
            return Err(Error::invalid(format!("sample has {} noise groups, model has {}", sample.epsilon().len(), groups.len())));
        }
        for (e, g) in sample.epsilon().iter().zip(groups) {
            self.params.get(g.theta).expect_same_shape(e, "sample")?;
        }
        Ok(())
    }

    /// Record the forward pass for `obs` (`[N, F*C, H, W]`).
    pub fn record<'a>(
        &'a self,
        tape: &mut GradTape<'a, S>,
        vars: &[Var],
        obs: Var,
        actions: &[usize],
        sample: &'a VariationalSample<S>,
    ) -> Result<Outputs> {
        self.check_sample(sample)?;
        let n = tape.shape(obs)[0];
        if actions.len() != n || actions.iter().any(|&a| a >= self.dims.actions) {
            return Err(Error::shape("world model", format!("{} actions for batch of {n}", actions.len())));
        }
        let [_, oh, ow] = self.dims.obs_shape();
        if tape.shape(obs)[1..] != self.dims.obs_shape() {
            return Err(Error::shape(
                "world model",
                format!("observation {:?}, expected [N,{:?}]", tape.shape(obs), [self.dims.obs_shape()[0], oh, ow]),
            ));
        }
        let v = |id: ParamId| vars[id.index()];
        let ids = &self.ids;
        let mut taps = Vec::new();

        let conv = |tape: &mut GradTape<'a, S>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let y = tape.conv2d(x, v(w), 2, Padding::Same)?;
            tape.add_channel_bias(y, v(b))
        };
        let deconv = |tape: &mut GradTape<'a, S>, x: Var, w: Var, b: ParamId| -> Result<Var> {
            let y = tape.conv_transpose2d(x, w, 2, 1)?;
            tape.add_channel_bias(y, v(b))
        };
        let affine = |tape: &mut GradTape<'a, S>, x: Var, (s, t): (ParamId, ParamId)| -> Result<Var> {
            let scale = tape.embed_rows(v(s), actions)?;
            let shift = tape.embed_rows(v(t), actions)?;
            tape.channel_affine(x, scale, shift)
        };

        let e1p = conv(tape, obs, ids.enc1)?;
        let e1 = tape.relu(e1p);
        taps.push(("enc1".to_string(), obs, e1));
        let e2p = conv(tape, e1, ids.enc2)?;
        let e2 = tape.relu(e2p);
        taps.push(("enc2".to_string(), e1, e2));

        // Frame path.
        let a0 = affine(tape, e2, ids.act[0])?;
        let t1p = deconv(tape, a0, v(ids.dec1.0), ids.dec1.1)?;
        let t1 = tape.relu(t1p);
        taps.push(("dec1".to_string(), a0, t1));
        let cat = tape.concat(t1, e1)?;
        let a1 = affine(tape, cat, ids.act[1])?;
        let frame_logits = deconv(tape, a1, v(ids.dec2.0), ids.dec2.1)?;
        taps.push(("dec2".to_string(), a1, frame_logits));

        // Reward path.
        let eps: Vec<Var> = sample.epsilon().iter().map(|e| tape.constant_ref(e)).collect();
        let per_block = self.blocks.len() / 2;
        let run_block = |tape: &mut GradTape<'a, S>, mut x: Var, range: std::ops::Range<usize>, taps: &mut Vec<_>| -> Result<Var> {
            for i in range {
                let g = &self.blocks[i];
                let kind = g.kind.expect("block groups have a kind");
                let y = record_layer(tape, kind, x, v(g.theta), v(g.sigma), eps[i])?;
                taps.push((g.name.clone(), x, y));
                x = y;
            }
            Ok(x)
        };
        let ra = run_block(tape, e2, 0..per_block, &mut taps)?;
        let ra = affine(tape, ra, ids.reward_act[0])?;
        let r1p = deconv(tape, ra, v(ids.reward_dec1.0), ids.reward_dec1.1)?;
        let r1 = tape.relu(r1p);
        let rb = run_block(tape, r1, per_block..2 * per_block, &mut taps)?;
        let rcat = tape.concat(rb, e1)?;
        let rcat = affine(tape, rcat, ids.reward_act[1])?;
        let head_eps = *eps.last().expect("head group");
        let noisy_w = tape.reparameterize(v(self.head.theta), v(self.head.sigma), head_eps)?;
        let r2 = deconv(tape, rcat, noisy_w, ids.reward_dec2.1)?;
        taps.push((self.head.name.clone(), rcat, r2));
        let r2 = tape.relu(r2);
        let r2f = tape.flatten(r2)?;
        let e2f = tape.flatten(e2)?;
        let feat = tape.concat(r2f, e2f)?;
        let h1 = tape.matmul(feat, v(ids.fc1.0))?;
        let h1 = tape.add_row_bias(h1, v(ids.fc1.1))?;
        let h1 = tape.relu(h1);
        let logits = tape.matmul(h1, v(ids.fc2.0))?;
        let reward_logits = tape.add_row_bias(logits, v(ids.fc2.1))?;
        Ok(Outputs { frame_logits, reward_logits, taps })
    }

    /// Batched prediction: `obs` `[N, F*C, H, W]` to next-frame logits
    /// `[N, C, H, W]` and reward logits `[N, buckets]`.
    pub fn predict_batch(&self, sample: &VariationalSample<S>, obs: &Tensor<S>, actions: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = GradTape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant_ref(obs);
        let out = self.record(&mut tape, &vars, x, actions, sample)?;
        Ok((tape.value(out.frame_logits).clone(), tape.value(out.reward_logits).clone()))
    }

    /// Single-transition prediction: `[C,H,W]` frame logits and `[buckets]`
    /// reward logits.
    pub fn predict(&self, sample: &VariationalSample<S>, obs_stack: &Tensor<S>, action: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs_stack.shape());
        let obs = obs_stack.clone().reshape(&shape)?;
        let (f, r) = self.predict_batch(sample, &obs, &[action])?;
        Ok((f.reshape(&self.dims.frame_shape())?, r.reshape(&[self.dims.buckets])?))
    }

    /// `(layer name, input, output)` activations of every named layer for
    /// one transition, each with a leading batch axis of one.
    pub fn layer_activations(&self, sample: &VariationalSample<S>, obs_stack: &Tensor<S>, action: usize) -> Result<Vec<LayerMaps<S>>> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs_stack.shape());
        let obs = obs_stack.clone().reshape(&shape)?;
        let mut tape = GradTape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant_ref(&obs);
        let out = self.record(&mut tape, &vars, x, &[action], sample)?;
        Ok(out.taps.iter().map(|(name, i, o)| (name.clone(), tape.value(*i).clone(), tape.value(*o).clone())).collect())
    }

    /// Perturbed parameters `theta * (1 + sigma * eps)` of the noisy group
    /// `name` under `sample`.
    pub fn perturbed(&self, name: &str, sample: &VariationalSample<S>) -> Result<Tensor<S>> {
        self.check_sample(sample)?;
        let (i, g) = self
            .noisy_groups()
            .enumerate()
            .find(|(_, g)| g.name == name)
            .ok_or_else(|| Error::invalid(format!("no noisy layer named {name}")))?;
        let (theta, sigma, eps) = (self.params.get(g.theta), self.params.get(g.sigma), &sample.epsilon()[i]);
        let data = theta.data().iter().zip(sigma.data()).zip(eps.data()).map(|((&t, &s), &e)| t * (S::one() + s * e)).collect();
        Tensor::new(theta.shape().to_vec(), data)
    }

    fn bind_constants<'a>(&'a self, tape: &mut GradTape<'a, S>) -> Vec<Var> {
        self.params.iter().map(|(_, p)| tape.constant_ref(&p.value)).collect()
    }

    /// Sampled negative log-likelihood: mean per-pixel BCE of the next frame
    /// plus `reward_loss_weight` times the reward cross-entropy. Returns
    /// `(total, frame, reward)`.
    pub fn record_loss<'a>(
        &'a self,
        tape: &mut GradTape<'a, S>,
        vars: &[Var],
        batch: &'a Batch<S>,
        sample: &'a VariationalSample<S>,
    ) -> Result<(Var, Var, Var)> {
        let obs = tape.constant_ref(&batch.obs);
        let out = self.record(tape, vars, obs, &batch.actions, sample)?;
        let target = tape.constant_ref(&batch.next);
        let frame = tape.bce_with_logits_mean(out.frame_logits, target)?;
        let reward = tape.softmax_cross_entropy_mean(out.reward_logits, &batch.reward_classes)?;
        let weighted = tape.scale(reward, S::lit(self.config.reward_loss_weight));
        let total = tape.add(frame, weighted)?;
        Ok((total, frame, reward))
    }

    /// One optimizer step on `batch` under `sample`; returns the loss.
    pub fn train_step(&mut self, batch: &Batch<S>, sample: &VariationalSample<S>) -> Result<f64> {
        let (loss, vars, grads) = {
            let mut tape = GradTape::new();
            let vars = self.params.bind(&mut tape);
            let (loss, _, _) = self.record_loss(&mut tape, &vars, batch, sample)?;
            let value = tape.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("world-model loss is {value}")));
            }
            (value, vars, tape.backward(loss)?)
        };
        self.optimizer.step(&mut self.params, &vars, &grads)?;
        Ok(loss)
    }

    /// Mean-model metrics over `records`.
    pub fn evaluate(&self, records: &[TransitionRecord<S>]) -> Result<EvalMetrics> {
        if records.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty record set"));
        }
        let mean = self.mean_sample();
        let (mut nll, mut frame_hits, mut frame_total, mut reward_hits) = (0.0, 0usize, 0usize, 0usize);
        for chunk in records.chunks(64) {
            let refs: Vec<&TransitionRecord<S>> = chunk.iter().collect();
            let batch = batch_of(&refs)?;
            let mut tape = GradTape::new();
            let vars = self.bind_constants(&mut tape);
            let obs = tape.constant_ref(&batch.obs);
            let out = self.record(&mut tape, &vars, obs, &batch.actions, &mean)?;
            let target = tape.constant_ref(&batch.next);
            let frame = tape.bce_with_logits_mean(out.frame_logits, target)?;
            let reward = tape.softmax_cross_entropy_mean(out.reward_logits, &batch.reward_classes)?;
            let n = chunk.len() as f64;
            nll += n * (tape.value(frame).item()?.as_f64() + self.config.reward_loss_weight * tape.value(reward).item()?.as_f64());
            for (&logit, &t) in tape.value(out.frame_logits).data().iter().zip(batch.next.data()) {
                frame_hits += usize::from((logit > S::zero()) == (t > S::lit(0.5)));
            }
            frame_total += batch.next.len();
            let k = self.dims.buckets;
            for (row, &label) in tape.value(out.reward_logits).data().chunks(k).zip(&batch.reward_classes) {
                reward_hits += usize::from(crate::tensor::argmax(row) == label);
            }
        }
        let n = records.len() as f64;
        Ok(EvalMetrics { nll: nll / n, frame_accuracy: frame_hits as f64 / frame_total as f64, reward_accuracy: reward_hits as f64 / n })
    }
}

/// Fit the model for `steps` minibatch updates. Minibatches are drawn
/// uniformly with replacement; when noise is on, one fresh reward-head noise
/// draw is used per minibatch. Batch indices and noise come from separate
/// child streams of `rng`. Returns the per-step loss.
pub fn train_model<S: Scalar>(model: &mut WorldModel<S>, dataset: &Dataset<S>, steps: usize, rng: &Rng) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut batch_rng = rng.named("batches", 0);
    let mut noise_rng = rng.named("noise", 0);
    let mean = model.mean_sample();
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..model.config.batch_size).map(|_| batch_rng.below(dataset.len())).collect();
        let batch = dataset.batch(&idx)?;
        let loss = if model.config.noise {
            let sample = model.draw_reward_sample(&mut noise_rng);
            model.train_step(&batch, &sample)?
        } else {
            model.train_step(&batch, &mean)?
        };
        curve.push(loss);
    }
    Ok(curve)
}
