//! Built-in numerical self-checks: identity configurations of the noisy
//! layers and finite-difference gradient checks of every differentiable
//! component, in double precision.

use std::fmt;

use crate::agent::{record_policy_loss, PolicyBatch, PolicyConfig, PolicyNet};
use crate::conv::Padding;
use crate::env::EnvSpec;
use crate::error::Result;
use crate::evade::{masked_gaussian, record_layer, LayerKind, NoisyFilterBank};
use crate::gradcheck::grad_check;
use crate::params::ParamStore;
use crate::rng::{gaussian, Rng};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use crate::world_model::{batch_of, ModelConfig, TransitionRecord, WorldModel};

/// Tolerance of the gradient checks (max relative error).
pub const GRAD_TOL: f64 = 1e-6;
/// Tolerance of the world-model identity-insertion check (relative).
pub const INSERTION_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    /// The measured error (or mismatch count) compared against the bound.
    pub value: f64,
    pub pass: bool,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}  {}  {:.3e}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.value)
    }
}

fn line(name: impl Into<String>, value: f64, pass: bool) -> CheckLine {
    CheckLine { name: name.into(), value, pass }
}

/// Kernel sizes exercised for each layer kind.
pub fn kernel_sizes(kind: LayerKind) -> &'static [usize] {
    match kind {
        LayerKind::Weighting => &[1],
        _ => &[1, 3, 5],
    }
}

/// For every kind, `c` in 1..=8 and each kernel size, an identity bank must
/// return its input bit-for-bit (under both the mean sample and a noise
/// draw). Then identity blocks inserted into the world model must leave the
/// reward logits unchanged.
pub fn identity_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = Rng::new(seed);
    let mut lines = Vec::new();
    for kind in LayerKind::ALL {
        let mut mismatches = 0usize;
        let mut configs = 0usize;
        for c in 1..=8 {
            for &m in kernel_sizes(kind) {
                let bank = NoisyFilterBank::<f64>::identity(kind, c, m)?;
                let x: Tensor<f64> = gaussian(&mut rng, &[2, c, 5, 6]);
                for sample in [bank.mean_sample(), bank.draw_epsilon(&mut rng)] {
                    configs += 1;
                    if bank.forward(&x, &sample)? != x {
                        mismatches += 1;
                    }
                }
            }
        }
        lines.push(line(format!("identity {} ({configs} configs)", kind.name()), mismatches as f64, mismatches == 0));
    }
    let err = insertion_error(&mut rng)?;
    lines.push(line("identity blocks inside world model", err, err <= INSERTION_TOL));
    Ok(lines)
}

/// Largest relative difference between the reward logits of a world model
/// with identity-configured noisy blocks and the same model without them.
pub fn insertion_error(rng: &mut Rng) -> Result<f64> {
    let spec = EnvSpec::default();
    let seed = rng.next_u64();
    let with = ModelConfig { noise: false, ..ModelConfig::default() };
    let without = ModelConfig { evade_blocks: false, ..with.clone() };
    let a = WorldModel::<f64>::new(&spec, &with, &mut Rng::new(seed))?;
    let b = WorldModel::<f64>::new(&spec, &without, &mut Rng::new(seed))?;
    let obs: Tensor<f64> = gaussian(rng, &[3, spec.frames * spec.channels(), spec.height(), spec.width()]);
    let actions = [0, 2, 4];
    let (_, ra) = a.predict_batch(&a.mean_sample(), &obs, &actions)?;
    let (_, rb) = b.predict_batch(&b.mean_sample(), &obs, &actions)?;
    Ok(ra.data().iter().zip(rb.data()).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max))
}

fn weighted_sum<'a>(tape: &mut GradTape<'a, f64>, y: Var, r: &'a Tensor<f64>) -> Result<Var> {
    let r = tape.constant_ref(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Finite-difference gradient checks for convolution, every noisy layer
/// (weights and dropout scales with the noise frozen), the world-model loss
/// and the policy objective.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = Rng::new(seed);
    let mut lines = Vec::new();
    let mut push = |name: String, err: f64| lines.push(line(name, err, err < GRAD_TOL));

    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        let x: Tensor<f64> = gaussian(&mut rng, &[2, 3, 6, 6]);
        let w: Tensor<f64> = gaussian(&mut rng, &[4, 3, 3, 3]);
        let out = crate::conv::conv2d(&x, &w, stride, padding)?;
        let r: Tensor<f64> = gaussian(&mut rng, out.shape());
        let ex = grad_check(
            |t, v| {
                let wv = t.constant_ref(&w);
                let y = t.conv2d(v, wv, stride, padding)?;
                weighted_sum(t, y, &r)
            },
            &x,
            FD_STEP,
        )?;
        let ew = grad_check(
            |t, v| {
                let xv = t.constant_ref(&x);
                let y = t.conv2d(xv, v, stride, padding)?;
                weighted_sum(t, y, &r)
            },
            &w,
            FD_STEP,
        )?;
        push(format!("conv2d stride {stride} {padding:?}"), ex.max(ew));
    }

    let x: Tensor<f64> = gaussian(&mut rng, &[2, 3, 3, 3]);
    let w: Tensor<f64> = gaussian(&mut rng, &[3, 2, 4, 4]);
    let r: Tensor<f64> = gaussian(&mut rng, &[2, 2, 6, 6]);
    let ex = grad_check(
        |t, v| {
            let wv = t.constant_ref(&w);
            let y = t.conv_transpose2d(v, wv, 2, 1)?;
            weighted_sum(t, y, &r)
        },
        &x,
        FD_STEP,
    )?;
    let ew = grad_check(
        |t, v| {
            let xv = t.constant_ref(&x);
            let y = t.conv_transpose2d(xv, v, 2, 1)?;
            weighted_sum(t, y, &r)
        },
        &w,
        FD_STEP,
    )?;
    push("conv_transpose2d stride 2".into(), ex.max(ew));

    for kind in LayerKind::ALL {
        for &m in kernel_sizes(kind) {
            let c = 3;
            let bank = NoisyFilterBank::<f64>::random(kind, c, c, m, 0.3, &mut rng)?;
            let eps = masked_gaussian(bank.mask(), &mut rng);
            let x: Tensor<f64> = gaussian(&mut rng, &[2, c, 5, 5]);
            let r: Tensor<f64> = gaussian(&mut rng, &[2, c, 5, 5]);
            let (theta, sigma) = (bank.theta(), bank.sigma());
            let et = grad_check(
                |t, v| {
                    let (xv, sv, ev) = (t.constant_ref(&x), t.constant_ref(sigma), t.constant_ref(&eps));
                    let y = record_layer(t, kind, xv, v, sv, ev)?;
                    weighted_sum(t, y, &r)
                },
                theta,
                FD_STEP,
            )?;
            let es = grad_check(
                |t, v| {
                    let (xv, tv, ev) = (t.constant_ref(&x), t.constant_ref(theta), t.constant_ref(&eps));
                    let y = record_layer(t, kind, xv, tv, v, ev)?;
                    weighted_sum(t, y, &r)
                },
                sigma,
                FD_STEP,
            )?;
            let ex = grad_check(
                |t, v| {
                    let (tv, sv, ev) = (t.constant_ref(theta), t.constant_ref(sigma), t.constant_ref(&eps));
                    let y = record_layer(t, kind, v, tv, sv, ev)?;
                    weighted_sum(t, y, &r)
                },
                &x,
                FD_STEP,
            )?;
            push(format!("{} m={m} theta", kind.name()), et);
            push(format!("{} m={m} sigma", kind.name()), es);
            push(format!("{} m={m} input", kind.name()), ex);
        }
    }

    push("world-model loss".into(), model_loss_error(&mut rng)?);
    push("policy objective".into(), policy_loss_error(&mut rng)?);
    Ok(lines)
}

/// Shift every parameter by a small random amount so no ReLU input sits
/// exactly on zero.
fn jitter(store: &mut ParamStore<f64>, rng: &mut Rng) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let old = store.get(id).clone();
        let new = Tensor::from_fn(old.shape(), |i| old.data()[i] + 0.05 * (rng.uniform() - 0.5));
        store.set(id, new)?;
    }
    Ok(())
}

fn binary(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 })
}

/// Worst gradient error of the sampled world-model loss over all
/// parameters, with the noise sample frozen.
pub fn model_loss_error(rng: &mut Rng) -> Result<f64> {
    let spec = EnvSpec::default();
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 6, ..ModelConfig::default() };
    let mut model = WorldModel::<f64>::new(&spec, &config, rng)?;
    jitter(model.params_mut(), rng)?;
    let obs_c = spec.frames * spec.channels();
    let records: Vec<TransitionRecord<f64>> = (0..3)
        .map(|i| TransitionRecord {
            obs_stack: binary(rng, &[obs_c, spec.height(), spec.width()]),
            action: i % spec.actions(),
            reward_class: (2 * i + 1) % spec.reward_buckets.len(),
            next_frame: binary(rng, &[spec.channels(), spec.height(), spec.width()]),
        })
        .collect();
    let batch = batch_of(&records.iter().collect::<Vec<_>>())?;
    let sample = model.draw_reward_sample(rng);
    let mut worst = 0.0f64;
    for (id, p) in model.params().iter() {
        let err = grad_check(
            |tape, leaf| {
                let vars: Vec<Var> = model.params().iter().map(|(j, q)| if j == id { leaf } else { tape.constant_ref(&q.value) }).collect();
                Ok(model.record_loss(tape, &vars, &batch, &sample)?.0)
            },
            &p.value,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst gradient error of the clipped policy objective over all policy
/// parameters.
pub fn policy_loss_error(rng: &mut Rng) -> Result<f64> {
    let config = PolicyConfig { hidden_channels: 3, hidden_units: 5, ..PolicyConfig::default() };
    let mut policy = PolicyNet::<f64>::new([4, 4, 4], 5, &config, rng)?;
    jitter(policy.params_mut(), rng)?;
    let n = 4;
    let obs = binary(rng, &[n, 4, 4, 4]);
    let (logp, _) = policy.evaluate(&obs)?;
    let actions: Vec<usize> = (0..n).map(|i| (3 * i + 1) % 5).collect();
    // Old log-probabilities close to the current ones keep most ratios
    // inside the clip range and some outside.
    let old = Tensor::from_fn(&[n], |i| logp.data()[i * 5 + actions[i]] + [0.05, -0.4, 0.1, 0.5][i % 4]);
    let batch = PolicyBatch { obs, actions, old_logp: old, advantages: gaussian(rng, &[n]), returns: gaussian(rng, &[n]) };
    let mut worst = 0.0f64;
    for (id, p) in policy.params().iter() {
        let err = grad_check(
            |tape, leaf| {
                let vars: Vec<Var> =
                    policy.params().iter().map(|(j, q)| if j == id { leaf } else { tape.constant_ref(&q.value) }).collect();
                record_policy_loss(&policy, tape, &vars, &batch, &config)
            },
            &p.value,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
