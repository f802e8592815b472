//! Independent brute-force references shared by the integration tests.

#![allow(dead_code)]

use evade_core::{LayerKind, Padding, Rng, Scalar, Tensor};

/// Direct-sum 2-D cross-correlation of one `[c_in,h,w]` image with
/// `[c_out,c_in,k,k]` filters; taps outside the image read zero.
pub fn conv_oracle(x: &[f64], xs: [usize; 3], f: &[f64], fs: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 3]) {
    let [c_in, h, w] = xs;
    let [c_out, c_in2, k, k2] = fs;
    assert_eq!(c_in, c_in2);
    assert_eq!(k, k2);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for r in 0..k {
                        for s in 0..k {
                            let yy = (i * stride + r) as isize - pad as isize;
                            let xx = (j * stride + s) as isize - pad as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + yy as usize) * w + xx as usize] * f[((o * c_in + c) * k + r) * k + s];
                        }
                    }
                }
                y[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    (y, [c_out, oh, ow])
}

/// Reference of a noisy layer with perturbed weights `tilde` (`[c_out,c_in,m,m]`):
/// interaction is a full SAME convolution, translation sums each channel's
/// own cross-shaped taps, weighting scales each channel by its own factor.
pub fn evade_oracle(kind: LayerKind, x: &[f64], xs: [usize; 3], tilde: &[f64], ts: [usize; 4]) -> Vec<f64> {
    let [c, h, w] = xs;
    let [_, c_in, m, _] = ts;
    let mid = m / 2;
    match kind {
        LayerKind::Interaction => conv_oracle(x, xs, tilde, ts, 1, mid).0,
        LayerKind::Weighting => (0..c * h * w).map(|i| x[i] * tilde[(i / (h * w)) * c_in + i / (h * w)]).collect(),
        LayerKind::Translation => {
            let mut y = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for r in 0..m {
                            for s in 0..m {
                                if r != mid && s != mid {
                                    continue;
                                }
                                let yy = i as isize + r as isize - mid as isize;
                                let xx = j as isize + s as isize - mid as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[(ch * h + yy as usize) * w + xx as usize] * tilde[((ch * c_in + ch) * m + r) * m + s];
                            }
                        }
                        y[(ch * h + i) * w + j] = acc;
                    }
                }
            }
            y
        }
    }
}

/// Largest `|got - want| / max(1, |want|)` over all elements.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| (g - w).abs() / w.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn random_tensor<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.uniform_range(-1.0, 1.0)))
}

pub fn to_f64<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn padding_amount(padding: Padding, k: usize) -> usize {
    match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    }
}

/// Worst relative errors of one randomized instance family.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleStats {
    pub instances: usize,
    pub worst_single: f64,
    pub worst_double: f64,
}

impl OracleStats {
    fn record(&mut self, single: f64, double: f64) {
        self.instances += 1;
        self.worst_single = self.worst_single.max(single);
        self.worst_double = self.worst_double.max(double);
    }
}

fn conv_instance<S: Scalar>(x: &Tensor<f64>, f: &Tensor<f64>, stride: usize, padding: Padding) -> Vec<f64> {
    let xs = x.cast::<S>();
    let fs = f.cast::<S>();
    to_f64(&evade_core::conv2d(&xs, &fs, stride, padding).unwrap())
}

/// `n` random conv2d instances (varied channels, sizes, kernels, strides and
/// paddings) compared against [`conv_oracle`] in both precisions.
pub fn conv_oracle_suite(n: usize, seed: u64) -> OracleStats {
    let mut rng = Rng::new(seed);
    let mut stats = OracleStats::default();
    for _ in 0..n {
        let c_in = 1 + rng.below(4);
        let c_out = 1 + rng.below(4);
        let k = [1, 3, 5][rng.below(3)];
        let padding = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
        let stride = 1 + rng.below(2);
        let h = k + rng.below(6);
        let w = k + rng.below(6);
        let x = random_tensor::<f64>(&[c_in, h, w], &mut rng);
        let f = random_tensor::<f64>(&[c_out, c_in, k, k], &mut rng);
        let pad = padding_amount(padding, k);
        let (want, _) = conv_oracle(x.data(), [c_in, h, w], f.data(), [c_out, c_in, k, k], stride, pad);
        let single = max_rel_err(&conv_instance::<f32>(&x, &f, stride, padding), &want);
        let double = max_rel_err(&conv_instance::<f64>(&x, &f, stride, padding), &want);
        stats.record(single, double);
    }
    stats
}

fn evade_instance<S: Scalar>(kind: LayerKind, x: &Tensor<f64>, theta: &Tensor<f64>, sigma: &Tensor<f64>, eps: &Tensor<f64>) -> Vec<f64> {
    let bank = evade_core::NoisyFilterBank::from_parts(kind, theta.cast::<S>(), sigma.cast::<S>()).unwrap();
    let sample = evade_core::VariationalSample::new(1, vec![eps.cast::<S>()]);
    let y = match kind {
        LayerKind::Interaction => evade_core::interaction_forward(&x.cast::<S>(), &bank, &sample),
        LayerKind::Weighting => evade_core::weighting_forward(&x.cast::<S>(), &bank, &sample),
        LayerKind::Translation => evade_core::translation_forward(&x.cast::<S>(), &bank, &sample),
    };
    to_f64(&y.unwrap())
}

/// `n` random instances per layer kind, with the perturbed weights
/// `theta * (1 + sigma * eps)` formed here and the structure applied by
/// [`evade_oracle`].
pub fn evade_oracle_suite(kind: LayerKind, n: usize, seed: u64) -> OracleStats {
    let mut rng = Rng::new(seed);
    let mut stats = OracleStats::default();
    for _ in 0..n {
        let c = 1 + rng.below(5);
        let m = if kind == LayerKind::Weighting { 1 } else { [1, 3, 5][rng.below(3)] };
        let (h, w) = (1 + rng.below(7), 1 + rng.below(7));
        let c_out = if kind == LayerKind::Interaction { 1 + rng.below(5) } else { c };
        let mask = evade_core::evade::structure_mask::<f64>(kind, c, c_out, m).unwrap();
        let masked = |rng: &mut Rng, lo: f64, hi: f64| Tensor::from_fn(mask.shape(), |i| mask.data()[i] * rng.uniform_range(lo, hi));
        let theta = masked(&mut rng, -1.0, 1.0);
        let sigma = masked(&mut rng, 0.0, 0.5);
        let eps = Tensor::from_fn(mask.shape(), |i| mask.data()[i] * rng.normal());
        let tilde: Vec<f64> = (0..theta.len()).map(|i| theta.data()[i] * (1.0 + sigma.data()[i] * eps.data()[i])).collect();
        let x = random_tensor::<f64>(&[c, h, w], &mut rng);
        let want = evade_oracle(kind, x.data(), [c, h, w], &tilde, [c_out, c, m, m]);
        let single = max_rel_err(&evade_instance::<f32>(kind, &x, &theta, &sigma, &eps), &want);
        let double = max_rel_err(&evade_instance::<f64>(kind, &x, &theta, &sigma, &eps), &want);
        stats.record(single, double);
    }
    stats
}

/// A run small enough to finish in seconds.
pub fn tiny_config(seed: u64) -> evade_core::config::RunConfig {
    let mut c = evade_core::config::RunConfig { seed, ..Default::default() };
    c.schedule.iterations = 3;
    c.schedule.real_steps = 40;
    c.schedule.sim_steps = 120;
    c.schedule.model_steps_first = 30;
    c.schedule.model_steps_rest = 15;
    c.schedule.update_frequency = 60;
    c.schedule.eval_episodes = 2;
    c.model.hidden_channels = 4;
    c.model.reward_hidden = 8;
    c.policy.hidden_channels = 4;
    c.policy.hidden_units = 8;
    c
}

/// Report rows with wall-clock time removed.
pub fn timeless(rows: &[evade_core::psrl::IterationRow]) -> Vec<evade_core::psrl::IterationRow> {
    rows.iter().map(|r| evade_core::psrl::IterationRow { seconds: 0.0, ..r.clone() }).collect()
}

/// Worst per-element deviations of perturbed weights from their
/// distribution: relative error of the sample std against `|theta * sigma|`
/// and the sample-mean offset from `theta` in standard errors.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationStats {
    pub draws: usize,
    pub worst_std_rel: f64,
    pub worst_mean_z: f64,
}

pub fn perturbation_statistics(draws: usize, seed: u64) -> PerturbationStats {
    let mut rng = Rng::new(seed);
    let bank = evade_core::NoisyFilterBank::<f64>::random(LayerKind::Interaction, 2, 2, 3, 0.4, &mut rng).unwrap();
    let n = bank.theta().len();
    let (mut sum, mut sum_sq) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        let tilde = bank.theta_tilde(&bank.draw_epsilon(&mut rng)).unwrap();
        for (i, &v) in tilde.data().iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let mut stats = PerturbationStats { draws, worst_std_rel: 0.0, worst_mean_z: 0.0 };
    for i in 0..n {
        let theta = bank.theta().data()[i];
        let spread = (theta * bank.sigma().data()[i]).abs();
        assert!(spread > 0.0);
        let mean = sum[i] / draws as f64;
        let std = (sum_sq[i] / draws as f64 - mean * mean).max(0.0).sqrt();
        stats.worst_std_rel = stats.worst_std_rel.max((std - spread).abs() / spread);
        stats.worst_mean_z = stats.worst_mean_z.max((mean - theta).abs() / (spread / (draws as f64).sqrt()));
    }
    stats
}
