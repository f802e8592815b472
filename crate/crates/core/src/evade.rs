//! Noisy event layers: structured convolutions whose weights are perturbed by
//! Gaussian multiplicative noise, `theta * (1 + sigma * eps)`.
//!
//! * **Interaction**: a full `m x m` convolution mixing all input channels.
//! * **Weighting**: `c` one-by-one filters where filter `k` only sees channel
//!   `k`, i.e. a per-channel noisy scale.
//! * **Translation**: filter `k` only sees channel `k`, and within that
//!   channel only the middle row and middle column are non-zero, giving a
//!   noisy shift of up to `(m - 1) / 2` pixels.
//!
//! All three are stride-1, SAME-padded and shape-preserving, and each can be
//! configured as an exact identity ([`NoisyFilterBank::identity`]).

use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Interaction,
    Weighting,
    Translation,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Interaction, LayerKind::Weighting, LayerKind::Translation];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Interaction => "interaction",
            LayerKind::Weighting => "weighting",
            LayerKind::Translation => "translation",
        }
    }
}

/// Binary structure mask `[c_out, c_in, m, m]` for a layer kind.
pub fn structure_mask<S: Scalar>(kind: LayerKind, c_in: usize, c_out: usize, m: usize) -> Result<Tensor<S>> {
    check_kernel(kind, m)?;
    if c_in == 0 || c_out == 0 {
        return Err(Error::invalid("noisy layer needs at least one channel"));
    }
    if kind != LayerKind::Interaction && c_in != c_out {
        return Err(Error::invalid(format!("{} layer must have c_in == c_out", kind.name())));
    }
    let mid = m / 2;
    Ok(Tensor::from_fn(&[c_out, c_in, m, m], |i| {
        let j = i % m;
        let r = (i / m) % m;
        let l = (i / (m * m)) % c_in;
        let k = i / (m * m * c_in);
        let on = match kind {
            LayerKind::Interaction => true,
            LayerKind::Weighting => k == l,
            LayerKind::Translation => k == l && (r == mid || j == mid),
        };
        if on {
            S::one()
        } else {
            S::zero()
        }
    }))
}

fn check_kernel(kind: LayerKind, m: usize) -> Result<()> {
    if m.is_multiple_of(2) {
        return Err(Error::invalid(format!("{} layer needs an odd kernel size, got {m}", kind.name())));
    }
    if kind == LayerKind::Weighting && m != 1 {
        return Err(Error::invalid(format!("weighting layer is 1x1, got m = {m}")));
    }
    Ok(())
}

/// Mean parameters, dropout scales and structure mask of one noisy layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyFilterBank<S = f32> {
    kind: LayerKind,
    m: usize,
    theta: Tensor<S>,
    sigma: Tensor<S>,
    mask: Tensor<S>,
}

impl<S: Scalar> NoisyFilterBank<S> {
    /// Bank from explicit parameters; validates the structure invariants.
    pub fn from_parts(kind: LayerKind, theta: Tensor<S>, sigma: Tensor<S>) -> Result<Self> {
        let [c_out, c_in, m, m2] = match *theta.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("NoisyFilterBank", format!("theta must be [c_out,c,m,m], got {:?}", theta.shape()))),
        };
        if m != m2 {
            return Err(Error::shape("NoisyFilterBank", "non-square kernel"));
        }
        theta.expect_same_shape(&sigma, "NoisyFilterBank")?;
        let mask = structure_mask(kind, c_in, c_out, m)?;
        if sigma.data().iter().any(|&s| s < S::zero()) {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        for ((&t, &s), &k) in theta.data().iter().zip(sigma.data()).zip(mask.data()) {
            if k == S::zero() && (t != S::zero() || s != S::zero()) {
                return Err(Error::invalid(format!("{} bank has a non-zero entry outside its mask", kind.name())));
            }
        }
        Ok(Self { kind, m, theta, sigma, mask })
    }

    /// Identity configuration: a single 1 at the centre of channel `k` of
    /// filter `k`, every other weight and every sigma zero.
    pub fn identity(kind: LayerKind, c: usize, m: usize) -> Result<Self> {
        let mask = structure_mask::<S>(kind, c, c, m)?;
        let mut theta = Tensor::zeros(mask.shape());
        for k in 0..c {
            theta.set(&[k, k, m / 2, m / 2], S::one());
        }
        let sigma = Tensor::zeros(mask.shape());
        Ok(Self { kind, m, theta, sigma, mask })
    }

    /// Masked weights drawn uniformly from `[-bound, bound]`, with `sigma` on
    /// every masked-in entry. Interaction banks may have `c_out != c_in`.
    pub fn random(kind: LayerKind, c_in: usize, c_out: usize, m: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        let mask = structure_mask::<S>(kind, c_in, c_out, m)?;
        let bound = (3.0 / (c_in * m * m) as f64).sqrt();
        let theta =
            Tensor::from_fn(
                mask.shape(),
                |i| {
                    if mask.data()[i] > S::zero() {
                        S::lit(rng.uniform_range(-bound, bound))
                    } else {
                        S::zero()
                    }
                },
            );
        let mut bank = Self { kind, m, sigma: Tensor::zeros(mask.shape()), theta, mask };
        bank.set_sigma(sigma)?;
        Ok(bank)
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn kernel_size(&self) -> usize {
        self.m
    }

    pub fn in_channels(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn theta(&self) -> &Tensor<S> {
        &self.theta
    }

    pub fn sigma(&self) -> &Tensor<S> {
        &self.sigma
    }

    pub fn mask(&self) -> &Tensor<S> {
        &self.mask
    }

    /// Number of trainable mean parameters (equal to the number of trainable
    /// dropout scales).
    pub fn trainable_count(&self) -> usize {
        self.mask.data().iter().filter(|&&k| k > S::zero()).count()
    }

    /// Set every masked-in sigma to `value`.
    pub fn set_sigma(&mut self, value: f64) -> Result<()> {
        if value < 0.0 {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        self.sigma = self.mask.map(|k| k * S::lit(value));
        Ok(())
    }

    pub fn set_theta(&mut self, theta: Tensor<S>) -> Result<()> {
        let bank = Self::from_parts(self.kind, theta, self.sigma.clone())?;
        self.theta = bank.theta;
        Ok(())
    }

    /// One frozen noise draw for this bank.
    pub fn draw_epsilon(&self, rng: &mut Rng) -> VariationalSample<S> {
        let id = rng.next_u64();
        VariationalSample { id, epsilon: vec![masked_gaussian(&self.mask, rng)] }
    }

    /// The noiseless sample (all `eps = 0`), i.e. the mean model.
    pub fn mean_sample(&self) -> VariationalSample<S> {
        VariationalSample { id: 0, epsilon: vec![Tensor::zeros(self.mask.shape())] }
    }

    pub fn theta_tilde(&self, sample: &VariationalSample<S>) -> Result<Tensor<S>> {
        reparameterize(&self.theta, &self.sigma, sample.single()?)
    }

    /// Apply the layer to `[c,H,W]` or `[N,c,H,W]` input.
    pub fn forward(&self, x: &Tensor<S>, sample: &VariationalSample<S>) -> Result<Tensor<S>> {
        let eps = sample.single()?;
        let batched = x.ndim() == 3;
        let x4 = if batched {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        } else {
            x.clone()
        };
        let mut tape = GradTape::new();
        let xv = tape.constant(x4);
        let tv = tape.constant_ref(&self.theta);
        let sv = tape.constant_ref(&self.sigma);
        let ev = tape.constant_ref(eps);
        let y = record_layer(&mut tape, self.kind, xv, tv, sv, ev)?;
        let out = tape.value(y).clone();
        if batched {
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        } else {
            Ok(out)
        }
    }
}

/// `eps ~ N(0,1)` on masked-in entries, zero elsewhere. Draws are consumed in
/// row-major order of the masked-in entries only.
pub fn masked_gaussian<S: Scalar>(mask: &Tensor<S>, rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(mask.shape(), |i| if mask.data()[i] > S::zero() { S::lit(rng.normal()) } else { S::zero() })
}

/// One frozen draw of noise for one or more noisy parameter groups.
///
/// A sample is immutable: every forward pass through it sees the same
/// perturbed weights. `id` distinguishes draws (the mean sample has id 0).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalSample<S = f32> {
    id: u64,
    epsilon: Vec<Tensor<S>>,
}

impl<S: Scalar> VariationalSample<S> {
    pub fn new(id: u64, epsilon: Vec<Tensor<S>>) -> Self {
        Self { id, epsilon }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn epsilon(&self) -> &[Tensor<S>] {
        &self.epsilon
    }

    fn single(&self) -> Result<&Tensor<S>> {
        match self.epsilon.as_slice() {
            [e] => Ok(e),
            other => Err(Error::invalid(format!("expected a single-bank sample, got {} groups", other.len()))),
        }
    }
}

/// `theta * (1 + sigma * eps)` elementwise.
pub fn reparameterize<S: Scalar>(theta: &Tensor<S>, sigma: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    theta.expect_same_shape(sigma, "reparameterize")?;
    theta.expect_same_shape(eps, "reparameterize")?;
    if sigma.data().iter().any(|&s| s < S::zero()) {
        return Err(Error::invalid("sigma must be non-negative"));
    }
    let mut tape = GradTape::new();
    let (t, s, e) = (tape.constant_ref(theta), tape.constant_ref(sigma), tape.constant_ref(eps));
    let out = tape.reparameterize(t, s, e)?;
    Ok(tape.value(out).clone())
}

/// Record a noisy layer on `tape`: reparameterize, then apply the kind's
/// structured operator to `x` (`[N,c,H,W]`).
pub fn record_layer<S: Scalar>(tape: &mut GradTape<'_, S>, kind: LayerKind, x: Var, theta: Var, sigma: Var, eps: Var) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    let ci = tape.shape(theta).get(1).copied().unwrap_or(0);
    if c != ci {
        return Err(Error::shape("noisy layer", format!("{} layer expects {ci} channels, input has {c}", kind.name())));
    }
    let m = tape.shape(theta)[2];
    check_kernel(kind, m)?;
    let tilde = tape.reparameterize(theta, sigma, eps)?;
    record_structured(tape, kind, x, tilde)
}

/// Apply already-perturbed weights `tilde` with the kind's structure.
pub fn record_structured<S: Scalar>(tape: &mut GradTape<'_, S>, kind: LayerKind, x: Var, tilde: Var) -> Result<Var> {
    match kind {
        LayerKind::Interaction => tape.conv2d(x, tilde, 1, Padding::Same),
        LayerKind::Weighting => {
            let diag = tape.diagonal_filters(tilde)?;
            let c = tape.shape(diag)[0];
            let scales = tape.reshape(diag, &[c])?;
            tape.scale_channels(x, scales)
        }
        LayerKind::Translation => {
            let diag = tape.diagonal_filters(tilde)?;
            tape.depthwise_conv(x, diag)
        }
    }
}

fn expect_kind<S: Scalar>(bank: &NoisyFilterBank<S>, kind: LayerKind) -> Result<()> {
    if bank.kind != kind {
        return Err(Error::invalid(format!("expected a {} bank, got {}", kind.name(), bank.kind.name())));
    }
    Ok(())
}

pub fn interaction_forward<S: Scalar>(x: &Tensor<S>, bank: &NoisyFilterBank<S>, sample: &VariationalSample<S>) -> Result<Tensor<S>> {
    expect_kind(bank, LayerKind::Interaction)?;
    bank.forward(x, sample)
}

pub fn weighting_forward<S: Scalar>(x: &Tensor<S>, bank: &NoisyFilterBank<S>, sample: &VariationalSample<S>) -> Result<Tensor<S>> {
    expect_kind(bank, LayerKind::Weighting)?;
    bank.forward(x, sample)
}

pub fn translation_forward<S: Scalar>(x: &Tensor<S>, bank: &NoisyFilterBank<S>, sample: &VariationalSample<S>) -> Result<Tensor<S>> {
    expect_kind(bank, LayerKind::Translation)?;
    bank.forward(x, sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    #[test]
    fn mask_counts() {
        let w = structure_mask::<f32>(LayerKind::Weighting, 5, 5, 1).unwrap();
        assert_eq!(w.sum(), 5.0);
        let t = structure_mask::<f32>(LayerKind::Translation, 3, 3, 5).unwrap();
        assert_eq!(t.sum(), (3 * (2 * 5 - 1)) as f32);
        let i = structure_mask::<f32>(LayerKind::Interaction, 3, 4, 3).unwrap();
        assert_eq!(i.sum(), (4 * 3 * 9) as f32);
    }

    #[test]
    fn translation_mask_is_a_cross_on_the_diagonal() {
        let t = structure_mask::<f32>(LayerKind::Translation, 2, 2, 3).unwrap();
        assert_eq!(t.at(&[0, 0, 1, 0]), 1.0);
        assert_eq!(t.at(&[0, 0, 0, 1]), 1.0);
        assert_eq!(t.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 1, 1, 1]), 0.0);
    }

    #[test]
    fn reparameterize_examples() {
        let t = |v: f64| Tensor::<f64>::full(&[1], v);
        assert_eq!(reparameterize(&t(2.0), &t(0.5), &t(1.0)).unwrap().data(), &[3.0]);
        assert_eq!(reparameterize(&t(-1.7), &t(0.0), &t(123.0)).unwrap().data(), &[-1.7]);
        assert!(reparameterize(&t(1.0), &t(-0.1), &t(0.0)).is_err());
        assert!(reparameterize(&t(1.0), &Tensor::zeros(&[2]), &t(0.0)).is_err());
    }

    #[test]
    fn reparameterized_std_matches_theta_sigma() {
        let mut rng = Rng::new(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = Tensor::<f64>::full(&[1], rng.normal());
                reparameterize(&Tensor::full(&[1], 1.0), &Tensor::full(&[1], 0.3), &eps).unwrap().data()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.3).abs() < 0.01, "{std}");
    }

    #[test]
    fn identity_banks_are_identity() {
        let mut rng = Rng::new(1);
        for (kind, c, m) in [(LayerKind::Interaction, 3, 3), (LayerKind::Weighting, 5, 1), (LayerKind::Translation, 2, 5)] {
            let bank = NoisyFilterBank::<f64>::identity(kind, c, m).unwrap();
            let x = gaussian::<f64>(&mut rng, &[c, 6, 7]);
            let sample = bank.draw_epsilon(&mut rng);
            assert_eq!(bank.forward(&x, &sample).unwrap(), x, "{kind:?}");
        }
    }

    #[test]
    fn identity_rejects_even_kernel() {
        assert!(NoisyFilterBank::<f32>::identity(LayerKind::Interaction, 2, 2).is_err());
        assert!(NoisyFilterBank::<f32>::identity(LayerKind::Weighting, 2, 3).is_err());
    }

    #[test]
    fn channel_sum_with_unit_filter() {
        let mut theta = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        theta.set(&[0, 0, 0, 0], 1.0);
        theta.set(&[0, 1, 0, 0], 1.0);
        let bank = NoisyFilterBank::from_parts(LayerKind::Interaction, theta, Tensor::zeros(&[1, 2, 1, 1])).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
        let y = interaction_forward(&x, &bank, &bank.mean_sample()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn weighting_scales_each_channel() {
        let mut theta = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        theta.set(&[0, 0, 0, 0], 1.93);
        theta.set(&[1, 1, 0, 0], 0.57);
        let bank = NoisyFilterBank::from_parts(LayerKind::Weighting, theta, Tensor::zeros(&[2, 2, 1, 1])).unwrap();
        let y = weighting_forward(&Tensor::ones(&[2, 2, 2]), &bank, &bank.mean_sample()).unwrap();
        assert_eq!(y.data(), &[1.93, 1.93, 1.93, 1.93, 0.57, 0.57, 0.57, 0.57]);
    }

    #[test]
    fn translation_left_tap_shifts_right() {
        let c = 2;
        let mut theta = Tensor::<f64>::zeros(&[c, c, 3, 3]);
        for k in 0..c {
            theta.set(&[k, k, 1, 0], 1.0);
        }
        let bank = NoisyFilterBank::from_parts(LayerKind::Translation, theta, Tensor::zeros(&[c, c, 3, 3])).unwrap();
        let x = Tensor::<f64>::from_fn(&[c, 3, 4], |i| (i + 1) as f64);
        let y = translation_forward(&x, &bank, &bank.mean_sample()).unwrap();
        for ch in 0..c {
            for r in 0..3 {
                assert_eq!(y.at(&[ch, r, 0]), 0.0);
                for col in 1..4 {
                    assert_eq!(y.at(&[ch, r, col]), x.at(&[ch, r, col - 1]));
                }
            }
        }
    }

    #[test]
    fn wrong_kind_or_channels_rejected() {
        let bank = NoisyFilterBank::<f32>::identity(LayerKind::Weighting, 3, 1).unwrap();
        let x = Tensor::<f32>::ones(&[3, 4, 4]);
        assert!(interaction_forward(&x, &bank, &bank.mean_sample()).is_err());
        assert!(weighting_forward(&Tensor::ones(&[2, 4, 4]), &bank, &bank.mean_sample()).is_err());
    }

    #[test]
    fn from_parts_enforces_mask() {
        let mut theta = Tensor::<f32>::zeros(&[2, 2, 1, 1]);
        theta.set(&[0, 1, 0, 0], 0.5);
        assert!(NoisyFilterBank::from_parts(LayerKind::Weighting, theta, Tensor::zeros(&[2, 2, 1, 1])).is_err());
    }

    #[test]
    fn draws_respect_mask_and_seed() {
        let mut rng = Rng::new(3);
        let bank = NoisyFilterBank::<f64>::random(LayerKind::Translation, 3, 3, 3, 0.1, &mut rng).unwrap();
        let a = bank.draw_epsilon(&mut Rng::with_stream(9, 1));
        let b = bank.draw_epsilon(&mut Rng::with_stream(9, 1));
        let c = bank.draw_epsilon(&mut Rng::with_stream(9, 2));
        assert_eq!(a, b);
        assert_ne!(bank.theta_tilde(&a).unwrap(), bank.theta_tilde(&c).unwrap());
        for (e, k) in a.epsilon()[0].data().iter().zip(bank.mask().data()) {
            if *k == 0.0 {
                assert_eq!(*e, 0.0);
            }
        }
    }

    #[test]
    fn zero_sigma_sample_is_mean() {
        let mut rng = Rng::new(4);
        let mut bank = NoisyFilterBank::<f32>::random(LayerKind::Interaction, 2, 3, 3, 0.2, &mut rng).unwrap();
        bank.set_sigma(0.0).unwrap();
        let s = bank.draw_epsilon(&mut rng);
        assert_eq!(&bank.theta_tilde(&s).unwrap(), bank.theta());
    }
}
