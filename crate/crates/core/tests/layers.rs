mod common;

use common::{conv_oracle, conv_oracle_suite, evade_oracle_suite, max_rel_err, perturbation_statistics, random_tensor, to_f64};
use evade_core::{conv_transpose2d, gaussian, LayerKind, NoisyFilterBank, Padding, Rng, Tensor};
use proptest::prelude::*;

const SINGLE_TOL: f64 = 1e-5;
const DOUBLE_TOL: f64 = 1e-10;

#[test]
fn conv2d_matches_oracle() {
    let stats = conv_oracle_suite(240, 11);
    assert_eq!(stats.instances, 240);
    assert!(stats.worst_single <= SINGLE_TOL, "{stats:?}");
    assert!(stats.worst_double <= DOUBLE_TOL, "{stats:?}");
}

#[test]
fn evade_forwards_match_oracle() {
    for kind in LayerKind::ALL {
        let stats = evade_oracle_suite(kind, 80, 12);
        assert!(stats.worst_single <= SINGLE_TOL, "{kind:?} {stats:?}");
        assert!(stats.worst_double <= DOUBLE_TOL, "{kind:?} {stats:?}");
    }
}

#[test]
fn conv2d_batched_equals_per_image() {
    let mut rng = Rng::new(5);
    let x = random_tensor::<f64>(&[3, 2, 6, 5], &mut rng);
    let f = random_tensor::<f64>(&[4, 2, 3, 3], &mut rng);
    let y = evade_core::conv2d(&x, &f, 1, Padding::Same).unwrap();
    for n in 0..3 {
        let xi = x.batch_item(n).unwrap();
        let (want, _) = conv_oracle(xi.data(), [2, 6, 5], f.data(), [4, 2, 3, 3], 1, 1);
        assert!(max_rel_err(&to_f64(&y.batch_item(n).unwrap()), &want) <= DOUBLE_TOL);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for stride 2, kernel 4, padding 1.
    let mut rng = Rng::new(6);
    let x = random_tensor::<f64>(&[2, 8, 8], &mut rng);
    let f = random_tensor::<f64>(&[3, 2, 4, 4], &mut rng);
    let y = random_tensor::<f64>(&[3, 4, 4], &mut rng);
    let (cx, shape) = conv_oracle(x.data(), [2, 8, 8], f.data(), [3, 2, 4, 4], 2, 1);
    assert_eq!(shape, [3, 4, 4]);
    let ty = conv_transpose2d(&y, &f, 2, 1).unwrap();
    assert_eq!(ty.shape(), &[2, 8, 8]);
    let lhs: f64 = cx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

fn kind_strategy() -> impl Strategy<Value = LayerKind> {
    prop_oneof![Just(LayerKind::Interaction), Just(LayerKind::Weighting), Just(LayerKind::Translation)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_bank_is_exact(kind in kind_strategy(), c in 1usize..=8, mi in 0usize..3, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let m = if kind == LayerKind::Weighting { 1 } else { [1, 3, 5][mi] };
        let bank = NoisyFilterBank::<f64>::identity(kind, c, m).unwrap();
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = gaussian(&mut rng, &[c, h, w]);
        prop_assert_eq!(bank.forward(&x, &bank.mean_sample()).unwrap(), x.clone());
        prop_assert_eq!(bank.forward(&x, &bank.draw_epsilon(&mut rng)).unwrap(), x);
    }

    #[test]
    fn zero_sigma_ignores_epsilon(kind in kind_strategy(), c in 1usize..=5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = if kind == LayerKind::Weighting { 1 } else { 3 };
        let mut bank = NoisyFilterBank::<f64>::random(kind, c, c, m, 0.3, &mut rng).unwrap();
        bank.set_sigma(0.0).unwrap();
        let x: Tensor<f64> = gaussian(&mut rng, &[c, 4, 4]);
        prop_assert_eq!(bank.forward(&x, &bank.draw_epsilon(&mut rng)).unwrap(), bank.forward(&x, &bank.mean_sample()).unwrap());
    }
}

#[test]
fn perturbed_weight_statistics() {
    let stats = perturbation_statistics(100_000, 21);
    assert!(stats.worst_std_rel <= 0.02, "{stats:?}");
    assert!(stats.worst_mean_z <= 3.0, "{stats:?}");
}

#[test]
fn masked_entries_never_move() {
    let mut rng = Rng::new(4);
    for kind in [LayerKind::Weighting, LayerKind::Translation] {
        let m = if kind == LayerKind::Weighting { 1 } else { 5 };
        let bank = NoisyFilterBank::<f64>::random(kind, 3, 3, m, 0.5, &mut rng).unwrap();
        for _ in 0..20 {
            let tilde = bank.theta_tilde(&bank.draw_epsilon(&mut rng)).unwrap();
            for (v, mask) in tilde.data().iter().zip(bank.mask().data()) {
                if *mask == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
