//! Fixtures shared by the benchmarks.

use evade_core::env::{push_frame, Action, EnvSpec, ObjectWorld};
use evade_core::world_model::{Dataset, TransitionRecord};
use evade_core::{Rng, Scalar, Tensor};

/// Uniform random tensor on `[-1, 1]`.
pub fn random_tensor<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.uniform_range(-1.0, 1.0)))
}

/// `n` random-policy transitions from the default layout.
pub fn random_dataset<S: Scalar>(n: usize, seed: u64) -> Dataset<S> {
    let env = ObjectWorld::new(EnvSpec::default()).expect("default layout is valid");
    let mut rng = Rng::new(seed);
    let mut data = Dataset::new();
    let (mut state, mut obs) = env.reset::<S>(0);
    while data.len() < n {
        let action = Action::ALL[rng.below(Action::COUNT)];
        let step = env.step::<S>(&state, action).expect("live episode");
        data.push(TransitionRecord {
            obs_stack: obs.clone(),
            action: action.index(),
            reward_class: env.spec().reward_class(step.reward).expect("bucketed reward"),
            next_frame: step.frame.clone(),
        });
        if step.done {
            (state, obs) = env.reset::<S>(0);
        } else {
            obs = push_frame(&obs, &step.frame).expect("matching frame");
            state = step.state;
        }
    }
    data
}
