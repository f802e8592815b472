//! Event-based noisy convolutional layers (translation, weighting and
//! interaction), a small world model whose reward head carries them, and an
//! approximate posterior-sampling loop that trains a policy inside one sampled
//! model per iteration.

pub mod activations;
pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod env;
pub mod error;
pub mod evade;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod psrl;
pub mod rng;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod world_model;

pub use activations::dump_activations;
pub use conv::{conv2d, conv_transpose2d, Padding};
pub use error::{Error, Result};
pub use evade::{
    interaction_forward, reparameterize, translation_forward, weighting_forward, LayerKind, NoisyFilterBank, VariationalSample,
};
pub use gradcheck::grad_check;
pub use metrics::{hns, iqm, paired_t_test, reproduce_paper_metrics, MetricsReport, ScoreTables};
pub use rng::{gaussian, Rng};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Precision, Scalar, Tensor};
