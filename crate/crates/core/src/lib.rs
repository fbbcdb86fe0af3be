//! Time-independent video recognition at desk scale.
//!
//! The centerpiece is a video model that treats frames as an unordered set:
//! per-frame CNN embeddings are partitioned across multi-head attention
//! pooling with learned global query vectors, then fed to a shallow head.
//! Around it sit fixed-pooling and factorized spatiotemporal baselines,
//! synthetic video task generators, a training loop with a plateau schedule,
//! evaluation metrics, and attention interpretability reports.

pub mod autodiff;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use autodiff::{
    check_gradients, finite_difference_grad, grad_with, BoundParams, GradCheckReport, Gradients,
    LossBuilder, ParamSet, Tape, Var,
};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
