//! Minimal dense tensor library with deterministic reverse-mode differentiation.
//!
//! Everything is `f64` and row-major. Operations record onto a [`Graph`];
//! [`Graph::backward`] produces gradients for every tracked leaf, and
//! [`Adam`] updates the tensors held in a [`ParamStore`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{gradcheck, gradcheck_params, GradcheckOptions, GradcheckReport};
pub use graph::{sigmoid, Graph, Taps, Unary, Var, ZERO_INDEX};
pub use ops::{ConvSpec, NORM_EPS};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
