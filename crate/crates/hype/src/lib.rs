//! A desk-scale transformer fine-tuning laboratory built around one idea:
//! injecting parameter-independent random noise into the hidden
//! representations fed to each transformer layer during training, and
//! measuring what that does to task scores, layer-wise representation
//! quality, and token-representation anisotropy.
//!
//! Everything runs on a self-contained f64 autodiff engine so that every
//! analytic gradient can be checked against finite differences.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{HypeError, Result};
pub use tensor::Tensor;
