//! Universal adversarial patches against semantic segmentation models.
//!
//! The crate covers the whole attack pipeline: surrogate models behind a
//! differentiable interface ([`model_zoo`]), entropy-guided patch placement
//! ([`placement`]), differentiable compositing under random transforms
//! ([`applicator`]), the attack objectives ([`losses`]), the two-stage
//! optimization loop ([`trainer`]) and mIoU evaluation with ablations
//! ([`evaluation`]).

pub mod applicator;
pub mod autograd;
pub mod losses;
pub mod error;
pub mod evaluation;
pub mod model_zoo;
pub mod optim;
pub mod placement;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Dual, Scalar, Tensor};
