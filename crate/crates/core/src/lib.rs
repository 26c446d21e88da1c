//! Two-stage autoregressive token-grid generator with a kernel-regression
//! metric regularizer and a text-conditional ambiguity latent, trained and
//! evaluated on a synthetic scene grammar.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom fix the precision used by training (`f32`) and by gradient
//! checks (`f64`).

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod forward;
pub mod gradcheck;
pub mod latent;
pub mod metric;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use forward::LatentInput;
pub use model::{Model, ModelConfig, ParamGroup};
pub use scalar::Scalar;
pub use synth::{Example, Interpretation, Pattern, PromptSpec, Resolution, TokenGrid};
pub use tensor::Mat;
pub use trainer::{TrainConfig, Trainer};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Mat32 = Mat<f32>;
pub type Mat64 = Mat<f64>;
pub type Trainer32 = Trainer<f32>;
