//! Keyword-spotting engine built around a MobileNetV2-style network
//! (`MN7-45`) with optional SimAM attention, trained with disentangled
//! adversarial examples routed through parallel batch-norm branches.

pub mod adversary;
pub mod augment;
pub mod dataset;
pub mod disnorm;
pub mod error;
pub mod evaluator;
pub mod frontend;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod window;

pub use error::{KwsError, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
