//! Desk-scale end-to-end in-image machine translation.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{GradBuffer, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
