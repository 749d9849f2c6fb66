//! Weight Squeezing for small transformer classifiers.
//!
//! A student's weights are produced by a scheme in [`reparam`]: plain
//! parameters, bilinear maps of a frozen teacher's weights (optionally gated
//! with a pre-trained base model), or low-rank factors of the teacher. Every
//! scheme resolves to the weights one shared [`model::forward`] consumes, so
//! all of them train through [`trainer::train`] under any
//! [`objectives::ObjectiveSpec`].

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod factored;
pub mod init;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod reparam;
pub mod run_config;
pub mod trainer;
pub mod verify;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{ForwardOutput, Input, Mode, TransformerModel};
pub use params::ParamStore;
