//! Video class-incremental learning in feature space with dual episodic and
//! semantic memory and cross-attention feature retrieval.

pub(crate) mod binio;
pub mod blocks;
pub mod config;
pub mod data;
pub mod driver;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Param, ParamSet, Tensor};
