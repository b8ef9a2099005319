//! Neural components: attention, feed-forward, memory retrieval, the
//! temporal encoder and the classifier head.
//!
//! Blocks are descriptors holding parameter names; the tensors live in a
//! [`ParamSet`](crate::tensor::ParamSet) and enter a [`Tape`](crate::tape::Tape)
//! on each forward pass.

pub mod attention;
pub mod classifier;
pub mod encoder;
pub mod layers;
pub mod mr;
pub mod retrieval;

pub use attention::MhcaBlock;
pub use classifier::Classifier;
pub use encoder::TemporalEncoder;
pub use layers::{FfnBlock, LayerNorm, Linear};
pub use mr::MrModule;
pub use retrieval::{RetrievalArch, Retriever};
