//! Desk-scale training framework for structure-controlled caption
//! generation: a define-by-run autodiff engine, control-level schemes and
//! annotators, a compact GRU decoder, CIDEr-D/alignment rewards, the
//! cross-entropy / reinforcement / self-annotated / finetune training
//! regimes, and evaluation under both reference protocols.

pub mod adam;
pub mod captioner;
pub mod control;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod rewards;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
