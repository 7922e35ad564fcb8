//! Tensor core shared by every crate in the lab: dense f32 tensors, a
//! reverse-mode tape, AdamW, checkpoint I/O, the byte tokenizer, a
//! counter-based PRNG and the synthetic corpus generators.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod prng;
pub mod stats;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{CoreError, Result};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Session};
pub use prng::Prng;
pub use tape::{Tape, Var};
pub use tensor::{top_k, Tensor};
