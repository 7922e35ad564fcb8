//! A small decoder-only transformer whose feed-forward blocks are top-k
//! mixtures of gated experts, with load-balancing and router z-losses and
//! multi-token-prediction heads that train without touching the backbone.

pub mod batch;
pub mod config;
pub mod error;
pub mod hook;
pub mod model;
pub mod reference;
pub mod router;
pub mod train;

pub use batch::{attention_mask, sample_windows, TokenBatch, PAD_SEGMENT};
pub use config::{Coefficients, MoEConfig};
pub use error::{MoeError, Result};
pub use hook::{ForwardHook, NoHook, Site};
pub use model::{masked_cross_entropy, usage_entropy, Forward, LmOutput, MoeModel};
pub use router::{aux_loss, route_logits, route_tokens, z_loss, RouterDecision, RouterVars};
pub use train::{StepLog, Trainer};
