//! Observation and substitution points inside the forward pass.

use serde::{Deserialize, Serialize};

use crate::router::RouterDecision;

/// A projection GEMM whose input activations a hook may see or replace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    /// Input shared by the q, k and v projections of a layer.
    AttnQkv(usize),
    AttnOut(usize),
    Router(usize),
    /// Input of an expert's gate and up projections: `(layer, expert)`.
    ExpertIn(usize, usize),
    /// Input of an expert's down projection.
    ExpertDown(usize, usize),
}

pub trait ForwardHook {
    /// Sees the `[rows × cols]` input of the GEMM at `site`. Returning a
    /// replacement substitutes it (as a constant) for the rest of the pass.
    fn gemm_input(&mut self, _site: Site, _x: &[f32], _cols: usize) -> Option<Vec<f32>> {
        None
    }

    /// Called once per MoE layer with that layer's routing.
    fn routed(&mut self, _layer: usize, _decision: &RouterDecision) {}
}

/// Hook that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl ForwardHook for NoHook {}
