//! Structural cost model for pipeline-parallel MoE training: a
//! discrete-event 1F1B simulator (with interleaving), a min-max uneven
//! layer partitioner that accounts for embedding/loss extras and selective
//! recomputation, per-stage memory, and intra- vs inter-node all-to-all.
//! All times and sizes are abstract units.

pub mod cost;
pub mod error;
pub mod memory;
pub mod plan;
pub mod sim;

pub use cost::{a2a_time, CommModel, StageCostModel};
pub use error::{PlanError, Result};
pub use memory::{memory_model, StageMemory};
pub use plan::{partition_uneven, segment_time, uniform_plan, PipelinePlan};
pub use sim::{simulate_pipeline, stage_order, write_trace_csv, Op, Phase, SimResult, TraceEvent};
