//! Simulated FP8 (E4M3) W8A8 quantization for mixture-of-experts models.
//!
//! Weights are rounded per output channel, GEMM inputs per tensor using
//! scales from calibration. The expert-aware recipe oversamples calibration
//! data for rarely routed experts and migrates activation outliers into the
//! weights with one smoothing vector per layer, folded into the RMSNorm gain
//! that precedes the router and experts.

pub mod balance;
pub mod calib;
pub mod error;
pub mod fp8;
pub mod pipeline;
pub mod report;
pub mod scenario;
pub mod scheme;
pub mod smooth;

pub use balance::{balance_calibration, Balanced};
pub use calib::{collect_calibration, route_counts, weight_maxima, CalibrationStats};
pub use error::{QuantError, Result};
pub use fp8::{fp8_qdq, fp8_qdq_slice, round_e4m3, Fp8E4M3, E4M3_MAX, E4M3_MIN_SUBNORMAL};
pub use pipeline::{quantize_recipe, QuantConfig, QuantOutcome, Recipe};
pub use report::{report_error, write_report_csv, EvalSlice, SliceReport};
pub use scenario::{SkewConfig, SkewScenario};
pub use scheme::{fp32_logits, gemm_sites, quantize_model, Grid, QuantScheme, QuantizedModel};
pub use smooth::{compute_smoothing, fold_smoothing, Smoothing};
