//! Inactive attention head detection.
//!
//! Traces of per-head attention weights, value states and head outputs are
//! scored by threshold rules ([`scores`]), thresholds are calibrated from
//! score quantiles ([`calibration`]), and the resulting per-pass masks are
//! verified by zeroing heads in a reference transformer ([`model`],
//! [`harness`]). [`analytics`] compares score functions and distributions.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod analytics;
pub mod calibration;
pub mod container;
pub mod error;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod scores;
pub mod synth;
pub mod tensor;
pub mod trace;

pub use calibration::{
    build_mask, collect_scores, percent_zeroed, quantile_threshold, ScorePool, ThresholdPolicy,
};
pub use error::{Error, Result};
pub use model::{
    circuit_head_contribution, init_model, plant_heads, ForwardOutput, PlantKind, PlantSpec,
    TransformerWeights,
};
pub use scalar::Scalar;
pub use scores::{score_all_heads, Direction, ScoreFn};
pub use tensor::Mat;
pub use trace::{
    expand_kv_heads, read_trace, write_trace, AttentionTrace, HeadMask, MaskProvenance,
    ModelConfig, ScoreMatrix,
};

pub type Trace32 = AttentionTrace<f32>;
pub type Trace64 = AttentionTrace<f64>;
pub type Weights32 = TransformerWeights<f32>;
pub type Weights64 = TransformerWeights<f64>;
pub type Scores32 = ScoreMatrix<f32>;
pub type Scores64 = ScoreMatrix<f64>;
