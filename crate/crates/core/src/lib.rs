//! Subspace-filtered gradient updates for continual learning.
//!
//! Each update is compared against a bounded buffer of past gradients. Well
//! aligned updates pass through, moderately aligned ones are projected onto the
//! orthogonal complement of the buffer's span, and the rest are dropped.

pub mod buffer;
pub mod error;
pub mod idx;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runner;
pub mod stream;
pub mod subspace;
pub mod svd;

pub use buffer::{memory_mb, Admission, BufferConfig, GradBuffer, SampleSubset};
pub use error::{Error, Result};
pub use metrics::AccuracyMatrix;
pub use model::{Dataset, Mlp, MlpShape};
pub use optim::{
    apply_step, gate, sfao_direction, Decision, DecisionRecord, GateDecision, OptState, Thresholds,
};
pub use runner::{
    run_continual, run_continual_observed, Method, Metrics, OptimizerConfig, RunReport, TrainConfig,
};
pub use stream::{make_stream, StreamConfig, StreamKind, TaskStream};
pub use subspace::{cosine, OrthoBasis, ParamVector};
