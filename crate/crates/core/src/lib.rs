//! Online test-time adaptation for depth completion with proxy embeddings
//! learned from the sparse-depth modality.
//!
//! The crate covers the whole laboratory: a synthetic scene and shift
//! generator ([`datasets`]), a small dual-branch network with an insertable
//! adaptation layer ([`model`]), the proxy heads ([`proxy`]), the adaptation
//! losses ([`losses`]), the three training stages plus baselines
//! ([`pipeline`]), evaluation and reporting ([`eval`]), and the experiment
//! driver used by the command-line front end ([`config`], [`experiment`]).
//!
//! Gradients come from a small reverse-mode tape ([`autograd`]) over `f64`
//! tensors; parameters are kept on the `f32` grid so checkpoints are exact.

// Validation writes `!(x > 0.0)` on purpose: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod proxy;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Method};
pub use datasets::{
    apply_domain_shift, generate_dataset, generate_scene, shift_dataset, stream_batches, Batch, BatchStream,
    DepthMap, Image, RetentionProbe, Sample, SampleStream, SceneConfig, ShiftConfig,
};
pub use error::{Error, ErrorCategory, Result};
pub use eval::{DepthRange, InputMode, MetricsRecord, MetricsRow};
pub use losses::{LossReport, LossWeights};
pub use model::{init_model, insert_adaptation_layer, Mode, ModelConfig, ModelParams, ParamGroup, ParamSelector};
pub use pipeline::{AdaptMethod, AdaptOutcome, RunLog, StageConfig, StageObserver};
pub use proxy::{init_heads, ProxyConfig, ProxyHeads};
pub use tensor::Tensor;
