//! Training-free visual-token pruning for decoder-only models.
//!
//! At a few prefill layers the visual tokens are ranked by the gradient of a
//! layer-local proxy loss (the model's own head reading the last few prompt
//! positions, scored against its own argmax), deduplicated with
//! feature-space NMS, and the rest are dropped before the next block. The
//! crate ships a small decoder to run this on, an exact FLOPs/KV-cache cost
//! model, and an experiment harness built around a synthetic
//! planted-evidence task.

pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod nms;
pub mod pipeline;
pub mod proxy;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{AttentionBackend, HiddenStates, KvCache, Model, ModelConfig, ModelWeights, Segment, TokenSequence};
pub use nms::{nms_select, top_k_select, SelectionInput, SelectionResult};
pub use pipeline::{prefill_pruned, PipelineOptions, PipelineTrace, PruneSchedule, Selector};
pub use proxy::{HeadNorm, ProxyObjective, SaliencyReport, TailWindow};
pub use tensor::{Matrix, NormKind};
