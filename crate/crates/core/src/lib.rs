//! Multi-task response generation with emotion recognition: a shared
//! transformer encoder-decoder with one LM head and one classification head
//! per emotion task, trained jointly with per-task loss weights.

pub mod data;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod text;
pub mod trainer;

pub use data::{Examples, TaskKind, TaskSpec};
pub use decoding::{beam_search, greedy, BeamConfig, Hypothesis, Scorer};
pub use error::{Error, ErrorKind, Result};
pub use manifest::RunManifest;
pub use metrics::MetricsReport;
pub use model::{Checkpoint, ClsHeadSpec, Model, ModelConfig};
pub use numerics::{AdamConfig, AdamW, Graph, ParamStore, Tensor};
pub use text::{TokenSeq, Vocab};
pub use trainer::{BatchTicket, LossReport, TrainConfig};
