//! Music–text alignment at desk scale.
//!
//! A frozen [`StubEncoder`] turns an OctupleMIDI clip into token-level hidden
//! states, which are mean-pooled and mapped by a trainable [`Projection`] into
//! `k` prefix rows in the embedding space of a small decoder-only language
//! model ([`TinyLm`]). Training runs in two stages: stage 1 updates only the
//! projection, stage 2 additionally trains [`LoraAdapter`]s on the attention
//! query and value matrices. Everything runs in `f64`.

mod decode;
mod encoder;
mod gradcheck;
mod lm;
mod lora;
mod model;
mod optim;
mod projection;
mod tensor;
mod train;
mod vocab;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decode::greedy_decode;
pub use encoder::{encode, mean_pool, StubEncoder};
pub use gradcheck::{grad_check, GradCheckReport, GradSlice};
pub use lm::{forward_lm, loss, loss_and_grad, softmax_row, LmCache, LmGrads, TinyLm};
pub use lora::{attach_qv_adapters, LoraAdapter, LoraTarget, ProjKind};
pub use model::{AlignModel, Checkpoint};
pub use optim::{adamw_step, lr_schedule, AdamState};
pub use projection::{project, Projection};
pub use tensor::{gemm, Matrix};
pub use train::{
    batch_loss, pretrain_lm, pretrain_lm_with_context, train_stage1, train_stage2, write_loss_log,
    Example, Stage, StepLog, TrainConfig, TrainReport,
};
pub use vocab::{Vocab, EOS, PAD, UNK};
pub use weights::{read_weights, write_weights, NamedTensor};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {index}: {field} value {value} outside table of size {size}")]
    FieldOutOfRange {
        index: usize,
        field: &'static str,
        value: u32,
        size: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("answer mask selects no position")]
    EmptyMask,
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training stage mismatch: {0}")]
    StageMismatch(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Model dimensions for the alignment stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Encoder width `M`.
    pub encoder_dim: usize,
    /// Language model width `T`.
    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vocab_size: usize,
    /// Number of prefix music tokens `k`.
    pub prefix_count: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            encoder_dim: 64,
            lm_dim: 128,
            lm_layers: 2,
            lm_heads: 4,
            vocab_size: 512,
            prefix_count: 1,
            max_seq: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let dims = [
            ("encoder_dim", self.encoder_dim),
            ("lm_dim", self.lm_dim),
            ("lm_layers", self.lm_layers),
            ("lm_heads", self.lm_heads),
            ("vocab_size", self.vocab_size),
            ("prefix_count", self.prefix_count),
            ("max_seq", self.max_seq),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(AlignError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if !self.lm_dim.is_multiple_of(self.lm_heads) {
            return Err(AlignError::InvalidConfig(format!(
                "lm_dim {} not divisible by lm_heads {}",
                self.lm_dim, self.lm_heads
            )));
        }
        if self.prefix_count >= self.max_seq {
            return Err(AlignError::InvalidConfig(
                "prefix_count must be smaller than max_seq".into(),
            ));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(AlignError::InvalidConfig(
                "lora_alpha must be positive".into(),
            ));
        }
        Ok(())
    }
}
