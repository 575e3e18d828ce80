//! Annotation and instruction-tuning data.
//!
//! Source documents about a piece are turned into an LLM prompt
//! ([`build_annotation_prompt`]); the reply is parsed into an
//! [`AnnotationRecord`] whose tag fields hold either a value or the
//! [`NOT_ENOUGH_INFORMATION`] sentinel. Records plus musical features yield
//! templated Q&A pairs ([`gen_qa`]) and caption targets
//! ([`gen_caption_target`]), which [`assemble_dataset`] splits by piece into
//! train/test JSONL files.

mod dataset;
mod llm;
mod qa;
mod record;

use thiserror::Error;

pub use dataset::{
    assemble_dataset, read_jsonl, write_jsonl, ClipRef, Dataset, DatasetRow, Manifest, Task,
    CAPTION_QUESTION, TEST_RATIO,
};
pub use llm::{
    llm_complete, llm_complete_with, request_digest, CachedClient, HttpClient, HttpConfig,
    LlmClient, LlmError, LlmRequest, RetryPolicy, DEFAULT_API_KEY_ENV,
};
pub use qa::{
    gen_caption_target, gen_qa, gen_qa_for_clips, paraphrase_qa, ClipFeatures, Grounding, QaPair,
    TagSource,
};
pub use record::{
    annotate_sources, build_annotation_prompt, parse_annotation_response, source_digest,
    AnnotationRecord, PieceSource, NOT_ENOUGH_INFORMATION, TAG_FIELDS,
};

/// Version of the prompt and Q&A templates, recorded in dataset manifests.
pub const TEMPLATE_VERSION: &str = "midilm-templates-1";

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("malformed LLM response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no content: {0}")]
    NoContent(String),
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
