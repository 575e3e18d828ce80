//! Annotation records, the annotation prompt and response parsing.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::llm::{llm_complete_with, LlmClient, LlmRequest, RetryPolicy};
use super::{sha256_hex, AnnotateError};
use crate::features::FeatureSummary;

/// Exact value a tag field takes when the source does not support it.
pub const NOT_ENOUGH_INFORMATION: &str = "Not Enough Information";

/// JSON keys of the five annotated fields, in prompt order.
pub const TAG_FIELDS: [&str; 5] = [
    "genre",
    "style",
    "background",
    "expressive_intent",
    "perceived_emotion",
];

const MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub piece_id: String,
    pub genre: String,
    pub style: String,
    pub background: String,
    pub expressive_intent: String,
    pub perceived_emotion: String,
    pub features: Option<FeatureSummary>,
    pub source_digest: String,
}

impl AnnotationRecord {
    /// Record with every tag field set to the sentinel.
    pub fn sentinel(
        piece_id: impl Into<String>,
        features: Option<FeatureSummary>,
        source_digest: impl Into<String>,
    ) -> Self {
        let s = NOT_ENOUGH_INFORMATION.to_string();
        Self {
            piece_id: piece_id.into(),
            genre: s.clone(),
            style: s.clone(),
            background: s.clone(),
            expressive_intent: s.clone(),
            perceived_emotion: s,
            features,
            source_digest: source_digest.into(),
        }
    }

    /// Raw value of a tag field by JSON key.
    pub fn field(&self, key: &str) -> Option<&str> {
        match key {
            "genre" => Some(&self.genre),
            "style" => Some(&self.style),
            "background" => Some(&self.background),
            "expressive_intent" => Some(&self.expressive_intent),
            "perceived_emotion" => Some(&self.perceived_emotion),
            _ => None,
        }
    }

    fn field_mut(&mut self, key: &str) -> Option<&mut String> {
        match key {
            "genre" => Some(&mut self.genre),
            "style" => Some(&mut self.style),
            "background" => Some(&mut self.background),
            "expressive_intent" => Some(&mut self.expressive_intent),
            "perceived_emotion" => Some(&mut self.perceived_emotion),
            _ => None,
        }
    }

    /// Value of a tag field unless it is the sentinel.
    pub fn tag(&self, key: &str) -> Option<&str> {
        self.field(key).filter(|v| *v != NOT_ENOUGH_INFORMATION)
    }

    /// True when at least one tag field is not the sentinel.
    pub fn is_valid_tagged(&self) -> bool {
        TAG_FIELDS.iter().any(|k| self.tag(k).is_some())
    }
}

/// One piece to annotate: identity, search keywords and retrieved text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceSource {
    pub piece_id: String,
    pub title: String,
    pub composer: String,
    #[serde(default)]
    pub source_text: String,
    #[serde(default)]
    pub features: Option<FeatureSummary>,
}

/// SHA-256 hex digest of a source document.
pub fn source_digest(source_text: &str) -> String {
    sha256_hex(source_text.as_bytes())
}

/// Deterministic, temperature-0 annotation request for one piece.
pub fn build_annotation_prompt(title: &str, composer: &str, source_text: &str) -> LlmRequest {
    let mut p = String::new();
    p.push_str(
        "You annotate classical and popular piano music for a music-understanding dataset.\n",
    );
    p.push_str(&format!("Piece title: {title}\nComposer: {composer}\n\n"));
    p.push_str("Using ONLY the source text below, extract these five fields:\n");
    p.push_str("- genre: the musical genre or form (a short tag)\n");
    p.push_str("- style: the stylistic period or school (a short tag)\n");
    p.push_str("- background: the composition background (one or two sentences)\n");
    p.push_str("- expressive_intent: what the composer meant to express (one or two sentences)\n");
    p.push_str("- perceived_emotion: the emotion a listener perceives (a short tag)\n\n");
    p.push_str(&format!(
        "If the source text does not support a field, output exactly \"{NOT_ENOUGH_INFORMATION}\" for that field. Do not guess and do not use outside knowledge.\n"
    ));
    if source_text.is_empty() {
        p.push_str(&format!(
            "No source text was found for this piece, so every field must be \"{NOT_ENOUGH_INFORMATION}\".\n"
        ));
    }
    p.push_str("\nRespond with a single JSON object and nothing else, using exactly these keys:\n");
    p.push_str("{\"genre\": string, \"style\": string, \"background\": string, \"expressive_intent\": string, \"perceived_emotion\": string}\n");
    p.push_str("\nSource text:\n<<<\n");
    p.push_str(source_text);
    p.push_str("\n>>>\n");
    LlmRequest {
        prompt: p,
        temperature: 0.0,
        max_tokens: MAX_TOKENS,
    }
}

/// First balanced `{...}` span, skipping braces inside JSON strings.
fn first_object_span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn normalize_value(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.trim().to_string(),
        Value::Null => String::new(),
        Value::Array(items) => items
            .iter()
            .map(normalize_value)
            .filter(|s| !s.is_empty() && s != NOT_ENOUGH_INFORMATION)
            .collect::<Vec<_>>()
            .join(", "),
        other => other.to_string(),
    };
    if s.is_empty() || s.eq_ignore_ascii_case(NOT_ENOUGH_INFORMATION) {
        NOT_ENOUGH_INFORMATION.to_string()
    } else {
        s
    }
}

/// Parses the first JSON object in an LLM reply into a record. Missing,
/// null or empty fields become the sentinel; values are trimmed.
pub fn parse_annotation_response(
    text: &str,
    piece_id: &str,
    features: Option<FeatureSummary>,
) -> Result<AnnotationRecord, AnnotateError> {
    let span = first_object_span(text)
        .ok_or_else(|| AnnotateError::MalformedResponse("no JSON object in response".into()))?;
    let value: Value = serde_json::from_str(span)
        .map_err(|e| AnnotateError::MalformedResponse(format!("invalid JSON object: {e}")))?;
    let Value::Object(map) = value else {
        return Err(AnnotateError::MalformedResponse("not a JSON object".into()));
    };
    let mut record = AnnotationRecord::sentinel(piece_id, features, String::new());
    for key in TAG_FIELDS {
        if let (Some(v), Some(slot)) = (map.get(key), record.field_mut(key)) {
            *slot = normalize_value(v);
        }
    }
    Ok(record)
}

fn annotate_one(
    src: &PieceSource,
    client: &(dyn LlmClient + Sync),
    policy: &RetryPolicy,
) -> Result<AnnotationRecord, AnnotateError> {
    if src.piece_id.is_empty() {
        return Err(AnnotateError::InvalidInput("empty piece_id".into()));
    }
    if src.title.trim().is_empty() || src.composer.trim().is_empty() {
        return Err(AnnotateError::InvalidInput(format!(
            "{}: title and composer are required",
            src.piece_id
        )));
    }
    let digest = source_digest(&src.source_text);
    if src.source_text.trim().is_empty() {
        log::info!(
            "{}: empty source {digest}, all fields sentinel",
            src.piece_id
        );
        return Ok(AnnotationRecord::sentinel(
            &src.piece_id,
            src.features,
            digest,
        ));
    }
    let req = build_annotation_prompt(&src.title, &src.composer, &src.source_text);
    log::info!(
        "{}: requesting annotation for source {digest}",
        src.piece_id
    );
    let reply = llm_complete_with(&req, client, policy)?;
    log::debug!("{}: response for source {digest}: {reply}", src.piece_id);
    let mut record = parse_annotation_response(&reply, &src.piece_id, src.features)?;
    record.source_digest = digest;
    Ok(record)
}

/// Annotates pieces with at most `jobs` concurrent LLM calls. Results are
/// ordered by piece id.
pub fn annotate_sources(
    sources: &[PieceSource],
    client: &(dyn LlmClient + Sync),
    policy: &RetryPolicy,
    jobs: usize,
) -> Vec<(String, Result<AnnotationRecord, AnnotateError>)> {
    let mut order: Vec<&PieceSource> = sources.iter().collect();
    order.sort_by(|a, b| a.piece_id.cmp(&b.piece_id));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<AnnotationRecord, AnnotateError>>>> =
        order.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, order.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(src) = order.get(i) else { break };
                let r = annotate_one(src, client, policy);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    order
        .iter()
        .zip(slots)
        .map(|(src, slot)| {
            let r = slot
                .into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every piece is processed");
            (src.piece_id.clone(), r)
        })
        .collect()
}
