//! Text-generation metrics: BLEU, METEOR, ROUGE-L and BERTScore.
//!
//! All metrics work on [`TokenizedText`] from [`tokenize_text`]. Corpus BLEU
//! pools n-gram counts; the other corpus values are means of sentence scores.

mod bertscore;
mod bleu;
mod meteor;
mod rouge;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bertscore::{
    bert_score, greedy_match, BertScore, EmbeddingProvider, FileEmbeddings, HashEmbeddings,
};
pub use bleu::{bleu, sentence_bleu, BleuStats};
pub use meteor::{meteor, meteor_with, Alignment, MeteorConfig};
pub use rouge::{lcs_len, rouge_l, rouge_l_beta};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("embedding provider returned {got} (expected {expected})")]
    ProviderDimensionMismatch { expected: String, got: String },
    #[error("embedding file line {line}: {message}")]
    EmbeddingFile { line: usize, message: String },
}

/// Lowercased word tokens with punctuation split off.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedText {
    tokens: Vec<String>,
}

impl TokenizedText {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercases, splits on whitespace and separates every punctuation
/// character into its own token.
pub fn tokenize_text(text: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    TokenizedText { tokens }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub bert_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    /// Corpus BLEU from pooled n-gram statistics.
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    /// Mean BERTScore F1, without baseline rescaling.
    pub bert_score: Option<f64>,
    /// Metric variant labels, so reported numbers are self-describing.
    pub variants: BTreeMap<String, String>,
    pub per_sample: Vec<SampleScores>,
}

/// Scores `(id, hypothesis, reference)` triples.
pub fn evaluate(
    samples: &[(String, String, String)],
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<MetricReport, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let hyps: Vec<TokenizedText> = samples.iter().map(|s| tokenize_text(&s.1)).collect();
    let refs: Vec<TokenizedText> = samples.iter().map(|s| tokenize_text(&s.2)).collect();
    let meteor_cfg = MeteorConfig::default();

    let mut per_sample = Vec::with_capacity(samples.len());
    for ((s, h), r) in samples.iter().zip(&hyps).zip(&refs) {
        let bert = match provider {
            Some(p) => Some(bert_score(h, r, p)?.f1),
            None => None,
        };
        per_sample.push(SampleScores {
            id: s.0.clone(),
            bleu: sentence_bleu(h, r),
            meteor: meteor_with(h, r, &meteor_cfg),
            rouge_l: rouge_l(h, r),
            bert_score: bert,
        });
    }
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleScores) -> f64| per_sample.iter().map(f).sum::<f64>() / n;

    let mut variants = BTreeMap::new();
    variants.insert(
        "tokenizer".into(),
        "lowercase, whitespace split, punctuation separated".into(),
    );
    variants.insert("bleu".into(), "corpus, n=1..4 uniform weights, add-one smoothing of zero counts for n>=2, single reference".into());
    variants.insert("meteor".into(), "exact+porter-stem matching, max matches then min chunks, alpha=0.9 beta=3 gamma=0.5, sentence mean".into());
    variants.insert(
        "rouge_l".into(),
        "LCS F-measure beta=1, sentence mean".into(),
    );
    if let Some(p) = provider {
        variants.insert(
            "bert_score".into(),
            format!(
                "greedy cosine F1, no baseline rescaling, provider={}",
                p.name()
            ),
        );
    }

    Ok(MetricReport {
        count: samples.len(),
        bleu: bleu(&hyps, &refs, 4)?,
        meteor: mean(|s| s.meteor),
        rouge_l: mean(|s| s.rouge_l),
        bert_score: provider.map(|_| mean(|s| s.bert_score.unwrap_or(0.0))),
        variants,
        per_sample,
    })
}
