use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{MetricError, TokenizedText};

/// Maps tokens to fixed-dimension vectors.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError>;
    fn name(&self) -> String {
        "custom".to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// BERTScore with greedy cosine matching and no baseline rescaling.
/// Empty text on either side scores 0.
pub fn bert_score(
    hyp: &TokenizedText,
    reference: &TokenizedText,
    provider: &dyn EmbeddingProvider,
) -> Result<BertScore, MetricError> {
    if hyp.is_empty() || reference.is_empty() {
        return Ok(BertScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        });
    }
    let he = checked_embed(provider, hyp.tokens())?;
    let re = checked_embed(provider, reference.tokens())?;
    let sim: Vec<Vec<f64>> = he
        .iter()
        .map(|h| re.iter().map(|r| cosine(h, r)).collect())
        .collect();
    Ok(greedy_match(&sim))
}

fn checked_embed(
    provider: &dyn EmbeddingProvider,
    tokens: &[String],
) -> Result<Vec<Vec<f64>>, MetricError> {
    let vecs = provider.embed(tokens)?;
    if vecs.len() != tokens.len() {
        return Err(MetricError::ProviderDimensionMismatch {
            expected: format!("{} vectors", tokens.len()),
            got: format!("{} vectors", vecs.len()),
        });
    }
    if let Some(v) = vecs.iter().find(|v| v.len() != provider.dim()) {
        return Err(MetricError::ProviderDimensionMismatch {
            expected: format!("dimension {}", provider.dim()),
            got: format!("dimension {}", v.len()),
        });
    }
    Ok(vecs)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Precision, recall and F1 from a hypothesis × reference similarity matrix.
pub fn greedy_match(sim: &[Vec<f64>]) -> BertScore {
    let nh = sim.len();
    let nr = sim.first().map_or(0, Vec::len);
    if nh == 0 || nr == 0 {
        return BertScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / nh as f64;
    let recall = (0..nr)
        .map(|j| {
            sim.iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / nr as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BertScore {
        precision,
        recall,
        f1,
    }
}

/// Deterministic embeddings from a keyed hash of each token.
///
/// Each token lights up a few coordinates with positive weights, so
/// similarities fall in [0, 1] and identical tokens score exactly 1.
#[derive(Debug, Clone)]
pub struct HashEmbeddings {
    dim: usize,
    seed: u64,
}

impl HashEmbeddings {
    const ACTIVE: usize = 8;

    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim: dim.max(1),
            seed,
        }
    }

    fn vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut v = vec![0.0; self.dim];
        for chunk in digest.chunks(4).take(Self::ACTIVE) {
            let x = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            let idx = (x as usize) % self.dim;
            v[idx] += 1.0 + (x >> 24) as f64 / 256.0;
        }
        v
    }
}

impl EmbeddingProvider for HashEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        Ok(tokens.iter().map(|t| self.vector(t)).collect())
    }

    fn name(&self) -> String {
        format!("hash(dim={}, seed={})", self.dim, self.seed)
    }
}

/// Lookup table read from text: `token v1 v2 ... vd` per line.
/// Tokens missing from the table embed as zero vectors (similarity 0).
#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    source: String,
}

impl FileEmbeddings {
    pub fn from_path(path: &Path) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricError::EmbeddingFile {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        let mut emb = Self::parse(&text)?;
        emb.source = path.display().to_string();
        Ok(emb)
    }

    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut dim = None;
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| MetricError::EmbeddingFile {
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(MetricError::EmbeddingFile {
                        line: i + 1,
                        message: format!("expected {d} values, found {}", v.len()),
                    })
                }
                _ => {}
            }
            table.insert(token.to_lowercase(), v);
        }
        let dim = dim.filter(|&d| d > 0).ok_or(MetricError::EmbeddingFile {
            line: 0,
            message: "no vectors".into(),
        })?;
        Ok(Self {
            dim,
            table,
            source: "inline".into(),
        })
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        Ok(tokens
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.dim])
            })
            .collect())
    }

    fn name(&self) -> String {
        format!("file({})", self.source)
    }
}
