use std::collections::HashMap;

use super::{MetricError, TokenizedText};

/// Pooled n-gram statistics for BLEU.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 = unigrams.
    pub matches: Vec<u64>,
    /// Hypothesis n-grams per order.
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    pub fn add(&mut self, hyp: &TokenizedText, reference: &TokenizedText) {
        let h = hyp.tokens();
        let r = reference.tokens();
        self.hyp_len += h.len() as u64;
        self.ref_len += r.len() as u64;
        for n in 1..=self.matches.len() {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            self.totals[n - 1] += hc.values().sum::<u64>();
            self.matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0)))
                .sum::<u64>();
        }
    }

    /// Geometric mean of the precisions times the brevity penalty.
    ///
    /// A zero unigram precision gives 0; zero counts for higher orders are
    /// smoothed to (m + 1) / (t + 1).
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.is_empty() || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (n, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let p = if n > 0 && m == 0 {
                (m + 1) as f64 / (t + 1) as f64
            } else {
                m as f64 / t as f64
            };
            log_sum += p.ln();
        }
        let geo = (log_sum / self.matches.len() as f64).exp();
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        geo * bp
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one reference per hypothesis.
pub fn bleu(
    hyps: &[TokenizedText],
    refs: &[TokenizedText],
    max_n: usize,
) -> Result<f64, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut stats = BleuStats::new(max_n);
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(h, r);
    }
    Ok(stats.score())
}

pub fn sentence_bleu(hyp: &TokenizedText, reference: &TokenizedText) -> f64 {
    let mut stats = BleuStats::new(4);
    stats.add(hyp, reference);
    stats.score()
}
