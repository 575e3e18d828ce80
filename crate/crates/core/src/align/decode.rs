use super::lm::TinyLm;
use super::lora::LoraAdapter;
use super::tensor::Matrix;
use super::vocab::EOS;
use super::AlignError;

/// Appends the highest-scoring token (lowest id on ties) to the prompt until
/// the end token or `max_new` tokens. The end token is not returned.
pub fn greedy_decode(
    prefix: &Matrix,
    prompt_ids: &[u32],
    model: &TinyLm,
    adapters: &[LoraAdapter],
    max_new: usize,
) -> Result<Vec<u32>, AlignError> {
    let k = prefix.rows();
    if k + prompt_ids.len() > model.max_seq() {
        return Err(AlignError::SequenceTooLong {
            len: k + prompt_ids.len(),
            max: model.max_seq(),
        });
    }
    let mut ids = prompt_ids.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && k + ids.len() < model.max_seq() {
        let cache = model.forward(prefix, &ids, adapters)?;
        let last = cache.len() - 1;
        let logits = model.logits_rows(&cache, &[last]);
        let mut best = 0usize;
        for (i, &v) in logits.row(0).iter().enumerate() {
            if v > logits.row(0)[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
        ids.push(tok);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignConfig;
    use rand::SeedableRng;

    fn rigged(token: usize) -> (AlignConfig, TinyLm) {
        let cfg = AlignConfig {
            lm_dim: 8,
            lm_heads: 2,
            lm_layers: 1,
            vocab_size: 10,
            max_seq: 16,
            ..AlignConfig::default()
        };
        let mut lm = TinyLm::new(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        lm.head.fill(0.0);
        lm.ln_f.fill(0.0);
        lm.head.row_mut(token).fill(1.0);
        (cfg, lm)
    }

    #[test]
    fn ties_pick_lowest_id() {
        // All-zero logits: every token ties, so id 0 wins each step.
        let (cfg, lm) = rigged(4);
        let prefix = Matrix::zeros(1, cfg.lm_dim);
        let out = greedy_decode(&prefix, &[2], &lm, &[], 3).unwrap();
        assert_eq!(out, vec![0, 0, 0]);
    }

    #[test]
    fn rigged_token_repeats() {
        let (cfg, mut lm) = rigged(4);
        lm.ln_f.fill(1.0);
        lm.head.fill(0.0);
        for c in 0..cfg.lm_dim {
            lm.head.set(4, c, 1e-9);
        }
        lm.blocks[0].w2.fill(0.0);
        lm.blocks[0].wo.fill(0.0);
        lm.tok_emb.fill(1.0);
        lm.pos_emb.fill(0.0);
        let prefix = Matrix::from_vec(1, cfg.lm_dim, vec![1.0; cfg.lm_dim]);
        let out = greedy_decode(&prefix, &[2], &lm, &[], 5).unwrap();
        assert_eq!(out, vec![4; 5]);
        assert!(greedy_decode(&prefix, &[2], &lm, &[], 0)
            .unwrap()
            .is_empty());
    }
}
