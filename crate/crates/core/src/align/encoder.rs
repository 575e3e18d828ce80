use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Matrix;
use super::AlignError;
use crate::octuple::{OctupleToken, QuantConfig};

const FIELD_NAMES: [&str; 8] = OctupleToken::FIELD_NAMES;

/// Frozen stand-in for a symbolic-music encoder: one embedding table per
/// OctupleMIDI field, summed per token.
#[derive(Debug, Clone, PartialEq)]
pub struct StubEncoder {
    pub tables: [Matrix; 8],
    /// True when the tables came from a weights file rather than random init.
    pub loaded: bool,
}

impl StubEncoder {
    /// Random tables sized by the quantization vocabulary, scaled so the
    /// eight-way sum has unit variance per component.
    pub fn new(cfg: &QuantConfig, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0065_6e63_6f64_6572);
        let sizes = cfg.vocab_sizes();
        let tables = std::array::from_fn(|f| {
            Matrix::normal(sizes[f] as usize, dim, 1.0 / 8f64.sqrt(), &mut rng)
        });
        Self {
            tables,
            loaded: false,
        }
    }

    pub fn zeros(cfg: &QuantConfig, dim: usize) -> Self {
        let sizes = cfg.vocab_sizes();
        Self {
            tables: std::array::from_fn(|f| Matrix::zeros(sizes[f] as usize, dim)),
            loaded: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.tables[0].cols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        FIELD_NAMES
            .iter()
            .zip(&self.tables)
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        FIELD_NAMES
            .iter()
            .zip(self.tables.iter_mut())
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect()
    }
}

/// Token-level hidden states: row `i` is the sum of token `i`'s eight field
/// embeddings.
pub fn encode(tokens: &[OctupleToken], enc: &StubEncoder) -> Result<Matrix, AlignError> {
    if tokens.is_empty() {
        return Err(AlignError::EmptySequence);
    }
    let dim = enc.dim();
    let mut out = Matrix::zeros(tokens.len(), dim);
    for (i, tok) in tokens.iter().enumerate() {
        let fields = tok.fields();
        let row = out.row_mut(i);
        for (f, &value) in fields.iter().enumerate() {
            let table = &enc.tables[f];
            if value as usize >= table.rows() {
                return Err(AlignError::FieldOutOfRange {
                    index: i,
                    field: FIELD_NAMES[f],
                    value,
                    size: table.rows(),
                });
            }
            for (o, e) in row.iter_mut().zip(table.row(value as usize)) {
                *o += e;
            }
        }
    }
    Ok(out)
}

/// Arithmetic mean over rows.
pub fn mean_pool(hidden: &Matrix) -> Result<Vec<f64>, AlignError> {
    if hidden.rows() == 0 {
        return Err(AlignError::EmptySequence);
    }
    let mut out = vec![0.0; hidden.cols()];
    for r in 0..hidden.rows() {
        for (o, v) in out.iter_mut().zip(hidden.row(r)) {
            *o += v;
        }
    }
    let n = hidden.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token(pitch: u32) -> OctupleToken {
        OctupleToken::from_fields([0, 0, 0, pitch, 4, 20, 24, 10])
    }

    #[test]
    fn zero_tables_give_zero_rows() {
        let enc = StubEncoder::zeros(&QuantConfig::default(), 4);
        let h = encode(&[token(60)], &enc).unwrap();
        assert_eq!(h, Matrix::zeros(1, 4));
    }

    #[test]
    fn rows_follow_tokens() {
        let enc = StubEncoder::new(&QuantConfig::default(), 8, 1);
        let a = encode(&[token(60), token(64)], &enc).unwrap();
        let b = encode(&[token(64), token(60)], &enc).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(
            a,
            encode(
                &[token(60), token(64)],
                &StubEncoder::new(&QuantConfig::default(), 8, 1)
            )
            .unwrap()
        );
    }

    #[test]
    fn errors() {
        let enc = StubEncoder::zeros(&QuantConfig::default(), 4);
        assert!(matches!(encode(&[], &enc), Err(AlignError::EmptySequence)));
        let bad = OctupleToken::from_fields([0, 0, 0, 200, 4, 20, 24, 10]);
        assert!(matches!(
            encode(&[bad], &enc),
            Err(AlignError::FieldOutOfRange { field: "pitch", .. })
        ));
        assert!(matches!(
            mean_pool(&Matrix::zeros(0, 3)),
            Err(AlignError::EmptySequence)
        ));
    }

    #[test]
    fn pooling() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mean_pool(&m).unwrap(), vec![0.5, 0.5]);
        let one = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(mean_pool(&one).unwrap(), vec![1.0, 2.0, 3.0]);
    }
}
