use rand::Rng;

use super::tensor::Matrix;
use super::AlignError;

/// Affine map from a pooled `M`-vector to `k` prefix rows of width `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(k·T) × M`.
    pub w: Matrix,
    /// `1 × (k·T)`.
    pub b: Matrix,
    pub prefix_count: usize,
}

impl Projection {
    pub fn new(encoder_dim: usize, lm_dim: usize, prefix_count: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::uniform(
                prefix_count * lm_dim,
                encoder_dim,
                1.0 / (encoder_dim as f64).sqrt(),
                rng,
            ),
            b: Matrix::zeros(1, prefix_count * lm_dim),
            prefix_count,
        }
    }

    pub fn zeros(encoder_dim: usize, lm_dim: usize, prefix_count: usize) -> Self {
        Self {
            w: Matrix::zeros(prefix_count * lm_dim, encoder_dim),
            b: Matrix::zeros(1, prefix_count * lm_dim),
            prefix_count,
        }
    }

    pub fn lm_dim(&self) -> usize {
        self.w.rows() / self.prefix_count
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("projection.w".into(), &self.w),
            ("projection.b".into(), &self.b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("projection.w".into(), &mut self.w),
            ("projection.b".into(), &mut self.b),
        ]
    }

    /// Accumulates parameter gradients given `d_prefix` (k × T) for input
    /// `pooled`.
    pub fn accumulate_grad(&self, pooled: &[f64], d_prefix: &Matrix, grad: &mut Projection) {
        let flat = d_prefix.data();
        let m = pooled.len();
        for (i, &g) in flat.iter().enumerate() {
            grad.b.data_mut()[i] += g;
            let row = &mut grad.w.data_mut()[i * m..(i + 1) * m];
            for (w, p) in row.iter_mut().zip(pooled) {
                *w += g * p;
            }
        }
    }
}

/// `y = W·pooled + b`, reshaped to `k` rows of width `T`.
pub fn project(pooled: &[f64], proj: &Projection) -> Result<Matrix, AlignError> {
    if pooled.len() != proj.w.cols() {
        return Err(AlignError::ShapeMismatch(format!(
            "pooled vector has {} entries, projection expects {}",
            pooled.len(),
            proj.w.cols()
        )));
    }
    let x = Matrix::from_vec(1, pooled.len(), pooled.to_vec());
    let mut y = x.matmul_t(&proj.w);
    y.add_assign(&proj.b);
    Ok(Matrix::from_vec(
        proj.prefix_count,
        proj.lm_dim(),
        y.into_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_projection() {
        let p = Projection::zeros(3, 4, 2);
        assert_eq!(project(&[1.0, 2.0, 3.0], &p).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn identity_projection() {
        let mut p = Projection::zeros(3, 3, 1);
        p.w = Matrix::identity(3);
        let y = project(&[1.0, -2.0, 0.5], &p).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn shape_mismatch() {
        let p = Projection::zeros(3, 3, 1);
        assert!(matches!(
            project(&[1.0], &p),
            Err(AlignError::ShapeMismatch(_))
        ));
    }
}
