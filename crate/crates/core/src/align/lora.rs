use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjKind {
    Query,
    Key,
    Value,
    Output,
}

impl ProjKind {
    pub fn short(self) -> &'static str {
        match self {
            ProjKind::Query => "wq",
            ProjKind::Key => "wk",
            ProjKind::Value => "wv",
            ProjKind::Output => "wo",
        }
    }
}

/// The base matrix an adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub proj: ProjKind,
}

impl std::fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "lm.blocks.{}.{}", self.layer, self.proj.short())
    }
}

/// Low-rank delta `(alpha / rank) · B · A` added to a frozen base matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    /// `rank × d_in`.
    pub a: Matrix,
    /// `d_out × rank`.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A` uniform in `±1/sqrt(d_in)`, `B` zero, so the delta starts at zero.
    pub fn new(
        target: LoraTarget,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(rank >= 1, "LoRA rank must be at least 1");
        Self {
            target,
            a: Matrix::uniform(rank, d_in, 1.0 / (d_in as f64).sqrt(), rng),
            b: Matrix::zeros(d_out, rank),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense delta `(alpha / rank) · B · A`.
    pub fn delta(&self) -> Matrix {
        let mut d = self.b.matmul(&self.a);
        d.scale(self.scale());
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            target: self.target,
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            (format!("lora.{}.a", self.target), &self.a),
            (format!("lora.{}.b", self.target), &self.b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let t = self.target;
        vec![
            (format!("lora.{t}.a"), &mut self.a),
            (format!("lora.{t}.b"), &mut self.b),
        ]
    }
}

/// Adapters on the query and value matrices of every layer.
pub fn attach_qv_adapters(
    layers: usize,
    dim: usize,
    rank: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Vec<LoraAdapter> {
    let mut out = Vec::with_capacity(layers * 2);
    for layer in 0..layers {
        for proj in [ProjKind::Query, ProjKind::Value] {
            out.push(LoraAdapter::new(
                LoraTarget { layer, proj },
                dim,
                dim,
                rank,
                alpha,
                rng,
            ));
        }
    }
    out
}

pub(crate) fn find(adapters: &[LoraAdapter], layer: usize, proj: ProjKind) -> Option<usize> {
    adapters
        .iter()
        .position(|a| a.target.layer == layer && a.target.proj == proj)
}
