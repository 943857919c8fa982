//! Intra-modal similarity weights computed from the frozen tower's
//! pre-projection embeddings. The loss treats them as constants.

use serde::{Deserialize, Serialize};

use crate::error::{CwclError, Result};
use crate::numerics::{softmax_row, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `w_ij = <q_i, q_j> / 2 + 0.5`.
    #[default]
    Linear,
    /// Row-wise softmax over `<q_i, q_k>`.
    Softmax,
    Indicator,
    ClassIndicator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityWeights {
    kind: WeightKind,
    w: Matrix,
}

impl SimilarityWeights {
    /// Wraps an arbitrary weight matrix. Entries must lie in `[0, 1]`.
    pub fn custom(kind: WeightKind, w: Matrix) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(CwclError::shape(format!(
                "weights must be square, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        if let Some(x) = w.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(CwclError::invalid(format!("weight {x} outside [0, 1]")));
        }
        Ok(Self { kind, w })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.w.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    /// Applies the same row permutation to both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w = Matrix::from_fn(perm.len(), perm.len(), |i, j| self.w[(perm[i], perm[j])]);
        Self { kind: self.kind, w }
    }
}

fn gram(q: &Matrix) -> Result<Matrix> {
    q.ensure_unit_rows()?;
    q.matmul_nt(q)
}

pub fn linear_weights(q: &Matrix) -> Result<SimilarityWeights> {
    let g = gram(q)?;
    // Rounding can push a cosine a hair past +-1.
    let w = g.map(|c| (c / 2.0 + 0.5).clamp(0.0, 1.0));
    Ok(SimilarityWeights {
        kind: WeightKind::Linear,
        w,
    })
}

pub fn softmax_weights(q: &Matrix) -> Result<SimilarityWeights> {
    let g = gram(q)?;
    let mut w = Matrix::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        w.row_mut(i).copy_from_slice(&softmax_row(g.row(i))?);
    }
    Ok(SimilarityWeights {
        kind: WeightKind::Softmax,
        w,
    })
}

pub fn indicator_weights(n: usize) -> Result<SimilarityWeights> {
    if n == 0 {
        return Err(CwclError::invalid("indicator weights need n >= 1"));
    }
    Ok(SimilarityWeights {
        kind: WeightKind::Indicator,
        w: Matrix::identity(n),
    })
}

pub fn class_indicator_weights(labels: &[usize]) -> Result<SimilarityWeights> {
    if labels.is_empty() {
        return Err(CwclError::invalid("class weights need at least one label"));
    }
    let n = labels.len();
    let w = Matrix::from_fn(n, n, |i, j| f64::from(u8::from(labels[i] == labels[j])));
    Ok(SimilarityWeights {
        kind: WeightKind::ClassIndicator,
        w,
    })
}

/// Weights of the requested data-driven kind from frozen embeddings.
pub fn weights_from_embeddings(kind: WeightKind, q: &Matrix) -> Result<SimilarityWeights> {
    match kind {
        WeightKind::Linear => linear_weights(q),
        WeightKind::Softmax => softmax_weights(q),
        WeightKind::Indicator => indicator_weights(q.rows()),
        WeightKind::ClassIndicator => Err(CwclError::invalid(
            "class-indicator weights need labels, not embeddings",
        )),
    }
}
