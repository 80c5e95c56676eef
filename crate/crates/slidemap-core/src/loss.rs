//! Batch-level set loss over landslide-head pixels.
//!
//! For a batch of embeddings, E⁺ is the set of embedding values at labeled
//! pixels across the whole batch and E⁻ the rest. The loss is
//! `(1 − mean(E⁺)) + mean(E⁻)`; when the batch has no labeled pixels the
//! positive term is omitted. Head pixels that the annotation missed end up in
//! E⁻, where their contribution is diluted by its size.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Embeddings and labels for one batch, with the E⁺/E⁻ partition sizes.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub labels: Tensor,
    pub pos_count: usize,
    pub neg_count: usize,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Tensor) -> Result<Self> {
        if (embeddings.n, embeddings.c, embeddings.h, embeddings.w) != (labels.n, labels.c, labels.h, labels.w) {
            return Err(Error::ShapeMismatch("embeddings and labels differ in shape".into()));
        }
        if embeddings.c != 1 {
            return Err(Error::ShapeMismatch(format!("embeddings must have 1 channel, got {}", embeddings.c)));
        }
        let mut pos = 0usize;
        for (&l, &e) in labels.data.iter().zip(embeddings.data.iter()) {
            if l != 0.0 && l != 1.0 {
                return Err(Error::ShapeMismatch(format!("non-binary label {l}")));
            }
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::ShapeMismatch(format!("embedding {e} outside [0,1]")));
            }
            if l == 1.0 {
                pos += 1;
            }
        }
        let total = labels.data.len();
        Ok(Self {
            embeddings,
            labels,
            pos_count: pos,
            neg_count: total - pos,
        })
    }
}

/// `(1 − mean E⁺) + mean E⁻`, in [0,2].
pub fn batch_loss(batch: &EmbeddingBatch) -> f64 {
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    for (&e, &l) in batch.embeddings.data.iter().zip(batch.labels.data.iter()) {
        if l == 1.0 {
            pos_sum += e;
        } else {
            neg_sum += e;
        }
    }
    let pos_term = if batch.pos_count > 0 {
        1.0 - pos_sum / batch.pos_count as f64
    } else {
        0.0
    };
    let neg_term = if batch.neg_count > 0 {
        neg_sum / batch.neg_count as f64
    } else {
        0.0
    };
    pos_term + neg_term
}

/// Gradient of [`batch_loss`] w.r.t. each embedding pixel:
/// −1/|E⁺| at labeled pixels, +1/|E⁻| elsewhere.
pub fn batch_loss_grad(batch: &EmbeddingBatch) -> Tensor {
    let pos_g = if batch.pos_count > 0 {
        -1.0 / batch.pos_count as f64
    } else {
        0.0
    };
    let neg_g = if batch.neg_count > 0 {
        1.0 / batch.neg_count as f64
    } else {
        0.0
    };
    let mut grad = batch.embeddings.clone();
    for (g, &l) in grad.data.iter_mut().zip(batch.labels.data.iter()) {
        *g = if l == 1.0 { pos_g } else { neg_g };
    }
    grad
}
