//! InfoNCE guidance loss over paired image/text embeddings and the CLIP-S score.
//!
//! Row `i` of the text matrix is the positive key for image `i`; every other
//! row of the batch is a negative. The loss is the mean over images of
//! `-log softmax(A[i])[i]` with `A = Q K^T / tau`. Gradients are taken with
//! respect to the rows as given; renormalization belongs to the caller.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::embedding_store::{EmbeddingStore, NORM_TOLERANCE};

pub const DEFAULT_TAU: f64 = 0.07;
pub const CLIP_S_WEIGHT: f64 = 2.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GuidanceError {
    #[error("shape mismatch: images {images:?}, texts {texts:?}")]
    ShapeMismatch {
        images: (usize, usize),
        texts: (usize, usize),
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("non-finite value in {0} embeddings")]
    NonFinite(&'static str),
    #[error("{matrix} row {row} has norm {norm}, expected 1")]
    NotNormalized {
        matrix: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBatch {
    images: Array2<f64>,
    texts: Array2<f64>,
    tau: f64,
}

impl GuidanceBatch {
    /// Validated batch; both matrices must have unit rows.
    pub fn new(images: Array2<f64>, texts: Array2<f64>, tau: f64) -> Result<Self, GuidanceError> {
        let batch = Self::unnormalized(images, texts, tau)?;
        for (name, m) in [("image", &batch.images), ("text", &batch.texts)] {
            for (row, v) in m.axis_iter(Axis(0)).enumerate() {
                let norm = v.dot(&v).sqrt();
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(GuidanceError::NotNormalized {
                        matrix: name,
                        row,
                        norm,
                    });
                }
            }
        }
        Ok(batch)
    }

    /// Batch without the unit-norm check, for gradient checks and callers
    /// that own their normalization layer.
    pub fn unnormalized(images: Array2<f64>, texts: Array2<f64>, tau: f64) -> Result<Self, GuidanceError> {
        if images.dim() != texts.dim() {
            return Err(GuidanceError::ShapeMismatch {
                images: images.dim(),
                texts: texts.dim(),
            });
        }
        if images.nrows() == 0 || images.ncols() == 0 {
            return Err(GuidanceError::EmptyBatch);
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(GuidanceError::BadTemperature(tau));
        }
        if images.iter().any(|x| !x.is_finite()) {
            return Err(GuidanceError::NonFinite("image"));
        }
        if texts.iter().any(|x| !x.is_finite()) {
            return Err(GuidanceError::NonFinite("text"));
        }
        Ok(Self { images, texts, tau })
    }

    /// Gather paired rows from two stores.
    pub fn from_stores(
        image_store: &EmbeddingStore,
        text_store: &EmbeddingStore,
        pairs: &[(String, String)],
        tau: f64,
    ) -> Result<Self, GuidanceError> {
        if image_store.dim() != text_store.dim() {
            return Err(GuidanceError::DimensionMismatch(image_store.dim(), text_store.dim()));
        }
        let d = image_store.dim();
        let mut images = Array2::zeros((pairs.len(), d));
        let mut texts = Array2::zeros((pairs.len(), d));
        for (i, (img, txt)) in pairs.iter().enumerate() {
            let q = image_store.get(img).ok_or_else(|| GuidanceError::UnknownId {
                kind: "image",
                id: img.clone(),
            })?;
            let k = text_store.get(txt).ok_or_else(|| GuidanceError::UnknownId {
                kind: "text",
                id: txt.clone(),
            })?;
            images.row_mut(i).assign(&Array1::from_iter(q.iter().map(|&x| f64::from(x))));
            texts.row_mut(i).assign(&Array1::from_iter(k.iter().map(|&x| f64::from(x))));
        }
        Self::new(images, texts, tau)
    }

    pub fn batch_size(&self) -> usize {
        self.images.nrows()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn texts(&self) -> &Array2<f64> {
        &self.texts
    }
}

/// `A[i][j] = image_i . text_j / tau`.
pub fn affinity_matrix(batch: &GuidanceBatch) -> Array2<f64> {
    batch.images.dot(&batch.texts.t()) / batch.tau
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(row)[positive]`, max-shifted.
pub fn row_loss(row: ArrayView1<f64>, positive: usize) -> f64 {
    log_sum_exp(row) - row[positive]
}

/// Row-wise softmax, max-shifted.
fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut p = a.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    /// dL/dQ, shape B x d.
    pub grad_images: Array2<f64>,
    /// dL/dK, shape B x d.
    pub grad_texts: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// Image-anchored only.
    #[default]
    ImageToText,
    /// Mean of image-anchored and text-anchored terms.
    Symmetric,
}

/// Mean loss and the gradient of the loss w.r.t. the affinity matrix.
fn anchored(a: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = a.nrows();
    let loss = a
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| row_loss(row, i))
        .sum::<f64>()
        / b as f64;
    let mut g = softmax_rows(a);
    for i in 0..b {
        g[[i, i]] -= 1.0;
    }
    g /= b as f64;
    (loss, g)
}

pub fn infonce_loss(batch: &GuidanceBatch, direction: Direction) -> InfoNceOutput {
    let a = affinity_matrix(batch);
    let (loss, g) = match direction {
        Direction::ImageToText => anchored(&a),
        Direction::Symmetric => {
            let (l1, g1) = anchored(&a);
            let at = a.t().to_owned();
            let (l2, g2) = anchored(&at);
            ((l1 + l2) / 2.0, (g1 + g2.t()) / 2.0)
        }
    };
    let grad_images = g.dot(&batch.texts) / batch.tau;
    let grad_texts = g.t().dot(&batch.images) / batch.tau;
    InfoNceOutput {
        loss,
        grad_images,
        grad_texts,
    }
}

/// `2.5 * max(cos(image, text), 0)`.
pub fn clip_s(image_embedding: &[f32], text_embedding: &[f32]) -> Result<f64, GuidanceError> {
    if image_embedding.len() != text_embedding.len() {
        return Err(GuidanceError::DimensionMismatch(
            image_embedding.len(),
            text_embedding.len(),
        ));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in image_embedding.iter().zip(text_embedding) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GuidanceError::ZeroNorm);
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(CLIP_S_WEIGHT * cos.max(0.0))
}
