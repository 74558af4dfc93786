//! The masked-LM backend contract.
//!
//! A backend embeds token sequences, runs a sequence encoder, exposes
//! per-position vocabulary distributions plus the class-token hidden state,
//! and can differentiate a scalar loss with respect to the input embedding
//! matrix. The last capability is what lets the adversarial module perturb
//! embeddings rather than tokens, so `forward_from_embeddings` is a
//! first-class entry point rather than an internal detail.

mod reference;

pub use reference::{Checkpoint, Gradients, ReferenceBackend, ReferenceConfig};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::prompting::{PromptedInput, ResolvedVerbalizer};
use crate::vocab::Vocabulary;

/// An L x d matrix of input embeddings, one row per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub data: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix { data }
    }

    pub fn seq_len(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Encoder outputs: vocabulary logits at every position and the class-token
/// hidden state.
#[derive(Debug, Clone)]
pub struct BackendOutput {
    pub vocab_logits: Array2<f64>,
    pub cls_hidden: Array1<f64>,
}

impl BackendOutput {
    /// Softmax of the logits row at `position`.
    pub fn position_distribution(&self, position: usize) -> Array1<f64> {
        softmax(&self.vocab_logits.row(position).to_owned())
    }

    /// Softmax of the logits row at the mask position.
    pub fn mask_distribution(&self, mask_position: usize) -> Array1<f64> {
        self.position_distribution(mask_position)
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Probabilities entering a log are clamped to this band.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP.0, PROB_CLAMP.1)
}

/// What the configured loss is measured against.
#[derive(Debug, Clone)]
pub enum LossTarget {
    /// Cross-entropy on the verbalized mask-position distribution.
    MaskVerbalizer {
        mask_position: usize,
        verbalizer: ResolvedVerbalizer,
        label: u8,
    },
    /// Cross-entropy on the 2-class head over the class-token hidden state.
    ClsLabel { label: u8 },
}

impl LossTarget {
    pub fn label(&self) -> u8 {
        match self {
            LossTarget::MaskVerbalizer { label, .. } => *label,
            LossTarget::ClsLabel { label } => *label,
        }
    }
}

/// The backend contract shared by the reference implementation and any
/// plugged-in pretrained model.
pub trait MaskedLmBackend {
    fn vocabulary(&self) -> &Vocabulary;

    /// Maximum input sequence length the backend accepts.
    fn max_len(&self) -> usize;

    /// Map token ids to input embeddings (token embedding plus positional
    /// term). Fails on ids outside the vocabulary.
    fn embed(&self, input: &PromptedInput) -> Result<EmbeddingMatrix>;

    /// Run the encoder on explicit embeddings.
    fn forward_from_embeddings(&self, embeddings: &EmbeddingMatrix) -> Result<BackendOutput>;

    /// Apply the attached 2-class affine head to a class-token hidden state.
    fn class_logits(&self, cls_hidden: &Array1<f64>) -> [f64; 2];

    /// The scalar loss for `target` evaluated at `embeddings`.
    fn loss(&self, embeddings: &EmbeddingMatrix, target: &LossTarget) -> Result<f64>;

    /// Gradient of the configured loss with respect to the input embedding
    /// matrix. Same shape as `embeddings`.
    fn loss_gradient_wrt_embeddings(
        &self,
        embeddings: &EmbeddingMatrix,
        target: &LossTarget,
    ) -> Result<Array2<f64>>;

    /// Fused forward: embed then encode.
    fn forward(&self, input: &PromptedInput) -> Result<BackendOutput> {
        self.forward_from_embeddings(&self.embed(input)?)
    }
}

pub(crate) fn check_same_shape(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
