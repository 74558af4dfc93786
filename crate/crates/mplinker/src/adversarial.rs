//! Projected-gradient-descent perturbation of input embeddings under an
//! L-infinity constraint, used to generate adversarial variants of training
//! batches.
//!
//! One round: draw the perturbation uniformly inside the budget, then for
//! each step take a signed-gradient ascent step of size alpha and clip back
//! into the budget. Rows belonging to padding positions are kept at zero.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingMatrix;
use crate::error::{Error, Result};

/// PGD settings. The defaults are budget 1, step size 1, and a single
/// iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            epsilon: 1.0,
            alpha: 1.0,
            steps: 1,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "perturbation epsilon and alpha must be positive, got {} and {}",
                self.epsilon, self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("perturbation needs at least one step".into()));
        }
        Ok(())
    }
}

/// Draw the initial perturbation: every entry i.i.d. uniform on
/// [-epsilon, epsilon], with padding rows forced to zero.
pub fn init_delta(
    shape: (usize, usize),
    epsilon: f64,
    rng: &mut impl Rng,
    pad_mask: Option<&[bool]>,
) -> Array2<f64> {
    let (rows, cols) = shape;
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-epsilon..=epsilon))
        .collect();
    let mut delta = Array2::from_shape_vec(shape, data).expect("shape matches data");
    zero_pad_rows(&mut delta, pad_mask);
    delta
}

fn zero_pad_rows(delta: &mut Array2<f64>, pad_mask: Option<&[bool]>) {
    if let Some(mask) = pad_mask {
        for (row, &is_pad) in delta.rows_mut().into_iter().zip(mask) {
            if is_pad {
                for v in row {
                    *v = 0.0;
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One projected step: `clip(delta + alpha * sign(grad))` elementwise, with
/// sign(0) = 0 so zero-gradient coordinates stay put.
pub fn pgd_step(
    delta: &Array2<f64>,
    grad: &Array2<f64>,
    alpha: f64,
    epsilon: f64,
) -> Result<Array2<f64>> {
    if delta.dim() != grad.dim() {
        return Err(Error::Shape {
            expected: delta.dim(),
            got: grad.dim(),
        });
    }
    let mut next = delta.clone();
    next.zip_mut_with(grad, |d, &g| {
        *d = (*d + alpha * sign(g)).clamp(-epsilon, epsilon);
    });
    Ok(next)
}

/// Elementwise sum of embeddings and perturbation.
pub fn perturb(embeddings: &EmbeddingMatrix, delta: &Array2<f64>) -> Result<EmbeddingMatrix> {
    if embeddings.data.dim() != delta.dim() {
        return Err(Error::Shape {
            expected: embeddings.data.dim(),
            got: delta.dim(),
        });
    }
    Ok(EmbeddingMatrix::new(&embeddings.data + delta))
}

/// Run the full PGD round against a gradient oracle and return the
/// adversarially perturbed embeddings.
pub fn adversarial_example(
    embeddings: &EmbeddingMatrix,
    mut loss_gradient: impl FnMut(&EmbeddingMatrix) -> Result<Array2<f64>>,
    config: &PerturbationConfig,
    rng: &mut impl Rng,
    pad_mask: Option<&[bool]>,
) -> Result<EmbeddingMatrix> {
    config.validate()?;
    let mut delta = init_delta(embeddings.data.dim(), config.epsilon, rng, pad_mask);
    for _ in 0..config.steps {
        let grad = loss_gradient(&perturb(embeddings, &delta)?)?;
        delta = pgd_step(&delta, &grad, config.alpha, config.epsilon)?;
        zero_pad_rows(&mut delta, pad_mask);
    }
    perturb(embeddings, &delta)
}
