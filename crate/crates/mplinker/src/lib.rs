//! Issue-commit link recovery as a cloze task.
//!
//! The pipeline: load issue/commit artifacts and labeled links, render each
//! pair into a masked prompt, score the mask position with a verbalizer
//! against a masked-LM backend, and aggregate multiple templates by averaging
//! their probabilities. Training optionally hardens the model with
//! projected-gradient-descent perturbations of the input embeddings, and the
//! evaluation side provides confusion-matrix metrics, rank AUC, an exact
//! Wilcoxon signed-rank test, and Cliff's Delta for comparing runs.

pub mod adversarial;
pub mod backend;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod linker;
pub mod prompting;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
