//! Fine-tuning of the reference backend under any of the three prediction
//! architectures, with optional PGD adversarial training.
//!
//! Protocol: plain gradient descent with decoupled weight decay, global-norm
//! gradient clipping, a seeded shuffle per epoch, and checkpoint selection by
//! best validation accuracy (earliest epoch wins ties). When adversarial
//! training is enabled the perturbed loss replaces the clean loss; the
//! `adv_combine` flag additionally keeps the clean term.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_example, PerturbationConfig};
use crate::backend::{
    clamp_probability, Checkpoint, Gradients, LossTarget, MaskedLmBackend, ReferenceBackend,
    ReferenceConfig,
};
use crate::corpus::{Corpus, DatasetSplit, LinkExample};
use crate::error::{Error, Result};
use crate::linker::{classify, label_probability_resolved, ArchKind, Architecture, LinkPrediction};
use crate::prompting::{build_input, PromptTemplate, PromptedInput, ResolvedVerbalizer, Verbalizer};
use crate::vocab::Vocabulary;

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub architecture: Architecture,
    pub adversarial: Option<PerturbationConfig>,
    /// Also backpropagate the clean loss next to the adversarial one.
    pub adv_combine: bool,
    /// Global gradient-norm clip; training from scratch diverges without it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 20,
            max_len: 512,
            architecture: Architecture::Multi,
            adversarial: None,
            adv_combine: false,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || self.epochs == 0
            || self.max_len == 0
            || self.grad_clip <= 0.0
        {
            return Err(Error::Config(
                "train config fields must be positive (weight_decay may be zero)".into(),
            ));
        }
        if let Some(adv) = &self.adversarial {
            adv.validate()?;
        }
        Ok(())
    }

    /// Apply `key = value` entries. Template and verbalizer keys are ignored
    /// here so one file can configure the whole experiment.
    pub fn apply_kv(&mut self, entries: &[(String, String)]) -> Result<()> {
        let mut adv = self.adversarial.unwrap_or_default();
        let mut adv_enabled = self.adversarial.is_some();
        for (key, value) in entries {
            match key.as_str() {
                "lr" | "learning_rate" => self.learning_rate = parse_f64(key, value)?,
                "weight_decay" => self.weight_decay = parse_f64(key, value)?,
                "batch_size" => self.batch_size = parse_usize(key, value)?,
                "epochs" => self.epochs = parse_usize(key, value)?,
                "max_len" => self.max_len = parse_usize(key, value)?,
                "architecture" => self.architecture = Architecture::parse(value)?,
                "seed" => self.seed = parse_u64(key, value)?,
                "grad_clip" => self.grad_clip = parse_f64(key, value)?,
                "adv.enabled" => adv_enabled = parse_bool(key, value)?,
                "adv.epsilon" => adv.epsilon = parse_f64(key, value)?,
                "adv.alpha" => adv.alpha = parse_f64(key, value)?,
                "adv.steps" => adv.steps = parse_usize(key, value)?,
                "adv.seed" => adv.seed = parse_u64(key, value)?,
                "adv.combine" => self.adv_combine = parse_bool(key, value)?,
                _ if key.starts_with("template.") || key.starts_with("verbalizer.") => {}
                _ => {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        self.adversarial = adv_enabled.then_some(adv);
        Ok(())
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key:?} expects a number, got {value:?}")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key:?} expects an integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key:?} expects an integer, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key {key:?} expects a boolean, got {value:?}"
        ))),
    }
}

/// Binary cross-entropy with the probability clamped away from 0 and 1.
pub fn bce_loss(p: f64, label: u8) -> f64 {
    let p = clamp_probability(p);
    let y = f64::from(label);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// One training example: the tokenized inputs for every active template plus
/// the gold label.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub inputs: Vec<PromptedInput>,
    pub label: u8,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub per_epoch_log: Vec<EpochLog>,
    /// Number of adversarial inputs generated; zero whenever the adversarial
    /// path is disabled.
    pub adversarial_inputs: u64,
}

impl TrainResult {
    pub const LOG_CSV_HEADER: &'static str = "epoch,train_loss,valid_acc";

    pub fn log_csv(&self) -> String {
        let mut out = String::from(Self::LOG_CSV_HEADER);
        out.push('\n');
        for row in &self.per_epoch_log {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                row.epoch, row.train_loss, row.valid_accuracy
            ));
        }
        out
    }
}

/// The templates a given architecture actually renders.
pub fn active_templates(
    templates: &[PromptTemplate],
    architecture: &Architecture,
) -> Result<Vec<PromptTemplate>> {
    if templates.is_empty() {
        return Err(Error::Config("training needs at least one template".into()));
    }
    match architecture {
        Architecture::Single(index) => templates
            .get(*index)
            .map(|t| vec![t.clone()])
            .ok_or_else(|| {
                Error::Config(format!(
                    "architecture single{} needs {} templates, got {}",
                    index + 1,
                    index + 1,
                    templates.len()
                ))
            }),
        Architecture::Multi => Ok(templates.to_vec()),
        // The class-token route still renders a prompt frame; it uses the
        // first template.
        Architecture::Cls => Ok(vec![templates[0].clone()]),
    }
}

/// Resolve link examples against the corpus and tokenize every active
/// template once up front.
pub fn prepare_items(
    corpus: &Corpus,
    examples: &[LinkExample],
    templates: &[PromptTemplate],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TrainItem>> {
    examples
        .iter()
        .map(|example| {
            let issue = corpus.issue(&example.issue_id).ok_or_else(|| {
                Error::Integrity(format!("example references unknown issue {:?}", example.issue_id))
            })?;
            let commit = corpus.commit(&example.commit_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "example references unknown commit {:?}",
                    example.commit_id
                ))
            })?;
            let inputs = templates
                .iter()
                .map(|t| build_input(issue, commit, t, vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainItem {
                inputs,
                label: example.label,
            })
        })
        .collect()
}

/// Build the vocabulary a training run works against: corpus artifacts, the
/// prompt frame, the templates, and the verbalizer words.
pub fn build_vocabulary(
    corpus: &Corpus,
    templates: &[PromptTemplate],
    verbalizer: &Verbalizer,
) -> Vocabulary {
    let frame = "Issue: Commit:".to_string();
    let mut texts: Vec<&str> = vec![&frame];
    texts.extend(corpus.artifact_texts());
    for t in templates {
        texts.push(&t.text);
    }
    let verbalizer_words: Vec<&str> = verbalizer.words().collect();
    texts.extend(verbalizer_words);
    Vocabulary::build(texts)
}

/// Training state: the model being tuned plus everything a step needs.
pub struct Trainer {
    backend: ReferenceBackend,
    grads: Gradients,
    config: TrainConfig,
    verbalizer: Option<ResolvedVerbalizer>,
    adv_rng: ChaCha8Rng,
    adversarial_inputs: u64,
}

impl Trainer {
    /// A trainer over a fresh backend. `verbalizer` is required for the mask
    /// architectures and ignored by the class-token one.
    pub fn new(
        vocab: Vocabulary,
        config: TrainConfig,
        verbalizer: Option<&Verbalizer>,
    ) -> Result<Trainer> {
        config.validate()?;
        let resolved = match config.architecture.kind() {
            ArchKind::Cls => None,
            _ => {
                let v = verbalizer.ok_or_else(|| {
                    Error::Config("mask architectures need a verbalizer".into())
                })?;
                Some(v.resolve(&vocab)?)
            }
        };
        let backend_config = ReferenceConfig {
            max_len: config.max_len,
            seed: config.seed,
            ..ReferenceConfig::default()
        };
        let backend = ReferenceBackend::new(backend_config, vocab)?;
        let grads = Gradients::zeros_for(&backend);
        let adv_rng = ChaCha8Rng::seed_from_u64(
            config.adversarial.map(|a| a.seed).unwrap_or_default(),
        );
        Ok(Trainer {
            backend,
            grads,
            config,
            verbalizer: resolved,
            adv_rng,
            adversarial_inputs: 0,
        })
    }

    pub fn backend(&self) -> &ReferenceBackend {
        &self.backend
    }

    pub fn adversarial_inputs(&self) -> u64 {
        self.adversarial_inputs
    }

    /// One optimization step over a batch: accumulate per-template losses
    /// (adversarially perturbed when enabled), average, clip, update. Returns
    /// the batch loss.
    pub fn train_step(&mut self, batch: &[TrainItem]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        self.grads.reset();
        let terms: usize = batch.iter().map(|item| item.inputs.len()).sum();
        let scale = 1.0 / terms as f64;
        let mut loss_sum = 0.0;

        let backend = &self.backend;
        let grads = &mut self.grads;
        let adv_rng = &mut self.adv_rng;
        let verbalizer = &self.verbalizer;
        for item in batch {
            for input in &item.inputs {
                let target = match verbalizer {
                    Some(rv) => LossTarget::MaskVerbalizer {
                        mask_position: input.mask_position,
                        verbalizer: rv.clone(),
                        label: item.label,
                    },
                    None => LossTarget::ClsLabel { label: item.label },
                };
                let embeddings = backend.embed(input)?;
                match &self.config.adversarial {
                    Some(adv) => {
                        self.adversarial_inputs += 1;
                        let pad_mask: Vec<bool> = input
                            .token_ids
                            .iter()
                            .map(|&id| id == Vocabulary::PAD_ID)
                            .collect();
                        let perturbed = adversarial_example(
                            &embeddings,
                            |e| backend.loss_gradient_wrt_embeddings(e, &target),
                            adv,
                            adv_rng,
                            Some(&pad_mask),
                        )?;
                        if self.config.adv_combine {
                            let (clean_loss, d_clean) =
                                backend.loss_backward(&embeddings, &target, Some((grads, scale)))?;
                            grads.accumulate_embedding(input, &d_clean, scale);
                            loss_sum += clean_loss;
                        }
                        let (loss, d_e) =
                            backend.loss_backward(&perturbed, &target, Some((grads, scale)))?;
                        grads.accumulate_embedding(input, &d_e, scale);
                        loss_sum += loss;
                    }
                    None => {
                        let (loss, d_e) =
                            backend.loss_backward(&embeddings, &target, Some((grads, scale)))?;
                        grads.accumulate_embedding(input, &d_e, scale);
                        loss_sum += loss;
                    }
                }
            }
        }

        let batch_loss = loss_sum * scale;
        if !batch_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss {batch_loss}")));
        }
        let norm = self.grads.global_norm();
        if norm > self.config.grad_clip {
            self.grads.scale(self.config.grad_clip / norm);
        }
        self.backend
            .apply_update(&self.grads, self.config.learning_rate, self.config.weight_decay);
        Ok(batch_loss)
    }

    /// Link probability for one prepared item under the active architecture.
    pub fn predict_probability(&self, item: &TrainItem) -> Result<f64> {
        match &self.verbalizer {
            Some(rv) => {
                let mut sum = 0.0;
                for input in &item.inputs {
                    let embeddings = self.backend.embed(input)?;
                    let probs = self
                        .backend
                        .mask_probabilities(&embeddings, input.mask_position)?;
                    sum += label_probability_resolved(&probs, rv);
                }
                Ok(sum / item.inputs.len() as f64)
            }
            None => {
                let embeddings = self.backend.embed(&item.inputs[0])?;
                let probs = self.backend.cls_probabilities(&embeddings)?;
                Ok(probs[1])
            }
        }
    }

    /// Accuracy at threshold 0.5 over prepared items.
    pub fn accuracy(&self, items: &[TrainItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Size { min: 1, got: 0 });
        }
        let mut correct = 0usize;
        for item in items {
            let prediction = LinkPrediction {
                probability: self.predict_probability(item)?,
                per_template_probabilities: None,
                architecture: self.config.architecture.kind(),
            };
            if classify(&prediction, 0.5) == item.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / items.len() as f64)
    }
}

/// Run the full protocol: seeded epoch shuffles, batched steps, per-epoch
/// validation, and selection of the checkpoint with the best validation
/// accuracy (earliest epoch on ties). Deterministic for a fixed config.
pub fn fit(
    corpus: &Corpus,
    splits: &DatasetSplit,
    templates: &[PromptTemplate],
    verbalizer: &Verbalizer,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    let active = active_templates(templates, &config.architecture)?;
    let vocab = build_vocabulary(corpus, &active, verbalizer);
    let mut trainer = Trainer::new(vocab.clone(), config.clone(), Some(verbalizer))?;

    let train_items = prepare_items(corpus, &splits.train, &active, &vocab, config.max_len)?;
    let valid_items = prepare_items(corpus, &splits.valid, &active, &vocab, config.max_len)?;
    if train_items.is_empty() || valid_items.is_empty() {
        return Err(Error::Size { min: 1, got: 0 });
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0usize;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_checkpoint = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut term_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainItem> =
                chunk.iter().map(|&i| train_items[i].clone()).collect();
            let terms: usize = batch.iter().map(|item| item.inputs.len()).sum();
            let batch_loss = trainer.train_step(&batch).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}: {msg}"))
                }
                other => other,
            })?;
            loss_sum += batch_loss * terms as f64;
            term_count += terms;
        }
        let train_loss = loss_sum / term_count as f64;
        let valid_accuracy = trainer.accuracy(&valid_items)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_accuracy,
        });
        if valid_accuracy > best_accuracy {
            best_accuracy = valid_accuracy;
            best_epoch = epoch;
            best_checkpoint = Some(trainer.backend.checkpoint());
        }
    }

    Ok(TrainResult {
        best_checkpoint: best_checkpoint.expect("at least one epoch ran"),
        best_epoch,
        per_epoch_log: log,
        adversarial_inputs: trainer.adversarial_inputs,
    })
}

/// Probability for a raw link example against a trained backend, using the
/// same prediction routes as the trainer.
pub fn predict_example(
    backend: &ReferenceBackend,
    corpus: &Corpus,
    example: &LinkExample,
    templates: &[PromptTemplate],
    verbalizer: &Verbalizer,
    architecture: &Architecture,
    max_len: usize,
) -> Result<LinkPrediction> {
    let active = active_templates(templates, architecture)?;
    let issue = corpus
        .issue(&example.issue_id)
        .ok_or_else(|| Error::Integrity(format!("unknown issue {:?}", example.issue_id)))?;
    let commit = corpus
        .commit(&example.commit_id)
        .ok_or_else(|| Error::Integrity(format!("unknown commit {:?}", example.commit_id)))?;
    match architecture.kind() {
        ArchKind::Cls => {
            let input = build_input(issue, commit, &active[0], backend.vocabulary(), max_len)?;
            let embeddings = backend.embed(&input)?;
            let probs = backend.cls_probabilities(&embeddings)?;
            Ok(LinkPrediction {
                probability: probs[1],
                per_template_probabilities: None,
                architecture: ArchKind::Cls,
            })
        }
        kind => {
            let resolved = verbalizer.resolve(backend.vocabulary())?;
            let mut per_template = Vec::with_capacity(active.len());
            for template in &active {
                let input = build_input(issue, commit, template, backend.vocabulary(), max_len)?;
                let embeddings = backend.embed(&input)?;
                let probs = backend.mask_probabilities(&embeddings, input.mask_position)?;
                per_template.push(label_probability_resolved(&probs, &resolved));
            }
            let probability = per_template.iter().sum::<f64>() / per_template.len() as f64;
            Ok(LinkPrediction {
                probability,
                per_template_probabilities: (kind == ArchKind::Multi).then_some(per_template),
                architecture: kind,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CommitArtifact, IssueArtifact};
    use crate::prompting::default_templates;

    fn tiny_corpus(n: usize) -> Corpus {
        let mut corpus = Corpus::new();
        for k in 0..n {
            corpus
                .push_issue(IssueArtifact {
                    issue_id: format!("I{k}"),
                    description: format!("area{} fault{} report", k % 7, k % 5),
                })
                .unwrap();
            corpus
                .push_commit(CommitArtifact {
                    commit_id: format!("C{k}"),
                    message: format!("area{} fault{} repair", k % 7, k % 5),
                    code: format!("patch{}", k % 3),
                })
                .unwrap();
            corpus
                .push_link(LinkExample {
                    issue_id: format!("I{k}"),
                    commit_id: format!("C{k}"),
                    label: 1,
                })
                .unwrap();
            // A mismatched pair as the negative.
            corpus
                .push_link(LinkExample {
                    issue_id: format!("I{k}"),
                    commit_id: format!("C{}", (k + n / 2) % n),
                    label: 0,
                })
                .unwrap_or(());
        }
        corpus
    }

    #[test]
    fn bce_loss_matches_hand_values() {
        assert!((bce_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0, 1) <= 1e-6);
        assert!((bce_loss(0.75, 0) - 0.25f64.ln().abs()).abs() < 1e-4);
        assert!((bce_loss(0.75, 0) - 1.3862943611).abs() < 1e-6);
    }

    fn small_config(arch: Architecture, adv: Option<PerturbationConfig>, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            max_len: 64,
            architecture: arch,
            adversarial: adv,
            seed,
            ..TrainConfig::default()
        }
    }

    fn fit_tiny(config: &TrainConfig) -> TrainResult {
        let corpus = tiny_corpus(20);
        let splits = crate::corpus::split_examples(corpus.links(), 3).unwrap();
        fit(
            &corpus,
            &splits,
            &default_templates(),
            &Verbalizer::default_link(),
            config,
        )
        .unwrap()
    }

    #[test]
    fn single_epoch_selects_epoch_one() {
        let mut config = small_config(Architecture::Multi, None, 1);
        config.epochs = 1;
        let result = fit_tiny(&config);
        assert_eq!(result.best_epoch, 1);
        assert_eq!(result.per_epoch_log.len(), 1);
    }

    #[test]
    fn same_seed_gives_identical_logs_and_checkpoints() {
        let config = small_config(Architecture::Multi, None, 7);
        let a = fit_tiny(&config);
        let b = fit_tiny(&config);
        assert_eq!(a.per_epoch_log, b.per_epoch_log);
        assert_eq!(a.best_checkpoint, b.best_checkpoint);
        assert_eq!(a.adversarial_inputs, 0);
    }

    #[test]
    fn adversarial_runs_differ_and_count_inputs() {
        let clean = fit_tiny(&small_config(Architecture::Multi, None, 7));
        let adv = fit_tiny(&small_config(
            Architecture::Multi,
            Some(PerturbationConfig::default()),
            7,
        ));
        assert!(adv.adversarial_inputs > 0);
        assert_ne!(clean.per_epoch_log, adv.per_epoch_log);
    }

    #[test]
    fn vanishing_epsilon_approaches_the_clean_update() {
        let corpus = tiny_corpus(12);
        let templates = default_templates();
        let verbalizer = Verbalizer::default_link();
        let active = active_templates(&templates, &Architecture::Single(0)).unwrap();
        let vocab = build_vocabulary(&corpus, &active, &verbalizer);
        let items = prepare_items(&corpus, corpus.links(), &active, &vocab, 64).unwrap();
        let batch = &items[..4];

        let mut clean = Trainer::new(
            vocab.clone(),
            small_config(Architecture::Single(0), None, 5),
            Some(&verbalizer),
        )
        .unwrap();
        clean.train_step(batch).unwrap();

        let tiny_adv = PerturbationConfig {
            epsilon: 1e-9,
            alpha: 1e-9,
            ..Default::default()
        };
        let mut adv = Trainer::new(
            vocab,
            small_config(Architecture::Single(0), Some(tiny_adv), 5),
            Some(&verbalizer),
        )
        .unwrap();
        adv.train_step(batch).unwrap();

        let diff = clean
            .backend
            .checkpoint()
            .params_l_inf_diff(&adv.backend.checkpoint())
            .unwrap();
        assert!(diff <= 1e-5, "updates diverged by {diff}");
    }

    #[test]
    fn adv_disabled_step_equals_plain_prompt_tuning_step() {
        let corpus = tiny_corpus(12);
        let templates = default_templates();
        let verbalizer = Verbalizer::default_link();
        let active = active_templates(&templates, &Architecture::Multi).unwrap();
        let vocab = build_vocabulary(&corpus, &active, &verbalizer);
        let items = prepare_items(&corpus, corpus.links(), &active, &vocab, 64).unwrap();

        let config = small_config(Architecture::Multi, None, 9);
        let mut a = Trainer::new(vocab.clone(), config.clone(), Some(&verbalizer)).unwrap();
        let mut b = Trainer::new(vocab, config, Some(&verbalizer)).unwrap();
        let la = a.train_step(&items[..4]).unwrap();
        let lb = b.train_step(&items[..4]).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.backend.checkpoint(), b.backend.checkpoint());
        assert_eq!(a.adversarial_inputs(), 0);
    }

    #[test]
    fn cls_architecture_trains_and_predicts() {
        let config = small_config(Architecture::Cls, None, 11);
        let result = fit_tiny(&config);
        assert_eq!(result.per_epoch_log.len(), 2);
        let backend = ReferenceBackend::from_checkpoint(result.best_checkpoint).unwrap();
        let corpus = tiny_corpus(20);
        let p = predict_example(
            &backend,
            &corpus,
            &corpus.links()[0],
            &default_templates(),
            &Verbalizer::default_link(),
            &Architecture::Cls,
            64,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&p.probability));
    }

    #[test]
    fn config_kv_round_trip() {
        let entries = crate::config::parse_kv(
            "lr = 0.02\nepochs = 5\narchitecture = single2\nadv.enabled = on\nadv.epsilon = 0.5\nadv.seed = 9\ntemplate.1 = ignored [MASK]\n",
        )
        .unwrap();
        let mut config = TrainConfig::default();
        config.apply_kv(&entries).unwrap();
        assert_eq!(config.learning_rate, 0.02);
        assert_eq!(config.epochs, 5);
        assert_eq!(config.architecture, Architecture::Single(1));
        let adv = config.adversarial.unwrap();
        assert_eq!(adv.epsilon, 0.5);
        assert_eq!(adv.seed, 9);

        let bad = crate::config::parse_kv("no_such_key = 1\n").unwrap();
        assert!(TrainConfig::default().apply_kv(&bad).is_err());
    }
}
