//! The three prediction architectures: single-template cloze prediction,
//! multi-template probability averaging, and direct classification from the
//! class-token hidden state.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::backend::{clamp_probability, softmax, MaskedLmBackend};
use crate::corpus::{CommitArtifact, IssueArtifact};
use crate::error::{Error, Result};
use crate::prompting::{build_input, PromptTemplate, ResolvedVerbalizer, Verbalizer};
use crate::vocab::Vocabulary;

/// Which route produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    Single,
    Multi,
    Cls,
}

/// A concrete experiment architecture: one template by index, the average
/// over all templates, or the class-token route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Single(usize),
    Multi,
    Cls,
}

impl Architecture {
    pub fn kind(&self) -> ArchKind {
        match self {
            Architecture::Single(_) => ArchKind::Single,
            Architecture::Multi => ArchKind::Multi,
            Architecture::Cls => ArchKind::Cls,
        }
    }

    /// Parse the command-line spelling: `single1`, `single2`, ..., `multi`,
    /// `cls`.
    pub fn parse(text: &str) -> Result<Architecture> {
        match text {
            "multi" => Ok(Architecture::Multi),
            "cls" => Ok(Architecture::Cls),
            _ => {
                if let Some(n) = text.strip_prefix("single") {
                    let index: usize = n.parse().map_err(|_| {
                        Error::Config(format!("unknown architecture {text:?}"))
                    })?;
                    if index == 0 {
                        return Err(Error::Config(format!(
                            "architecture {text:?} is 1-based; use single1"
                        )));
                    }
                    Ok(Architecture::Single(index - 1))
                } else {
                    Err(Error::Config(format!("unknown architecture {text:?}")))
                }
            }
        }
    }

    /// The command-line spelling.
    pub fn label(&self) -> String {
        match self {
            Architecture::Single(index) => format!("single{}", index + 1),
            Architecture::Multi => "multi".to_string(),
            Architecture::Cls => "cls".to_string(),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// A link probability plus, for the multi-template route, the per-template
/// probabilities it averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkPrediction {
    pub probability: f64,
    pub per_template_probabilities: Option<Vec<f64>>,
    pub architecture: ArchKind,
}

/// Convert a vocabulary distribution into the link probability: average the
/// distribution over each word set, then renormalize the two scores so they
/// form a Bernoulli probability.
pub fn label_probability(
    vocab_probs: &Array1<f64>,
    verbalizer: &Verbalizer,
    vocab: &Vocabulary,
) -> Result<f64> {
    let resolved = verbalizer.resolve(vocab)?;
    Ok(label_probability_resolved(vocab_probs, &resolved))
}

/// `label_probability` against an already resolved verbalizer.
pub fn label_probability_resolved(
    vocab_probs: &Array1<f64>,
    verbalizer: &ResolvedVerbalizer,
) -> f64 {
    let mean = |ids: &[usize]| {
        ids.iter().map(|&id| vocab_probs[id]).sum::<f64>() / ids.len() as f64
    };
    let score_pos = mean(&verbalizer.positive_ids);
    let score_neg = mean(&verbalizer.negative_ids);
    score_pos / (score_pos + score_neg).max(1e-12)
}

/// Predict with one template: the probability comes from the mask-position
/// vocabulary distribution scored by the verbalizer.
pub fn single_template_predict<B: MaskedLmBackend>(
    issue: &IssueArtifact,
    commit: &CommitArtifact,
    template: &PromptTemplate,
    backend: &B,
    verbalizer: &Verbalizer,
) -> Result<LinkPrediction> {
    let input = build_input(issue, commit, template, backend.vocabulary(), backend.max_len())?;
    let output = backend.forward(&input)?;
    let distribution = output.mask_distribution(input.mask_position);
    let probability = label_probability(&distribution, verbalizer, backend.vocabulary())?;
    Ok(LinkPrediction {
        probability,
        per_template_probabilities: None,
        architecture: ArchKind::Single,
    })
}

/// Predict with every template and average the probabilities.
pub fn multi_template_predict<B: MaskedLmBackend>(
    issue: &IssueArtifact,
    commit: &CommitArtifact,
    templates: &[PromptTemplate],
    backend: &B,
    verbalizer: &Verbalizer,
) -> Result<LinkPrediction> {
    if templates.is_empty() {
        return Err(Error::Config(
            "multi-template prediction needs at least one template".into(),
        ));
    }
    let mut per_template = Vec::with_capacity(templates.len());
    for template in templates {
        per_template
            .push(single_template_predict(issue, commit, template, backend, verbalizer)?.probability);
    }
    let probability = per_template.iter().sum::<f64>() / per_template.len() as f64;
    Ok(LinkPrediction {
        probability,
        per_template_probabilities: Some(per_template),
        architecture: ArchKind::Multi,
    })
}

/// Predict from the class-token hidden state through the backend's 2-class
/// affine head; the positive-class softmax entry is the link probability.
pub fn cls_predict<B: MaskedLmBackend>(
    issue: &IssueArtifact,
    commit: &CommitArtifact,
    template: &PromptTemplate,
    backend: &B,
) -> Result<LinkPrediction> {
    let input = build_input(issue, commit, template, backend.vocabulary(), backend.max_len())?;
    let output = backend.forward(&input)?;
    let logits = backend.class_logits(&output.cls_hidden);
    let probs = softmax(&Array1::from_vec(logits.to_vec()));
    Ok(LinkPrediction {
        probability: probs[1],
        per_template_probabilities: None,
        architecture: ArchKind::Cls,
    })
}

/// Threshold a prediction into a label; ties go positive.
pub fn classify(prediction: &LinkPrediction, threshold: f64) -> u8 {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    u8::from(prediction.probability >= threshold)
}

/// The probability entering the training loss, clamped away from 0 and 1.
pub fn clamped_probability(prediction: &LinkPrediction) -> f64 {
    clamp_probability(prediction.probability)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendOutput, EmbeddingMatrix, LossTarget, ReferenceBackend, ReferenceConfig};
    use crate::prompting::{default_templates, PromptedInput};
    use ndarray::Array2;

    fn dist(pairs: &[(usize, f64)], len: usize) -> Array1<f64> {
        let named: f64 = pairs.iter().map(|(_, p)| p).sum();
        let rest = (1.0 - named) / (len - pairs.len()) as f64;
        let mut v = Array1::from_elem(len, rest);
        for &(i, p) in pairs {
            v[i] = p;
        }
        v
    }

    fn link_vocab() -> Vocabulary {
        Vocabulary::build(["correct incorrect yes no maybe filler words here"])
    }

    #[test]
    fn label_probability_renormalizes_word_scores() {
        let vocab = link_vocab();
        let verbalizer = Verbalizer::default_link();
        let correct = vocab.id_of("correct").unwrap();
        let incorrect = vocab.id_of("incorrect").unwrap();
        let probs = dist(&[(correct, 0.6), (incorrect, 0.2)], vocab.len());
        let p = label_probability(&probs, &verbalizer, &vocab).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn equal_word_probabilities_give_half() {
        let vocab = link_vocab();
        let verbalizer = Verbalizer::default_link();
        let correct = vocab.id_of("correct").unwrap();
        let incorrect = vocab.id_of("incorrect").unwrap();
        let probs = dist(&[(correct, 0.3), (incorrect, 0.3)], vocab.len());
        let p = label_probability(&probs, &verbalizer, &vocab).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn multi_word_sets_average_before_renormalizing() {
        let vocab = link_vocab();
        let verbalizer = Verbalizer::new(
            vec!["correct".into(), "yes".into()],
            vec!["incorrect".into()],
        )
        .unwrap();
        let probs = dist(
            &[
                (vocab.id_of("correct").unwrap(), 0.4),
                (vocab.id_of("yes").unwrap(), 0.2),
                (vocab.id_of("incorrect").unwrap(), 0.1),
            ],
            vocab.len(),
        );
        // pos mean 0.3, neg mean 0.1 -> 0.75
        let p = label_probability(&probs, &verbalizer, &vocab).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn absent_verbalizer_word_is_a_configuration_error() {
        let vocab = link_vocab();
        let verbalizer = Verbalizer::new(vec!["missing".into()], vec!["incorrect".into()]).unwrap();
        let probs = Array1::from_elem(vocab.len(), 1.0 / vocab.len() as f64);
        assert!(matches!(
            label_probability(&probs, &verbalizer, &vocab),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn permuting_non_verbalizer_entries_changes_nothing() {
        let vocab = link_vocab();
        let verbalizer = Verbalizer::default_link();
        let correct = vocab.id_of("correct").unwrap();
        let incorrect = vocab.id_of("incorrect").unwrap();
        let mut probs = dist(&[(correct, 0.5), (incorrect, 0.25)], vocab.len());
        let p1 = label_probability(&probs, &verbalizer, &vocab).unwrap();
        // Swap two unrelated entries.
        let (a, b) = (vocab.id_of("yes").unwrap(), vocab.id_of("no").unwrap());
        probs[a] += 0.01;
        probs[b] -= 0.01;
        probs.swap(a, b);
        let p2 = label_probability(&probs, &verbalizer, &vocab).unwrap();
        assert_eq!(p1, p2);
    }

    /// Backend emitting arbitrary but input-determined fixed distributions.
    struct StubBackend {
        vocab: Vocabulary,
        cls_logits: [f64; 2],
    }

    impl MaskedLmBackend for StubBackend {
        fn vocabulary(&self) -> &Vocabulary {
            &self.vocab
        }

        fn max_len(&self) -> usize {
            512
        }

        fn embed(&self, input: &PromptedInput) -> crate::Result<EmbeddingMatrix> {
            let mut data = Array2::zeros((input.len(), 1));
            for (i, &id) in input.token_ids.iter().enumerate() {
                data[[i, 0]] = id as f64;
            }
            Ok(EmbeddingMatrix::new(data))
        }

        fn forward_from_embeddings(
            &self,
            embeddings: &EmbeddingMatrix,
        ) -> crate::Result<BackendOutput> {
            // Mix the token ids into per-position logits so different
            // templates produce different, but fixed, distributions.
            let mut state: f64 = 0.0;
            for v in embeddings.data.iter() {
                state = (state * 31.0 + v + 1.0) % 97.0;
            }
            let v = self.vocab.len();
            let mut logits = Array2::zeros((embeddings.seq_len(), v));
            for pos in 0..embeddings.seq_len() {
                for k in 0..v {
                    state = (state * 31.0 + 7.0) % 97.0;
                    logits[[pos, k]] = state / 20.0;
                }
            }
            Ok(BackendOutput {
                vocab_logits: logits,
                cls_hidden: Array1::zeros(1),
            })
        }

        fn class_logits(&self, _cls_hidden: &Array1<f64>) -> [f64; 2] {
            self.cls_logits
        }

        fn loss(&self, _e: &EmbeddingMatrix, _t: &LossTarget) -> crate::Result<f64> {
            unimplemented!("stub backend has no loss")
        }

        fn loss_gradient_wrt_embeddings(
            &self,
            _e: &EmbeddingMatrix,
            _t: &LossTarget,
        ) -> crate::Result<Array2<f64>> {
            unimplemented!("stub backend has no gradients")
        }
    }

    fn artifacts() -> (IssueArtifact, CommitArtifact) {
        (
            IssueArtifact {
                issue_id: "I0".into(),
                description: "logger crashes on null".into(),
            },
            CommitArtifact {
                commit_id: "C0".into(),
                message: "guard against null logger".into(),
                code: "if (logger == null) return;".into(),
            },
        )
    }

    fn stub() -> StubBackend {
        let (issue, commit) = artifacts();
        StubBackend {
            vocab: Vocabulary::build([
                "correct incorrect the link is answer between does issue commit ?",
                issue.description.as_str(),
                commit.message.as_str(),
                commit.code.as_str(),
            ]),
            cls_logits: [0.0, 0.0],
        }
    }

    #[test]
    fn multi_template_probability_is_the_mean_of_singles() {
        let (issue, commit) = artifacts();
        let backend = stub();
        let verbalizer = Verbalizer::default_link();
        for n in [1usize, 2, 3] {
            let templates: Vec<PromptTemplate> = (0..n)
                .map(|i| {
                    PromptTemplate::new(format!("t{i}"), format!("template number {i} [MASK]"))
                        .unwrap()
                })
                .collect();
            let multi =
                multi_template_predict(&issue, &commit, &templates, &backend, &verbalizer).unwrap();
            let singles: Vec<f64> = templates
                .iter()
                .map(|t| {
                    single_template_predict(&issue, &commit, t, &backend, &verbalizer)
                        .unwrap()
                        .probability
                })
                .collect();
            let mean = singles.iter().sum::<f64>() / singles.len() as f64;
            assert!((multi.probability - mean).abs() < 1e-12);
            assert_eq!(multi.per_template_probabilities.as_deref(), Some(&singles[..]));
        }
    }

    #[test]
    fn one_template_multi_equals_single() {
        let (issue, commit) = artifacts();
        let backend = stub();
        let verbalizer = Verbalizer::default_link();
        let templates = vec![default_templates().remove(0)];
        let multi =
            multi_template_predict(&issue, &commit, &templates, &backend, &verbalizer).unwrap();
        let single =
            single_template_predict(&issue, &commit, &templates[0], &backend, &verbalizer).unwrap();
        assert_eq!(multi.probability, single.probability);
    }

    #[test]
    fn empty_template_list_is_a_configuration_error() {
        let (issue, commit) = artifacts();
        let backend = stub();
        assert!(matches!(
            multi_template_predict(&issue, &commit, &[], &backend, &Verbalizer::default_link()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_cls_head_predicts_half() {
        let (issue, commit) = artifacts();
        let backend = stub(); // cls logits pinned to [0, 0]
        let p = cls_predict(&issue, &commit, &default_templates()[0], &backend).unwrap();
        assert_eq!(p.probability, 0.5);
    }

    #[test]
    fn cls_two_class_probabilities_sum_to_one() {
        let vocab = Vocabulary::build(["the link is issue commit : x y z"]);
        let config = ReferenceConfig {
            max_len: 64,
            seed: 21,
            ..ReferenceConfig::default()
        };
        let backend = ReferenceBackend::new(config, vocab).unwrap();
        let (issue, commit) = artifacts();
        let out = backend
            .forward(
                &build_input(
                    &issue,
                    &commit,
                    &default_templates()[0],
                    backend.vocabulary(),
                    backend.max_len(),
                )
                .unwrap(),
            )
            .unwrap();
        let logits = backend.class_logits(&out.cls_hidden);
        let probs = softmax(&Array1::from_vec(logits.to_vec()));
        assert!((probs.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn untrained_reference_prediction_is_deterministic() {
        let vocab = Vocabulary::build(["correct incorrect the link is issue commit : fix null"]);
        let config = ReferenceConfig {
            max_len: 64,
            seed: 33,
            ..ReferenceConfig::default()
        };
        let backend = ReferenceBackend::new(config, vocab).unwrap();
        let (issue, commit) = artifacts();
        let template = &default_templates()[0];
        let verbalizer = Verbalizer::default_link();
        let a = single_template_predict(&issue, &commit, template, &backend, &verbalizer).unwrap();
        let b = single_template_predict(&issue, &commit, template, &backend, &verbalizer).unwrap();
        assert_eq!(a.probability, b.probability);
        assert!((0.0..=1.0).contains(&a.probability));
    }

    #[test]
    fn classify_ties_go_positive() {
        let pred = |p| LinkPrediction {
            probability: p,
            per_template_probabilities: None,
            architecture: ArchKind::Single,
        };
        assert_eq!(classify(&pred(0.75), 0.5), 1);
        assert_eq!(classify(&pred(0.5), 0.5), 1);
        assert_eq!(classify(&pred(0.49), 0.5), 0);
    }
}
