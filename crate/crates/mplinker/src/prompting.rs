//! Cloze-input construction: prompt templates, verbalizers, rendering, and
//! tokenization with a segment-aware truncation policy.
//!
//! A rendered input always has the frame
//! `[CLS] Issue: <description> [SEP] Commit: <message> [SPE] <code> [SEP] <template>`
//! where the template carries exactly one `[MASK]`. When the token budget is
//! exceeded, overflow is removed from segment tails in the order
//! code -> message -> description; the template and the frame's special
//! tokens are never truncated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{self, tokenize_text, Vocabulary};
use crate::corpus::{CommitArtifact, IssueArtifact};

/// A cloze template: free text containing exactly one `[MASK]` marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, text: impl Into<String>) -> Result<PromptTemplate> {
        let template = PromptTemplate {
            template_id: template_id.into(),
            text: text.into(),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::Config(format!(
                "template {:?} has empty text",
                self.template_id
            )));
        }
        let masks = self.text.matches(vocab::MASK).count();
        if masks != 1 {
            return Err(Error::Config(format!(
                "template {:?} must contain exactly one {} marker, found {masks}",
                self.template_id,
                vocab::MASK
            )));
        }
        for special in [vocab::CLS, vocab::SEP, vocab::SPE, vocab::PAD, vocab::UNK] {
            if self.text.contains(special) {
                return Err(Error::Config(format!(
                    "template {:?} must not contain the reserved marker {special}",
                    self.template_id
                )));
            }
        }
        Ok(())
    }
}

/// The three default cloze templates.
pub fn default_templates() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::new("t1", "The link is [MASK]").expect("valid template"),
        PromptTemplate::new("t2", "The answer between issue and commit is [MASK]")
            .expect("valid template"),
        PromptTemplate::new("t3", "Does the commit answer the issue? [MASK]")
            .expect("valid template"),
    ]
}

/// Label-word sets scoring the two classes at the mask position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub positive_words: Vec<String>,
    pub negative_words: Vec<String>,
}

impl Verbalizer {
    pub fn new(positive_words: Vec<String>, negative_words: Vec<String>) -> Result<Verbalizer> {
        let v = Verbalizer {
            positive_words,
            negative_words,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_words.is_empty() || self.negative_words.is_empty() {
            return Err(Error::Config(
                "verbalizer word sets must both be non-empty".into(),
            ));
        }
        for pos in &self.positive_words {
            if self
                .negative_words
                .iter()
                .any(|neg| neg.to_lowercase() == pos.to_lowercase())
            {
                return Err(Error::Config(format!(
                    "verbalizer word {pos:?} appears in both classes"
                )));
            }
        }
        Ok(())
    }

    /// The default pairing: "correct" for linked, "incorrect" for not linked.
    pub fn default_link() -> Verbalizer {
        Verbalizer {
            positive_words: vec!["correct".into()],
            negative_words: vec!["incorrect".into()],
        }
    }

    /// Map every word to its token id in `vocab`.
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<ResolvedVerbalizer> {
        self.validate()?;
        Ok(ResolvedVerbalizer {
            positive_ids: self
                .positive_words
                .iter()
                .map(|w| vocab.resolve_word(w))
                .collect::<Result<Vec<_>>>()?,
            negative_ids: self
                .negative_words
                .iter()
                .map(|w| vocab.resolve_word(w))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Every word in either set, for vocabulary construction.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.positive_words
            .iter()
            .chain(&self.negative_words)
            .map(|s| s.as_str())
    }
}

/// A verbalizer resolved against a concrete vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedVerbalizer {
    pub positive_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
}

/// Assemble the cloze input string for one (issue, commit, template) triple.
pub fn render(issue: &IssueArtifact, commit: &CommitArtifact, template: &PromptTemplate) -> String {
    format!(
        "[CLS] Issue: {} [SEP] Commit: {} [SPE] {} [SEP] {}",
        issue.description, commit.message, commit.code, template.text
    )
}

/// Tokens dropped from each truncatable segment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub description_dropped: usize,
    pub message_dropped: usize,
    pub code_dropped: usize,
}

impl TruncationReport {
    pub fn total(&self) -> usize {
        self.description_dropped + self.message_dropped + self.code_dropped
    }
}

/// A tokenized cloze input ready for the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedInput {
    pub token_ids: Vec<usize>,
    pub mask_position: usize,
    pub truncation_report: TruncationReport,
}

impl PromptedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Token-level view of a rendered input, split at the frame separators.
struct Segments {
    description: Vec<String>,
    message: Vec<String>,
    code: Vec<String>,
    template: Vec<String>,
}

fn split_segments(rendered: &str) -> Result<Segments> {
    let tokens = tokenize_text(rendered);
    let masks = tokens.iter().filter(|t| *t == vocab::MASK).count();
    if masks != 1 {
        return Err(Error::Config(format!(
            "rendered input must contain exactly one {} marker, found {masks}",
            vocab::MASK
        )));
    }
    if tokens.first().map(|t| t.as_str()) != Some(vocab::CLS) {
        return Err(Error::Config(format!(
            "rendered input must begin with {}",
            vocab::CLS
        )));
    }
    let first_sep = tokens.iter().position(|t| t == vocab::SEP);
    let last_sep = tokens.iter().rposition(|t| t == vocab::SEP);
    let (s1, s2) = match (first_sep, last_sep) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => {
            return Err(Error::Config(
                "rendered input does not follow the prompt frame".into(),
            ))
        }
    };
    let spe = tokens[s1..s2]
        .iter()
        .position(|t| t == vocab::SPE)
        .map(|off| s1 + off)
        .ok_or_else(|| Error::Config("rendered input does not follow the prompt frame".into()))?;
    let mask_index = tokens.iter().position(|t| t == vocab::MASK).expect("checked above");
    if mask_index < s2 {
        return Err(Error::Config(
            "the mask marker must appear in the template segment".into(),
        ));
    }
    Ok(Segments {
        description: tokens[1..s1].to_vec(),
        message: tokens[s1 + 1..spe].to_vec(),
        code: tokens[spe + 1..s2].to_vec(),
        template: tokens[s2 + 1..].to_vec(),
    })
}

/// Tokenize a rendered input and enforce the length budget. The skeleton
/// (frame specials plus the whole template) always survives; overflow comes
/// off the code tail first, then the message tail, then the description tail.
pub fn tokenize_and_truncate(
    rendered: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PromptedInput> {
    let mut segments = split_segments(rendered)?;
    let skeleton = 4 + segments.template.len();
    if max_len < skeleton {
        return Err(Error::Budget { max_len, skeleton });
    }

    let mut report = TruncationReport::default();
    let total = skeleton
        + segments.description.len()
        + segments.message.len()
        + segments.code.len();
    let mut overflow = total.saturating_sub(max_len);
    for (segment, dropped) in [
        (&mut segments.code, &mut report.code_dropped),
        (&mut segments.message, &mut report.message_dropped),
        (&mut segments.description, &mut report.description_dropped),
    ] {
        let take = overflow.min(segment.len());
        segment.truncate(segment.len() - take);
        *dropped = take;
        overflow -= take;
    }
    debug_assert_eq!(overflow, 0);

    let mut token_ids = Vec::with_capacity(total.min(max_len));
    token_ids.push(Vocabulary::CLS_ID);
    token_ids.extend(segments.description.iter().map(|t| vocab.id_or_unk(t)));
    token_ids.push(Vocabulary::SEP_ID);
    token_ids.extend(segments.message.iter().map(|t| vocab.id_or_unk(t)));
    token_ids.push(Vocabulary::SPE_ID);
    token_ids.extend(segments.code.iter().map(|t| vocab.id_or_unk(t)));
    token_ids.push(Vocabulary::SEP_ID);
    let template_start = token_ids.len();
    token_ids.extend(segments.template.iter().map(|t| vocab.id_or_unk(t)));

    let mask_offset = segments
        .template
        .iter()
        .position(|t| t == vocab::MASK)
        .expect("mask is in the template segment");
    Ok(PromptedInput {
        mask_position: template_start + mask_offset,
        token_ids,
        truncation_report: report,
    })
}

/// Render and tokenize in one step.
pub fn build_input(
    issue: &IssueArtifact,
    commit: &CommitArtifact,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PromptedInput> {
    tokenize_and_truncate(&render(issue, commit, template), vocab, max_len)
}

/// Load templates and an optional verbalizer from key-value config entries.
///
/// Recognized keys: `template.<n> = <text with [MASK]>` (sorted by `<n>`),
/// `verbalizer.positive` / `verbalizer.negative` as comma-separated lists.
pub fn prompts_from_kv(
    entries: &[(String, String)],
) -> Result<(Vec<PromptTemplate>, Option<Verbalizer>)> {
    let mut templates: Vec<(usize, PromptTemplate)> = Vec::new();
    let mut positive: Option<Vec<String>> = None;
    let mut negative: Option<Vec<String>> = None;
    for (key, value) in entries {
        if let Some(index) = key.strip_prefix("template.") {
            let n: usize = index.parse().map_err(|_| {
                Error::Config(format!("template key {key:?} must end in an integer"))
            })?;
            templates.push((n, PromptTemplate::new(format!("t{n}"), value.clone())?));
        } else if key == "verbalizer.positive" {
            positive = Some(split_words(value));
        } else if key == "verbalizer.negative" {
            negative = Some(split_words(value));
        }
    }
    templates.sort_by_key(|(n, _)| *n);
    let verbalizer = match (positive, negative) {
        (Some(pos), Some(neg)) => Some(Verbalizer::new(pos, neg)?),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "verbalizer needs both a positive and a negative word list".into(),
            ))
        }
    };
    Ok((templates.into_iter().map(|(_, t)| t).collect(), verbalizer))
}

fn split_words(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|w| w.trim().to_string())
        .filter(|w| !w.is_empty())
        .collect()
}
