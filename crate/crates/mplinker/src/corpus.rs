//! Corpus ingestion, negative-link generation, and train/valid/test splits.
//!
//! A corpus couples issue and commit artifacts with labeled links between
//! them. The on-disk format is JSON-Lines with one record per line, three
//! record kinds discriminated by a `kind` field.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An issue-tracker entry. The description may be empty; degenerate artifacts
/// occur in real trackers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueArtifact {
    pub issue_id: String,
    pub description: String,
}

/// A commit: its message plus the text of its code diff.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitArtifact {
    pub commit_id: String,
    pub message: String,
    pub code: String,
}

/// An (issue, commit, label) triple. Label 1 means linked, 0 means not.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkExample {
    pub issue_id: String,
    pub commit_id: String,
    pub label: u8,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Issue {
        issue_id: String,
        description: String,
    },
    Commit {
        commit_id: String,
        message: String,
        code: String,
    },
    Link {
        issue_id: String,
        commit_id: String,
        label: u8,
    },
}

/// Artifact maps plus the labeled link list. Insertion order is preserved so
/// that loading and re-serializing is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    issues: Vec<IssueArtifact>,
    commits: Vec<CommitArtifact>,
    links: Vec<LinkExample>,
    issue_index: HashMap<String, usize>,
    commit_index: HashMap<String, usize>,
    pair_set: HashSet<(usize, usize)>,
}

impl Corpus {
    pub fn new() -> Corpus {
        Corpus::default()
    }

    pub fn push_issue(&mut self, issue: IssueArtifact) -> Result<()> {
        if issue.issue_id.is_empty() {
            return Err(Error::Integrity("issue with empty id".into()));
        }
        if self.issue_index.contains_key(&issue.issue_id) {
            return Err(Error::Integrity(format!(
                "duplicate issue id {:?}",
                issue.issue_id
            )));
        }
        self.issue_index
            .insert(issue.issue_id.clone(), self.issues.len());
        self.issues.push(issue);
        Ok(())
    }

    pub fn push_commit(&mut self, commit: CommitArtifact) -> Result<()> {
        if commit.commit_id.is_empty() {
            return Err(Error::Integrity("commit with empty id".into()));
        }
        if self.commit_index.contains_key(&commit.commit_id) {
            return Err(Error::Integrity(format!(
                "duplicate commit id {:?}",
                commit.commit_id
            )));
        }
        self.commit_index
            .insert(commit.commit_id.clone(), self.commits.len());
        self.commits.push(commit);
        Ok(())
    }

    /// Add a link. Both artifacts must already be present and the
    /// (issue, commit) pair must be new; duplicates are a hard error rather
    /// than a silent dedup.
    pub fn push_link(&mut self, link: LinkExample) -> Result<()> {
        if link.label > 1 {
            return Err(Error::Integrity(format!(
                "link {:?} -> {:?} has label {}, expected 0 or 1",
                link.issue_id, link.commit_id, link.label
            )));
        }
        let i = *self
            .issue_index
            .get(&link.issue_id)
            .ok_or_else(|| Error::Integrity(format!("link references unknown issue {:?}", link.issue_id)))?;
        let c = *self
            .commit_index
            .get(&link.commit_id)
            .ok_or_else(|| Error::Integrity(format!("link references unknown commit {:?}", link.commit_id)))?;
        if !self.pair_set.insert((i, c)) {
            return Err(Error::Integrity(format!(
                "duplicate link ({:?}, {:?})",
                link.issue_id, link.commit_id
            )));
        }
        self.links.push(link);
        Ok(())
    }

    pub fn issues(&self) -> &[IssueArtifact] {
        &self.issues
    }

    pub fn commits(&self) -> &[CommitArtifact] {
        &self.commits
    }

    pub fn links(&self) -> &[LinkExample] {
        &self.links
    }

    pub fn issue(&self, id: &str) -> Option<&IssueArtifact> {
        self.issue_index.get(id).map(|&i| &self.issues[i])
    }

    pub fn commit(&self, id: &str) -> Option<&CommitArtifact> {
        self.commit_index.get(id).map(|&c| &self.commits[c])
    }

    pub fn true_link_count(&self) -> usize {
        self.links.iter().filter(|l| l.label == 1).count()
    }

    pub fn false_link_count(&self) -> usize {
        self.links.iter().filter(|l| l.label == 0).count()
    }

    /// Every artifact text in the corpus, for vocabulary construction.
    pub fn artifact_texts(&self) -> impl Iterator<Item = &str> {
        self.issues
            .iter()
            .map(|i| i.description.as_str())
            .chain(
                self.commits
                    .iter()
                    .flat_map(|c| [c.message.as_str(), c.code.as_str()]),
            )
    }
}

/// Disjoint train/valid/test lists whose union is the input set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LinkExample>,
    pub valid: Vec<LinkExample>,
    pub test: Vec<LinkExample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Load a JSON-Lines corpus. Blank lines are skipped; any malformed record is
/// reported with its line number, and links must reference loaded artifacts.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus(&text)
}

/// Parse corpus records from an in-memory JSON-Lines string.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        records.push((lineno, record));
    }

    let mut corpus = Corpus::new();
    // Artifacts first so that links may appear anywhere in the file.
    for (lineno, record) in &records {
        let result = match record {
            Record::Issue {
                issue_id,
                description,
            } => corpus.push_issue(IssueArtifact {
                issue_id: issue_id.clone(),
                description: description.clone(),
            }),
            Record::Commit {
                commit_id,
                message,
                code,
            } => corpus.push_commit(CommitArtifact {
                commit_id: commit_id.clone(),
                message: message.clone(),
                code: code.clone(),
            }),
            Record::Link { .. } => Ok(()),
        };
        result.map_err(|e| at_line(*lineno, e))?;
    }
    for (lineno, record) in &records {
        if let Record::Link {
            issue_id,
            commit_id,
            label,
        } = record
        {
            corpus
                .push_link(LinkExample {
                    issue_id: issue_id.clone(),
                    commit_id: commit_id.clone(),
                    label: *label,
                })
                .map_err(|e| at_line(*lineno, e))?;
        }
    }
    Ok(corpus)
}

fn at_line(lineno: usize, e: Error) -> Error {
    match e {
        Error::Integrity(msg) => Error::Integrity(format!("line {lineno}: {msg}")),
        other => other,
    }
}

/// Serialize a corpus back to JSON-Lines: issues, then commits, then links,
/// each in insertion order.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus_to_jsonl(corpus)?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn corpus_to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for issue in &corpus.issues {
        let record = Record::Issue {
            issue_id: issue.issue_id.clone(),
            description: issue.description.clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    for commit in &corpus.commits {
        let record = Record::Commit {
            commit_id: commit.commit_id.clone(),
            message: commit.message.clone(),
            code: commit.code.clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    for link in &corpus.links {
        let record = Record::Link {
            issue_id: link.issue_id.clone(),
            commit_id: link.commit_id.clone(),
            label: link.label,
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write link examples (one `kind: link` record per line) for split files.
pub fn links_to_jsonl(links: &[LinkExample]) -> Result<String> {
    let mut out = String::new();
    for link in links {
        let record = Record::Link {
            issue_id: link.issue_id.clone(),
            commit_id: link.commit_id.clone(),
            label: link.label,
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Read link examples from a split file, validating references against `corpus`.
pub fn load_links(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<LinkExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut links = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match record {
            Record::Link {
                issue_id,
                commit_id,
                label,
            } => {
                if corpus.issue(&issue_id).is_none() {
                    return Err(Error::Integrity(format!(
                        "line {lineno}: link references unknown issue {issue_id:?}"
                    )));
                }
                if corpus.commit(&commit_id).is_none() {
                    return Err(Error::Integrity(format!(
                        "line {lineno}: link references unknown commit {commit_id:?}"
                    )));
                }
                links.push(LinkExample {
                    issue_id,
                    commit_id,
                    label,
                });
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "expected only link records in a split file".into(),
                })
            }
        }
    }
    Ok(links)
}

/// Sample `floor(ratio * true_links)` negative pairs uniformly from the
/// issue x commit cross product minus every pair already linked (either
/// label). Deterministic for a fixed seed.
pub fn generate_negatives(corpus: &Corpus, ratio: f64, seed: u64) -> Result<Vec<LinkExample>> {
    let n_true = corpus.true_link_count();
    if n_true == 0 {
        return Err(Error::Config(
            "negative generation requires at least one true link".into(),
        ));
    }
    if ratio < 0.0 {
        return Err(Error::Config(format!("negative ratio must be >= 0, got {ratio}")));
    }
    // The fuzz keeps an exactly-representable product like 866/266 * 266 from
    // flooring to 865.
    let count = (ratio * n_true as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Ok(Vec::new());
    }

    let total_pairs = corpus.issues.len() * corpus.commits.len();
    let available = total_pairs - corpus.pair_set.len();
    if count > available {
        return Err(Error::Capacity {
            requested: count,
            available,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<(usize, usize)> = if count * 4 >= available {
        // Dense request: enumerate the complement and partially shuffle.
        let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(available);
        for i in 0..corpus.issues.len() {
            for c in 0..corpus.commits.len() {
                if !corpus.pair_set.contains(&(i, c)) {
                    candidates.push((i, c));
                }
            }
        }
        let (head, _) = candidates.partial_shuffle(&mut rng, count);
        head.to_vec()
    } else {
        // Sparse request: rejection-sample without replacement.
        let mut chosen = HashSet::with_capacity(count);
        let mut picked = Vec::with_capacity(count);
        while picked.len() < count {
            let pair = (
                rng.gen_range(0..corpus.issues.len()),
                rng.gen_range(0..corpus.commits.len()),
            );
            if !corpus.pair_set.contains(&pair) && chosen.insert(pair) {
                picked.push(pair);
            }
        }
        picked
    };

    Ok(picked
        .into_iter()
        .map(|(i, c)| LinkExample {
            issue_id: corpus.issues[i].issue_id.clone(),
            commit_id: corpus.commits[c].commit_id.clone(),
            label: 0,
        })
        .collect())
}

/// Shuffle with the seed, then assign the first `floor(0.8 n)` examples to
/// train, the next `floor(0.1 n)` to valid, and the remainder to test.
pub fn split_examples(examples: &[LinkExample], seed: u64) -> Result<DatasetSplit> {
    let n = examples.len();
    if n < 10 {
        return Err(Error::Size { min: 10, got: n });
    }
    let mut shuffled = examples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n_train = (0.8 * n as f64).floor() as usize;
    let n_valid = (0.1 * n as f64).floor() as usize;
    let test = shuffled.split_off(n_train + n_valid);
    let valid = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        valid,
        test,
        seed,
    })
}
