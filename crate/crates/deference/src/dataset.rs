//! Unified item schema, dataset file ingestion, and stratified splits.
//!
//! Dataset files are line-delimited JSON, one record per line. Every record
//! carries `{id, domain, question, correct_answer, incorrect_answer, metadata}`;
//! `metadata` is an optional string-to-string map.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::Verdict;

/// One normalized benchmark question with exactly one correct and one
/// incorrect answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedItem {
    pub id: String,
    /// Dataset tag, e.g. "truthfulqa" or "raio".
    pub domain: String,
    pub question: String,
    pub correct_answer: String,
    pub incorrect_answer: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// One conversation thread from the social-judgment dataset, already
/// neutralized to third person.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaioThread {
    pub id: String,
    /// Neutralized third-person context (title + body rewrite).
    pub context: String,
    /// Ordered (speaker label, utterance) turns. At most two distinct labels.
    pub dialogue: Vec<(String, String)>,
    /// Comment texts, best first (rank 1 = index 0).
    #[serde(default)]
    pub ranked_comments: Vec<String>,
    /// Community consensus about the original poster, when extracted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_verdict: Option<Verdict>,
}

impl RaioThread {
    /// The distinct speaker labels in dialogue order of first appearance.
    pub fn speaker_labels(&self) -> Vec<&str> {
        let mut labels = Vec::new();
        for (label, _) in &self.dialogue {
            if !labels.contains(&label.as_str()) {
                labels.push(label.as_str());
            }
        }
        labels
    }
}

/// A deterministic train/eval partition of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: BTreeSet<String>,
    pub eval_ids: BTreeSet<String>,
    pub seed: u64,
    pub strata_key: Option<String>,
}

impl Split {
    /// Write the split manifest as a single JSON document.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = File::create(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| DatasetError::Serialize(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| DatasetError::Serialize(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("record {index}: missing field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: not valid JSON: {message}")]
    BadRecord { index: usize, message: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}`: empty {field}")]
    EmptyAnswer { id: String, field: &'static str },
    #[error("item `{0}`: correct and incorrect answers are identical")]
    IdenticalAnswers(String),
    #[error("thread `{0}`: dialogue is empty")]
    EmptyDialogue(String),
    #[error("thread `{0}`: more than two speaker labels")]
    TooManySpeakers(String),
    #[error("stratum `{stratum}` has {available} items, {requested} requested")]
    InsufficientStratum {
        stratum: String,
        available: usize,
        requested: usize,
    },
    #[error("item `{id}` has no metadata key `{key}`")]
    UnknownKey { id: String, key: String },
    #[error("requested {requested} items but only {available} available")]
    NotEnoughItems { requested: usize, available: usize },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

#[derive(Deserialize)]
struct RawItem {
    id: Option<String>,
    domain: Option<String>,
    question: Option<String>,
    correct_answer: Option<String>,
    incorrect_answer: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn require(field: Option<String>, index: usize, name: &'static str) -> Result<String, DatasetError> {
    field.ok_or(DatasetError::MissingField { index, field: name })
}

/// Collapse whitespace runs to single spaces and trim, for the byte
/// comparison behind the correct-vs-incorrect answer invariant.
fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn validate_item(item: &UnifiedItem) -> Result<(), DatasetError> {
    for (field, value) in [
        ("question", &item.question),
        ("correct_answer", &item.correct_answer),
        ("incorrect_answer", &item.incorrect_answer),
    ] {
        if value.trim().is_empty() {
            return Err(DatasetError::EmptyAnswer {
                id: item.id.clone(),
                field,
            });
        }
    }
    if normalize_ws(&item.correct_answer) == normalize_ws(&item.incorrect_answer) {
        return Err(DatasetError::IdenticalAnswers(item.id.clone()));
    }
    Ok(())
}

/// Load and validate a dataset file. Records come back in file order;
/// duplicate-id detection runs across the whole file. `index` in errors is
/// the 1-based line number.
pub fn load_items(path: &Path) -> Result<Vec<UnifiedItem>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let index = i + 1;
        let line = line.map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            index,
            message: e.to_string(),
        })?;
        let item = UnifiedItem {
            id: require(raw.id, index, "id")?,
            domain: require(raw.domain, index, "domain")?,
            question: require(raw.question, index, "question")?,
            correct_answer: require(raw.correct_answer, index, "correct_answer")?,
            incorrect_answer: require(raw.incorrect_answer, index, "incorrect_answer")?,
            metadata: raw.metadata,
        };
        validate_item(&item)?;
        if !seen.insert(item.id.clone()) {
            return Err(DatasetError::DuplicateId(item.id));
        }
        items.push(item);
    }
    Ok(items)
}

/// Write items as line-delimited JSON. `load_items(write_items(xs)) == xs`.
pub fn write_items(path: &Path, items: &[UnifiedItem]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| DatasetError::Serialize(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Load and validate a thread file (line-delimited JSON).
pub fn load_threads(path: &Path) -> Result<Vec<RaioThread>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut threads = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let index = i + 1;
        let line = line.map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let thread: RaioThread = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            index,
            message: e.to_string(),
        })?;
        if thread.dialogue.is_empty() {
            return Err(DatasetError::EmptyDialogue(thread.id));
        }
        if thread.speaker_labels().len() > 2 {
            return Err(DatasetError::TooManySpeakers(thread.id));
        }
        if !seen.insert(thread.id.clone()) {
            return Err(DatasetError::DuplicateId(thread.id));
        }
        threads.push(thread);
    }
    Ok(threads)
}

/// Draw a deterministic eval sample of `n` items and put the remainder in the
/// train pool.
///
/// With a `strata_key`, items are grouped by that metadata value and each
/// stratum contributes `n / k` items; the `n % k` remainder goes to strata in
/// lexicographic key order, one extra item each. Without a key the sample is
/// uniform. Sampling shuffles each stratum with a `ChaCha8Rng` seeded from
/// `seed` (strata visited in lexicographic order, one RNG stream throughout)
/// and takes the prefix, so identical inputs and seed always produce the
/// identical split.
pub fn stratified_sample(
    items: &[UnifiedItem],
    strata_key: Option<&str>,
    n: usize,
    seed: u64,
) -> Result<Split, DatasetError> {
    if n > items.len() {
        return Err(DatasetError::NotEnoughItems {
            requested: n,
            available: items.len(),
        });
    }

    // Group item indices by stratum value, in input order.
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match strata_key {
        Some(key) => {
            for (i, item) in items.iter().enumerate() {
                let value = item.metadata.get(key).ok_or_else(|| DatasetError::UnknownKey {
                    id: item.id.clone(),
                    key: key.to_string(),
                })?;
                strata.entry(value.clone()).or_default().push(i);
            }
        }
        None => {
            strata.insert(String::new(), (0..items.len()).collect());
        }
    }

    let k = strata.len();
    let base = n / k;
    let extra = n % k;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_ids = BTreeSet::new();
    for (rank, (stratum, mut indices)) in strata.into_iter().enumerate() {
        let want = base + usize::from(rank < extra);
        if indices.len() < want {
            return Err(DatasetError::InsufficientStratum {
                stratum,
                available: indices.len(),
                requested: want,
            });
        }
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(want) {
            eval_ids.insert(items[i].id.clone());
        }
    }

    let train_ids = items
        .iter()
        .map(|item| item.id.clone())
        .filter(|id| !eval_ids.contains(id))
        .collect();

    Ok(Split {
        train_ids,
        eval_ids,
        seed,
        strata_key: strata_key.map(str::to_string),
    })
}

/// True iff the train and eval id sets are disjoint.
pub fn verify_no_leakage(split: &Split) -> bool {
    split.train_ids.is_disjoint(&split.eval_ids)
}
