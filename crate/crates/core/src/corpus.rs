//! Ticket records, corpus loading, stratified splitting and example pairs.
//!
//! The corpus file holds one JSON object per line with the keys `id`,
//! `title`, `anomaly`, `root_cause`, `solution`, `issue_category` and
//! `products`. `products` is either a list of names or a single
//! comma-separated string.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{self, PromptError, TemplateId, TemplateSet};
use crate::rules::format_rule_line;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("duplicate ticket id `{0}`")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// One resolved support case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: String,
    pub title: String,
    #[serde(rename = "anomaly")]
    pub anomaly_text: String,
    #[serde(rename = "root_cause")]
    pub root_cause_text: String,
    #[serde(rename = "solution")]
    pub solution_text: String,
    pub issue_category: String,
    pub products: Vec<String>,
}

impl Ticket {
    pub fn products_joined(&self) -> String {
        self.products.join(", ")
    }

    /// All attributes as one plain text, in attribute-table order.
    pub fn raw_text(&self) -> String {
        [
            self.id.as_str(),
            self.title.as_str(),
            self.anomaly_text.as_str(),
            self.root_cause_text.as_str(),
            self.solution_text.as_str(),
            self.issue_category.as_str(),
            &self.products_joined(),
        ]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("\n")
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProductsField {
    List(Vec<String>),
    Text(String),
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    title: Option<String>,
    anomaly: Option<String>,
    root_cause: Option<String>,
    solution: Option<String>,
    issue_category: Option<String>,
    products: Option<ProductsField>,
}

fn normalize_products(field: Option<ProductsField>) -> Vec<String> {
    let items = match field {
        None => Vec::new(),
        Some(ProductsField::List(items)) => items,
        Some(ProductsField::Text(text)) => text.split(',').map(str::to_string).collect(),
    };
    items
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

fn trimmed(field: Option<String>) -> String {
    field.map(|s| s.trim().to_string()).unwrap_or_default()
}

/// Parses one line of the corpus file.
pub fn parse_ticket_record(record: &str) -> Result<Ticket, CorpusError> {
    let raw: RawRecord =
        serde_json::from_str(record).map_err(|e| CorpusError::MalformedRecord(e.to_string()))?;
    let id = trimmed(raw.id);
    if id.is_empty() {
        return Err(CorpusError::MissingField("id".into()));
    }
    let anomaly_text = trimmed(raw.anomaly);
    if anomaly_text.is_empty() {
        return Err(CorpusError::MissingField("anomaly".into()));
    }
    Ok(Ticket {
        id,
        title: trimmed(raw.title),
        anomaly_text,
        root_cause_text: trimmed(raw.root_cause),
        solution_text: trimmed(raw.solution),
        issue_category: trimmed(raw.issue_category),
        products: normalize_products(raw.products),
    })
}

pub fn serialize_ticket(ticket: &Ticket) -> String {
    serde_json::to_string(ticket).expect("ticket serializes")
}

/// Parses a whole corpus text; blank lines are ignored.
pub fn parse_corpus(text: &str) -> Result<Vec<Ticket>, CorpusError> {
    let mut seen = HashSet::new();
    let mut tickets = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ticket = parse_ticket_record(line).map_err(|e| CorpusError::Record {
            line: idx + 1,
            source: Box::new(e),
        })?;
        if !seen.insert(ticket.id.clone()) {
            return Err(CorpusError::DuplicateId(ticket.id));
        }
        tickets.push(ticket);
    }
    Ok(tickets)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Ticket>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn write_corpus(path: impl AsRef<Path>, tickets: &[Ticket]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in tickets {
        out.push_str(&serialize_ticket(t));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Ticket>,
    pub eval: Vec<Ticket>,
    pub ratio: f64,
    pub seed: u64,
}

/// The persisted form of a split: two id lists plus the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl CorpusSplit {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            ratio: self.ratio,
            train_ids: self.train.iter().map(|t| t.id.clone()).collect(),
            eval_ids: self.eval.iter().map(|t| t.id.clone()).collect(),
        }
    }
}

/// Number of training tickets out of `n` for `ratio`; halves go to train.
fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).round() as usize).min(n)
}

/// Stratified split by issue category. Each category is shuffled with a
/// seeded generator and its first `round(ratio * n)` tickets go to train.
/// Both halves keep the corpus order.
pub fn split_corpus(tickets: &[Ticket], ratio: f64, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    if tickets.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, t) in tickets.iter().enumerate() {
        by_category.entry(t.issue_category.as_str()).or_default().push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; tickets.len()];
    for members in by_category.values_mut() {
        members.shuffle(&mut rng);
        for &idx in &members[..train_count(members.len(), ratio)] {
            in_train[idx] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (t, &train_side) in tickets.iter().zip(&in_train) {
        if train_side {
            train.push(t.clone());
        } else {
            eval.push(t.clone());
        }
    }
    Ok(CorpusSplit {
        train,
        eval,
        ratio,
        seed,
    })
}

/// Rebuilds a split from a manifest against the corpus it was made from.
pub fn apply_manifest(tickets: &[Ticket], manifest: &SplitManifest) -> Result<CorpusSplit, CorpusError> {
    let by_id: BTreeMap<&str, &Ticket> = tickets.iter().map(|t| (t.id.as_str(), t)).collect();
    let pick = |ids: &[String]| -> Result<Vec<Ticket>, CorpusError> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| CorpusError::MalformedRecord(format!("manifest id `{id}` not in corpus")))
            })
            .collect()
    };
    Ok(CorpusSplit {
        train: pick(&manifest.train_ids)?,
        eval: pick(&manifest.eval_ids)?,
        ratio: manifest.ratio,
        seed: manifest.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub ticket_id: String,
    pub prompt_id: u8,
    pub input_text: String,
    pub expected_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub ticket_id: String,
    pub prompt_id: u8,
    pub reason: String,
}

/// Reference output for the anomaly-analysis prompt.
pub fn anomaly_reference(ticket: &Ticket) -> String {
    if ticket.title.is_empty() {
        ticket.anomaly_text.clone()
    } else {
        format!("{}\n{}", ticket.title, ticket.anomaly_text)
    }
}

/// Reference output for the root-cause/solution prompt.
pub fn rootcause_reference(ticket: &Ticket) -> String {
    [ticket.root_cause_text.as_str(), ticket.solution_text.as_str()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reference rule line `[anomaly, products, root cause, solution]`.
pub fn rule_reference(ticket: &Ticket) -> String {
    format_rule_line(
        &ticket.anomaly_text,
        &ticket.products,
        &ticket.root_cause_text,
        &ticket.solution_text,
    )
}

/// Builds one example pair per applicable template. Prompt 2 needs both a
/// root cause and a solution; prompt 3 needs at least one of them.
pub fn to_example_pairs(ticket: &Ticket, templates: &TemplateSet) -> (Vec<ExamplePair>, Vec<SkippedPair>) {
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let products = ticket.products_joined();
    let first = anomaly_reference(ticket);
    let second = rootcause_reference(ticket);
    for id in TemplateId::ALL {
        let (slots, expected) = match id {
            TemplateId::AnomalyAnalysis => (
                prompt::slots([
                    (prompt::SLOT_PRODUCTS, products.as_str()),
                    (prompt::SLOT_ANOMALY, ticket.anomaly_text.as_str()),
                ]),
                first.clone(),
            ),
            TemplateId::RootCauseSolution => (
                prompt::slots([
                    (prompt::SLOT_ROOT_CAUSE, ticket.root_cause_text.as_str()),
                    (prompt::SLOT_SOLUTION, ticket.solution_text.as_str()),
                ]),
                second.clone(),
            ),
            TemplateId::Combine => (
                prompt::slots([
                    (prompt::SLOT_ANOMALY_ANALYSIS, first.as_str()),
                    (prompt::SLOT_ROOTCAUSE_ANALYSIS, second.as_str()),
                ]),
                rule_reference(ticket),
            ),
        };
        match templates.get(id).render(&slots) {
            Ok(input_text) => pairs.push(ExamplePair {
                ticket_id: ticket.id.clone(),
                prompt_id: id.number(),
                input_text,
                expected_output: expected,
            }),
            Err(err) => {
                let reason = match err {
                    PromptError::EmptySlot(slot) | PromptError::MissingSlot(slot) => {
                        format!("empty slot `{slot}`")
                    }
                    other => other.to_string(),
                };
                tracing::info!(ticket = %ticket.id, prompt = id.number(), %reason, "skipping example pair");
                skipped.push(SkippedPair {
                    ticket_id: ticket.id.clone(),
                    prompt_id: id.number(),
                    reason,
                });
            }
        }
    }
    (pairs, skipped)
}
