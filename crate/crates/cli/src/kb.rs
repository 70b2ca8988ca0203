//! On-disk knowledge base directory: rule store, vector index, run
//! manifest and the embedder description needed to query the index.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rcakb_core::embedding::TextEmbedder;
use rcakb_core::retrieval::{KnowledgeIndex, RetrievalResult};
use rcakb_core::rules::{RcaRule, RuleStore, Verdict};
use rcakb_core::status::ReviewStatus;
use serde::{Deserialize, Serialize};

use crate::config::EmbedderSpec;
use crate::error::CliError;

pub const RULES_FILE: &str = "rules.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDER_FILE: &str = "embedder.json";
pub const MODEL_FILE: &str = "embeddings.txt";

/// Writes every file into a fresh sibling directory, then renames it to
/// `out`. A crash leaves either the previous directory or the new one.
pub fn write_dir_atomically(out: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display(), e))?;
    let name = out
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("output path `{}` has no directory name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let pid = std::process::id();
    let tmp = parent.join(format!(".{name}.tmp-{pid}"));
    let old = parent.join(format!(".{name}.old-{pid}"));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir(&tmp).map_err(|e| CliError::io(tmp.display(), e))?;
    for (file, bytes) in files {
        let path = tmp.join(file);
        let mut f = fs::File::create(&path).map_err(|e| CliError::io(path.display(), e))?;
        f.write_all(bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| CliError::io(path.display(), e))?;
    }
    let replacing = out.exists();
    if replacing {
        fs::rename(out, &old).map_err(|e| CliError::io(out.display(), e))?;
    }
    if let Err(e) = fs::rename(&tmp, out) {
        if replacing {
            let _ = fs::rename(&old, out);
        }
        return Err(CliError::io(out.display(), e));
    }
    if replacing {
        let _ = fs::remove_dir_all(&old);
    }
    Ok(())
}

/// One retrieval hit as reported by `query` and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub entry_id: String,
    pub score: f64,
    pub status: ReviewStatus,
    pub anomaly_text: String,
    pub root_cause_text: String,
    pub solution_text: String,
    pub products: Vec<String>,
    pub rule_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub anomaly_text: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_threshold() -> f64 {
    rcakb_core::retrieval::DEFAULT_THRESHOLD
}

fn default_k() -> usize {
    rcakb_core::retrieval::DEFAULT_K
}

impl QueryRequest {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Usage(format!("threshold {} outside [-1, 1]", self.threshold)));
        }
        if self.k == 0 {
            return Err(CliError::Usage("k must be at least 1".into()));
        }
        if self.anomaly_text.trim().is_empty() {
            return Err(CliError::Usage("anomaly_text is empty".into()));
        }
        Ok(())
    }
}

/// Entry status derived from the reviews of the rules a ticket produced:
/// approved once any rule is approved, rejected once all are rejected.
pub fn entry_status(store: &RuleStore, ticket_id: &str) -> ReviewStatus {
    let statuses: Vec<ReviewStatus> = store
        .rules()
        .iter()
        .filter(|r| r.source_ticket_ids.iter().any(|t| t == ticket_id))
        .map(|r| r.status)
        .collect();
    if statuses.contains(&ReviewStatus::Approved) {
        ReviewStatus::Approved
    } else if !statuses.is_empty() && statuses.iter().all(|s| *s == ReviewStatus::Rejected) {
        ReviewStatus::Rejected
    } else {
        ReviewStatus::Draft
    }
}

pub struct KnowledgeBase {
    pub dir: PathBuf,
    pub store: RuleStore,
    pub index: KnowledgeIndex,
    pub embedder: Arc<dyn TextEmbedder>,
}

impl KnowledgeBase {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let spec_path = dir.join(EMBEDDER_FILE);
        let spec_text = fs::read_to_string(&spec_path).map_err(|e| CliError::io(spec_path.display(), e))?;
        let spec: EmbedderSpec = serde_json::from_str(&spec_text).map_err(|e| CliError::Data {
            path: spec_path.display().to_string(),
            message: e.to_string(),
        })?;
        let embedder = spec.load(dir)?.text();
        let index = KnowledgeIndex::load(dir.join(INDEX_FILE), Some(&embedder.fingerprint()))?;
        let store = RuleStore::load(dir.join(RULES_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            store,
            index,
            embedder,
        })
    }

    pub fn query(&self, request: &QueryRequest) -> Result<Vec<QueryHit>, CliError> {
        request.validate()?;
        let hits = self
            .index
            .retrieve(&request.anomaly_text, self.embedder.as_ref(), request.threshold, request.k);
        Ok(hits.into_iter().map(|h| self.hit(h)).collect())
    }

    pub fn hit(&self, h: RetrievalResult) -> QueryHit {
        let rule_ids = self
            .store
            .rules()
            .iter()
            .filter(|r| r.source_ticket_ids.contains(&h.entry.source_ticket_id))
            .map(|r| r.rule_id.clone())
            .collect();
        QueryHit {
            entry_id: h.entry.entry_id,
            score: h.score,
            status: h.entry.status,
            anomaly_text: h.entry.anomaly_text,
            root_cause_text: h.entry.root_cause_text,
            solution_text: h.entry.solution_text,
            products: h.entry.products,
            rule_ids,
        }
    }

    /// Records a verdict, syncs the source entries' statuses and persists
    /// both files.
    pub fn review(&mut self, rule_id: &str, verdict: Verdict, reviewer: &str, note: &str) -> Result<RcaRule, CliError> {
        let rule = self.store.review(rule_id, verdict, reviewer, note)?.clone();
        for ticket in &rule.source_ticket_ids {
            let status = entry_status(&self.store, ticket);
            self.index.set_status(ticket, status);
        }
        self.store.save(self.dir.join(RULES_FILE))?;
        self.index.persist(self.dir.join(INDEX_FILE))?;
        Ok(rule)
    }
}
