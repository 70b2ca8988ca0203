//! Association rules `[network anomaly, product impact, root cause, solution]`:
//! parsing model output, deduplication, similarity-based compression into
//! multi-branch rules, and the expert review lifecycle.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_unchecked, EmbeddingVector, TextEmbedder};
use crate::status::ReviewStatus;
use crate::util::write_atomically;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("no rules to compress")]
    EmptyRuleSet,
    #[error("threshold {0} must lie in (0, 1]")]
    InvalidThreshold(f64),
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("rule `{rule_id}` was already reviewed ({status})")]
    AlreadyReviewed { rule_id: String, status: ReviewStatus },
    #[error("duplicate rule id `{0}`")]
    DuplicateRuleId(String),
    #[error("rule store line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Reject,
}

impl std::str::FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approve" => Ok(Verdict::Approve),
            "reject" => Ok(Verdict::Reject),
            other => Err(format!("unknown verdict `{other}` (expected approve or reject)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEvent {
    pub sequence: u64,
    pub rule_id: String,
    pub verdict: Verdict,
    pub reviewer: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcaRule {
    pub rule_id: String,
    pub anomaly_text: String,
    pub product_impacts: Vec<String>,
    pub root_cause_text: String,
    pub solution_text: String,
    pub source_ticket_ids: Vec<String>,
    #[serde(default)]
    pub status: ReviewStatus,
    #[serde(default)]
    pub audit: Vec<ReviewEvent>,
}

impl RcaRule {
    pub fn to_line(&self) -> String {
        format_rule_line(
            &self.anomaly_text,
            &self.product_impacts,
            &self.root_cause_text,
            &self.solution_text,
        )
    }

    fn content_key(&self) -> (&str, &[String], &str, &str) {
        (
            &self.anomaly_text,
            &self.product_impacts,
            &self.root_cause_text,
            &self.solution_text,
        )
    }
}

fn quote_field(field: &str) -> String {
    if field.contains([',', '"', '[', ']']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Formats a rule line that [`parse_rules`] reads back field for field.
pub fn format_rule_line(anomaly: &str, products: &[String], root_cause: &str, solution: &str) -> String {
    format!(
        "[{}, {}, {}, {}]",
        quote_field(anomaly),
        quote_field(&products.join(", ")),
        quote_field(root_cause),
        quote_field(solution)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    UnbracketedLine,
    UnterminatedQuote,
    WrongFieldCount(usize),
    EmptyField(usize),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::UnbracketedLine => f.write_str("line is not enclosed in brackets"),
            SkipReason::UnterminatedQuote => f.write_str("unterminated quoted field"),
            SkipReason::WrongFieldCount(n) => write!(f, "expected 4 fields, found {n}"),
            SkipReason::EmptyField(i) => write!(f, "field {} is empty", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line_number: usize,
    pub text: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseReport {
    pub source_id: String,
    pub parsed: usize,
    pub skipped: Vec<SkippedLine>,
}

impl ParseReport {
    pub fn total_lines(&self) -> usize {
        self.parsed + self.skipped.len()
    }
}

/// Strips list decorations such as `- `, `* `, `3. ` or `3) `.
fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        return rest.trim_start();
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim_start();
        }
    }
    line
}

/// Splits the body of a bracketed line on top-level commas. Double quotes
/// protect commas (`""` escapes a quote) and nested brackets are kept whole.
fn split_fields(body: &str) -> Result<Vec<String>, SkipReason> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut chars = body.chars().peekable();
    let mut depth = 0usize;
    let mut quoted = false;
    let mut at_field_start = true;
    while let Some(c) = chars.next() {
        if quoted {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    current.push('"');
                } else {
                    quoted = false;
                }
            } else {
                current.push(c);
            }
            continue;
        }
        match c {
            '"' if at_field_start => {
                quoted = true;
                at_field_start = false;
            }
            '[' => {
                depth += 1;
                current.push(c);
            }
            ']' => {
                depth = depth.saturating_sub(1);
                current.push(c);
            }
            ',' if depth == 0 => {
                fields.push(current.trim().to_string());
                current.clear();
                at_field_start = true;
            }
            c if c.is_whitespace() && at_field_start => {}
            c => {
                current.push(c);
                at_field_start = false;
            }
        }
    }
    if quoted {
        return Err(SkipReason::UnterminatedQuote);
    }
    fields.push(current.trim().to_string());
    Ok(fields)
}

/// Splits a product-impact field on commas and the word `and`.
pub fn split_products(field: &str) -> Vec<String> {
    field
        .split(',')
        .flat_map(|part| part.split(" and "))
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_line(line: &str) -> Result<[String; 4], SkipReason> {
    let line = strip_bullet(line);
    let line = line.strip_suffix(['.', ',', ';']).unwrap_or(line).trim_end();
    let body = line
        .strip_prefix('[')
        .and_then(|l| l.strip_suffix(']'))
        .ok_or(SkipReason::UnbracketedLine)?;
    let fields = split_fields(body)?;
    if fields.len() != 4 {
        return Err(SkipReason::WrongFieldCount(fields.len()));
    }
    if let Some(i) = fields.iter().position(|f| f.is_empty()) {
        return Err(SkipReason::EmptyField(i));
    }
    let [a, p, r, s]: [String; 4] = fields.try_into().expect("length checked");
    Ok([a, p, r, s])
}

/// Parses one rule per well-formed line. Malformed lines are reported and
/// skipped; this never fails.
pub fn parse_rules(llm_output_text: &str, source_ticket_id: &str) -> (Vec<RcaRule>, ParseReport) {
    let mut rules = Vec::new();
    let mut report = ParseReport {
        source_id: source_ticket_id.to_string(),
        ..Default::default()
    };
    for (idx, line) in llm_output_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok([anomaly, products, root_cause, solution]) => {
                rules.push(RcaRule {
                    rule_id: format!("{}-R{:03}", source_ticket_id, rules.len() + 1),
                    anomaly_text: anomaly,
                    product_impacts: split_products(&products),
                    root_cause_text: root_cause,
                    solution_text: solution,
                    source_ticket_ids: vec![source_ticket_id.to_string()],
                    status: ReviewStatus::Draft,
                    audit: Vec::new(),
                });
                report.parsed += 1;
            }
            Err(reason) => report.skipped.push(SkippedLine {
                line_number: idx + 1,
                text: line.to_string(),
                reason,
            }),
        }
    }
    (rules, report)
}

/// Collapses rules with byte-identical content, keeping the first and
/// merging source tickets.
pub fn dedup_rules(rules: &[RcaRule]) -> Vec<RcaRule> {
    let mut out: Vec<RcaRule> = Vec::new();
    let mut seen: HashMap<(String, Vec<String>, String, String), usize> = HashMap::new();
    for rule in rules {
        let (a, p, r, s) = rule.content_key();
        let key = (a.to_string(), p.to_vec(), r.to_string(), s.to_string());
        match seen.get(&key) {
            Some(&i) => {
                let kept = &mut out[i];
                for src in &rule.source_ticket_ids {
                    if !kept.source_ticket_ids.contains(src) {
                        kept.source_ticket_ids.push(src.clone());
                    }
                }
            }
            None => {
                seen.insert(key, out.len());
                out.push(rule.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleBranch {
    pub root_cause_text: String,
    pub product_impacts: Vec<String>,
    pub solution_text: String,
}

/// One anomaly with every distinct root cause / solution branch of the rules
/// grouped under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedRule {
    pub representative_rule_id: String,
    pub anomaly_summary: String,
    pub branches: Vec<RuleBranch>,
    pub member_rule_ids: Vec<String>,
    pub threshold: f64,
}

/// Greedy leader clustering over anomaly embeddings. Rules are visited in
/// rule id order; each joins the first leader whose cosine similarity is at
/// least `threshold`, otherwise it founds a new cluster.
pub fn compress_rules(
    rules: &[RcaRule],
    embedder: &dyn TextEmbedder,
    threshold: f64,
) -> Result<Vec<CompressedRule>, RuleError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(RuleError::InvalidThreshold(threshold));
    }
    if rules.is_empty() {
        return Err(RuleError::EmptyRuleSet);
    }
    let mut ordered: Vec<&RcaRule> = rules.iter().collect();
    ordered.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));

    let mut leaders: Vec<EmbeddingVector> = Vec::new();
    let mut clusters: Vec<CompressedRule> = Vec::new();
    for rule in ordered {
        let emb = embedder.embed_text(&rule.anomaly_text);
        let slot = leaders
            .iter()
            .position(|leader| cosine_unchecked(leader, &emb) >= threshold);
        let branch = RuleBranch {
            root_cause_text: rule.root_cause_text.clone(),
            product_impacts: rule.product_impacts.clone(),
            solution_text: rule.solution_text.clone(),
        };
        match slot {
            Some(i) => {
                let cluster = &mut clusters[i];
                cluster.member_rule_ids.push(rule.rule_id.clone());
                if !cluster.branches.contains(&branch) {
                    cluster.branches.push(branch);
                }
            }
            None => {
                leaders.push(emb);
                clusters.push(CompressedRule {
                    representative_rule_id: rule.rule_id.clone(),
                    anomaly_summary: rule.anomaly_text.clone(),
                    branches: vec![branch],
                    member_rule_ids: vec![rule.rule_id.clone()],
                    threshold,
                });
            }
        }
    }
    Ok(clusters)
}

/// Plain-text export: each anomaly followed by its branch table.
pub fn render_compressed(clusters: &[CompressedRule]) -> String {
    let mut out = String::new();
    for c in clusters {
        out.push_str(&format!(
            "Anomaly: {} ({} rules, threshold {:.2})\n",
            c.anomaly_summary,
            c.member_rule_ids.len(),
            c.threshold
        ));
        out.push_str("  Root cause | Products | Solution\n");
        for b in &c.branches {
            out.push_str(&format!(
                "  {} | {} | {}\n",
                b.root_cause_text,
                b.product_impacts.join(", "),
                b.solution_text
            ));
        }
    }
    out
}

/// Rules keyed by id, in insertion order, with serialized review transitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleStore {
    rules: Vec<RcaRule>,
    positions: BTreeMap<String, usize>,
    next_sequence: u64,
}

impl RuleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: Vec<RcaRule>) -> Result<Self, RuleError> {
        let mut store = Self::new();
        for rule in rules {
            store.insert(rule)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, rule: RcaRule) -> Result<(), RuleError> {
        if self.positions.contains_key(&rule.rule_id) {
            return Err(RuleError::DuplicateRuleId(rule.rule_id));
        }
        let max_seq = rule.audit.iter().map(|e| e.sequence + 1).max().unwrap_or(0);
        self.next_sequence = self.next_sequence.max(max_seq);
        self.positions.insert(rule.rule_id.clone(), self.rules.len());
        self.rules.push(rule);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&RcaRule> {
        self.positions.get(rule_id).map(|&i| &self.rules[i])
    }

    pub fn rules(&self) -> &[RcaRule] {
        &self.rules
    }

    pub fn pending(&self) -> impl Iterator<Item = &RcaRule> {
        self.rules.iter().filter(|r| r.status == ReviewStatus::Draft)
    }

    /// Moves a draft rule to approved or rejected and records the event.
    pub fn review(
        &mut self,
        rule_id: &str,
        verdict: Verdict,
        reviewer: &str,
        note: &str,
    ) -> Result<&RcaRule, RuleError> {
        let &idx = self
            .positions
            .get(rule_id)
            .ok_or_else(|| RuleError::UnknownRule(rule_id.to_string()))?;
        let rule = &mut self.rules[idx];
        if rule.status != ReviewStatus::Draft {
            return Err(RuleError::AlreadyReviewed {
                rule_id: rule_id.to_string(),
                status: rule.status,
            });
        }
        rule.status = match verdict {
            Verdict::Approve => ReviewStatus::Approved,
            Verdict::Reject => ReviewStatus::Rejected,
        };
        rule.audit.push(ReviewEvent {
            sequence: self.next_sequence,
            rule_id: rule_id.to_string(),
            verdict,
            reviewer: reviewer.to_string(),
            note: note.to_string(),
        });
        self.next_sequence += 1;
        Ok(&self.rules[idx])
    }

    /// Every review event in the store, oldest first.
    pub fn audit_trail(&self) -> Vec<&ReviewEvent> {
        let mut events: Vec<&ReviewEvent> = self.rules.iter().flat_map(|r| r.audit.iter()).collect();
        events.sort_by_key(|e| e.sequence);
        events
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&serde_json::to_string(r).expect("rule serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RuleError> {
        let mut store = Self::new();
        let mut ids = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: RcaRule = serde_json::from_str(line).map_err(|e| RuleError::Format {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if !ids.insert(rule.rule_id.clone()) {
                return Err(RuleError::DuplicateRuleId(rule.rule_id));
            }
            store.insert(rule)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RuleError> {
        write_atomically(path.as_ref(), self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RuleError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}
