//! Tokenization, prompt templates and prompt-aware chunking.
//!
//! Every chunk produced by [`split_chunks`] carries the full prompt followed by
//! a disjoint window of the data tokens, so that prompt plus window never
//! exceeds the model's token budget.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default context budget of the reference model family.
pub const DEFAULT_MAX_TOKEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown prompt template {0}")]
    UnknownTemplate(u8),
    #[error("missing slot `{0}`")]
    MissingSlot(String),
    #[error("slot `{0}` is empty")]
    EmptySlot(String),
    #[error("prompt uses {prompt_tokens} tokens, leaving no room under max_token {max_token}")]
    PromptTooLong { prompt_tokens: usize, max_token: usize },
    #[error("no data tokens to chunk")]
    EmptyData,
}

/// Splits text into tokens. Budget arithmetic everywhere in the crate goes
/// through whichever implementation is configured.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Joins tokens back into text such that `tokenize(detokenize(t)) == t`.
    fn detokenize(&self, tokens: &[String]) -> String;

    fn name(&self) -> &str;
}

/// Whitespace splitting with every punctuation character as its own token.
///
/// Word characters are alphanumerics and `_`. Case is preserved; consumers
/// that need case-insensitive comparison lowercase on their side.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTokenizer;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl Tokenizer for ReferenceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut current = String::new();
        for c in text.chars() {
            if is_word_char(c) {
                current.push(c);
                continue;
            }
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
        tokens
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        let mut out = String::new();
        for (i, tok) in tokens.iter().enumerate() {
            let glued = tok.chars().next().is_some_and(|c| !is_word_char(c));
            if i > 0 && !glued {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    fn name(&self) -> &str {
        "reference-v1"
    }
}

/// Token count under the reference tokenizer.
pub fn count_tokens(text: &str) -> usize {
    ReferenceTokenizer.tokenize(text).len()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn from_text(tokenizer: &dyn Tokenizer, text: &str) -> Self {
        Self {
            tokens: tokenizer.tokenize(text),
        }
    }

    pub fn count(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    AnomalyAnalysis = 1,
    RootCauseSolution = 2,
    Combine = 3,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [
        TemplateId::AnomalyAnalysis,
        TemplateId::RootCauseSolution,
        TemplateId::Combine,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self, PromptError> {
        match n {
            1 => Ok(TemplateId::AnomalyAnalysis),
            2 => Ok(TemplateId::RootCauseSolution),
            3 => Ok(TemplateId::Combine),
            other => Err(PromptError::UnknownTemplate(other)),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TemplateId::AnomalyAnalysis => "anomaly-analysis",
            TemplateId::RootCauseSolution => "rootcause-solution",
            TemplateId::Combine => "combine",
        };
        f.write_str(name)
    }
}

pub const SLOT_PRODUCTS: &str = "products";
pub const SLOT_ANOMALY: &str = "anomaly";
pub const SLOT_ROOT_CAUSE: &str = "root_cause";
pub const SLOT_SOLUTION: &str = "solution";
pub const SLOT_ANOMALY_ANALYSIS: &str = "anomaly_analysis";
pub const SLOT_ROOTCAUSE_ANALYSIS: &str = "rootcause_analysis";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

fn parse_pieces(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else {
            break;
        };
        let name = &rest[open + 1..open + close];
        if name.is_empty() || !name.chars().all(is_word_char) {
            pieces.push(Piece::Literal(rest[..open + 1].to_string()));
            rest = &rest[open + 1..];
            continue;
        }
        if open > 0 {
            pieces.push(Piece::Literal(rest[..open].to_string()));
        }
        pieces.push(Piece::Slot(name.to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest.to_string()));
    }
    pieces
}

/// One of the three instruction templates, with `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub version: u32,
    pub text: String,
    pieces: Vec<Piece>,
    /// Number of leading pieces that form the instruction when the template
    /// is framed for chunking; the remaining pieces are data.
    instruction_len: usize,
}

impl PromptTemplate {
    /// Builds a template. The instruction part for chunking ends right after
    /// the first occurrence of `instruction_end` in the literal text; without
    /// a marker the whole template counts as instruction.
    pub fn new(id: TemplateId, version: u32, text: &str, instruction_end: Option<&str>) -> Self {
        let split = instruction_end
            .and_then(|marker| text.find(marker).map(|pos| pos + marker.len()))
            .unwrap_or(text.len());
        let mut pieces = parse_pieces(&text[..split]);
        let instruction_len = pieces.len();
        pieces.extend(parse_pieces(&text[split..]));
        Self {
            id,
            version,
            text: text.to_string(),
            pieces,
            instruction_len,
        }
    }

    pub fn slot_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for piece in &self.pieces {
            if let Piece::Slot(name) = piece {
                if !names.contains(&name.as_str()) {
                    names.push(name);
                }
            }
        }
        names
    }

    fn check_slots(&self, slots: &BTreeMap<String, String>) -> Result<(), PromptError> {
        for name in self.slot_names() {
            match slots.get(name) {
                None => return Err(PromptError::MissingSlot(name.to_string())),
                Some(v) if v.trim().is_empty() => {
                    return Err(PromptError::EmptySlot(name.to_string()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn render_pieces(pieces: &[Piece], slots: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for piece in pieces {
            match piece {
                Piece::Literal(lit) => out.push_str(lit),
                Piece::Slot(name) => out.push_str(&slots[name]),
            }
        }
        out
    }

    /// Substitutes every slot verbatim, in a single pass.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
        self.check_slots(slots)?;
        Ok(Self::render_pieces(&self.pieces, slots))
    }

    /// Splits the rendered prompt into its instruction and its data, such that
    /// `instruction + data == render(slots)`.
    pub fn frame(&self, slots: &BTreeMap<String, String>) -> Result<(String, String), PromptError> {
        self.check_slots(slots)?;
        let (head, tail) = self.pieces.split_at(self.instruction_len);
        Ok((
            Self::render_pieces(head, slots),
            Self::render_pieces(tail, slots),
        ))
    }
}

/// The versioned set of RCA templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::v1()
    }
}

impl TemplateSet {
    pub fn v1() -> Self {
        Self {
            templates: vec![
                PromptTemplate::new(
                    TemplateId::AnomalyAnalysis,
                    1,
                    include_str!("../templates/v1/anomaly_analysis.txt"),
                    Some("{products}:"),
                ),
                PromptTemplate::new(
                    TemplateId::RootCauseSolution,
                    1,
                    include_str!("../templates/v1/rootcause_solution.txt"),
                    Some("Here are the references for:"),
                ),
                PromptTemplate::new(
                    TemplateId::Combine,
                    1,
                    include_str!("../templates/v1/combine.txt"),
                    None,
                ),
            ],
        }
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .expect("template set covers every id")
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }

    /// Token count of the longest template text with empty slots.
    pub fn longest_template_tokens(&self, tokenizer: &dyn Tokenizer) -> usize {
        self.templates
            .iter()
            .map(|t| {
                let literal: String = t
                    .pieces
                    .iter()
                    .filter_map(|p| match p {
                        Piece::Literal(l) => Some(l.as_str()),
                        Piece::Slot(_) => None,
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                tokenizer.tokenize(&literal).len()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Renders template `template_id` (1, 2 or 3) from the v1 set.
pub fn render_prompt(template_id: u8, slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let id = TemplateId::from_number(template_id)?;
    TemplateSet::v1().get(id).render(slots)
}

/// Builds a slot map from `(name, value)` pairs.
pub fn slots<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// A prompt-prefixed window of data tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub prompt_tokens: TokenSequence,
    pub data_tokens: TokenSequence,
    pub index: usize,
    pub total: usize,
    pub budget_remaining: usize,
}

impl Chunk {
    pub fn token_count(&self) -> usize {
        self.prompt_tokens.count() + self.data_tokens.count()
    }

    /// The text sent to the model for this chunk.
    pub fn render(&self, tokenizer: &dyn Tokenizer) -> String {
        let prompt = tokenizer.detokenize(&self.prompt_tokens.tokens);
        let data = tokenizer.detokenize(&self.data_tokens.tokens);
        match (prompt.is_empty(), data.is_empty()) {
            (true, _) => data,
            (_, true) => prompt,
            _ => format!("{prompt} {data}"),
        }
    }
}

/// Prompt-aware chunking under the reference tokenizer.
pub fn split_chunks(data_text: &str, prompt_text: &str, max_token: usize) -> Result<Vec<Chunk>, PromptError> {
    split_chunks_with(&ReferenceTokenizer, data_text, prompt_text, max_token)
}

/// Prompt-aware chunking: with `r = max_token - len(prompt)`, chunk `i`
/// carries data tokens `[i*r, (i+1)*r)`, the last one takes the remainder.
pub fn split_chunks_with(
    tokenizer: &dyn Tokenizer,
    data_text: &str,
    prompt_text: &str,
    max_token: usize,
) -> Result<Vec<Chunk>, PromptError> {
    let prompt = TokenSequence::from_text(tokenizer, prompt_text);
    let data = tokenizer.tokenize(data_text);
    if prompt.count() >= max_token {
        return Err(PromptError::PromptTooLong {
            prompt_tokens: prompt.count(),
            max_token,
        });
    }
    let remaining = max_token - prompt.count();
    if data.is_empty() {
        return Err(PromptError::EmptyData);
    }
    let total = data.len().div_ceil(remaining);
    let chunks = data
        .chunks(remaining)
        .enumerate()
        .map(|(index, window)| Chunk {
            prompt_tokens: prompt.clone(),
            data_tokens: TokenSequence {
                tokens: window.to_vec(),
            },
            index,
            total,
            budget_remaining: remaining,
        })
        .collect::<Vec<_>>();
    debug_assert_eq!(chunks.len(), total);
    Ok(chunks)
}

/// One line of a chunk trace export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkTraceRecord {
    pub ticket_id: String,
    pub template: u8,
    pub index: usize,
    pub total: usize,
    pub prompt_tokens: usize,
    pub data_tokens: usize,
}

impl ChunkTraceRecord {
    pub fn new(ticket_id: &str, template: TemplateId, chunk: &Chunk) -> Self {
        Self {
            ticket_id: ticket_id.to_string(),
            template: template.number(),
            index: chunk.index,
            total: chunk.total,
            prompt_tokens: chunk.prompt_tokens.count(),
            data_tokens: chunk.data_tokens.count(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_tokens_examples() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("packet loss detected"), 3);
        assert_eq!(count_tokens("show interface statistics;"), 4);
    }

    #[test]
    fn detokenize_round_trips() {
        let tok = ReferenceTokenizer;
        let text = "CARD-S1 failed (slot 2); latency, jitter... don't";
        let tokens = tok.tokenize(text);
        assert_eq!(tok.tokenize(&tok.detokenize(&tokens)), tokens);
    }

    #[test]
    fn render_template_one() {
        let s = slots([
            (SLOT_PRODUCTS, "Radio Dot"),
            (SLOT_ANOMALY, "UE increased latency after upgrade"),
        ]);
        let text = render_prompt(1, &s).unwrap();
        assert!(text.contains("Radio Dot"));
        assert!(text.contains("UE increased latency after upgrade"));
    }

    #[test]
    fn render_template_three_keeps_line_instruction() {
        let s = slots([(SLOT_ANOMALY_ANALYSIS, "R1"), (SLOT_ROOTCAUSE_ANALYSIS, "R2")]);
        let text = render_prompt(3, &s).unwrap();
        assert!(text.contains("R1") && text.contains("R2"));
        assert!(text.contains("Each rule will be on one line."));
    }

    #[test]
    fn empty_and_missing_slots() {
        let s = slots([(SLOT_PRODUCTS, ""), (SLOT_ANOMALY, "x")]);
        assert_eq!(render_prompt(1, &s), Err(PromptError::EmptySlot("products".into())));
        let s = slots([(SLOT_ANOMALY, "x")]);
        assert_eq!(render_prompt(1, &s), Err(PromptError::MissingSlot("products".into())));
        assert_eq!(render_prompt(4, &s), Err(PromptError::UnknownTemplate(4)));
    }

    #[test]
    fn slot_values_are_not_reinterpreted() {
        let s = slots([(SLOT_PRODUCTS, "{anomaly}"), (SLOT_ANOMALY, "a {b}")]);
        let text = render_prompt(1, &s).unwrap();
        assert!(text.contains("products {anomaly}: a {b}."));
    }

    #[test]
    fn frame_concatenates_to_render() {
        let set = TemplateSet::v1();
        let s = slots([
            (SLOT_PRODUCTS, "P"),
            (SLOT_ANOMALY, "A"),
            (SLOT_ROOT_CAUSE, "R"),
            (SLOT_SOLUTION, "S"),
            (SLOT_ANOMALY_ANALYSIS, "X"),
            (SLOT_ROOTCAUSE_ANALYSIS, "Y"),
        ]);
        for t in set.iter() {
            let (head, tail) = t.frame(&s).unwrap();
            assert_eq!(format!("{head}{tail}"), t.render(&s).unwrap());
        }
        let (head, tail) = set.get(TemplateId::AnomalyAnalysis).frame(&s).unwrap();
        assert!(head.ends_with("products P:"));
        assert_eq!(tail, " A.");
        let (head, tail) = set.get(TemplateId::RootCauseSolution).frame(&s).unwrap();
        assert!(head.ends_with("references for:"));
        assert!(tail.starts_with("\nroot cause analysis: R."));
        let (_, tail) = set.get(TemplateId::Combine).frame(&s).unwrap();
        assert!(tail.is_empty());
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn single_chunk_case() {
        let chunks = split_chunks(&words(10), &words(6), 16).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].budget_remaining, 10);
        assert_eq!(chunks[0].data_tokens.count(), 10);
    }

    #[test]
    fn three_chunk_trace() {
        let chunks = split_chunks(&words(25), &words(6), 16).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.data_tokens.count()).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        assert!(chunks.iter().all(|c| c.total == 3 && c.budget_remaining == 10));
        assert_eq!(chunks[2].data_tokens.tokens[0], "w20");
    }

    #[test]
    fn prompt_too_long_and_empty_data() {
        assert!(matches!(
            split_chunks(&words(3), &words(20), 16),
            Err(PromptError::PromptTooLong { prompt_tokens: 20, max_token: 16 })
        ));
        assert!(matches!(
            split_chunks(&words(3), &words(16), 16),
            Err(PromptError::PromptTooLong { .. })
        ));
        assert_eq!(split_chunks("", &words(3), 16), Err(PromptError::EmptyData));
    }

    #[test]
    fn chunk_render_stays_in_budget() {
        let tok = ReferenceTokenizer;
        let chunks = split_chunks("a, b; c (d) e", "Analyze: this", 5).unwrap();
        for c in &chunks {
            assert!(tok.tokenize(&c.render(&tok)).len() <= 5);
        }
    }

    #[test]
    fn trace_record_line() {
        let chunks = split_chunks(&words(5), &words(2), 4).unwrap();
        let rec = ChunkTraceRecord::new("T1", TemplateId::AnomalyAnalysis, &chunks[1]);
        assert_eq!(
            rec.to_line(),
            r#"{"ticket_id":"T1","template":1,"index":1,"total":3,"prompt_tokens":2,"data_tokens":2}"#
        );
    }
}
