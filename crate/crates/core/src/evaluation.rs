//! Text similarity metrics and per-corpus reports.
//!
//! All metrics work on [`words`]: lowercased alphanumeric tokens with
//! punctuation dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_unchecked, words, EmbeddingVector, TextEmbedder, TokenEmbedder};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("text is empty")]
    EmptyText,
    #[error("no pairs to evaluate")]
    EmptyPairSet,
    #[error("max_n must be at least 1")]
    InvalidOrder,
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const DEFAULT_BLEU_ORDER: usize = 4;
pub const DEFAULT_BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Smoothing {
    /// A precision with zero matches makes the score 0.
    None,
    /// Zero match counts are replaced by this value.
    Epsilon(f64),
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Epsilon(DEFAULT_BLEU_EPSILON)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Sentence BLEU over token sequences.
///
/// Uses uniform weights over orders `1..=min(max_n, |candidate|)` so a short
/// candidate identical to its reference still scores 1.
pub fn bleu_tokens(
    candidate: &[String],
    references: &[Vec<String>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::EmptyReferenceSet);
    }
    if max_n == 0 {
        return Err(EvalError::InvalidOrder);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let order = max_n.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (gram, c) in ngram_counts(r, n) {
                let slot = max_ref.entry(gram).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        let total = (candidate.len() + 1 - n) as f64;
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let numerator = match (clipped, smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::Epsilon(eps)) => eps,
            (m, _) => m as f64,
        };
        log_sum += (numerator / total).ln();
    }
    let c = candidate.len();
    let r = closest_ref_len(c, references);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * (log_sum / order as f64).exp()).clamp(0.0, 1.0))
}

pub fn bleu(candidate: &str, references: &[&str], max_n: usize, smoothing: Smoothing) -> Result<f64, EvalError> {
    let refs: Vec<Vec<String>> = references.iter().map(|r| words(r)).collect();
    bleu_tokens(&words(candidate), &refs, max_n, smoothing)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    Prf::new(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&words(candidate), &words(reference))
}

/// Symmetric word-to-synonyms map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    map: BTreeMap<String, BTreeSet<String>>,
}

const SEED_SYNONYMS: &[(&str, &str)] = &[
    ("node", "server"),
    ("latency", "delay"),
    ("outage", "downtime"),
    ("failure", "fault"),
    ("restart", "reboot"),
    ("link", "connection"),
    ("card", "board"),
    ("alarm", "alert"),
    ("packet", "frame"),
    ("fix", "repair"),
    ("upgrade", "update"),
    ("drop", "loss"),
];

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Small telecom seed lexicon.
    pub fn telecom() -> Self {
        Self::from_pairs(SEED_SYNONYMS.iter().copied())
    }

    pub fn from_pairs<A: AsRef<str>, B: AsRef<str>>(pairs: impl IntoIterator<Item = (A, B)>) -> Self {
        let mut lex = Self::new();
        for (a, b) in pairs {
            lex.add_pair(a.as_ref(), b.as_ref());
        }
        lex
    }

    pub fn add_pair(&mut self, a: &str, b: &str) {
        let (a, b) = (a.trim().to_lowercase(), b.trim().to_lowercase());
        if a.is_empty() || b.is_empty() || a == b {
            return;
        }
        self.map.entry(a.clone()).or_default().insert(b.clone());
        self.map.entry(b).or_default().insert(a);
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.map.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn synonyms(&self, word: &str) -> impl Iterator<Item = &str> {
        self.map.get(word).into_iter().flatten().map(String::as_str)
    }

    /// Number of distinct unordered pairs.
    pub fn pair_count(&self) -> usize {
        self.map.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (a, syns) in &self.map {
            for b in syns.iter().filter(|b| *b > a) {
                out.push((a.clone(), b.clone()));
            }
        }
        out
    }

    /// One `word<TAB>word` pair per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.trim().is_empty() && !b.trim().is_empty() => lex.add_pair(a, b),
                _ => {
                    return Err(EvalError::Lexicon {
                        line: i + 1,
                        message: "expected `word<TAB>word`".into(),
                    })
                }
            }
        }
        Ok(lex)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Suffix-stripping stemmer used by METEOR's second stage.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;
/// Search budget for the synonym stage before it falls back to greedy.
const SYNONYM_SEARCH_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeteorDetail {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_mean: f64,
    pub penalty: f64,
    pub matches: usize,
    pub chunks: usize,
    pub exact_matches: usize,
    pub stem_matches: usize,
    pub synonym_matches: usize,
}

/// Chunks of an alignment given as (candidate index, reference index) pairs.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    let mut sorted = alignment.to_vec();
    sorted.sort_unstable();
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(c, r) in &sorted {
        match prev {
            Some((pc, pr)) if c == pc + 1 && r == pr + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((c, r));
    }
    chunks
}

fn meteor_from_alignment(cand_len: usize, ref_len: usize, alignment: &[(usize, usize)]) -> (f64, f64, f64, f64, f64, usize) {
    let m = alignment.len();
    if m == 0 || cand_len == 0 || ref_len == 0 {
        return (0.0, 0.0, 0.0, 0.0, 0.0, 0);
    }
    let p = m as f64 / cand_len as f64;
    let r = m as f64 / ref_len as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let chunks = count_chunks(alignment);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    (f_mean * (1.0 - penalty), p, r, f_mean, penalty, chunks)
}

/// Greedy stage: each unmatched candidate token takes the first unmatched
/// reference token accepted by `eq`.
fn greedy_stage(
    cand: &[String],
    reference: &[String],
    used_c: &mut [bool],
    used_r: &mut [bool],
    alignment: &mut Vec<(usize, usize)>,
    eq: impl Fn(&str, &str) -> bool,
) -> usize {
    let mut added = 0;
    for (i, c) in cand.iter().enumerate() {
        if used_c[i] {
            continue;
        }
        if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && eq(c, &reference[j])) {
            used_c[i] = true;
            used_r[j] = true;
            alignment.push((i, j));
            added += 1;
        }
    }
    added
}

struct SynonymSearch<'a> {
    edges: &'a [Vec<usize>],
    cand_positions: &'a [usize],
    base: &'a [(usize, usize)],
    cand_len: usize,
    ref_len: usize,
    used_r: Vec<bool>,
    current: Vec<(usize, usize)>,
    best: Option<(f64, Vec<(usize, usize)>)>,
    visited: usize,
}

impl SynonymSearch<'_> {
    fn run(&mut self, k: usize) {
        self.visited += 1;
        if self.visited > SYNONYM_SEARCH_BUDGET {
            return;
        }
        if k == self.cand_positions.len() {
            let mut alignment = self.base.to_vec();
            alignment.extend_from_slice(&self.current);
            let score = meteor_from_alignment(self.cand_len, self.ref_len, &alignment).0;
            // Strict improvement keeps the first-found (fewest-deviation) choice on ties.
            if self.best.as_ref().is_none_or(|(b, _)| score > *b) {
                self.best = Some((score, self.current.clone()));
            }
            return;
        }
        let i = self.cand_positions[k];
        for &j in &self.edges[k] {
            if !self.used_r[j] {
                self.used_r[j] = true;
                self.current.push((i, j));
                self.run(k + 1);
                self.current.pop();
                self.used_r[j] = false;
            }
        }
        self.run(k + 1);
    }
}

/// METEOR with exact, stem and synonym stages.
///
/// Exact and stem stages align greedily left to right. The synonym stage
/// chooses, among all matchings of the remaining tokens through lexicon
/// pairs, the one with the highest final score, so adding a lexicon pair
/// never lowers a score.
pub fn meteor_tokens(candidate: &[String], reference: &[String], lexicon: &SynonymLexicon) -> MeteorDetail {
    if candidate.is_empty() || reference.is_empty() {
        return MeteorDetail::default();
    }
    let mut used_c = vec![false; candidate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut alignment = Vec::new();
    let exact = greedy_stage(candidate, reference, &mut used_c, &mut used_r, &mut alignment, |a, b| a == b);
    let stemmed = greedy_stage(candidate, reference, &mut used_c, &mut used_r, &mut alignment, |a, b| {
        stem(a) == stem(b)
    });

    let mut cand_positions = Vec::new();
    let mut edges = Vec::new();
    for (i, c) in candidate.iter().enumerate().filter(|(i, _)| !used_c[*i]) {
        let e: Vec<usize> = (0..reference.len())
            .filter(|&j| !used_r[j] && lexicon.are_synonyms(c, &reference[j]))
            .collect();
        if !e.is_empty() {
            cand_positions.push(i);
            edges.push(e);
        }
    }
    let mut synonym = 0;
    if !cand_positions.is_empty() {
        let mut search = SynonymSearch {
            edges: &edges,
            cand_positions: &cand_positions,
            base: &alignment,
            cand_len: candidate.len(),
            ref_len: reference.len(),
            used_r: used_r.clone(),
            current: Vec::new(),
            best: None,
            visited: 0,
        };
        search.run(0);
        if search.visited <= SYNONYM_SEARCH_BUDGET {
            let (_, chosen) = search.best.expect("search visits at least one leaf");
            synonym = chosen.len();
            alignment.extend(chosen);
        } else {
            tracing::debug!("synonym search budget exceeded, aligning greedily");
            synonym = greedy_stage(candidate, reference, &mut used_c, &mut used_r, &mut alignment, |a, b| {
                lexicon.are_synonyms(a, b)
            });
        }
    }

    let (score, precision, recall, f_mean, penalty, chunks) =
        meteor_from_alignment(candidate.len(), reference.len(), &alignment);
    MeteorDetail {
        score,
        precision,
        recall,
        f_mean,
        penalty,
        matches: alignment.len(),
        chunks,
        exact_matches: exact,
        stem_matches: stemmed,
        synonym_matches: synonym,
    }
}

pub fn meteor(candidate: &str, reference: &str, lexicon: &SynonymLexicon) -> f64 {
    meteor_tokens(&words(candidate), &words(reference), lexicon).score
}

/// Greedy max-cosine token alignment. Identical tokens count as similarity 1
/// even when the embedder has no vector for them.
pub fn embed_score_tokens(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn TokenEmbedder,
) -> Result<Prf, EvalError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyText);
    }
    let cv: Vec<EmbeddingVector> = candidate.iter().map(|t| embedder.embed_token(t)).collect();
    let rv: Vec<EmbeddingVector> = reference.iter().map(|t| embedder.embed_token(t)).collect();
    let mut sim = vec![0.0; candidate.len() * reference.len()];
    for (i, (ct, c)) in candidate.iter().zip(&cv).enumerate() {
        for (j, (rt, r)) in reference.iter().zip(&rv).enumerate() {
            sim[i * reference.len() + j] = if ct == rt { 1.0 } else { cosine_unchecked(c, r).clamp(0.0, 1.0) };
        }
    }
    let row_max = |i: usize| sim[i * reference.len()..(i + 1) * reference.len()].iter().fold(0.0f64, |a, &b| a.max(b));
    let col_max = |j: usize| (0..candidate.len()).map(|i| sim[i * reference.len() + j]).fold(0.0f64, f64::max);
    let precision = (0..candidate.len()).map(row_max).sum::<f64>() / candidate.len() as f64;
    let recall = (0..reference.len()).map(col_max).sum::<f64>() / reference.len() as f64;
    Ok(Prf::new(precision, recall))
}

pub fn embed_score(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> Result<Prf, EvalError> {
    embed_score_tokens(&words(candidate), &words(reference), embedder)
}

/// Cosine of the two document embeddings.
pub fn corpus_cosine(candidate: &str, reference: &str, embedder: &dyn TextEmbedder) -> f64 {
    cosine_unchecked(&embedder.embed_text(candidate), &embedder.embed_text(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairScores {
    pub cosine_similarity: f64,
    pub bleu: f64,
    pub rouge_l_f1: f64,
    pub meteor: f64,
    pub embed_f1: f64,
}

impl PairScores {
    pub fn as_array(&self) -> [f64; 5] {
        [self.cosine_similarity, self.bleu, self.rouge_l_f1, self.meteor, self.embed_f1]
    }

    /// Every metric of `self` strictly above the same metric of `other`.
    pub fn dominates(&self, other: &PairScores) -> bool {
        self.as_array().iter().zip(other.as_array()).all(|(a, b)| *a > b)
    }
}

pub const METRIC_NAMES: [&str; 5] = ["Cosine", "BLEU", "ROUGE", "METEOR", "BERT"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub bleu_max_n: usize,
    pub bleu_smoothing: Smoothing,
    pub token_embedder: String,
    pub doc_embedder: String,
    pub lexicon_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_pair: Vec<PairScores>,
    pub means: PairScores,
    pub pair_count: usize,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fixed-width table, one row per labelled report.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<label_w$}", "");
    for name in METRIC_NAMES {
        let _ = write!(out, " {name:>8}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in report.means.as_array() {
            let _ = write!(out, " {v:>8.3}");
        }
        out.push('\n');
    }
    out
}

/// Scores (generated, reference) pairs with all five metrics.
#[derive(Clone)]
pub struct Evaluator {
    pub token_embedder: Arc<dyn TokenEmbedder>,
    pub token_embedder_name: String,
    pub doc_embedder: Arc<dyn TextEmbedder>,
    pub lexicon: SynonymLexicon,
    pub bleu_max_n: usize,
    pub smoothing: Smoothing,
}

impl Evaluator {
    pub fn new(
        token_embedder: Arc<dyn TokenEmbedder>,
        token_embedder_name: impl Into<String>,
        doc_embedder: Arc<dyn TextEmbedder>,
        lexicon: SynonymLexicon,
    ) -> Self {
        Self {
            token_embedder,
            token_embedder_name: token_embedder_name.into(),
            doc_embedder,
            lexicon,
            bleu_max_n: DEFAULT_BLEU_ORDER,
            smoothing: Smoothing::default(),
        }
    }

    /// Hash embeddings for both roles and the telecom lexicon.
    pub fn hashed(dim: usize) -> Self {
        let e = Arc::new(crate::embedding::HashEmbedder::new(dim));
        let name = e.fingerprint();
        Self::new(e.clone(), name, e, SynonymLexicon::telecom())
    }

    pub fn score_pair(&self, generated: &str, reference: &str) -> PairScores {
        let cand = words(generated);
        let refs = [words(reference)];
        PairScores {
            cosine_similarity: corpus_cosine(generated, reference, self.doc_embedder.as_ref()),
            bleu: bleu_tokens(&cand, &refs, self.bleu_max_n, self.smoothing).unwrap_or(0.0),
            rouge_l_f1: rouge_l_tokens(&cand, &refs[0]).f1,
            meteor: meteor_tokens(&cand, &refs[0], &self.lexicon).score,
            embed_f1: embed_score_tokens(&cand, &refs[0], self.token_embedder.as_ref())
                .map(|p| p.f1)
                .unwrap_or(0.0),
        }
    }

    fn echo(&self) -> EvalConfigEcho {
        EvalConfigEcho {
            bleu_max_n: self.bleu_max_n,
            bleu_smoothing: self.smoothing,
            token_embedder: self.token_embedder_name.clone(),
            doc_embedder: self.doc_embedder.fingerprint(),
            lexicon_pairs: self.lexicon.pair_count(),
        }
    }
}

/// Scores every pair (in parallel) and averages in input order.
pub fn evaluate_pairs<G: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    pairs: &[(G, R)],
    evaluator: &Evaluator,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairSet);
    }
    let per_pair: Vec<PairScores> = pairs
        .par_iter()
        .map(|(g, r)| evaluator.score_pair(g.as_ref(), r.as_ref()))
        .collect();
    let n = per_pair.len() as f64;
    let mut sums = [0.0; 5];
    for p in &per_pair {
        for (s, v) in sums.iter_mut().zip(p.as_array()) {
            *s += v;
        }
    }
    let means = PairScores {
        cosine_similarity: sums[0] / n,
        bleu: sums[1] / n,
        rouge_l_f1: sums[2] / n,
        meteor: sums[3] / n,
        embed_f1: sums[4] / n,
    };
    Ok(EvalReport {
        pair_count: per_pair.len(),
        per_pair,
        means,
        config: evaluator.echo(),
    })
}
