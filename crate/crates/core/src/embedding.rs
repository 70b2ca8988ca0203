//! Text embeddings: the vector type, cosine similarity, a deterministic hash
//! embedder and a skip-gram word2vec trainer with negative sampling.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{ReferenceTokenizer, Tokenizer};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary has {0} words after min-count filtering, need at least 2")]
    VocabularyTooSmall(usize),
    #[error("held-out pair set is empty")]
    EmptyHeldout,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A dense vector with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            norm: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_zero(&self) -> bool {
        self.norm == 0.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|x| x * factor).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    if a.norm == 0.0 || b.norm == 0.0 {
        return 0.0;
    }
    (dot(&a.values, &b.values) / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

/// Lowercased word tokens of `text`; punctuation tokens are dropped.
pub fn words(text: &str) -> Vec<String> {
    ReferenceTokenizer
        .tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(|t| t.to_lowercase())
        .collect()
}

/// Maps a whole text to a vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> EmbeddingVector;

    /// Identifies the embedding function; persisted indexes refuse to load
    /// under a different fingerprint.
    fn fingerprint(&self) -> String;
}

/// Maps a single token to a vector.
pub trait TokenEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_token(&self, token: &str) -> EmbeddingVector;
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic embedder: each word maps to a pseudo-random ±1 vector
/// derived from its hash, and a text is the sum over its words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "hash embedder needs dim >= 2");
        Self { dim }
    }

    fn accumulate(&self, word: &str, out: &mut [f64]) {
        let mut state = fnv1a(word.as_bytes());
        let mut bits = 0u64;
        for (i, slot) in out.iter_mut().enumerate() {
            if i % 64 == 0 {
                bits = splitmix64(&mut state);
            }
            *slot += if bits & 1 == 1 { 1.0 } else { -1.0 };
            bits >>= 1;
        }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dim];
        for w in words(text) {
            self.accumulate(&w, &mut values);
        }
        EmbeddingVector::new(values)
    }

    fn fingerprint(&self) -> String {
        format!("hash-v1:{}", self.dim)
    }
}

impl TokenEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_token(&self, token: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dim];
        self.accumulate(&token.to_lowercase(), &mut values);
        EmbeddingVector::new(values)
    }
}

pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    HashEmbedder::new(dim).embed_text(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr_start: 0.025,
            lr_end: 0.0001,
            min_count: 1,
            seed: 1,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |msg: &str| Err(EmbeddingError::InvalidConfig(msg.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.window < 1 {
            return bad("window must be at least 1");
        }
        if self.negatives < 1 {
            return bad("negatives must be at least 1");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0 && self.lr_end <= self.lr_start) {
            return bad("learning rate must decay from a positive start to a non-negative end");
        }
        Ok(())
    }
}

/// Loss and gradients of one skip-gram negative-sampling term
/// `-ln σ(u_o·v) - Σ_k ln σ(-u_k·v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgnsGradient {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Writes the gradients into the provided buffers and returns the loss.
fn sgns_gradient_into(
    center: &[f64],
    context: &[f64],
    negatives: &[&[f64]],
    d_center: &mut [f64],
    d_context: &mut [f64],
    d_negatives: &mut [Vec<f64>],
) -> f64 {
    let pos = dot(context, center);
    let mut loss = -log_sigmoid(pos);
    let g_pos = sigmoid(pos) - 1.0;
    for i in 0..center.len() {
        d_center[i] = g_pos * context[i];
        d_context[i] = g_pos * center[i];
    }
    for (neg, d_neg) in negatives.iter().zip(d_negatives.iter_mut()) {
        let score = dot(neg, center);
        loss -= log_sigmoid(-score);
        let g_neg = sigmoid(score);
        for i in 0..center.len() {
            d_center[i] += g_neg * neg[i];
            d_neg[i] = g_neg * center[i];
        }
    }
    loss
}

pub fn sgns_gradient(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> SgnsGradient {
    let dim = center.len();
    let mut g = SgnsGradient {
        loss: 0.0,
        center: vec![0.0; dim],
        context: vec![0.0; dim],
        negatives: vec![vec![0.0; dim]; negatives.len()],
    };
    g.loss = sgns_gradient_into(
        center,
        context,
        negatives,
        &mut g.center,
        &mut g.context,
        &mut g.negatives,
    );
    g
}

/// Loss of one term, for finite-difference checks.
pub fn sgns_loss(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -log_sigmoid(dot(context, center));
    for neg in negatives {
        loss -= log_sigmoid(-dot(neg, center));
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramModel {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    input: Vec<f64>,
    output: Vec<f64>,
    dim: usize,
    config: EmbedTrainConfig,
    epoch_losses: Vec<f64>,
}

impl SkipGramModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.index.get(word).map(|&i| self.counts[i])
    }

    pub fn config(&self) -> &EmbedTrainConfig {
        &self.config
    }

    /// Mean negative-sampling loss per training pair, one value per epoch.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn row(&self, idx: usize) -> &[f64] {
        &self.input[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn input_vector(&self, word: &str) -> Option<EmbeddingVector> {
        self.index
            .get(word)
            .map(|&i| EmbeddingVector::new(self.row(i).to_vec()))
    }

    pub fn output_vector(&self, word: &str) -> Option<EmbeddingVector> {
        self.index.get(word).map(|&i| {
            EmbeddingVector::new(self.output[i * self.dim..(i + 1) * self.dim].to_vec())
        })
    }

    /// The `k` vocabulary words closest to `word` by cosine, the word itself
    /// included. Ties go to the more frequent word.
    pub fn nearest(&self, word: &str, k: usize) -> Vec<(String, f64)> {
        let Some(query) = self.input_vector(word) else {
            return Vec::new();
        };
        let mut scored: Vec<(usize, f64)> = (0..self.words.len())
            .map(|i| {
                let v = EmbeddingVector::new(self.row(i).to_vec());
                (i, cosine_unchecked(&query, &v))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.words[i].clone(), s))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.input.iter().chain(&self.output).all(|x| x.is_finite())
    }

    pub fn embed_words<S: AsRef<str>>(&self, words: &[S]) -> EmbeddingVector {
        let mut sum = vec![0.0; self.dim];
        let mut n = 0usize;
        for w in words {
            if let Some(&i) = self.index.get(w.as_ref()) {
                for (s, x) in sum.iter_mut().zip(self.row(i)) {
                    *s += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return EmbeddingVector::zeros(self.dim);
        }
        EmbeddingVector::new(sum.into_iter().map(|s| s / n as f64).collect())
    }
}

/// Mean of the in-vocabulary word vectors; zero vector when none is known.
pub fn embed_text(text: &str, model: &SkipGramModel) -> EmbeddingVector {
    model.embed_words(&words(text))
}

impl TextEmbedder for SkipGramModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> EmbeddingVector {
        embed_text(text, self)
    }

    fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.input.len() * 8);
        for w in &self.words {
            bytes.extend_from_slice(w.as_bytes());
            bytes.push(0);
        }
        for x in &self.input {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        format!("skipgram-v1:{}:{}:{:016x}", self.dim, self.words.len(), fnv1a(&bytes))
    }
}

impl TokenEmbedder for SkipGramModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_token(&self, token: &str) -> EmbeddingVector {
        self.input_vector(&token.to_lowercase())
            .unwrap_or_else(|| EmbeddingVector::zeros(self.dim))
    }
}

/// Trains a skip-gram model with negative sampling. Single-threaded and
/// deterministic for a given seed.
pub fn train_skipgram<S: AsRef<str>>(
    sentences: &[Vec<S>],
    config: &EmbedTrainConfig,
) -> Result<SkipGramModel, EmbeddingError> {
    config.validate()?;
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(EmbeddingError::EmptyCorpus);
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for w in s {
            *freq.entry(w.as_ref()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, u64)> = freq
        .into_iter()
        .filter(|&(_, c)| c >= config.min_count)
        .collect();
    if vocab.len() < 2 {
        return Err(EmbeddingError::VocabularyTooSmall(vocab.len()));
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let words: Vec<String> = vocab.iter().map(|(w, _)| w.to_string()).collect();
    let counts: Vec<u64> = vocab.iter().map(|(_, c)| *c).collect();
    let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();

    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|w| index.get(w.as_ref()).copied()).collect())
        .collect();
    let total_tokens: usize = encoded.iter().map(Vec::len).sum();

    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..words.len() * dim)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    let mut output = vec![0.0; words.len() * dim];

    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| EmbeddingError::InvalidConfig(e.to_string()))?;

    let total_steps = (config.epochs * total_tokens).max(1) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    let mut d_center = vec![0.0; dim];
    let mut d_context = vec![0.0; dim];
    let mut d_negatives = vec![vec![0.0; dim]; config.negatives];
    let mut negative_ids = Vec::with_capacity(config.negatives);

    for _ in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for sentence in &encoded {
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = config.lr_start - (config.lr_start - config.lr_end) * (step as f64 / total_steps);
                step += 1;
                let reach = config.window - rng.random_range(0..config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sentence.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = sentence[ctx_pos];
                    negative_ids.clear();
                    while negative_ids.len() < config.negatives {
                        let n = noise.sample(&mut rng);
                        if n != context {
                            negative_ids.push(n);
                        }
                    }
                    let loss = {
                        let c_row = &input[center * dim..(center + 1) * dim];
                        let o_row = &output[context * dim..(context + 1) * dim];
                        let neg_rows: Vec<&[f64]> = negative_ids
                            .iter()
                            .map(|&n| &output[n * dim..(n + 1) * dim])
                            .collect();
                        sgns_gradient_into(
                            c_row,
                            o_row,
                            &neg_rows,
                            &mut d_center,
                            &mut d_context,
                            &mut d_negatives,
                        )
                    };
                    loss_sum += loss;
                    pairs += 1;
                    for (x, g) in output[context * dim..(context + 1) * dim].iter_mut().zip(&d_context) {
                        *x -= lr * g;
                    }
                    for (&n, g_row) in negative_ids.iter().zip(&d_negatives) {
                        for (x, g) in output[n * dim..(n + 1) * dim].iter_mut().zip(g_row) {
                            *x -= lr * g;
                        }
                    }
                    for (x, g) in input[center * dim..(center + 1) * dim].iter_mut().zip(&d_center) {
                        *x -= lr * g;
                    }
                }
            }
        }
        epoch_losses.push(if pairs == 0 { 0.0 } else { loss_sum / pairs as f64 });
    }

    Ok(SkipGramModel {
        words,
        counts,
        index,
        input,
        output,
        dim,
        config: config.clone(),
        epoch_losses,
    })
}

/// Fraction of `(word, related)` pairs whose related word is among the `k`
/// nearest neighbours of `word`. Pairs with an out-of-vocabulary word count
/// as misses.
pub fn eval_embedding_quality(
    model: &SkipGramModel,
    heldout_pairs: &[(String, String)],
    k: usize,
) -> Result<f64, EmbeddingError> {
    if heldout_pairs.is_empty() {
        return Err(EmbeddingError::EmptyHeldout);
    }
    let hits = heldout_pairs
        .iter()
        .filter(|(w, r)| model.contains(r) && model.nearest(w, k).iter().any(|(n, _)| n == r))
        .count();
    Ok(hits as f64 / heldout_pairs.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    dim: usize,
    vocab_size: usize,
    config: EmbedTrainConfig,
    epoch_losses: Vec<f64>,
}

const MODEL_FORMAT: &str = "rcakb-skipgram";

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl SkipGramModel {
    /// Text form: a JSON header line, then one row per word:
    /// `word<TAB>count<TAB>input values<TAB>output values`, values separated
    /// by single spaces.
    pub fn to_text(&self) -> String {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: 1,
            dim: self.dim,
            vocab_size: self.words.len(),
            config: self.config.clone(),
            epoch_losses: self.epoch_losses.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                w,
                self.counts[i],
                join_floats(self.row(i)),
                join_floats(&self.output[i * self.dim..(i + 1) * self.dim])
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text.lines();
        let header: ModelHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| EmbeddingError::Format(format!("bad header: {e}")))?;
        if header.format != MODEL_FORMAT || header.version != 1 {
            return Err(EmbeddingError::Format(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let dim = header.dim;
        let mut words = Vec::with_capacity(header.vocab_size);
        let mut counts = Vec::with_capacity(header.vocab_size);
        let mut input = Vec::with_capacity(header.vocab_size * dim);
        let mut output = Vec::with_capacity(header.vocab_size * dim);
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(EmbeddingError::Format(format!("bad row: {line}")));
            }
            let parse = |s: &str| -> Result<Vec<f64>, EmbeddingError> {
                let v = s
                    .split(' ')
                    .map(|x| x.parse::<f64>().map_err(|e| EmbeddingError::Format(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()?;
                if v.len() != dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                Ok(v)
            };
            words.push(fields[0].to_string());
            counts.push(
                fields[1]
                    .parse()
                    .map_err(|_| EmbeddingError::Format(format!("bad count in row: {line}")))?,
            );
            input.extend(parse(fields[2])?);
            output.extend(parse(fields[3])?);
        }
        if words.len() != header.vocab_size {
            return Err(EmbeddingError::Format(format!(
                "header announces {} words, found {}",
                header.vocab_size,
                words.len()
            )));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            words,
            counts,
            index,
            input,
            output,
            dim,
            config: header.config,
            epoch_losses: header.epoch_losses,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Loads a model and rejects it unless its dimension is `dim`.
    pub fn load_with_dim(path: impl AsRef<Path>, dim: usize) -> Result<Self, EmbeddingError> {
        let model = Self::load(path)?;
        if model.dim != dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: dim,
                got: model.dim,
            });
        }
        Ok(model)
    }
}
