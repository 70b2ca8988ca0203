//! End-to-end knowledge base construction and the prompt ablation run.
//!
//! Per ticket: optional retrieval, the anomaly and root-cause prompts (each
//! chunked and, when split, consolidated), one combine call, rule parsing and
//! indexing of the ticket's anomaly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{anomaly_reference, rootcause_reference, Ticket};
use crate::embedding::TextEmbedder;
use crate::evaluation::{evaluate_pairs, EvalError, EvalReport, Evaluator};
use crate::gateway::{Gateway, GatewayError, GenerationRequest, DEFAULT_MAX_NEW_TOKENS};
use crate::prompt::{
    self, split_chunks_with, PromptError, TemplateId, TemplateSet, Tokenizer, DEFAULT_MAX_TOKEN,
};
use crate::retrieval::{KbEntry, RetrievalError, RetrievalResult, SharedIndex, DEFAULT_K, DEFAULT_THRESHOLD};
use crate::rules::{parse_rules, RcaRule};
use crate::status::ReviewStatus;
use crate::util::write_atomically;

/// Instruction for the extra call that merges per-chunk analyses.
pub const CONSOLIDATE_INSTRUCTION: &str =
    "Consolidate the following partial analyses of one ticket into a single report:";
pub const REFERENCES_HEADER: &str = "References from similar past incidents:";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no backend registered under `{0}`")]
    NoBackend(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("no tickets to process")]
    EmptyTicketSet,
    #[error("no chunks to consolidate")]
    EmptyChunkSet,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Index(#[from] RetrievalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    Rag,
    Hybrid,
}

impl Mode {
    pub fn retrieves(self) -> bool {
        !matches!(self, Mode::Plain)
    }
}

impl std::str::FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Mode::Plain),
            "rag" => Ok(Mode::Rag),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(PipelineError::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Rag => "rag",
            Mode::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub max_token: usize,
    pub threshold: f64,
    pub k: usize,
    pub base_backend: String,
    pub dllm_backend: Option<String>,
    pub deterministic: bool,
    pub parallelism: usize,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rag,
            max_token: DEFAULT_MAX_TOKEN,
            threshold: DEFAULT_THRESHOLD,
            k: DEFAULT_K,
            base_backend: "base".into(),
            dllm_backend: None,
            deterministic: true,
            parallelism: 1,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, templates: &TemplateSet, tokenizer: &dyn Tokenizer) -> Result<(), PipelineError> {
        if self.mode == Mode::Hybrid && self.dllm_backend.is_none() {
            return Err(PipelineError::InvalidConfig("hybrid mode needs a D-LLM backend".into()));
        }
        let longest = templates.longest_template_tokens(tokenizer);
        if self.max_token <= longest {
            return Err(PipelineError::InvalidConfig(format!(
                "max_token {} must exceed the longest template ({longest} tokens)",
                self.max_token
            )));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::InvalidConfig(format!(
                "threshold {} outside [-1, 1]",
                self.threshold
            )));
        }
        if self.k == 0 {
            return Err(PipelineError::InvalidConfig("k must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::InvalidConfig("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    /// Backend used for generation in this mode.
    pub fn generation_backend(&self) -> &str {
        match (self.mode, &self.dllm_backend) {
            (Mode::Hybrid, Some(tag)) => tag,
            _ => &self.base_backend,
        }
    }

    fn request(&self, prompt_text: String, ticket_id: &str) -> GenerationRequest {
        let mut r = GenerationRequest::new(prompt_text, self.generation_backend()).with_trace_tag(ticket_id);
        r.max_new_tokens = self.max_new_tokens;
        r.temperature = self.temperature;
        r
    }
}

/// Shared services a run needs.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn TextEmbedder,
    pub index: &'a SharedIndex,
    pub tokenizer: &'a dyn Tokenizer,
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkCounts {
    pub anomaly_analysis: usize,
    pub rootcause_analysis: usize,
}

impl ChunkCounts {
    /// Gateway calls the run should make for a ticket with these counts.
    pub fn expected_calls(&self) -> usize {
        let c = |n: usize| n + usize::from(n > 1);
        c(self.anomaly_analysis) + c(self.rootcause_analysis) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketRunTrace {
    pub ticket_id: String,
    pub mode: Mode,
    pub retrieved: Vec<RetrievedRef>,
    /// Retrieval ran but nothing cleared the threshold.
    pub context_fallback: bool,
    pub chunk_counts: ChunkCounts,
    /// Per-ticket call ids, `<ticket>#<n>` in issuance order.
    pub call_ids: Vec<String>,
    pub rule_ids: Vec<String>,
    pub skipped_lines: usize,
    pub errors: Vec<String>,
}

impl TicketRunTrace {
    fn new(ticket_id: &str, mode: Mode) -> Self {
        Self {
            ticket_id: ticket_id.to_string(),
            mode,
            retrieved: Vec::new(),
            context_fallback: false,
            chunk_counts: ChunkCounts {
                anomaly_analysis: 0,
                rootcause_analysis: 0,
            },
            call_ids: Vec::new(),
            rule_ids: Vec::new(),
            skipped_lines: 0,
            errors: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// Issues generation calls for one ticket and numbers them.
struct TicketCaller<'a> {
    gateway: &'a Gateway,
    config: &'a PipelineConfig,
    ticket_id: &'a str,
    call_ids: Vec<String>,
}

impl TicketCaller<'_> {
    fn call(&mut self, prompt_text: String) -> Result<String, GatewayError> {
        self.call_ids.push(format!("{}#{}", self.ticket_id, self.call_ids.len()));
        let request = self.config.request(prompt_text, self.ticket_id);
        self.gateway.generate(&request).map(|r| r.text)
    }
}

/// Prompt text of the report call that merges per-chunk analyses.
pub fn consolidation_prompt(analyses: &[String]) -> String {
    let mut out = String::from(CONSOLIDATE_INSTRUCTION);
    for (i, a) in analyses.iter().enumerate() {
        let _ = write!(out, "\nPart {}: {}", i + 1, a);
    }
    out
}

fn consolidate_with(chunks: &[String], caller: &mut TicketCaller<'_>) -> Result<String, PipelineError> {
    match chunks {
        [] => Err(PipelineError::EmptyChunkSet),
        [only] => Ok(only.clone()),
        many => {
            let mut analyses = Vec::with_capacity(many.len());
            for chunk in many {
                analyses.push(caller.call(chunk.clone())?);
            }
            Ok(caller.call(consolidation_prompt(&analyses))?)
        }
    }
}

/// Merges a ticket's chunks into one result.
///
/// A single chunk is returned as is without any call. With more than one,
/// each chunk is analysed by its own call and one further call merges the
/// analyses.
pub fn consolidate_chunks(
    chunks: &[String],
    gateway: &Gateway,
    config: &PipelineConfig,
    ticket_id: &str,
) -> Result<String, PipelineError> {
    let mut caller = TicketCaller {
        gateway,
        config,
        ticket_id,
        call_ids: Vec::new(),
    };
    consolidate_with(chunks, &mut caller)
}

/// Renders retrieved entries as the references preamble.
pub fn references_preamble(results: &[RetrievalResult]) -> String {
    let mut out = String::from(REFERENCES_HEADER);
    for (i, r) in results.iter().enumerate() {
        let _ = write!(
            out,
            "\n[{}] anomaly: {}; root cause: {}; solution: {}",
            i + 1,
            r.entry.anomaly_text,
            r.entry.root_cause_text,
            r.entry.solution_text
        );
    }
    out.push('\n');
    out
}

/// Chunk prompt texts for one of the two analysis templates.
///
/// For the root-cause template a non-empty `references` preamble is placed in
/// front of the data, so it is chunked together with it.
pub fn stage_prompts(
    ticket: &Ticket,
    template: TemplateId,
    references: Option<&str>,
    max_token: usize,
    templates: &TemplateSet,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<String>, PromptError> {
    let products = ticket.products_joined();
    let slots = match template {
        TemplateId::AnomalyAnalysis => prompt::slots([
            (prompt::SLOT_PRODUCTS, products.as_str()),
            (prompt::SLOT_ANOMALY, ticket.anomaly_text.as_str()),
        ]),
        TemplateId::RootCauseSolution => prompt::slots([
            (prompt::SLOT_ROOT_CAUSE, ticket.root_cause_text.as_str()),
            (prompt::SLOT_SOLUTION, ticket.solution_text.as_str()),
        ]),
        TemplateId::Combine => return Err(PromptError::UnknownTemplate(template.number())),
    };
    let (instruction, mut data) = templates.get(template).frame(&slots)?;
    if template == TemplateId::RootCauseSolution {
        if let Some(refs) = references {
            data = format!("{refs}{data}");
        }
    }
    Ok(split_chunks_with(tokenizer, &data, &instruction, max_token)?
        .iter()
        .map(|c| c.render(tokenizer))
        .collect())
}

/// The combine prompt over two consolidated results.
pub fn combine_prompt(anomaly_result: &str, rootcause_result: &str, templates: &TemplateSet) -> Result<String, PromptError> {
    templates.get(TemplateId::Combine).render(&prompt::slots([
        (prompt::SLOT_ANOMALY_ANALYSIS, anomaly_result),
        (prompt::SLOT_ROOTCAUSE_ANALYSIS, rootcause_result),
    ]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TicketOutcome {
    pub rules: Vec<RcaRule>,
    pub trace: TicketRunTrace,
}

fn process_ticket(ticket: &Ticket, config: &PipelineConfig, c: Components<'_>) -> TicketOutcome {
    let mut trace = TicketRunTrace::new(&ticket.id, config.mode);
    let mut caller = TicketCaller {
        gateway: c.gateway,
        config,
        ticket_id: &ticket.id,
        call_ids: Vec::new(),
    };
    let result = run_ticket(ticket, config, c, &mut trace, &mut caller);
    trace.call_ids = caller.call_ids;
    let rules = match result {
        Ok(rules) => rules,
        Err(e) => {
            tracing::warn!(ticket = %ticket.id, error = %e, "ticket failed");
            trace.errors.push(e.to_string());
            Vec::new()
        }
    };
    trace.rule_ids = rules.iter().map(|r| r.rule_id.clone()).collect();
    TicketOutcome { rules, trace }
}

fn run_ticket(
    ticket: &Ticket,
    config: &PipelineConfig,
    c: Components<'_>,
    trace: &mut TicketRunTrace,
    caller: &mut TicketCaller<'_>,
) -> Result<Vec<RcaRule>, PipelineError> {
    let anomaly_embedding = c.embedder.embed_text(&ticket.anomaly_text);
    let mut references = None;
    if config.mode.retrieves() {
        let hits = c
            .index
            .read()
            .expect("index lock poisoned")
            .retrieve_vector(&anomaly_embedding, config.threshold, config.k);
        trace.retrieved = hits
            .iter()
            .map(|h| RetrievedRef {
                entry_id: h.entry.entry_id.clone(),
                score: h.score,
            })
            .collect();
        if hits.is_empty() {
            trace.context_fallback = true;
            tracing::debug!(ticket = %ticket.id, "no context above threshold, using plain prompt");
        } else {
            references = Some(references_preamble(&hits));
        }
    }

    let mut results = Vec::with_capacity(2);
    for template in [TemplateId::AnomalyAnalysis, TemplateId::RootCauseSolution] {
        let chunks = stage_prompts(
            ticket,
            template,
            references.as_deref(),
            config.max_token,
            c.templates,
            c.tokenizer,
        )?;
        match template {
            TemplateId::AnomalyAnalysis => trace.chunk_counts.anomaly_analysis = chunks.len(),
            _ => trace.chunk_counts.rootcause_analysis = chunks.len(),
        }
        let result = if chunks.len() == 1 {
            caller.call(chunks[0].clone())?
        } else {
            consolidate_with(&chunks, caller)?
        };
        results.push(result);
    }

    let combined = caller.call(combine_prompt(&results[0], &results[1], c.templates)?)?;
    let (rules, report) = parse_rules(&combined, &ticket.id);
    trace.skipped_lines = report.skipped.len();

    let entry = KbEntry {
        entry_id: ticket.id.clone(),
        anomaly_text: ticket.anomaly_text.clone(),
        root_cause_text: ticket.root_cause_text.clone(),
        solution_text: ticket.solution_text.clone(),
        products: ticket.products.clone(),
        source_ticket_id: ticket.id.clone(),
        embedding: anomaly_embedding,
        status: ReviewStatus::Draft,
    };
    c.index
        .write()
        .expect("index lock poisoned")
        .add(entry)?;
    Ok(rules)
}

/// Builds rules and index entries for every ticket.
///
/// Outputs are in input order. In deterministic mode tickets run one after
/// another, so each ticket sees the entries of all earlier ones.
pub fn build_kb(
    tickets: &[Ticket],
    config: &PipelineConfig,
    components: Components<'_>,
) -> Result<(Vec<RcaRule>, Vec<TicketRunTrace>), PipelineError> {
    config.validate(components.templates, components.tokenizer)?;
    let backend = config.generation_backend();
    if !components.gateway.has_backend(backend) {
        return Err(PipelineError::NoBackend(backend.to_string()));
    }
    let outcomes: Vec<TicketOutcome> = if config.deterministic || config.parallelism == 1 {
        tickets.iter().map(|t| process_ticket(t, config, components)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        pool.install(|| tickets.par_iter().map(|t| process_ticket(t, config, components)).collect())
    };
    let mut rules = Vec::new();
    let mut traces = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        rules.extend(o.rules);
        traces.push(o.trace);
    }
    Ok((rules, traces))
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub tokenizer: String,
    pub template_version: u32,
    pub embedder: String,
    pub backends: BTreeMap<String, String>,
    pub ticket_count: usize,
    pub rule_count: usize,
    pub failed_tickets: Vec<String>,
    pub traces: Vec<TicketRunTrace>,
}

impl RunManifest {
    pub fn new(config: &PipelineConfig, components: Components<'_>, rules: &[RcaRule], traces: &[TicketRunTrace]) -> Self {
        Self {
            config: config.clone(),
            tokenizer: components.tokenizer.name().to_string(),
            template_version: components.templates.get(TemplateId::AnomalyAnalysis).version,
            embedder: components.embedder.fingerprint(),
            backends: components.gateway.fingerprints(),
            ticket_count: traces.len(),
            rule_count: rules.len(),
            failed_tickets: traces.iter().filter(|t| t.failed()).map(|t| t.ticket_id.clone()).collect(),
            traces: traces.to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        write_atomically(path.as_ref(), self.to_json().as_bytes())?;
        Ok(())
    }
}

/// Output of one ablation arm for one ticket: the two analysis results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub ticket_id: String,
    pub generated: String,
    pub reference: String,
}

/// Reference the ablation scores against: the ticket's expected analyses.
pub fn ablation_reference(ticket: &Ticket) -> String {
    format!("{}\n{}", anomaly_reference(ticket), rootcause_reference(ticket))
}

fn analysis_arm(
    ticket: &Ticket,
    with_prompts: bool,
    config: &PipelineConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    tokenizer: &dyn Tokenizer,
) -> Result<String, PipelineError> {
    let mut caller = TicketCaller {
        gateway,
        config,
        ticket_id: &ticket.id,
        call_ids: Vec::new(),
    };
    let mut results = Vec::with_capacity(2);
    for template in [TemplateId::AnomalyAnalysis, TemplateId::RootCauseSolution] {
        let chunks = if with_prompts {
            stage_prompts(ticket, template, None, config.max_token, templates, tokenizer)?
        } else {
            split_chunks_with(tokenizer, &ticket.raw_text(), "", config.max_token)?
                .iter()
                .map(|c| c.render(tokenizer))
                .collect()
        };
        let result = if chunks.len() == 1 {
            caller.call(chunks[0].clone())?
        } else {
            consolidate_with(&chunks, &mut caller)?
        };
        results.push(result);
    }
    Ok(results.join("\n"))
}

/// Runs the analysis stages twice per ticket, once with the instruction
/// templates and once with the raw ticket text as the whole prompt, and
/// scores both against the same references.
pub fn run_prompt_ablation(
    tickets: &[Ticket],
    config: &PipelineConfig,
    gateway: &Gateway,
    evaluator: &Evaluator,
    templates: &TemplateSet,
    tokenizer: &dyn Tokenizer,
) -> Result<(EvalReport, EvalReport), PipelineError> {
    let (with, without) = ablation_outputs(tickets, config, gateway, templates, tokenizer)?;
    let pairs = |outs: &[AblationOutput]| -> Vec<(String, String)> {
        outs.iter().map(|o| (o.generated.clone(), o.reference.clone())).collect()
    };
    Ok((
        evaluate_pairs(&pairs(&with), evaluator)?,
        evaluate_pairs(&pairs(&without), evaluator)?,
    ))
}

/// Generated texts of both ablation arms, in ticket order.
pub fn ablation_outputs(
    tickets: &[Ticket],
    config: &PipelineConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    tokenizer: &dyn Tokenizer,
) -> Result<(Vec<AblationOutput>, Vec<AblationOutput>), PipelineError> {
    if tickets.is_empty() {
        return Err(PipelineError::EmptyTicketSet);
    }
    config.validate(templates, tokenizer)?;
    if !gateway.has_backend(config.generation_backend()) {
        return Err(PipelineError::NoBackend(config.generation_backend().to_string()));
    }
    let mut with = Vec::with_capacity(tickets.len());
    let mut without = Vec::with_capacity(tickets.len());
    for t in tickets {
        let reference = ablation_reference(t);
        for (arm, out) in [(true, &mut with), (false, &mut without)] {
            out.push(AblationOutput {
                ticket_id: t.id.clone(),
                generated: analysis_arm(t, arm, config, gateway, templates, tokenizer)?,
                reference: reference.clone(),
            });
        }
    }
    Ok((with, without))
}
