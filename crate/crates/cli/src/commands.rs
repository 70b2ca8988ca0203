use std::fs;
use std::path::Path;

use rcakb_core::corpus::{load_corpus, serialize_ticket, split_corpus, to_example_pairs, CorpusError, Ticket};
use rcakb_core::embedding::{eval_embedding_quality, train_skipgram, words, EmbedTrainConfig};
use rcakb_core::evaluation::{evaluate_pairs, render_table, Evaluator, SynonymLexicon};
use rcakb_core::pipeline::{build_kb, run_prompt_ablation, Components, Mode, RunManifest};
use rcakb_core::prompt::{ReferenceTokenizer, TemplateSet};
use rcakb_core::retrieval::KnowledgeIndex;
use rcakb_core::rules::{compress_rules, render_compressed, RuleError, RuleStore, Verdict};
use serde::Deserialize;

use crate::cli::{
    AblateArgs, BackendArgs, BuildArgs, Cli, Command, CompressArgs, EmbedArgs, EvaluateArgs, IngestArgs, QueryArgs,
    ReviewAction, ReviewArgs, ServeArgs, SplitArgs, TrainArgs,
};
use crate::config::{EmbedderSpec, FileConfig, LoadedEmbedder, Settings};
use crate::error::CliError;
use crate::kb::{self, KnowledgeBase, QueryRequest};
use crate::service;

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(cli, a),
        Command::TrainEmbeddings(a) => train(cli, a),
        Command::BuildKb(a) => build(cli, a),
        Command::Compress(a) => compress(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Review(a) => review(a),
        Command::Query(a) => query(cli, a),
        Command::Serve(a) => serve(a),
    }
}

fn settings(
    cli: &Cli,
    backend: Option<&BackendArgs>,
    embed: Option<&EmbedArgs>,
    k: Option<usize>,
) -> Result<Settings, CliError> {
    let file = cli.config.as_deref().map(FileConfig::load).transpose()?;
    let flags = cli.overrides(backend, embed, k)?;
    Settings::resolve(file, &|key| std::env::var(key).ok(), &flags)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

fn tickets_jsonl(tickets: &[Ticket]) -> Vec<u8> {
    let mut out = String::new();
    for t in tickets {
        out.push_str(&serialize_ticket(t));
        out.push('\n');
    }
    out.into_bytes()
}

fn load_tickets(path: &Path) -> Result<Vec<Ticket>, CliError> {
    let tickets = load_corpus(path)?;
    if tickets.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    Ok(tickets)
}

fn ingest(a: &IngestArgs) -> Result<(), CliError> {
    let tickets = load_tickets(&a.input)?;
    write(&a.out, tickets_jsonl(&tickets))?;
    println!("ingested {} tickets", tickets.len());
    if let Some(path) = &a.pairs {
        let templates = TemplateSet::v1();
        let mut out = String::new();
        let mut skipped = 0;
        for t in &tickets {
            let (pairs, skips) = to_example_pairs(t, &templates);
            skipped += skips.len();
            for p in pairs {
                out.push_str(&serde_json::to_string(&p).expect("pair serializes"));
                out.push('\n');
            }
        }
        write(path, out)?;
        println!("wrote example pairs ({skipped} skipped for missing fields)");
    }
    Ok(())
}

fn split(cli: &Cli, a: &SplitArgs) -> Result<(), CliError> {
    let s = settings(cli, None, None, None)?;
    let tickets = load_tickets(&a.input)?;
    let split = split_corpus(&tickets, a.ratio, s.pipeline.seed)?;
    let manifest = serde_json::to_string_pretty(&split.manifest()).expect("manifest serializes");
    kb::write_dir_atomically(
        &a.out_dir,
        &[
            ("train.jsonl", tickets_jsonl(&split.train)),
            ("eval.jsonl", tickets_jsonl(&split.eval)),
            ("split.json", manifest.into_bytes()),
        ],
    )?;
    println!("train {} / eval {}", split.train.len(), split.eval.len());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let s = settings(cli, None, None, None)?;
    let tickets = load_tickets(&a.input)?;
    let sentences: Vec<Vec<String>> = tickets
        .iter()
        .flat_map(|t| [&t.title, &t.anomaly_text, &t.root_cause_text, &t.solution_text])
        .map(|text| words(text))
        .filter(|w| !w.is_empty())
        .collect();
    let config = EmbedTrainConfig {
        dim: a.dim,
        window: a.window,
        negatives: a.negatives,
        epochs: a.epochs,
        min_count: a.min_count,
        seed: s.pipeline.seed,
        ..EmbedTrainConfig::default()
    };
    let model = train_skipgram(&sentences, &config)?;
    model.save(&a.out)?;
    println!(
        "vocabulary {} words, final epoch loss {:.4}",
        model.vocab_size(),
        model.epoch_losses().last().copied().unwrap_or(f64::NAN)
    );
    if let Some(path) = &a.heldout {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let pairs: Vec<(String, String)> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let (x, y) = l.split_once('\t').ok_or_else(|| CliError::Data {
                    path: path.display().to_string(),
                    message: format!("expected two tab-separated words: `{l}`"),
                })?;
                Ok((x.trim().to_lowercase(), y.trim().to_lowercase()))
            })
            .collect::<Result<_, CliError>>()?;
        let acc = eval_embedding_quality(&model, &pairs, a.top_k)?;
        println!("held-out top-{} accuracy {acc:.4}", a.top_k);
    }
    Ok(())
}

fn build(cli: &Cli, a: &BuildArgs) -> Result<(), CliError> {
    let mut s = settings(cli, Some(&a.backend), Some(&a.embed), a.k)?;
    let tickets = load_tickets(&a.input)?;
    let gateway = s.gateway()?;
    let loaded = s.embedder.load(Path::new("."))?;
    let embedder = loaded.text();
    let index = KnowledgeIndex::new(embedder.dim(), embedder.fingerprint()).into_shared();
    let templates = TemplateSet::v1();
    let components = Components {
        gateway: &gateway,
        embedder: embedder.as_ref(),
        index: &index,
        tokenizer: &ReferenceTokenizer,
        templates: &templates,
    };
    let (rules, traces) = build_kb(&tickets, &s.pipeline, components)?;
    if traces.iter().all(|t| t.failed()) {
        let first = traces.first().and_then(|t| t.errors.first()).cloned().unwrap_or_default();
        return Err(CliError::AllTicketsFailed(first));
    }
    let manifest = RunManifest::new(&s.pipeline, components, &rules, &traces);
    let store = RuleStore::from_rules(rules)?;

    let (spec, model_bytes) = match (&s.embedder, &loaded) {
        (EmbedderSpec::Skipgram { path }, LoadedEmbedder::Skipgram(_)) => {
            let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
            (EmbedderSpec::Skipgram { path: kb::MODEL_FILE.into() }, Some(bytes))
        }
        (spec, _) => (spec.clone(), None),
    };
    let index_text = index.read().expect("index lock poisoned").to_text();
    let mut files = vec![
        (kb::RULES_FILE, store.to_jsonl().into_bytes()),
        (kb::INDEX_FILE, index_text.into_bytes()),
        (kb::MANIFEST_FILE, manifest.to_json().into_bytes()),
        (kb::EMBEDDER_FILE, serde_json::to_vec_pretty(&spec).expect("spec serializes")),
    ];
    if let Some(bytes) = model_bytes {
        files.push((kb::MODEL_FILE, bytes));
    }
    kb::write_dir_atomically(&a.out, &files)?;
    for t in traces.iter().filter(|t| t.failed()) {
        eprintln!("warning: ticket {} failed: {}", t.ticket_id, t.errors.join("; "));
    }
    println!(
        "{} tickets ({} failed), {} rules, {} index entries -> {}",
        traces.len(),
        manifest.failed_tickets.len(),
        store.len(),
        index.read().expect("index lock poisoned").len(),
        a.out.display()
    );
    Ok(())
}

fn compress(cli: &Cli, a: &CompressArgs) -> Result<(), CliError> {
    let s = settings(cli, None, None, None)?;
    let threshold = s.pipeline.threshold;
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(RuleError::InvalidThreshold(threshold).into());
    }
    let kb = KnowledgeBase::open(&a.kb)?;
    let clusters = compress_rules(kb.store.rules(), kb.embedder.as_ref(), threshold)?;
    let text = render_compressed(&clusters);
    match &a.out {
        Some(path) => {
            write(path, &text)?;
            println!("{} rules -> {} clusters at threshold {threshold}", kb.store.len(), clusters.len());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn evaluator(s: &Settings, extra_lexicon: Option<&Path>) -> Result<Evaluator, CliError> {
    let loaded = s.embedder.load(Path::new("."))?;
    let text = loaded.text();
    let mut lexicon = SynonymLexicon::telecom();
    if let Some(path) = extra_lexicon.or(s.lexicon.as_deref()) {
        for (x, y) in SynonymLexicon::load(path)?.pairs() {
            lexicon.add_pair(&x, &y);
        }
    }
    Ok(Evaluator::new(loaded.token(), text.fingerprint(), text, lexicon))
}

#[derive(Deserialize)]
struct PairRecord {
    generated: String,
    reference: String,
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<(), CliError> {
    let s = settings(cli, None, Some(&a.embed), None)?;
    let ev = evaluator(&s, a.lexicon.as_deref())?;
    let text = fs::read_to_string(&a.pairs).map_err(|e| CliError::io(a.pairs.display(), e))?;
    let pairs: Vec<(String, String)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<PairRecord>(l)
                .map(|p| (p.generated, p.reference))
                .map_err(|e| CliError::Data {
                    path: a.pairs.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })
        })
        .collect::<Result<_, _>>()?;
    let report = evaluate_pairs(&pairs, &ev)?;
    print!("{}", render_table(&[("pairs", &report)]));
    if let Some(path) = &a.out {
        write(path, report.to_json())?;
    }
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<(), CliError> {
    let mut s = settings(cli, Some(&a.backend), Some(&a.embed), None)?;
    if cli.mode.is_none() {
        s.pipeline.mode = Mode::Plain;
    }
    let tickets = load_tickets(&a.input)?;
    let gateway = s.gateway()?;
    let ev = evaluator(&s, a.lexicon.as_deref())?;
    let (with, without) = run_prompt_ablation(
        &tickets,
        &s.pipeline,
        &gateway,
        &ev,
        &TemplateSet::v1(),
        &ReferenceTokenizer,
    )?;
    print!("{}", render_table(&[("with prompts", &with), ("without prompts", &without)]));
    if let Some(path) = &a.out {
        let json = serde_json::json!({ "with_prompts": with, "without_prompts": without });
        write(path, serde_json::to_string_pretty(&json).expect("report serializes"))?;
    }
    Ok(())
}

fn review(a: &ReviewArgs) -> Result<(), CliError> {
    let mut kb = KnowledgeBase::open(&a.kb)?;
    let (v, args) = match &a.action {
        ReviewAction::List => {
            for r in kb.store.pending() {
                println!("{}\t{}", r.rule_id, r.to_line());
            }
            return Ok(());
        }
        ReviewAction::Approve(args) => (Verdict::Approve, args),
        ReviewAction::Reject(args) => (Verdict::Reject, args),
    };
    let rule = kb.review(&args.rule_id, v, &args.reviewer, &args.note)?;
    println!("{} {}", rule.rule_id, rule.status);
    Ok(())
}

fn query(cli: &Cli, a: &QueryArgs) -> Result<(), CliError> {
    let s = settings(cli, None, None, a.k)?;
    let kb = KnowledgeBase::open(&a.kb)?;
    let request = QueryRequest {
        anomaly_text: a.text.clone(),
        threshold: s.pipeline.threshold,
        k: s.pipeline.k,
    };
    for hit in kb.query(&request)? {
        println!("{}", serde_json::to_string(&hit).expect("hit serializes"));
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let kb = KnowledgeBase::open(&a.kb)?;
    let handle = service::spawn(kb, &a.addr)?;
    println!("listening on http://{}", handle.addr);
    handle.wait().map_err(|e| CliError::io(&a.addr, e))
}
