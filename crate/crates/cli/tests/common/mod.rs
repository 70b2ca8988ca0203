#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use rcakb_core::corpus::{write_corpus, Ticket};
use rcakb_core::embedding::HashEmbedder;
use rcakb_core::gateway::{write_fixture, Gateway};
use rcakb_core::pipeline::{build_kb, Components, Mode, PipelineConfig};
use rcakb_core::prompt::{ReferenceTokenizer, TemplateSet};
use rcakb_core::retrieval::KnowledgeIndex;
use rcakb_core::synthetic::{synthetic_tickets, Recorder, TicketScribe};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rcakb"))
}

pub fn rcakb(args: &[&str]) -> Output {
    bin().args(args).env_remove("RCAKB_MODE").env_remove("RCAKB_THRESHOLD").output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write_tickets(dir: &Path, n: usize, seed: u64) -> (PathBuf, Vec<Ticket>) {
    let tickets = synthetic_tickets(n, seed);
    let path = dir.join("tickets.jsonl");
    write_corpus(&path, &tickets).unwrap();
    (path, tickets)
}

/// Runs the pipeline in-process against a ticket-aware stand-in model and
/// saves every prompt/response pair it saw as a scripted fixture.
pub fn record_fixture(tickets: &[Ticket], mode: Mode, path: &Path) {
    let templates = TemplateSet::v1();
    let recorder = Arc::new(Recorder::new(Arc::new(TicketScribe::new(tickets, &templates))));
    let gateway = Gateway::single("base", recorder.clone());
    let embedder = HashEmbedder::new(100);
    let index = KnowledgeIndex::for_embedder(&embedder).into_shared();
    let components = Components {
        gateway: &gateway,
        embedder: &embedder,
        index: &index,
        tokenizer: &ReferenceTokenizer,
        templates: &templates,
    };
    let config = PipelineConfig {
        mode,
        ..PipelineConfig::default()
    };
    let (_, traces) = build_kb(tickets, &config, components).unwrap();
    assert!(traces.iter().all(|t| !t.failed()));
    write_fixture(path, &recorder.to_scripted()).unwrap();
}

/// Builds a knowledge base through the binary with a recorded fixture, one
/// rule per ticket.
pub fn build_scripted_kb(dir: &Path, n: usize, seed: u64) -> (PathBuf, Vec<Ticket>) {
    let (tickets_path, tickets) = write_tickets(dir, n, seed);
    let fixture = dir.join("fixture.json");
    record_fixture(&tickets, Mode::Rag, &fixture);
    let kb = dir.join("kb");
    let out = rcakb(&[
        "build-kb", "--mode", "rag", "--backend", "scripted", "--fixture", s(&fixture), "--in", s(&tickets_path),
        "--out", s(&kb),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (kb, tickets)
}
