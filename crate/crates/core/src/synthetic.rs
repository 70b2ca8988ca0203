//! Seeded synthetic data: tickets, rule corpora, embedding corpora and a
//! scripted-fixture recorder.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{rule_reference, Ticket};
use crate::gateway::{mock_output, Backend, Completion, GatewayError, GenerationRequest, ScriptedBackend};
use crate::prompt::{TemplateId, TemplateSet};
use crate::rules::RcaRule;
use crate::status::ReviewStatus;

const SYMPTOMS: &[&str] = &[
    "packet loss",
    "high latency",
    "link flapping",
    "CPU overload",
    "memory leak",
    "BGP session drop",
    "alarm storm",
    "throughput degradation",
    "call setup failure",
    "handover failure",
    "clock synchronization loss",
    "fan failure",
    "power supply fault",
    "optical signal degradation",
    "license expiry alarm",
    "VLAN mismatch",
];

const COMPONENTS: &[&str] = &[
    "core router",
    "baseband unit",
    "radio unit",
    "edge switch",
    "packet gateway",
    "mobility management entity",
    "optical transceiver",
    "line card",
    "transport node",
    "timing server",
];

const PRODUCTS: &[&str] = &[
    "Radio Dot",
    "Baseband 6630",
    "Router 6675",
    "MINI-LINK 6352",
    "Packet Core Gateway",
    "Cloud RAN",
    "Transport Node 8000",
    "Site Controller",
];

const EVENTS: &[&str] = &[
    "a scheduled software upgrade",
    "a maintenance window",
    "a configuration push",
    "a power outage at the site",
    "a traffic surge during peak hours",
    "a fiber repair",
    "a node restart",
];

const LOG_DETAILS: &[&str] = &[
    "repeated interface down events",
    "CRC errors on the uplink port",
    "watchdog timeouts in the control plane",
    "retransmission counters increasing",
    "temperature threshold warnings",
    "routing table churn",
    "queue drops on the priority class",
    "authentication rejects from the peer",
    "NTP offset above tolerance",
    "heap usage growing without release",
];

const IMPACTS: &[&str] = &[
    "dropped calls",
    "slow data sessions",
    "intermittent service loss",
    "failed attachments",
    "degraded video quality",
    "no coverage in the cell",
];

const CAUSES: &[&str] = &[
    "a faulty SFP module on the uplink",
    "a misconfigured QoS policy after the upgrade",
    "a software defect in the scheduler process",
    "an expired license key on the node",
    "a duplex mismatch between adjacent ports",
    "overheating caused by a blocked air filter",
    "an incorrect route map blocking prefixes",
    "a memory leak in the alarm handler",
    "a loose fiber connector in the patch panel",
    "an unstable GPS reference for the timing source",
];

const ACTIONS: &[&str] = &[
    "replace the SFP module and clear the interface counters",
    "apply the corrected QoS policy and verify queue statistics",
    "install the vendor patch and restart the affected process",
    "renew the license key and reload the feature set",
    "set both ports to full duplex and monitor the link",
    "clean the air filter and confirm fan speed recovery",
    "update the route map and soft reset the BGP session",
    "upgrade to the fixed release and schedule a node restart",
    "reseat the fiber connector and measure optical power",
    "switch the timing source to the backup reference",
];

const CATEGORIES: &[&str] = &["Hardware", "Software", "Configuration", "Transport", "Performance"];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty pool")
}

/// `n` complete tickets, reproducible from `seed`.
pub fn synthetic_tickets(n: usize, seed: u64) -> Vec<Ticket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let symptom = pick(&mut rng, SYMPTOMS);
            let component = pick(&mut rng, COMPONENTS);
            let cause_idx = rng.random_range(0..CAUSES.len());
            let n_products = rng.random_range(1..=2);
            let mut products: Vec<String> = PRODUCTS
                .choose_multiple(&mut rng, n_products)
                .map(|p| p.to_string())
                .collect();
            products.sort();
            let anomaly = format!(
                "{symptom} observed on {component} {unit} at site S{site} after {event}. \
                 Logs show {d1} and {d2}; customers report {impact} in sector {sector}.",
                unit = rng.random_range(1..40),
                site = rng.random_range(100..999),
                event = pick(&mut rng, EVENTS),
                d1 = pick(&mut rng, LOG_DETAILS),
                d2 = pick(&mut rng, LOG_DETAILS),
                impact = pick(&mut rng, IMPACTS),
                sector = rng.random_range(1..7),
            );
            let root_cause = format!(
                "The {symptom} was traced to {} on the {component}, confirmed by {}.",
                CAUSES[cause_idx],
                pick(&mut rng, LOG_DETAILS),
            );
            let solution = format!(
                "Engineers were advised to {} and to keep the ticket open for {} hours of observation.",
                ACTIONS[cause_idx],
                rng.random_range(2..48),
            );
            Ticket {
                id: format!("SYN{seed:03}-{i:05}"),
                title: format!("{symptom} on {component}"),
                anomaly_text: anomaly,
                root_cause_text: root_cause,
                solution_text: solution,
                issue_category: pick(&mut rng, CATEGORIES).to_string(),
                products,
            }
        })
        .collect()
}

/// Word list for one synthetic family: `count` distinct pseudo-words.
fn pseudo_words(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i}")).collect()
}

/// Rules grouped in families of near-duplicate anomalies.
///
/// Each family has a 10-word base anomaly; every member replaces between 0
/// and 6 of those words with noise words, so its similarity to the base
/// spreads over roughly 0.4 to 1. Rule ids are shuffled relative to
/// families so cluster leaders are arbitrary members.
pub fn synthetic_rule_corpus(families: usize, members_per_family: usize, seed: u64) -> Vec<RcaRule> {
    const BASE_LEN: usize = 10;
    const MAX_REPLACED: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = pseudo_words("w", families * BASE_LEN);
    let noise = pseudo_words("n", 400);
    let mut drafts = Vec::new();
    for f in 0..families {
        let base = &vocab[f * BASE_LEN..(f + 1) * BASE_LEN];
        for m in 0..members_per_family {
            let mut words: Vec<String> = base.to_vec();
            let replaced = rng.random_range(0..=MAX_REPLACED);
            let mut positions: Vec<usize> = (0..BASE_LEN).collect();
            positions.shuffle(&mut rng);
            for &p in &positions[..replaced] {
                words[p] = noise.choose(&mut rng).expect("noise pool").clone();
            }
            drafts.push((
                words.join(" "),
                format!("cause {} of family {f}", m % 3),
                format!("solution {} of family {f}", m % 3),
            ));
        }
    }
    drafts.shuffle(&mut rng);
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, (anomaly, cause, solution))| RcaRule {
            rule_id: format!("C{seed:03}-R{i:05}"),
            anomaly_text: anomaly,
            product_impacts: vec![format!("Product {}", i % 5)],
            root_cause_text: cause,
            solution_text: solution,
            source_ticket_ids: vec![format!("C{seed:03}-T{i:05}")],
            status: ReviewStatus::Draft,
            audit: Vec::new(),
        })
        .collect()
}

/// Sentences in which each planted word pair shares one context pool, plus
/// the held-out pairs `(a, b)` and `(b, a)` for every group.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub sentences: Vec<Vec<String>>,
    pub heldout: Vec<(String, String)>,
}

pub fn planted_synonym_corpus(groups: usize, sentences_per_group: usize, seed: u64) -> PlantedCorpus {
    const CONTEXT_POOL: usize = 12;
    const SIDE: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = pseudo_words("the", 8);
    let mut sentences = Vec::with_capacity(groups * sentences_per_group);
    let mut heldout = Vec::with_capacity(groups * 2);
    let contexts: Vec<Vec<String>> = (0..groups).map(|g| pseudo_words(&format!("ctx{g}x"), CONTEXT_POOL)).collect();
    for g in 0..groups {
        let pair = [format!("syn{g}a"), format!("syn{g}b")];
        heldout.push((pair[0].clone(), pair[1].clone()));
        heldout.push((pair[1].clone(), pair[0].clone()));
        for s in 0..sentences_per_group {
            let mut sentence = Vec::with_capacity(2 * SIDE + 2);
            for _ in 0..SIDE {
                sentence.push(contexts[g].choose(&mut rng).expect("context pool").clone());
            }
            sentence.push(pair[s % 2].clone());
            for _ in 0..SIDE {
                sentence.push(contexts[g].choose(&mut rng).expect("context pool").clone());
            }
            if rng.random_bool(0.5) {
                sentence.push(filler.choose(&mut rng).expect("filler").clone());
            }
            sentences.push(sentence);
        }
    }
    sentences.shuffle(&mut rng);
    PlantedCorpus { sentences, heldout }
}

/// Stand-in model that knows the tickets: combine prompts get the ticket's
/// reference rule line (looked up through the request's trace tag), every
/// other prompt gets the mock response.
pub struct TicketScribe {
    rules: HashMap<String, String>,
    combine_prefix: String,
}

impl TicketScribe {
    pub fn new(tickets: &[Ticket], templates: &TemplateSet) -> Self {
        let text = &templates.get(TemplateId::Combine).text;
        let prefix = text.split('{').next().unwrap_or_default().to_string();
        Self {
            rules: tickets.iter().map(|t| (t.id.clone(), rule_reference(t))).collect(),
            combine_prefix: prefix,
        }
    }
}

impl Backend for TicketScribe {
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        if request.prompt_text.starts_with(&self.combine_prefix) {
            if let Some(rule) = self.rules.get(&request.trace_tag) {
                return Ok(Completion::text(rule.clone()));
            }
        }
        Ok(Completion::text(mock_output(&request.prompt_text)))
    }

    fn fingerprint(&self) -> String {
        format!("scribe-v1:{}", self.rules.len())
    }
}

/// Wraps a backend and remembers every prompt/response pair it served, so a
/// run can be turned into a scripted fixture.
pub struct Recorder {
    inner: Arc<dyn Backend>,
    seen: Mutex<BTreeMap<String, String>>,
}

impl Recorder {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            seen: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn recorded(&self) -> BTreeMap<String, String> {
        self.seen.lock().expect("recorder poisoned").clone()
    }

    pub fn to_scripted(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.recorded())
    }
}

impl Backend for Recorder {
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        let out = self.inner.attempt(request)?;
        self.seen
            .lock()
            .expect("recorder poisoned")
            .insert(request.prompt_text.clone(), out.text.clone());
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        format!("recorder:{}", self.inner.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::count_tokens;

    #[test]
    fn tickets_are_reproducible_and_complete() {
        let a = synthetic_tickets(30, 7);
        assert_eq!(a, synthetic_tickets(30, 7));
        assert_ne!(a, synthetic_tickets(30, 8));
        for t in &a {
            assert!(!t.products.is_empty());
            assert!(count_tokens(&t.anomaly_text) > 25);
            assert!(!t.root_cause_text.is_empty() && !t.solution_text.is_empty());
        }
    }

    #[test]
    fn rule_corpus_shape() {
        let rules = synthetic_rule_corpus(5, 8, 1);
        assert_eq!(rules.len(), 40);
        let mut ids: Vec<&str> = rules.iter().map(|r| r.rule_id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(rules.iter().all(|r| r.anomaly_text.split(' ').count() == 10));
    }

    #[test]
    fn planted_corpus_shape() {
        let c = planted_synonym_corpus(4, 50, 3);
        assert_eq!(c.sentences.len(), 200);
        assert_eq!(c.heldout.len(), 8);
    }
}
