//! One-time preprocessing: embed train notes and attach teacher-written
//! context-reasoning pairs.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClinicalNote, Dataset, Split};
use crate::costing::{LedgerTotals, Role};
use crate::gateway::{ChatRequest, Gateway, GatewayError, SamplingProfile, Session};
use crate::protocol::{self, Templates};
use crate::vecstore::{build_store, CrPair, EmbeddingProvider, VecStoreError, VectorStore};

#[derive(Debug, thiserror::Error)]
pub enum PrepError {
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error(transparent)]
    Store(#[from] VecStoreError),
    #[error(transparent)]
    Gateway(GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub note_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairGeneration {
    /// In note-id order.
    pub pairs: Vec<CrPair>,
    pub failures: Vec<PairFailure>,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether `context` occurs in `text`, ignoring case and whitespace runs.
pub fn is_verbatim(context: &str, text: &str) -> bool {
    let context = normalize_ws(context.trim_matches(|c: char| c == '"' || c == '\'' || c.is_whitespace()));
    !context.is_empty() && normalize_ws(text).contains(&context)
}

fn generate_one(
    gateway: &Gateway,
    session: &Session,
    templates: &Templates,
    teacher: &str,
    note: &ClinicalNote,
) -> Result<Result<CrPair, String>, GatewayError> {
    let messages = protocol::build_cr_instruction(templates, note).expect("cr template renders");
    let mut request = ChatRequest::new(teacher, messages, SamplingProfile::TEACHER);
    let mut last = String::new();
    for attempt in 0..2 {
        let reply = match gateway.complete(session, Role::Teacher, &request) {
            Ok(r) => r.content,
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                last = format!("teacher call failed: {e}");
                continue;
            }
        };
        match protocol::parse_cr_reply(&reply) {
            Ok(cr) => {
                let verbatim = is_verbatim(&cr.context, &note.text);
                if !verbatim {
                    tracing::warn!(note = %note.id, "context is not a verbatim excerpt of the note; kept and flagged");
                }
                return Ok(Ok(CrPair {
                    note_id: note.id.clone(),
                    context: cr.context,
                    reasoning: cr.reasoning,
                    label: note.truth,
                    verbatim,
                }));
            }
            Err(e) => {
                last = e.to_string();
                if attempt == 0 {
                    request = ChatRequest::new(
                        teacher,
                        protocol::build_retry_message(templates, &request.messages, &reply, &last),
                        SamplingProfile::TEACHER,
                    );
                }
            }
        }
    }
    Ok(Err(last))
}

/// One teacher call per note (plus one retry), up to `concurrency` at a
/// time. Results come back in note-id order regardless of completion order.
pub fn generate_cr_pairs(
    notes: &[&ClinicalNote],
    gateway: &Gateway,
    session: &Session,
    templates: &Templates,
    teacher: &str,
    concurrency: usize,
) -> Result<PairGeneration, PrepError> {
    let mut sorted = notes.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    type Slot = Option<Result<Result<CrPair, String>, GatewayError>>;
    let results: Mutex<Vec<Slot>> = Mutex::new(vec![None; sorted.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..concurrency.clamp(1, sorted.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(note) = sorted.get(i) else { break };
                let r = generate_one(gateway, session, templates, teacher, note);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut out = PairGeneration::default();
    for (note, result) in sorted.iter().zip(results.into_inner().expect("results lock")) {
        match result.expect("every note processed") {
            Err(e) => return Err(PrepError::Gateway(e)),
            Ok(Ok(pair)) => out.pairs.push(pair),
            Ok(Err(reason)) => {
                tracing::warn!(note = %note.id, %reason, "no context-reasoning pair for note");
                out.failures.push(PairFailure {
                    note_id: note.id.clone(),
                    reason,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub train_notes: usize,
    pub store_entries: usize,
    pub dimension: usize,
    pub pairs_stored: usize,
    pub pairs_missing: usize,
    pub non_verbatim: usize,
    /// pairs_stored / train_notes.
    pub coverage: f64,
    pub failures: Vec<PairFailure>,
    pub cost: LedgerTotals,
}

/// Builds the store from the train split, attaches pairs and writes the
/// store file.
#[allow(clippy::too_many_arguments)]
pub fn prep_all(
    dataset: &Dataset,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
    session: &Session,
    templates: &Templates,
    teacher: &str,
    concurrency: usize,
    store_path: Option<&Path>,
) -> Result<(VectorStore, PrepSummary), PrepError> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(PrepError::EmptyTrainSplit);
    }
    let mut store = build_store(train.iter().copied(), provider)?;
    let generated = generate_cr_pairs(&train, gateway, session, templates, teacher, concurrency)?;
    let non_verbatim = generated.pairs.iter().filter(|p| !p.verbatim).count();
    let pairs_stored = generated.pairs.len();
    for pair in generated.pairs {
        store.attach_cr(pair)?;
    }
    if let Some(path) = store_path {
        store.save(path)?;
    }
    let summary = PrepSummary {
        train_notes: train.len(),
        store_entries: store.len(),
        dimension: store.dimension(),
        pairs_stored,
        pairs_missing: generated.failures.len(),
        non_verbatim,
        coverage: pairs_stored as f64 / train.len() as f64,
        failures: generated.failures,
        cost: session.ledger.totals(),
    };
    Ok((store, summary))
}
