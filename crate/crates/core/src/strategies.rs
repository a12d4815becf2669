//! The refinement actions: prompt refinement with RAG examples, fine-tune
//! dispatch, and action selection.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{ClinicalNote, FineTunePool, PoolItem, Provenance};
use crate::costing::Role;
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, SamplingProfile, Session};
use crate::protocol::{
    self, Action, FineTuneHyperparams, PromptArtifact, PromptOrigin, ProtocolError, TeacherDecision, TeacherView,
    Templates, MIN_FT_SAMPLES,
};
use crate::vecstore::{CrPair, VectorStore};

pub const FINETUNE_JOB_SCHEMA: &str = include_str!("../schemas/finetune_job.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "rag")]
    RagOnly,
    #[serde(rename = "finetune")]
    FinetuneOnly,
    #[serde(rename = "hybrid")]
    Hybrid,
}

impl RunMode {
    pub const ALL: [RunMode; 3] = [RunMode::RagOnly, RunMode::FinetuneOnly, RunMode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::RagOnly => "rag",
            RunMode::FinetuneOnly => "finetune",
            RunMode::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which batch notes neighbors are retrieved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RagScope {
    #[default]
    All,
    Misclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RagSettings {
    pub k: usize,
    pub scope: RagScope,
    /// Only retrieve neighbors labeled for the same symptom.
    pub restrict_to_symptom: bool,
}

impl Default for RagSettings {
    fn default() -> Self {
        Self {
            k: 3,
            scope: RagScope::All,
            restrict_to_symptom: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_prompt: Option<PromptArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_model_ref: Option<String>,
    pub teacher_calls: u32,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyError {
    /// The action is abandoned for this round; run state is untouched.
    #[error("action aborted: {reason}")]
    Aborted { reason: String, teacher_calls: u32, events: Vec<String> },
    #[error(transparent)]
    Fatal(GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutorSettings {
    pub poll_interval: Duration,
    pub timeout: Duration,
}

impl Default for ExecutorSettings {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_secs(2),
            timeout: Duration::from_secs(30 * 60),
        }
    }
}

/// Shared resources for every action of one symptom run.
pub struct StrategyContext<'a> {
    pub gateway: &'a Gateway,
    pub session: &'a Session,
    pub templates: &'a Templates,
    pub teacher_backend: &'a str,
    pub store: &'a VectorStore,
    pub pool: &'a FineTunePool,
    pub executor: &'a dyn FineTuneExecutor,
    pub executor_settings: ExecutorSettings,
    pub sleeper: &'a (dyn Fn(Duration) + Sync),
    pub rag: RagSettings,
}

/// Bookkeeping for one action's teacher exchanges.
struct Exchange<'c, 'a> {
    ctx: &'c StrategyContext<'a>,
    calls: u32,
    events: Vec<String>,
}

enum AskError {
    Gateway(GatewayError),
    Parse(ProtocolError),
}

impl<'c, 'a> Exchange<'c, 'a> {
    fn new(ctx: &'c StrategyContext<'a>) -> Self {
        Self {
            ctx,
            calls: 0,
            events: Vec::new(),
        }
    }

    fn send(&mut self, messages: Vec<ChatMessage>) -> Result<String, GatewayError> {
        self.calls += 1;
        let request = ChatRequest::new(self.ctx.teacher_backend, messages, SamplingProfile::TEACHER);
        self.ctx
            .gateway
            .complete(self.ctx.session, Role::Teacher, &request)
            .map(|r| r.content)
    }

    /// Sends `messages`, parses the reply, and on a parse failure asks once
    /// more with the error attached. Returns the parsed value, the messages
    /// of the successful request and the raw reply.
    fn ask<T>(
        &mut self,
        messages: Vec<ChatMessage>,
        parse: impl Fn(&str) -> Result<T, ProtocolError>,
    ) -> Result<(T, Vec<ChatMessage>, String), AskError> {
        let reply = self.send(messages.clone()).map_err(AskError::Gateway)?;
        match parse(&reply) {
            Ok(v) => Ok((v, messages, reply)),
            Err(first) => {
                self.events.push(format!("teacher reply rejected ({first}); retrying once"));
                let retry = protocol::build_retry_message(self.ctx.templates, &messages, &reply, &first.to_string());
                let reply = self.send(retry.clone()).map_err(AskError::Gateway)?;
                parse(&reply).map(|v| (v, retry, reply)).map_err(AskError::Parse)
            }
        }
    }

    fn abort(self, reason: impl Into<String>) -> StrategyError {
        let reason = reason.into();
        tracing::warn!(%reason, "refinement action aborted");
        let mut events = self.events;
        events.push(format!("aborted: {reason}"));
        StrategyError::Aborted {
            reason,
            teacher_calls: self.calls,
            events,
        }
    }

    fn fail(self, err: AskError, what: &str) -> StrategyError {
        match err {
            AskError::Gateway(e) if e.is_fatal() => StrategyError::Fatal(e),
            AskError::Gateway(e) => self.abort(format!("{what}: teacher call failed: {e}")),
            AskError::Parse(e) => self.abort(format!("{what}: {e}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Notes a query was issued for.
    pub queried: usize,
    /// Neighbor hits before deduplication.
    pub hits: usize,
    pub pairs: Vec<CrPair>,
}

/// k nearest pair-carrying neighbors of every note in scope, deduplicated.
pub fn retrieve_pairs(
    store: &VectorStore,
    notes: &[&ClinicalNote],
    misclassified: &[String],
    settings: &RagSettings,
) -> Retrieval {
    let scoped: Vec<&ClinicalNote> = match settings.scope {
        RagScope::All => notes.to_vec(),
        RagScope::Misclassified => {
            let wrong: Vec<&ClinicalNote> = notes.iter().copied().filter(|n| misclassified.contains(&n.id)).collect();
            if wrong.is_empty() {
                notes.to_vec()
            } else {
                wrong
            }
        }
    };
    let mut queried = 0;
    let mut raw = Vec::new();
    for note in scoped {
        let Some(entry) = store.get(&note.id) else {
            tracing::warn!(note = %note.id, "note has no vector in the store; skipped for retrieval");
            continue;
        };
        queried += 1;
        let neighbors = store.knn_where(&entry.vector, settings.k.max(1), |e| {
            e.cr.is_some() && (!settings.restrict_to_symptom || e.symptom == note.symptom)
        });
        for n in neighbors.unwrap_or_default() {
            if let Some(pair) = store.get(&n.note_id).and_then(|e| e.cr.clone()) {
                raw.push(pair);
            }
        }
    }
    let hits = raw.len();
    Retrieval {
        queried,
        hits,
        pairs: protocol::dedup_pairs(raw),
    }
}

fn misclassified(view: &TeacherView) -> Vec<String> {
    view.predictions
        .iter()
        .filter(|p| p.predicted != Some(p.truth))
        .map(|p| p.note_id.clone())
        .collect()
}

/// Teacher rewrites the best prompt, then writes RAG examples grounded in
/// retrieved context-reasoning pairs.
pub fn run_prompt_refinement(
    ctx: &StrategyContext<'_>,
    view: &TeacherView,
    batch: &[&ClinicalNote],
    new_id: &str,
    round: (u32, u32),
) -> Result<ActionOutcome, StrategyError> {
    let mut ex = Exchange::new(ctx);
    let messages = protocol::build_refinement_instruction(ctx.templates, view).map_err(template_abort)?;
    let (refined, sent, reply) = match ex.ask(messages, protocol::parse_refined_prompt) {
        Ok(v) => v,
        Err(e) => return Err(ex.fail(e, "prompt refinement")),
    };

    let retrieval = retrieve_pairs(ctx.store, batch, &misclassified(view), &ctx.rag);
    let mut examples = Vec::new();
    if retrieval.pairs.is_empty() {
        tracing::warn!(symptom = %view.symptom, "no context-reasoning pairs retrieved; RAG step skipped");
        ex.events.push("rag skipped: no context-reasoning pairs retrieved".into());
    } else {
        ex.events.push(format!(
            "retrieved {} pair(s) from {} hit(s) over {} note(s)",
            retrieval.pairs.len(),
            retrieval.hits,
            retrieval.queried
        ));
        let rag_messages =
            protocol::build_rag_instruction(ctx.templates, &view.symptom, &sent, &reply, &refined, &retrieval.pairs)
                .map_err(template_abort)?;
        match ex.ask(rag_messages, protocol::parse_rag_examples) {
            Ok((parsed, _, _)) => {
                if parsed.dropped > 0 {
                    ex.events.push(format!("kept first {} examples, dropped {}", parsed.examples.len(), parsed.dropped));
                }
                examples = parsed.examples;
            }
            Err(AskError::Parse(e)) => {
                tracing::warn!(error = %e, "RAG examples unusable; continuing with the refined prompt alone");
                ex.events.push(format!("rag failed: {e}; refined prompt kept without examples"));
            }
            Err(e) => return Err(ex.fail(e, "rag generation")),
        }
    }

    let created_by = if examples.is_empty() {
        PromptOrigin::PromptRefinement
    } else {
        PromptOrigin::RagGeneration
    };
    Ok(ActionOutcome {
        action: Action::PromptRefinement,
        new_prompt: Some(PromptArtifact {
            id: new_id.to_string(),
            base_instruction: refined,
            rag_examples: examples,
            parent_id: Some(view.best.prompt.id.clone()),
            created_by,
            round_created: round,
        }),
        new_model_ref: None,
        teacher_calls: ex.calls,
        events: ex.events,
    })
}

fn template_abort(e: ProtocolError) -> StrategyError {
    StrategyError::Aborted {
        reason: e.to_string(),
        teacher_calls: 0,
        events: vec![format!("aborted: {e}")],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSample {
    pub prompt: String,
    pub target: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneJobSpec {
    pub job_id: String,
    pub base_model_ref: String,
    pub hyperparams: FineTuneHyperparams,
    pub samples: Vec<FineTuneSample>,
}

impl FineTuneJobSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.job_id.trim().is_empty() {
            return Err("job_id must not be empty".into());
        }
        if self.base_model_ref.trim().is_empty() {
            return Err("base_model_ref must not be empty".into());
        }
        if self.samples.len() < MIN_FT_SAMPLES {
            return Err(format!(
                "at least {MIN_FT_SAMPLES} samples required, got {}",
                self.samples.len()
            ));
        }
        self.hyperparams.validate().map_err(|e| e.to_string())
    }
}

/// Pool entries rendered as (prompt, target) training pairs.
pub fn resolve_samples(templates: &Templates, pool: &FineTunePool, indices: &[usize]) -> Vec<FineTuneSample> {
    indices
        .iter()
        .filter_map(|&i| pool.get(i))
        .map(|entry| match &entry.item {
            PoolItem::Mmlu(r) => FineTuneSample {
                prompt: r.question.clone(),
                target: r.answer.clone(),
                provenance: Provenance::MmluClinical,
            },
            PoolItem::ContextReasoning(c) => {
                let instruction = templates
                    .initial
                    .render(&[("symptom", &c.symptom)])
                    .unwrap_or_default();
                FineTuneSample {
                    prompt: format!("{instruction}\n\n{}", c.note_text),
                    target: protocol::render_student_output(c.pair.label, &c.pair.reasoning),
                    provenance: Provenance::ContextReasoning,
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Succeeded { model_ref: String },
    Failed { reason: String },
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, JobStatus::Pending)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecutorError {
    #[error("executor rejected job ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("unknown job `{0}`")]
    NotFound(String),
    #[error("executor unreachable: {0}")]
    Transport(String),
    #[error("fine-tune job `{0}` did not finish within the timeout")]
    Timeout(String),
}

pub trait FineTuneExecutor: Send + Sync {
    fn submit(&self, spec: &FineTuneJobSpec) -> Result<JobHandle, ExecutorError>;
    fn poll(&self, handle: &JobHandle) -> Result<JobStatus, ExecutorError>;
}

/// `base` with its trailing `+ftN` counter incremented (or `+ft1` added).
pub fn next_model_ref(base: &str) -> String {
    if let Some((stem, n)) = base.rsplit_once("+ft") {
        if let Ok(n) = n.parse::<u32>() {
            return format!("{stem}+ft{}", n + 1);
        }
    }
    format!("{base}+ft1")
}

#[derive(Debug)]
struct MockJob {
    polls_left: u32,
    outcome: JobStatus,
}

/// In-process executor: validates like the service, and resolves jobs
/// after a configurable number of polls.
#[derive(Debug, Default)]
pub struct MockExecutor {
    jobs: Mutex<BTreeMap<String, MockJob>>,
    pending_polls: u32,
    fail_reason: Option<String>,
    submitted: Mutex<Vec<FineTuneJobSpec>>,
}

impl MockExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every job reports `Pending` this many times before resolving.
    pub fn with_pending_polls(mut self, polls: u32) -> Self {
        self.pending_polls = polls;
        self
    }

    /// Every job fails with `reason`.
    pub fn failing(mut self, reason: impl Into<String>) -> Self {
        self.fail_reason = Some(reason.into());
        self
    }

    pub fn submitted(&self) -> Vec<FineTuneJobSpec> {
        self.submitted.lock().expect("executor lock").clone()
    }
}

impl FineTuneExecutor for MockExecutor {
    fn submit(&self, spec: &FineTuneJobSpec) -> Result<JobHandle, ExecutorError> {
        spec.validate().map_err(|message| ExecutorError::Rejected { status: 422, message })?;
        let mut jobs = self.jobs.lock().expect("executor lock");
        if jobs.contains_key(&spec.job_id) {
            return Err(ExecutorError::Rejected {
                status: 409,
                message: format!("duplicate job_id `{}`", spec.job_id),
            });
        }
        let outcome = match &self.fail_reason {
            Some(reason) => JobStatus::Failed { reason: reason.clone() },
            None => JobStatus::Succeeded {
                model_ref: next_model_ref(&spec.base_model_ref),
            },
        };
        jobs.insert(
            spec.job_id.clone(),
            MockJob {
                polls_left: self.pending_polls,
                outcome,
            },
        );
        self.submitted.lock().expect("executor lock").push(spec.clone());
        Ok(JobHandle {
            job_id: spec.job_id.clone(),
        })
    }

    fn poll(&self, handle: &JobHandle) -> Result<JobStatus, ExecutorError> {
        let mut jobs = self.jobs.lock().expect("executor lock");
        let job = jobs
            .get_mut(&handle.job_id)
            .ok_or_else(|| ExecutorError::NotFound(handle.job_id.clone()))?;
        if job.polls_left > 0 {
            job.polls_left -= 1;
            return Ok(JobStatus::Pending);
        }
        Ok(job.outcome.clone())
    }
}

/// Client for an executor service speaking `POST /jobs` and
/// `GET /jobs/{id}`.
#[derive(Debug, Clone)]
pub struct HttpExecutor {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpExecutor {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    fn body(resp: reqwest::blocking::Response) -> Result<(u16, Value), ExecutorError> {
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ExecutorError::Transport(e.to_string()))?;
        let value = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Ok((status, value))
    }

    fn message(value: &Value) -> String {
        value
            .get("detail")
            .or_else(|| value.get("error"))
            .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
            .unwrap_or_else(|| value.to_string())
    }
}

impl FineTuneExecutor for HttpExecutor {
    fn submit(&self, spec: &FineTuneJobSpec) -> Result<JobHandle, ExecutorError> {
        let resp = self
            .client
            .post(format!("{}/jobs", self.base_url))
            .json(spec)
            .send()
            .map_err(|e| ExecutorError::Transport(e.to_string()))?;
        match Self::body(resp)? {
            (200..=299, v) => {
                let job_id = v
                    .get("job_id")
                    .and_then(Value::as_str)
                    .unwrap_or(&spec.job_id)
                    .to_string();
                Ok(JobHandle { job_id })
            }
            (status @ (409 | 422), v) => Err(ExecutorError::Rejected {
                status,
                message: Self::message(&v),
            }),
            (status, v) => Err(ExecutorError::Transport(format!("status {status}: {}", Self::message(&v)))),
        }
    }

    fn poll(&self, handle: &JobHandle) -> Result<JobStatus, ExecutorError> {
        let resp = self
            .client
            .get(format!("{}/jobs/{}", self.base_url, handle.job_id))
            .send()
            .map_err(|e| ExecutorError::Transport(e.to_string()))?;
        match Self::body(resp)? {
            (200..=299, v) => serde_json::from_value(v.clone())
                .map_err(|e| ExecutorError::Transport(format!("unexpected job status {v}: {e}"))),
            (404, _) => Err(ExecutorError::NotFound(handle.job_id.clone())),
            (status, v) => Err(ExecutorError::Transport(format!("status {status}: {}", Self::message(&v)))),
        }
    }
}

/// Polls until the job is terminal or the timeout budget is spent.
pub fn wait_for_job(
    executor: &dyn FineTuneExecutor,
    handle: &JobHandle,
    settings: ExecutorSettings,
    sleep: &dyn Fn(Duration),
) -> Result<JobStatus, ExecutorError> {
    let mut waited = Duration::ZERO;
    loop {
        let status = executor.poll(handle)?;
        if status.is_terminal() {
            return Ok(status);
        }
        if waited >= settings.timeout {
            return Err(ExecutorError::Timeout(handle.job_id.clone()));
        }
        sleep(settings.poll_interval);
        waited += settings.poll_interval;
    }
}

/// Teacher picks samples and hyperparameters; the job is run to completion.
pub fn run_finetune(
    ctx: &StrategyContext<'_>,
    view: &TeacherView,
    base_model_ref: &str,
    job_id: &str,
) -> Result<ActionOutcome, StrategyError> {
    let mut ex = Exchange::new(ctx);
    if ctx.pool.is_empty() {
        return Err(ex.abort("empty fine-tune pool"));
    }
    let messages = protocol::build_selection_instruction(ctx.templates, view, ctx.pool).map_err(template_abort)?;
    let pool = ctx.pool;
    let (selection, sent, reply) = match ex.ask(messages, |raw| protocol::parse_ft_selection(raw, pool)) {
        Ok(v) => v,
        Err(e) => return Err(ex.fail(e, "sample selection")),
    };
    if !selection.out_of_range.is_empty() {
        ex.events.push(format!("dropped out-of-range indices {:?}", selection.out_of_range));
    }
    let samples = resolve_samples(ctx.templates, ctx.pool, &selection.indices);
    let listing: Vec<String> = samples.iter().map(|s| s.prompt.clone()).collect();

    let mut hp_messages = sent;
    hp_messages.push(ChatMessage::assistant(reply));
    let hp_request = protocol::build_hyperparams_instruction(ctx.templates, view, base_model_ref, &listing)
        .map_err(template_abort)?;
    hp_messages.extend(hp_request);
    let (hyperparams, _, _) = match ex.ask(hp_messages, protocol::parse_ft_hyperparams) {
        Ok(v) => v,
        Err(e) => return Err(ex.fail(e, "hyperparameters")),
    };

    let spec = FineTuneJobSpec {
        job_id: job_id.to_string(),
        base_model_ref: base_model_ref.to_string(),
        hyperparams,
        samples,
    };
    let mmlu = spec.samples.iter().filter(|s| s.provenance == Provenance::MmluClinical).count();
    ex.events.push(format!(
        "submitting job {job_id}: {} samples ({mmlu} mmlu, {} context-reasoning)",
        spec.samples.len(),
        spec.samples.len() - mmlu
    ));
    let handle = match ctx.executor.submit(&spec) {
        Ok(h) => h,
        Err(e) => return Err(ex.abort(format!("fine-tune submit failed: {e}"))),
    };
    match wait_for_job(ctx.executor, &handle, ctx.executor_settings, ctx.sleeper) {
        Ok(JobStatus::Succeeded { model_ref }) => {
            ex.events.push(format!("job {} succeeded: {model_ref}", handle.job_id));
            Ok(ActionOutcome {
                action: Action::FineTuning,
                new_prompt: None,
                new_model_ref: Some(model_ref),
                teacher_calls: ex.calls,
                events: ex.events,
            })
        }
        Ok(JobStatus::Failed { reason }) => Err(ex.abort(format!("fine-tune job failed: {reason}"))),
        Ok(JobStatus::Pending) => unreachable!("wait_for_job returns terminal states"),
        Err(e) => Err(ex.abort(format!("fine-tune job error: {e}"))),
    }
}

/// The action for the next round. Only hybrid mode consults the teacher.
pub fn choose_action(
    ctx: &StrategyContext<'_>,
    mode: RunMode,
    view: &TeacherView,
) -> Result<(TeacherDecision, u32), GatewayError> {
    let fixed = |action: Action| TeacherDecision {
        action,
        explanation: format!("fixed by {mode} mode"),
        fallback_applied: false,
    };
    match mode {
        RunMode::RagOnly => Ok((fixed(Action::PromptRefinement), 0)),
        RunMode::FinetuneOnly => Ok((fixed(Action::FineTuning), 0)),
        RunMode::Hybrid => {
            let mut ex = Exchange::new(ctx);
            let messages = protocol::build_hybrid_instruction(ctx.templates, view)
                .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
            match ex.send(messages) {
                Ok(reply) => Ok((protocol::parse_decision(&reply), ex.calls)),
                Err(e) if e.is_fatal() => Err(e),
                Err(e) => {
                    tracing::warn!(error = %e, "teacher decision call failed; falling back to prompt refinement");
                    Ok((
                        TeacherDecision {
                            action: Action::PromptRefinement,
                            explanation: format!("fallback: teacher call failed: {e}"),
                            fallback_applied: true,
                        },
                        ex.calls,
                    ))
                }
            }
        }
    }
}
