//! The per-symptom epoch/round loop with checkpoints and run reports.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{ClinicalNote, Dataset, FineTunePool, LabeledPrediction, Split, SymptomLabel};
use crate::costing::{pcr, CostLedger, Dollars, LedgerEntry, LedgerTotals, Role};
use crate::gateway::{ChatRequest, Gateway, GatewayError, SamplingProfile, Session, Transcript, TranscriptEntry};
use crate::metrics::{self, PrimaryMetric, ScoreReport};
use crate::protocol::{
    self, Action, ActionHistoryRow, EvaluatedPrompt, PredictionRow, PromptArtifact, StudentOutput, TeacherDecision,
    TeacherView, Templates,
};
use crate::strategies::{self, ExecutorSettings, FineTuneExecutor, RagSettings, RunMode, StrategyContext, StrategyError};
use crate::vecstore::VectorStore;

pub const CHECKPOINT_FORMAT: &str = "symrefine-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_FORMAT: &str = "symrefine-run-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub symptom: String,
    pub mode: RunMode,
    #[serde(default = "default_epochs")]
    pub max_epochs: u32,
    #[serde(default = "default_rounds")]
    pub rounds_per_epoch: u32,
    #[serde(default)]
    pub primary_metric: PrimaryMetric,
    pub student_backend: String,
    pub teacher_backend: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rag: RagSettings,
    /// How many non-best prompts the teacher is shown, most recent first.
    #[serde(default = "default_inferior")]
    pub max_inferior_prompts: usize,
}

fn default_epochs() -> u32 {
    5
}

fn default_rounds() -> u32 {
    16
}

fn default_inferior() -> usize {
    10
}

impl RunConfig {
    pub fn new(symptom: impl Into<String>, mode: RunMode, student: impl Into<String>, teacher: impl Into<String>) -> Self {
        Self {
            symptom: symptom.into(),
            mode,
            max_epochs: default_epochs(),
            rounds_per_epoch: default_rounds(),
            primary_metric: PrimaryMetric::Accuracy,
            student_backend: student.into(),
            teacher_backend: teacher.into(),
            seed: 0,
            rag: RagSettings::default(),
            max_inferior_prompts: default_inferior(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.to_string()));
        if self.symptom.trim().is_empty() {
            return bad("symptom must not be empty");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if self.rounds_per_epoch < 1 {
            return bad("rounds_per_epoch must be >= 1");
        }
        if self.rag.k < 1 {
            return bad("rag.k must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("no train notes for symptom `{0}`")]
    NoTrainNotes(String),
    #[error("empty test split")]
    EmptyTestSplit,
    #[error("empty fine-tune pool")]
    EmptyPool,
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error(transparent)]
    Gateway(GatewayError),
    #[error("backend outage: {0}")]
    Outage(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub note_id: String,
    pub truth: SymptomLabel,
    pub predicted: Option<SymptomLabel>,
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentEvaluation {
    pub predictions: Vec<PredictionRecord>,
    pub score: ScoreReport,
    /// Notes whose call failed after retries.
    pub failures: usize,
}

/// One student call per note; failed calls count as unparseable.
pub fn evaluate_student(
    gateway: &Gateway,
    session: &Session,
    templates: &Templates,
    prompt: &PromptArtifact,
    model_ref: &str,
    notes: &[&ClinicalNote],
) -> Result<StudentEvaluation, RunError> {
    if notes.is_empty() {
        return Err(RunError::InvalidConfig("evaluation batch is empty".into()));
    }
    let mut records = Vec::with_capacity(notes.len());
    let mut failures = 0;
    let mut last_error = String::new();
    for note in notes {
        let messages = protocol::render_student_messages(templates, prompt, note);
        let request = ChatRequest::new(model_ref, messages, SamplingProfile::STUDENT);
        let (predicted, reasoning, error) = match gateway.complete(session, Role::Student, &request) {
            Ok(resp) => match protocol::parse_student_output(&resp.content) {
                StudentOutput::Labeled { label, reasoning } => (Some(label), reasoning, None),
                StudentOutput::Unparseable => (None, resp.content.trim().to_string(), None),
            },
            Err(e) if e.is_fatal() => return Err(RunError::Gateway(e)),
            Err(e) => {
                tracing::warn!(note = %note.id, error = %e, "student call failed; note scored as unparseable");
                failures += 1;
                last_error = e.to_string();
                (None, String::new(), Some(e.to_string()))
            }
        };
        records.push(PredictionRecord {
            note_id: note.id.clone(),
            truth: note.truth,
            predicted,
            reasoning,
            error,
        });
    }
    if failures == notes.len() {
        return Err(RunError::Outage(format!("every student call failed; last error: {last_error}")));
    }
    let preds: Vec<LabeledPrediction> = records
        .iter()
        .map(|r| LabeledPrediction {
            note_id: r.note_id.clone(),
            predicted: r.predicted,
            reasoning: r.reasoning.clone(),
            raw_output: String::new(),
        })
        .collect();
    let truths: HashMap<String, SymptomLabel> = notes.iter().map(|n| (n.id.clone(), n.truth)).collect();
    let score = metrics::score_predictions(&preds, &truths).expect("batch is non-empty and fully labeled");
    Ok(StudentEvaluation {
        predictions: records,
        score,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScore {
    pub prompt_id: String,
    pub model_ref: String,
    pub score: ScoreReport,
    pub n: usize,
    pub dollars: Dollars,
    pub cost_per_note: Dollars,
}

/// A single evaluation on held-out notes, with its cost per note taken from
/// the ledger delta.
pub fn evaluate_test(
    gateway: &Gateway,
    session: &Session,
    templates: &Templates,
    prompt: &PromptArtifact,
    model_ref: &str,
    notes: &[&ClinicalNote],
) -> Result<TestScore, RunError> {
    if notes.is_empty() {
        return Err(RunError::EmptyTestSplit);
    }
    let mark = session.ledger.len();
    let eval = evaluate_student(gateway, session, templates, prompt, model_ref, notes)?;
    let dollars = session.ledger.dollars_since(mark);
    Ok(TestScore {
        prompt_id: prompt.id.clone(),
        model_ref: model_ref.to_string(),
        score: eval.score,
        n: notes.len(),
        dollars,
        cost_per_note: dollars.per(notes.len()).unwrap_or(Dollars::ZERO),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: u32,
    pub round: u32,
    /// Absent for the baseline evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<TeacherDecision>,
    pub prompt_id: String,
    pub model_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreReport>,
    pub improved: bool,
    /// Best primary-metric value after this round.
    pub best_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    pub teacher_calls: u32,
    pub dollars: Dollars,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum Termination {
    /// A full epoch of rounds brought no improvement.
    NoImprovement { epoch: u32 },
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub prompt_id: String,
    pub model_ref: String,
    pub score: ScoreReport,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Current epoch, 1-based; 0 until the baseline is evaluated.
    pub epoch: u32,
    /// Rounds completed in the current epoch.
    pub round: u32,
    pub epochs_completed: u32,
    pub prompts: Vec<PromptArtifact>,
    /// Latest score per evaluated prompt, in first-evaluation order.
    pub prompt_scores: Vec<(String, ScoreReport)>,
    pub best: Option<BestRecord>,
    pub current_model_ref: String,
    pub history: Vec<RoundRecord>,
    pub ft_jobs: u32,
    pub student_evaluations: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
}

impl RunState {
    pub fn new(initial: PromptArtifact, model_ref: &str) -> Self {
        Self {
            epoch: 0,
            round: 0,
            epochs_completed: 0,
            prompts: vec![initial],
            prompt_scores: Vec::new(),
            best: None,
            current_model_ref: model_ref.to_string(),
            history: Vec::new(),
            ft_jobs: 0,
            student_evaluations: 0,
            termination: None,
        }
    }

    pub fn prompt(&self, id: &str) -> Option<&PromptArtifact> {
        self.prompts.iter().find(|p| p.id == id)
    }

    pub fn best_prompt(&self) -> &PromptArtifact {
        let id = self.best.as_ref().map(|b| b.prompt_id.as_str()).unwrap_or("p0");
        self.prompt(id).expect("best prompt resolves")
    }

    pub fn is_finished(&self) -> bool {
        self.termination.is_some()
    }

    fn set_prompt_score(&mut self, id: &str, score: ScoreReport) {
        match self.prompt_scores.iter_mut().find(|(p, _)| p == id) {
            Some(slot) => slot.1 = score,
            None => self.prompt_scores.push((id.to_string(), score)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("not a checkpoint file (format `{0}`)")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u64 },
    #[error("invalid checkpoint section `{section}`: {reason}")]
    Section { section: &'static str, reason: String },
    #[error("checkpoint i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub state: RunState,
    pub ledger: Vec<LedgerEntry>,
    pub transcript: Vec<TranscriptEntry>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CheckpointError::Corrupt("top level is not an object".into()))?;
        let format = obj.get("format").and_then(Value::as_str).unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format.to_string()));
        }
        let version = obj.get("version").and_then(Value::as_u64).unwrap_or(0);
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version { found: version });
        }
        fn section<T: serde::de::DeserializeOwned>(
            obj: &serde_json::Map<String, Value>,
            name: &'static str,
        ) -> Result<T, CheckpointError> {
            let v = obj.get(name).ok_or_else(|| CheckpointError::Section {
                section: name,
                reason: "missing".into(),
            })?;
            serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Section {
                section: name,
                reason: e.to_string(),
            })
        }
        Ok(Self {
            format: format.to_string(),
            version: CHECKPOINT_VERSION,
            config: section(obj, "config")?,
            state: section(obj, "state")?,
            ledger: section(obj, "ledger")?,
            transcript: section(obj, "transcript")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()).map_err(|e| CheckpointError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| CheckpointError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Everything a run reads but does not own.
#[derive(Clone)]
pub struct RunInputs<'a> {
    pub dataset: &'a Dataset,
    pub store: &'a VectorStore,
    pub pool: &'a FineTunePool,
    pub executor: &'a dyn FineTuneExecutor,
    pub executor_settings: ExecutorSettings,
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
    pub sleeper: Arc<dyn Fn(Duration) + Send + Sync>,
}

/// Resumable driver for one symptom run.
pub struct Runner<'a> {
    config: RunConfig,
    inputs: RunInputs<'a>,
    session: Session,
    state: RunState,
    train: Vec<&'a ClinicalNote>,
}

fn sorted_notes<'a>(dataset: &'a Dataset, symptom: &str, split: Split) -> Vec<&'a ClinicalNote> {
    let mut notes = dataset.select(symptom, split);
    notes.sort_by(|a, b| a.id.cmp(&b.id));
    notes
}

impl<'a> Runner<'a> {
    pub fn new(config: RunConfig, inputs: RunInputs<'a>) -> Result<Self, RunError> {
        let initial = protocol::initial_prompt(inputs.templates, &config.symptom)
            .map_err(|e| RunError::InvalidConfig(e.to_string()))?;
        let state = RunState::new(initial, &config.student_backend);
        Self::assemble(config, inputs, Session::new(), state)
    }

    pub fn resume(checkpoint: Checkpoint, inputs: RunInputs<'a>) -> Result<Self, RunError> {
        inputs.gateway.skip_replayed(&checkpoint.transcript);
        let session = Session {
            ledger: CostLedger::from_entries(checkpoint.ledger),
            transcript: Transcript::from_entries(checkpoint.transcript),
        };
        Self::assemble(checkpoint.config, inputs, session, checkpoint.state)
    }

    fn assemble(config: RunConfig, inputs: RunInputs<'a>, session: Session, state: RunState) -> Result<Self, RunError> {
        config.validate()?;
        for backend in [&config.student_backend, &config.teacher_backend] {
            if !inputs.gateway.has_backend(backend) {
                return Err(RunError::UnknownBackend(backend.clone()));
            }
        }
        let train = sorted_notes(inputs.dataset, &config.symptom, Split::Train);
        if train.is_empty() {
            return Err(RunError::NoTrainNotes(config.symptom.clone()));
        }
        if config.mode == RunMode::FinetuneOnly && inputs.pool.is_empty() {
            return Err(RunError::EmptyPool);
        }
        Ok(Self {
            config,
            inputs,
            session,
            state,
            train,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
            ledger: self.session.ledger.entries(),
            transcript: self.session.transcript.entries(),
        }
    }

    fn primary(&self, score: &ScoreReport) -> f64 {
        score.metric(self.config.primary_metric)
    }

    fn teacher_view(&self) -> TeacherView {
        let best = self.state.best.as_ref().expect("baseline evaluated");
        let inferior: Vec<EvaluatedPrompt> = self
            .state
            .prompt_scores
            .iter()
            .rev()
            .filter(|(id, _)| *id != best.prompt_id)
            .take(self.config.max_inferior_prompts)
            .filter_map(|(id, score)| {
                self.state.prompt(id).map(|p| EvaluatedPrompt {
                    prompt: p.clone(),
                    score: *score,
                })
            })
            .collect();
        let actions = self
            .state
            .history
            .iter()
            .filter_map(|r| {
                r.action.map(|action| ActionHistoryRow {
                    epoch: r.epoch,
                    round: r.round,
                    action,
                    score: r.score,
                    improved: r.improved,
                    aborted: r.aborted.clone(),
                })
            })
            .collect();
        TeacherView {
            symptom: self.config.symptom.clone(),
            best: EvaluatedPrompt {
                prompt: self.state.best_prompt().clone(),
                score: best.score,
            },
            inferior,
            predictions: best
                .predictions
                .iter()
                .map(|p| PredictionRow {
                    note_id: p.note_id.clone(),
                    truth: p.truth,
                    predicted: p.predicted,
                    reasoning: p.reasoning.clone(),
                })
                .collect(),
            actions,
        }
    }

    fn evaluate(&self, prompt: &PromptArtifact, model_ref: &str) -> Result<StudentEvaluation, RunError> {
        evaluate_student(
            self.inputs.gateway,
            &self.session,
            self.inputs.templates,
            prompt,
            model_ref,
            &self.train,
        )
    }

    /// Runs the baseline or one refinement round. Returns true once the
    /// run has terminated. On error the state is left as it was before
    /// the call.
    pub fn step(&mut self) -> Result<bool, RunError> {
        if self.state.is_finished() {
            return Ok(true);
        }
        if self.state.best.is_none() {
            self.baseline()?;
        } else {
            self.round()?;
        }
        Ok(self.state.is_finished())
    }

    fn baseline(&mut self) -> Result<(), RunError> {
        let mark = self.session.ledger.len();
        let prompt = self.state.prompts[0].clone();
        let model = self.state.current_model_ref.clone();
        let eval = self.evaluate(&prompt, &model)?;
        let state = &mut self.state;
        state.student_evaluations += 1;
        state.set_prompt_score(&prompt.id, eval.score);
        let best_score = eval.score.metric(self.config.primary_metric);
        state.best = Some(BestRecord {
            prompt_id: prompt.id.clone(),
            model_ref: model.clone(),
            score: eval.score,
            predictions: eval.predictions,
        });
        state.history.push(RoundRecord {
            epoch: 0,
            round: 0,
            action: None,
            decision: None,
            prompt_id: prompt.id,
            model_ref: model,
            score: Some(eval.score),
            improved: false,
            best_score,
            aborted: None,
            teacher_calls: 0,
            dollars: self.session.ledger.dollars_since(mark),
            events: if eval.failures > 0 {
                vec![format!("{} student call(s) failed", eval.failures)]
            } else {
                Vec::new()
            },
        });
        state.epoch = 1;
        state.round = 0;
        Ok(())
    }

    fn round(&mut self) -> Result<(), RunError> {
        let epoch = self.state.epoch;
        let round = self.state.round + 1;
        let mark = self.session.ledger.len();
        let view = self.teacher_view();
        let sleeper = self.inputs.sleeper.clone();
        let ctx = StrategyContext {
            gateway: self.inputs.gateway,
            session: &self.session,
            templates: self.inputs.templates,
            teacher_backend: &self.config.teacher_backend,
            store: self.inputs.store,
            pool: self.inputs.pool,
            executor: self.inputs.executor,
            executor_settings: self.inputs.executor_settings,
            sleeper: sleeper.as_ref(),
            rag: self.config.rag,
        };
        let (decision, decision_calls) =
            strategies::choose_action(&ctx, self.config.mode, &view).map_err(RunError::Gateway)?;
        let mut ft_jobs = self.state.ft_jobs;
        let outcome = match decision.action {
            Action::PromptRefinement => {
                let new_id = format!("p{}", self.state.prompts.len());
                strategies::run_prompt_refinement(&ctx, &view, &self.train, &new_id, (epoch, round))
            }
            Action::FineTuning => {
                ft_jobs += 1;
                let job_id = format!("{}-{}-ft{}", slug(&self.config.symptom), self.config.mode, ft_jobs);
                strategies::run_finetune(&ctx, &view, &self.state.current_model_ref, &job_id)
            }
        };

        let best_before = self.primary(&view.best.score);
        let mut record = RoundRecord {
            epoch,
            round,
            action: Some(decision.action),
            decision: Some(decision.clone()),
            prompt_id: view.best.prompt.id.clone(),
            model_ref: self.state.current_model_ref.clone(),
            score: None,
            improved: false,
            best_score: best_before,
            aborted: None,
            teacher_calls: decision_calls,
            dollars: Dollars::ZERO,
            events: Vec::new(),
        };
        if decision.fallback_applied {
            record.events.push(format!("decision fallback applied: {}", decision.explanation));
        }

        let mut evaluated = None;
        match outcome {
            Err(StrategyError::Fatal(e)) => return Err(RunError::Gateway(e)),
            Err(StrategyError::Aborted {
                reason,
                teacher_calls,
                events,
            }) => {
                record.teacher_calls += teacher_calls;
                record.events.extend(events);
                record.aborted = Some(reason);
            }
            Ok(out) => {
                record.teacher_calls += out.teacher_calls;
                record.events.extend(out.events.iter().cloned());
                let prompt = out.new_prompt.clone().unwrap_or_else(|| view.best.prompt.clone());
                let model = out.new_model_ref.clone().unwrap_or_else(|| self.state.current_model_ref.clone());
                let eval = self.evaluate(&prompt, &model)?;
                record.prompt_id = prompt.id.clone();
                record.model_ref = model.clone();
                record.score = Some(eval.score);
                if eval.failures > 0 {
                    record.events.push(format!("{} student call(s) failed", eval.failures));
                }
                record.improved = self.primary(&eval.score) > best_before;
                if record.improved {
                    record.best_score = self.primary(&eval.score);
                }
                evaluated = Some((out, prompt, model, eval));
            }
        }

        // Commit.
        let state = &mut self.state;
        state.ft_jobs = ft_jobs;
        if let Some((out, prompt, model, eval)) = evaluated {
            state.student_evaluations += 1;
            if out.new_prompt.is_some() {
                state.prompts.push(prompt.clone());
            }
            state.set_prompt_score(&prompt.id, eval.score);
            if out.new_model_ref.is_some() {
                state.current_model_ref = model.clone();
            }
            if record.improved {
                state.best = Some(BestRecord {
                    prompt_id: prompt.id,
                    model_ref: model,
                    score: eval.score,
                    predictions: eval.predictions,
                });
            }
        }
        record.dollars = self.session.ledger.dollars_since(mark);
        let improved = record.improved;
        state.history.push(record);
        state.round = round;
        if improved {
            state.epochs_completed += 1;
            if state.epochs_completed >= self.config.max_epochs {
                state.termination = Some(Termination::MaxEpochs);
            } else {
                state.epoch += 1;
                state.round = 0;
            }
        } else if round >= self.config.rounds_per_epoch {
            state.epochs_completed += 1;
            state.termination = Some(Termination::NoImprovement { epoch });
        }
        Ok(())
    }

    /// Steps until termination, calling `on_step` after every committed
    /// step.
    pub fn run_to_end(&mut self, mut on_step: impl FnMut(&Runner<'a>)) -> Result<(), RunError> {
        loop {
            let done = self.step()?;
            on_step(self);
            if done {
                return Ok(());
            }
        }
    }

    /// Test-split evaluation of the initial and the best prompt/model, and
    /// the run report.
    pub fn finish(&self) -> Result<RunReport, RunError> {
        let test = sorted_notes(self.inputs.dataset, &self.config.symptom, Split::Test);
        let gw = self.inputs.gateway;
        let t = self.inputs.templates;
        let initial = evaluate_test(gw, &self.session, t, &self.state.prompts[0], &self.config.student_backend, &test)?;
        let best = self.state.best.as_ref().expect("run has a baseline");
        let refined = evaluate_test(gw, &self.session, t, self.state.best_prompt(), &best.model_ref, &test)?;
        Ok(build_report(&self.config, &self.state, &self.session.ledger, initial, refined))
    }
}

pub fn slug(symptom: &str) -> String {
    symptom
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub prompt_id: String,
    pub prompt_text: String,
    pub model_ref: String,
    pub train_score: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub initial: TestScore,
    pub refined: TestScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub total: LedgerTotals,
    pub student_dollars: Dollars,
    pub teacher_dollars: Dollars,
    pub refinement_dollars: Dollars,
    pub test_dollars: Dollars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub termination: Option<Termination>,
    pub epochs_completed: u32,
    pub student_evaluations: u32,
    pub baseline: ScoreReport,
    pub best: BestSummary,
    pub final_model_ref: String,
    pub rounds: Vec<RoundRecord>,
    pub prompts: Vec<PromptArtifact>,
    pub test: TestSummary,
    pub cost: CostSummary,
    /// Refined test score on the primary metric over refined test cost per
    /// note; absent when that cost is zero.
    pub pcr: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn build_report(config: &RunConfig, state: &RunState, ledger: &CostLedger, initial: TestScore, refined: TestScore) -> RunReport {
    let best = state.best.as_ref().expect("run has a baseline");
    let entries = ledger.entries();
    let by_role = |role: Role| entries.iter().filter(|e| e.role == role).map(|e| e.dollars).sum::<Dollars>();
    let test_dollars = initial.dollars + refined.dollars;
    let total = ledger.totals();
    let pcr = pcr(refined.score.metric(config.primary_metric), refined.cost_per_note).ok();
    RunReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config: config.clone(),
        termination: state.termination,
        epochs_completed: state.epochs_completed,
        student_evaluations: state.student_evaluations,
        baseline: state.history[0].score.expect("baseline is scored"),
        best: BestSummary {
            prompt_id: best.prompt_id.clone(),
            prompt_text: state.best_prompt().render(),
            model_ref: best.model_ref.clone(),
            train_score: best.score,
        },
        final_model_ref: state.current_model_ref.clone(),
        rounds: state.history.clone(),
        prompts: state.prompts.clone(),
        test: TestSummary { initial, refined },
        cost: CostSummary {
            total,
            student_dollars: by_role(Role::Student),
            teacher_dollars: by_role(Role::Teacher),
            refinement_dollars: total.dollars - test_dollars,
            test_dollars,
        },
        pcr,
    }
}

/// Output of a finished run.
pub struct RunOutput {
    pub report: RunReport,
    pub session: Session,
    pub state: RunState,
}

/// Runs one symptom start to finish (or from `resume`), handing each
/// checkpoint to `on_checkpoint`.
pub fn run_symptom(
    config: RunConfig,
    inputs: RunInputs<'_>,
    resume: Option<Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint),
) -> Result<RunOutput, RunError> {
    let mut runner = match resume {
        Some(cp) => Runner::resume(cp, inputs)?,
        None => Runner::new(config, inputs)?,
    };
    runner.run_to_end(|r| on_checkpoint(&r.checkpoint()))?;
    let report = runner.finish()?;
    Ok(RunOutput {
        report,
        session: runner.session.clone(),
        state: runner.state.clone(),
    })
}
