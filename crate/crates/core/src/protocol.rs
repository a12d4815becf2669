//! Prompt templates and parsers for every student and teacher exchange.
//!
//! Templates are plain text with `{{name}}` placeholders. Each template kind
//! declares the placeholders it may use; anything else is rejected when the
//! template is loaded, and a missing value is rejected at render time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{ClinicalNote, FineTunePool, PoolItem, SymptomLabel};
use crate::gateway::ChatMessage;
use crate::metrics::ScoreReport;
use crate::vecstore::CrPair;

pub const TEMPLATE_VERSION: &str = "v1";
pub const MAX_RAG_EXAMPLES: usize = 5;
pub const MIN_FT_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("symptom must not be empty")]
    EmptySymptom,
    #[error("template `{template}` uses unknown placeholder `{{{{{placeholder}}}}}`")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("template `{template}` rendered without a value for `{placeholder}`")]
    MissingValue { template: String, placeholder: String },
    #[error("failed to read template `{template}`: {reason}")]
    TemplateIo { template: String, reason: String },
    #[error("no usable RAG examples in teacher output")]
    RagParseFailure,
    #[error("invalid fine-tune selection: {0}")]
    SelectionInvalid(String),
    #[error("invalid fine-tune hyperparameters: {0}")]
    HyperparamsInvalid(String),
    #[error("invalid refined prompt: {0}")]
    RefinedPromptInvalid(String),
    #[error("invalid context-reasoning reply: {0}")]
    CrPairInvalid(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").expect("valid regex"))
}

/// A validated template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
    placeholders: BTreeSet<String>,
}

impl Template {
    pub fn parse(name: &str, text: &str, allowed: &[&str]) -> Result<Self, ProtocolError> {
        let mut placeholders = BTreeSet::new();
        for cap in placeholder_re().captures_iter(text) {
            let key = cap[1].to_string();
            if !allowed.contains(&key.as_str()) {
                return Err(ProtocolError::UnknownPlaceholder {
                    template: name.to_string(),
                    placeholder: key,
                });
            }
            placeholders.insert(key);
        }
        Ok(Self {
            name: name.to_string(),
            text: text.to_string(),
            placeholders,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, ProtocolError> {
        let map: BTreeMap<&str, &str> = values.iter().copied().collect();
        for key in &self.placeholders {
            if !map.contains_key(key.as_str()) {
                return Err(ProtocolError::MissingValue {
                    template: self.name.clone(),
                    placeholder: key.clone(),
                });
            }
        }
        let out = placeholder_re().replace_all(&self.text, |cap: &regex::Captures<'_>| {
            map.get(&cap[1]).copied().unwrap_or_default().to_string()
        });
        Ok(out.trim_end().to_string())
    }
}

struct TemplateDef {
    file: &'static str,
    allowed: &'static [&'static str],
    default: &'static str,
}

const DEF_INITIAL: TemplateDef = TemplateDef {
    file: "initial.txt",
    allowed: &["symptom"],
    default: include_str!("../templates/v1/initial.txt"),
};
const DEF_FORMAT: TemplateDef = TemplateDef {
    file: "student_format.txt",
    allowed: &[],
    default: include_str!("../templates/v1/student_format.txt"),
};
const DEF_REFINEMENT: TemplateDef = TemplateDef {
    file: "refinement.txt",
    allowed: &["symptom", "best_prompt", "inferior_prompts", "score_table", "predictions"],
    default: include_str!("../templates/v1/refinement.txt"),
};
const DEF_RAG: TemplateDef = TemplateDef {
    file: "rag.txt",
    allowed: &["symptom", "refined_prompt", "cr_pairs"],
    default: include_str!("../templates/v1/rag.txt"),
};
const DEF_HYBRID: TemplateDef = TemplateDef {
    file: "hybrid.txt",
    allowed: &[
        "symptom",
        "best_prompt",
        "inferior_prompts",
        "score_table",
        "predictions",
        "action_history",
    ],
    default: include_str!("../templates/v1/hybrid.txt"),
};
const DEF_FT_SELECTION: TemplateDef = TemplateDef {
    file: "ft_selection.txt",
    allowed: &["symptom", "score_table", "predictions", "pool_size", "pool_listing"],
    default: include_str!("../templates/v1/ft_selection.txt"),
};
const DEF_FT_HYPERPARAMS: TemplateDef = TemplateDef {
    file: "ft_hyperparams.txt",
    allowed: &["symptom", "score_table", "selected_samples", "base_model"],
    default: include_str!("../templates/v1/ft_hyperparams.txt"),
};
const DEF_CR_PAIR: TemplateDef = TemplateDef {
    file: "cr_pair.txt",
    allowed: &["symptom", "label_word", "note_text"],
    default: include_str!("../templates/v1/cr_pair.txt"),
};
const DEF_RETRY: TemplateDef = TemplateDef {
    file: "retry.txt",
    allowed: &["error"],
    default: include_str!("../templates/v1/retry.txt"),
};

/// Every template the protocol uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub initial: Template,
    pub student_format: Template,
    pub refinement: Template,
    pub rag: Template,
    pub hybrid: Template,
    pub ft_selection: Template,
    pub ft_hyperparams: Template,
    pub cr_pair: Template,
    pub retry: Template,
}

impl Templates {
    fn build(read: &dyn Fn(&TemplateDef) -> Result<String, ProtocolError>) -> Result<Self, ProtocolError> {
        let load = |def: &TemplateDef| {
            let text = read(def)?;
            Template::parse(def.file.trim_end_matches(".txt"), &text, def.allowed)
        };
        Ok(Self {
            initial: load(&DEF_INITIAL)?,
            student_format: load(&DEF_FORMAT)?,
            refinement: load(&DEF_REFINEMENT)?,
            rag: load(&DEF_RAG)?,
            hybrid: load(&DEF_HYBRID)?,
            ft_selection: load(&DEF_FT_SELECTION)?,
            ft_hyperparams: load(&DEF_FT_HYPERPARAMS)?,
            cr_pair: load(&DEF_CR_PAIR)?,
            retry: load(&DEF_RETRY)?,
        })
    }

    /// Loads templates from `dir`; files that are absent fall back to the
    /// built-in defaults.
    pub fn load_dir(dir: &Path) -> Result<Self, ProtocolError> {
        Self::build(&|def| {
            let path = dir.join(def.file);
            if path.exists() {
                std::fs::read_to_string(&path).map_err(|e| ProtocolError::TemplateIo {
                    template: def.file.to_string(),
                    reason: e.to_string(),
                })
            } else {
                Ok(def.default.to_string())
            }
        })
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::build(&|def| Ok(def.default.to_string())).expect("built-in templates are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Initial,
    PromptRefinement,
    RagGeneration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub id: String,
    pub base_instruction: String,
    pub rag_examples: Vec<String>,
    pub parent_id: Option<String>,
    pub created_by: PromptOrigin,
    /// (epoch, round); the initial prompt is (0, 0).
    pub round_created: (u32, u32),
}

impl PromptArtifact {
    /// Instruction followed by the numbered examples.
    pub fn render(&self) -> String {
        let mut out = self.base_instruction.trim_end().to_string();
        if !self.rag_examples.is_empty() {
            out.push_str("\n\nExamples:");
            for (i, example) in self.rag_examples.iter().enumerate() {
                let _ = write!(out, "\n\nExample {}:\n{}", i + 1, example.trim());
            }
        }
        out
    }
}

pub fn initial_prompt(templates: &Templates, symptom: &str) -> Result<PromptArtifact, ProtocolError> {
    if symptom.trim().is_empty() {
        return Err(ProtocolError::EmptySymptom);
    }
    Ok(PromptArtifact {
        id: "p0".into(),
        base_instruction: templates.initial.render(&[("symptom", symptom)])?,
        rag_examples: Vec::new(),
        parent_id: None,
        created_by: PromptOrigin::Initial,
        round_created: (0, 0),
    })
}

/// System message: prompt plus answer-format block. User message: the note.
pub fn render_student_messages(templates: &Templates, prompt: &PromptArtifact, note: &ClinicalNote) -> Vec<ChatMessage> {
    let format = templates
        .student_format
        .render(&[])
        .expect("format template has no placeholders");
    vec![
        ChatMessage::system(format!("{}\n\n{}", prompt.render(), format)),
        ChatMessage::user(note.text.clone()),
    ]
}

/// The JSON reply shape students are asked for.
pub fn render_student_output(label: SymptomLabel, reasoning: &str) -> String {
    serde_json::json!({"label": label.as_word(), "reasoning": reasoning}).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StudentOutput {
    Labeled { label: SymptomLabel, reasoning: String },
    Unparseable,
}

impl StudentOutput {
    pub fn label(&self) -> Option<SymptomLabel> {
        match self {
            StudentOutput::Labeled { label, .. } => Some(*label),
            StudentOutput::Unparseable => None,
        }
    }
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        return rest.trim_end().trim_end_matches("```").trim();
    }
    t
}

/// First JSON value starting at the first `open` byte, ignoring trailing
/// prose.
fn first_json(raw: &str, open: char) -> Option<Value> {
    let text = strip_fences(raw);
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        if (open == '{' && v.is_object()) || (open == '[' && v.is_array()) {
            return Some(v);
        }
    }
    for (start, _) in text.match_indices(open) {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

fn lenient_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\W_]*(yes|no|idk)\b").expect("valid regex"))
}

/// Strict JSON first, then a leading yes/no/idk token on the first line.
pub fn parse_student_output(raw: &str) -> StudentOutput {
    if let Some(Value::Object(obj)) = first_json(raw, '{') {
        if let Some(label) = obj.get("label").and_then(Value::as_str).and_then(SymptomLabel::from_word) {
            let reasoning = obj
                .get("reasoning")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            return StudentOutput::Labeled { label, reasoning };
        }
    }
    let trimmed = raw.trim_start();
    let first_line = trimmed.lines().next().unwrap_or_default();
    if let Some(cap) = lenient_label_re().captures(first_line) {
        let token = cap.get(1).expect("group matched");
        let label = SymptomLabel::from_word(token.as_str()).expect("regex only matches label words");
        let mut rest = &trimmed[token.end()..];
        rest = rest.trim_start_matches(|c: char| c.is_whitespace() || ".,:;!-)*_\"'".contains(c));
        return StudentOutput::Labeled {
            label,
            reasoning: rest.trim_end().to_string(),
        };
    }
    StudentOutput::Unparseable
}

/// One prediction as shown to the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub note_id: String,
    pub truth: SymptomLabel,
    pub predicted: Option<SymptomLabel>,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedPrompt {
    pub prompt: PromptArtifact,
    pub score: ScoreReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    PromptRefinement,
    #[serde(rename = "finetuning")]
    FineTuning,
}

impl Action {
    pub fn token(self) -> &'static str {
        match self {
            Action::PromptRefinement => "@prompt_refinement",
            Action::FineTuning => "@finetuning",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionHistoryRow {
    pub epoch: u32,
    pub round: u32,
    pub action: Action,
    pub score: Option<ScoreReport>,
    pub improved: bool,
    pub aborted: Option<String>,
}

/// Everything the teacher is shown about the run so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherView {
    pub symptom: String,
    pub best: EvaluatedPrompt,
    pub inferior: Vec<EvaluatedPrompt>,
    pub predictions: Vec<PredictionRow>,
    pub actions: Vec<ActionHistoryRow>,
}

fn label_cell(label: Option<SymptomLabel>) -> &'static str {
    label.map(SymptomLabel::as_word).unwrap_or("unparseable")
}

pub fn render_score_table(view: &TeacherView) -> String {
    let mut out = String::from("| prompt | accuracy | macro_f1 | notes |\n|---|---|---|---|");
    let mut row = |id: &str, tag: &str, s: &ScoreReport| {
        let _ = write!(out, "\n| {id}{tag} | {:.4} | {:.4} | {} |", s.accuracy, s.macro_f1, s.n);
    };
    row(&view.best.prompt.id, " (best)", &view.best.score);
    for p in &view.inferior {
        row(&p.prompt.id, "", &p.score);
    }
    out
}

pub fn render_predictions(rows: &[PredictionRow]) -> String {
    if rows.is_empty() {
        return "(no predictions)".into();
    }
    rows.iter()
        .map(|r| {
            format!(
                "- note {}: ground truth = {}, LLM2 output = {}, reasoning: {}",
                r.note_id,
                r.truth.as_word(),
                label_cell(r.predicted),
                one_line(&r.reasoning)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn one_line(text: &str) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if joined.is_empty() {
        "(none)".into()
    } else {
        joined
    }
}

fn render_inferior(view: &TeacherView) -> String {
    if view.inferior.is_empty() {
        return "(none yet)".into();
    }
    view.inferior
        .iter()
        .map(|p| {
            format!(
                "[{}] accuracy {:.4}, macro_f1 {:.4}\n{}",
                p.prompt.id,
                p.score.accuracy,
                p.score.macro_f1,
                p.prompt.render()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_action_history(rows: &[ActionHistoryRow]) -> String {
    if rows.is_empty() {
        return "none yet".into();
    }
    rows.iter()
        .map(|r| {
            let outcome = match (&r.aborted, &r.score) {
                (Some(reason), _) => format!("aborted ({reason})"),
                (None, Some(s)) => format!(
                    "accuracy {:.4}, macro_f1 {:.4}{}",
                    s.accuracy,
                    s.macro_f1,
                    if r.improved { " (improved)" } else { " (no improvement)" }
                ),
                (None, None) => "no score".into(),
            };
            format!("- epoch {} round {}: {} -> {}", r.epoch, r.round, r.action.token(), outcome)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_refinement_instruction(templates: &Templates, view: &TeacherView) -> Result<Vec<ChatMessage>, ProtocolError> {
    let text = templates.refinement.render(&[
        ("symptom", &view.symptom),
        ("best_prompt", &view.best.prompt.render()),
        ("inferior_prompts", &render_inferior(view)),
        ("score_table", &render_score_table(view)),
        ("predictions", &render_predictions(&view.predictions)),
    ])?;
    Ok(vec![ChatMessage::user(text)])
}

/// One pair per note id, ordered by note id.
pub fn dedup_pairs(pairs: Vec<CrPair>) -> Vec<CrPair> {
    let mut by_id = BTreeMap::new();
    for pair in pairs {
        by_id.entry(pair.note_id.clone()).or_insert(pair);
    }
    by_id.into_values().collect()
}

pub fn render_cr_pairs(pairs: &[CrPair]) -> String {
    pairs
        .iter()
        .map(|p| {
            format!(
                "- note {} (label: {})\n  context: \"{}\"\n  reasoning: {}",
                p.note_id,
                p.label.as_word(),
                one_line(&p.context),
                one_line(&p.reasoning)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Continues the refinement conversation: the earlier instruction, the
/// teacher's refined prompt, then the RAG request.
pub fn build_rag_instruction(
    templates: &Templates,
    symptom: &str,
    refinement_messages: &[ChatMessage],
    refined_reply: &str,
    refined_prompt: &str,
    pairs: &[CrPair],
) -> Result<Vec<ChatMessage>, ProtocolError> {
    let text = templates.rag.render(&[
        ("symptom", symptom),
        ("refined_prompt", refined_prompt),
        ("cr_pairs", &render_cr_pairs(pairs)),
    ])?;
    let mut messages = refinement_messages.to_vec();
    messages.push(ChatMessage::assistant(refined_reply));
    messages.push(ChatMessage::user(text));
    Ok(messages)
}

pub fn build_hybrid_instruction(templates: &Templates, view: &TeacherView) -> Result<Vec<ChatMessage>, ProtocolError> {
    let text = templates.hybrid.render(&[
        ("symptom", &view.symptom),
        ("best_prompt", &view.best.prompt.render()),
        ("inferior_prompts", &render_inferior(view)),
        ("score_table", &render_score_table(view)),
        ("predictions", &render_predictions(&view.predictions)),
        ("action_history", &render_action_history(&view.actions)),
    ])?;
    Ok(vec![ChatMessage::user(text)])
}

pub fn build_retry_message(templates: &Templates, messages: &[ChatMessage], reply: &str, error: &str) -> Vec<ChatMessage> {
    let mut out = messages.to_vec();
    out.push(ChatMessage::assistant(reply));
    out.push(ChatMessage::user(
        templates
            .retry
            .render(&[("error", error)])
            .expect("retry template renders"),
    ));
    out
}

/// Accepts the text between `<prompt>` tags, else the whole reply.
pub fn parse_refined_prompt(raw: &str) -> Result<String, ProtocolError> {
    let body = match (raw.find("<prompt>"), raw.rfind("</prompt>")) {
        (Some(start), Some(end)) if end > start => &raw[start + "<prompt>".len()..end],
        _ => strip_fences(raw),
    };
    let body = body.trim();
    if body.is_empty() {
        return Err(ProtocolError::RefinedPromptInvalid("empty prompt".into()));
    }
    Ok(body.to_string())
}

fn example_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s>*#_]*example\s*#?\s*\d+\s*[*_]*\s*[:.)\-]?[*_]*[ \t]*").expect("valid regex"))
}

fn numbered_item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*\d+[.)][ \t]+").expect("valid regex"))
}

fn split_blocks(text: &str, re: &Regex) -> Vec<String> {
    let starts: Vec<(usize, usize)> = re.find_iter(text).map(|m| (m.start(), m.end())).collect();
    let mut out = Vec::new();
    for (i, &(_, body_start)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map(|s| s.0).unwrap_or(text.len());
        let body = text[body_start..end].trim();
        if !body.is_empty() {
            out.push(body.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RagExamples {
    pub examples: Vec<String>,
    /// Number of extra examples dropped beyond the limit.
    pub dropped: usize,
}

/// "Example N:" blocks, a JSON array of strings, or a numbered list.
pub fn parse_rag_examples(raw: &str) -> Result<RagExamples, ProtocolError> {
    let mut examples = split_blocks(raw, example_header_re());
    if examples.is_empty() {
        if let Some(Value::Array(items)) = first_json(raw, '[') {
            examples = items
                .iter()
                .filter_map(Value::as_str)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }
    }
    if examples.is_empty() {
        examples = split_blocks(raw, numbered_item_re());
    }
    if examples.is_empty() {
        return Err(ProtocolError::RagParseFailure);
    }
    let dropped = examples.len().saturating_sub(MAX_RAG_EXAMPLES);
    if dropped > 0 {
        tracing::warn!(dropped, "teacher returned more than {MAX_RAG_EXAMPLES} examples; keeping the first {MAX_RAG_EXAMPLES}");
        examples.truncate(MAX_RAG_EXAMPLES);
    }
    Ok(RagExamples { examples, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDecision {
    pub action: Action,
    pub explanation: String,
    pub fallback_applied: bool,
}

/// Never fails: unusable replies fall back to prompt refinement.
pub fn parse_decision(raw: &str) -> TeacherDecision {
    let parsed = first_json(raw, '{').and_then(|v| {
        let action = v.get("action")?.as_str()?;
        let normalized = action
            .trim()
            .trim_start_matches('@')
            .to_ascii_lowercase()
            .replace(['-', ' '], "_");
        let action = match normalized.as_str() {
            "prompt_refinement" => Action::PromptRefinement,
            "finetuning" | "fine_tuning" => Action::FineTuning,
            _ => return None,
        };
        let explanation = v
            .get("explanation")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        Some((action, explanation))
    });
    match parsed {
        Some((action, explanation)) => TeacherDecision {
            action,
            explanation,
            fallback_applied: false,
        },
        None => {
            tracing::warn!(raw = %raw, "unparseable teacher decision; falling back to prompt refinement");
            TeacherDecision {
                action: Action::PromptRefinement,
                explanation: format!("fallback: could not parse teacher decision: {}", one_line(raw)),
                fallback_applied: true,
            }
        }
    }
}

fn integer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub out_of_range: Vec<i64>,
    pub duplicates: usize,
}

/// Integer list from the first `[...]` in the reply; duplicates and
/// out-of-range indices are removed before the minimum-count check.
pub fn parse_ft_selection(raw: &str, pool: &FineTunePool) -> Result<Selection, ProtocolError> {
    let list = match (raw.find('['), raw[raw.find('[').unwrap_or(0)..].find(']')) {
        (Some(start), Some(len)) => &raw[start + 1..start + len],
        _ => return Err(ProtocolError::SelectionInvalid("no index list found".into())),
    };
    let mut seen = HashSet::new();
    let mut indices = Vec::new();
    let mut out_of_range = Vec::new();
    let mut duplicates = 0;
    for m in integer_re().find_iter(list) {
        let value: i64 = match m.as_str().parse() {
            Ok(v) => v,
            Err(_) => {
                out_of_range.push(i64::MAX);
                continue;
            }
        };
        if value < 0 || value as u64 >= pool.len() as u64 {
            out_of_range.push(value);
            continue;
        }
        if seen.insert(value) {
            indices.push(value as usize);
        } else {
            duplicates += 1;
        }
    }
    if !out_of_range.is_empty() {
        tracing::warn!(?out_of_range, pool = pool.len(), "dropping out-of-range fine-tune indices");
    }
    if indices.len() < MIN_FT_SAMPLES {
        return Err(ProtocolError::SelectionInvalid(format!(
            "{} valid unique indices, at least {MIN_FT_SAMPLES} required",
            indices.len()
        )));
    }
    Ok(Selection {
        indices,
        out_of_range,
        duplicates,
    })
}

pub const HYPERPARAM_FIELDS: [&str; 13] = [
    "learning_rate",
    "per_device_train_batch_size",
    "num_train_epochs",
    "gradient_accumulation_steps",
    "lora_r",
    "lora_alpha",
    "lora_dropout",
    "max_grad_norm",
    "weight_decay",
    "lr_scheduler_type",
    "warmup_ratio",
    "optimizer",
    "target_modules",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneHyperparams {
    pub learning_rate: f64,
    pub per_device_train_batch_size: u32,
    pub num_train_epochs: u32,
    pub gradient_accumulation_steps: u32,
    pub lora_r: u32,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub lr_scheduler_type: String,
    pub warmup_ratio: f64,
    pub optimizer: String,
    pub target_modules: Vec<String>,
}

impl FineTuneHyperparams {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let fail = |msg: String| Err(ProtocolError::HyperparamsInvalid(msg));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lora_alpha", self.lora_alpha),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        let counts = [
            ("per_device_train_batch_size", self.per_device_train_batch_size),
            ("num_train_epochs", self.num_train_epochs),
            ("gradient_accumulation_steps", self.gradient_accumulation_steps),
            ("lora_r", self.lora_r),
        ];
        for (name, v) in counts {
            if v < 1 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !(self.lora_dropout.is_finite() && (0.0..1.0).contains(&self.lora_dropout)) {
            return fail(format!("lora_dropout must be in [0, 1), got {}", self.lora_dropout));
        }
        if !(self.warmup_ratio.is_finite() && (0.0..=1.0).contains(&self.warmup_ratio)) {
            return fail(format!("warmup_ratio must be in [0, 1], got {}", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_scheduler_type.trim().is_empty() {
            return fail("lr_scheduler_type must not be empty".into());
        }
        if self.optimizer.trim().is_empty() {
            return fail("optimizer must not be empty".into());
        }
        if self.target_modules.is_empty() || self.target_modules.iter().any(|m| m.trim().is_empty()) {
            return fail("target_modules must be a non-empty list of names".into());
        }
        Ok(())
    }
}

pub fn parse_ft_hyperparams(raw: &str) -> Result<FineTuneHyperparams, ProtocolError> {
    let value = first_json(raw, '{').ok_or_else(|| ProtocolError::HyperparamsInvalid("no JSON object found".into()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::HyperparamsInvalid("not a JSON object".into()))?;
    let missing: Vec<&str> = HYPERPARAM_FIELDS.iter().copied().filter(|f| !obj.contains_key(*f)).collect();
    if !missing.is_empty() {
        return Err(ProtocolError::HyperparamsInvalid(format!("missing field(s): {}", missing.join(", "))));
    }
    let params: FineTuneHyperparams =
        serde_json::from_value(value).map_err(|e| ProtocolError::HyperparamsInvalid(e.to_string()))?;
    params.validate()?;
    Ok(params)
}

/// Reply to a context-reasoning extraction request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrReply {
    pub context: String,
    pub reasoning: String,
}

pub fn parse_cr_reply(raw: &str) -> Result<CrReply, ProtocolError> {
    let value = first_json(raw, '{').ok_or_else(|| ProtocolError::CrPairInvalid("no JSON object found".into()))?;
    let field = |name: &str| {
        value
            .get(name)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .ok_or_else(|| ProtocolError::CrPairInvalid(format!("missing or empty `{name}`")))
    };
    Ok(CrReply {
        context: field("context")?,
        reasoning: field("reasoning")?,
    })
}

pub fn build_cr_instruction(templates: &Templates, note: &ClinicalNote) -> Result<Vec<ChatMessage>, ProtocolError> {
    let text = templates.cr_pair.render(&[
        ("symptom", &note.symptom),
        ("label_word", note.truth.as_word()),
        ("note_text", &note.text),
    ])?;
    Ok(vec![ChatMessage::user(text)])
}

const POOL_PREVIEW_CHARS: usize = 160;

fn preview(text: &str) -> String {
    let line = one_line(text);
    if line.chars().count() <= POOL_PREVIEW_CHARS {
        line
    } else {
        let cut: String = line.chars().take(POOL_PREVIEW_CHARS).collect();
        format!("{cut}...")
    }
}

pub fn render_pool_listing(pool: &FineTunePool) -> String {
    pool.entries()
        .iter()
        .map(|e| match &e.item {
            PoolItem::Mmlu(r) => format!("[{}] mmlu/{}: {} => {}", e.index, r.category, preview(&r.question), preview(&r.answer)),
            PoolItem::ContextReasoning(c) => format!(
                "[{}] context_reasoning/{} ({}): \"{}\" => {}",
                e.index,
                c.symptom,
                c.pair.label.as_word(),
                preview(&c.pair.context),
                preview(&c.pair.reasoning)
            ),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_selection_instruction(templates: &Templates, view: &TeacherView, pool: &FineTunePool) -> Result<Vec<ChatMessage>, ProtocolError> {
    let text = templates.ft_selection.render(&[
        ("symptom", &view.symptom),
        ("score_table", &render_score_table(view)),
        ("predictions", &render_predictions(&view.predictions)),
        ("pool_size", &pool.len().to_string()),
        ("pool_listing", &render_pool_listing(pool)),
    ])?;
    Ok(vec![ChatMessage::user(text)])
}

pub fn build_hyperparams_instruction(
    templates: &Templates,
    view: &TeacherView,
    base_model: &str,
    samples: &[String],
) -> Result<Vec<ChatMessage>, ProtocolError> {
    let listing = samples.iter().map(|s| format!("- {}", preview(s))).collect::<Vec<_>>().join("\n");
    let text = templates.ft_hyperparams.render(&[
        ("symptom", &view.symptom),
        ("score_table", &render_score_table(view)),
        ("selected_samples", &listing),
        ("base_model", base_model),
    ])?;
    Ok(vec![ChatMessage::user(text)])
}
