//! Synthetic fixtures and simulated student/teacher backends.
//!
//! Every fixture note carries one evidence sentence built from a phrasing
//! family ("Patient denies ...", "Patient complains of ..."). The simulated
//! student labels a note correctly at a low base rate unless its system
//! prompt contains an example using that note's phrasing, which is what
//! grounded RAG examples provide. Both backends are pure functions of the
//! request, so runs against them are reproducible.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use crate::corpus::{ClinicalNote, MmluRecord, Split, SymptomCatalog, SymptomLabel};
use crate::gateway::{BackendError, ChatBackend, ChatRequest, ChatResponse, ChatRole};
use crate::orchestrator::slug;
use crate::protocol;

/// Phrasing families: (sentence opening, label it implies).
pub const FAMILIES: [(&str, SymptomLabel); 5] = [
    ("Patient complains of", SymptomLabel::Present),
    ("Patient reports ongoing", SymptomLabel::Present),
    ("Patient denies", SymptomLabel::Absent),
    ("Exam shows no evidence of", SymptomLabel::Absent),
    ("Patient was not assessed for", SymptomLabel::Unknown),
];

const FILLERS: [&str; 12] = [
    "Follow-up visit after external beam radiotherapy to the prostate.",
    "PSA remains undetectable.",
    "Bowel habits are unchanged.",
    "Vital signs are within normal limits.",
    "Continue current medications.",
    "Return to clinic in six months.",
    "Patient is ambulating independently.",
    "Discussed diet and hydration.",
    "Energy level is good and weight is stable.",
    "Androgen deprivation therapy was completed last year.",
    "Reviewed recent imaging with the patient.",
    "Sleep has been adequate.",
];

fn unit(parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_be_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub catalog: SymptomCatalog,
    pub train_per_symptom: usize,
    pub test_per_symptom: usize,
    /// Use 15 train / 4 test for Urothelial Carcinoma.
    pub reference_shape: bool,
    pub mmlu_records: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            catalog: SymptomCatalog::default(),
            train_per_symptom: 20,
            test_per_symptom: 5,
            reference_shape: false,
            mmlu_records: 1225,
            seed: 0,
        }
    }
}

pub fn evidence_sentence(family: usize, symptom: &str) -> String {
    format!("{} {}.", FAMILIES[family].0, symptom.to_lowercase())
}

/// The phrasing family whose opening appears in `text`, if any.
pub fn family_of(text: &str) -> Option<usize> {
    FAMILIES.iter().position(|(cue, _)| text.contains(cue))
}

fn note_text(rng: &mut ChaCha8Rng, family: usize, symptom: &str) -> String {
    let n_fill = rng.gen_range(2..=4);
    let mut sentences: Vec<String> = FILLERS.choose_multiple(rng, n_fill).map(|s| s.to_string()).collect();
    let at = rng.gen_range(0..=sentences.len());
    sentences.insert(at, evidence_sentence(family, symptom));
    sentences.join(" ")
}

/// Notes for every catalog symptom. Families are spread evenly over each
/// split, then shuffled.
pub fn generate_notes(spec: &FixtureSpec) -> Vec<ClinicalNote> {
    let mut notes = Vec::new();
    for symptom in spec.catalog.names() {
        let (train, test) = if spec.reference_shape && symptom == "Urothelial Carcinoma" {
            (15, 4)
        } else {
            (spec.train_per_symptom, spec.test_per_symptom)
        };
        for (split, count) in [(Split::Train, train), (Split::Test, test)] {
            let split_name = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let mut rng = rng_for(spec.seed, &format!("{symptom}/{split_name}"));
            let mut families: Vec<usize> = (0..count).map(|i| i % FAMILIES.len()).collect();
            families.shuffle(&mut rng);
            for (i, family) in families.into_iter().enumerate() {
                notes.push(ClinicalNote {
                    id: format!("{}-{split_name}-{:02}", slug(symptom), i + 1),
                    text: note_text(&mut rng, family, symptom),
                    symptom: symptom.clone(),
                    truth: FAMILIES[family].1,
                    split,
                });
            }
        }
    }
    notes
}

const MMLU_CATEGORIES: [&str; 6] = [
    "anatomy",
    "clinical_knowledge",
    "college_biology",
    "college_medicine",
    "medical_genetics",
    "professional_medicine",
];

const MMLU_STEMS: [(&str, &str); 6] = [
    ("Which structure is most at risk of injury during treatment of region {n}?", "The structure nearest to region {n}."),
    ("A patient presents with finding {n}. What is the most likely diagnosis?", "Diagnosis {n}, based on the presenting finding."),
    ("Which enzyme is rate limiting in pathway {n}?", "Enzyme {n} of the pathway."),
    ("What is the first-line management for condition {n}?", "Supportive care followed by therapy {n}."),
    ("Which inheritance pattern explains pedigree {n}?", "Pattern {n}, given the affected generations."),
    ("Which drug interaction is expected with agent {n}?", "Reduced clearance of agent {n}."),
];

pub fn generate_mmlu(count: usize, seed: u64) -> Vec<MmluRecord> {
    let mut rng = rng_for(seed, "mmlu");
    (0..count)
        .map(|i| {
            let c = i % MMLU_CATEGORIES.len();
            let (q, a) = MMLU_STEMS[c];
            let n = rng.gen_range(1..1000).to_string();
            MmluRecord {
                index: i as u64,
                question: q.replace("{n}", &n),
                answer: a.replace("{n}", &n),
                category: MMLU_CATEGORIES[c].to_string(),
            }
        })
        .collect()
}

pub fn mmlu_to_jsonl(records: &[MmluRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn ft_level(backend_ref: &str) -> u32 {
    backend_ref
        .rsplit_once("+ft")
        .and_then(|(_, n)| n.parse().ok())
        .unwrap_or(0)
}

/// Simulated student.
#[derive(Debug, Clone)]
pub struct SimStudent {
    truths: HashMap<String, SymptomLabel>,
    pub seed: u64,
    /// Chance of a correct label without a matching example.
    pub base_rate: f64,
    /// Chance of a correct label when the prompt shows the note's phrasing.
    pub guided_rate: f64,
    /// Added to the base rate per fine-tuning generation.
    pub finetune_gain: f64,
    /// Share of answers given as free text instead of JSON.
    pub free_text_rate: f64,
    pub latency_seconds: f64,
}

impl SimStudent {
    pub fn new<'a>(notes: impl IntoIterator<Item = &'a ClinicalNote>, seed: u64) -> Self {
        Self {
            truths: notes.into_iter().map(|n| (n.text.clone(), n.truth)).collect(),
            seed,
            base_rate: 0.4,
            guided_rate: 0.95,
            finetune_gain: 0.1,
            free_text_rate: 0.1,
            latency_seconds: 0.8,
        }
    }

    fn answer(&self, request: &ChatRequest) -> String {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == ChatRole::System)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let note = request.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        let Some(&truth) = self.truths.get(note) else {
            return protocol::render_student_output(SymptomLabel::Unknown, "The note is not one I recognize.");
        };
        let seed = self.seed.to_string();
        let family = family_of(note);
        let guided = family.is_some_and(|f| system.contains(FAMILIES[f].0));
        let level = ft_level(&request.backend_ref);
        let rate = if guided {
            self.guided_rate
        } else {
            (self.base_rate + self.finetune_gain * level as f64).min(self.guided_rate)
        };
        let label = if unit(&[&seed, "correct", note]) < rate {
            truth
        } else {
            let others: Vec<SymptomLabel> = SymptomLabel::ALL.into_iter().filter(|l| *l != truth).collect();
            others[(unit(&[&seed, "wrong", note]) * 2.0) as usize % 2]
        };
        let evidence = family
            .and_then(|f| note.split(". ").find(|s| s.contains(FAMILIES[f].0)))
            .unwrap_or("the note")
            .trim_end_matches('.');
        let reasoning = format!("Based on \"{evidence}\".");
        if unit(&[&seed, "format", note, &request.backend_ref]) < self.free_text_rate {
            let word = label.as_word();
            let mut cap = word.to_string();
            cap[..1].make_ascii_uppercase();
            format!("{cap}. {reasoning}")
        } else {
            protocol::render_student_output(label, &reasoning)
        }
    }
}

impl ChatBackend for SimStudent {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut resp = ChatResponse::text(self.answer(request));
        resp.elapsed_seconds = self.latency_seconds;
        Ok(resp)
    }
}

fn re(pattern: &'static str, cell: &'static OnceLock<Regex>) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

/// Simulated teacher that recognizes each instruction by its opening line.
#[derive(Debug, Clone)]
pub struct SimTeacher {
    pub seed: u64,
    /// Chance that a first RAG reply is prose and needs the retry.
    pub rag_prose_rate: f64,
    pub latency_seconds: f64,
}

impl SimTeacher {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rag_prose_rate: 0.1,
            latency_seconds: 2.0,
        }
    }

    fn answer(&self, request: &ChatRequest) -> String {
        let msgs = &request.messages;
        let last = msgs.last().map(|m| m.content.as_str()).unwrap_or_default();
        if last.starts_with("Your previous reply could not be used") && msgs.len() >= 3 {
            return self.task(&msgs[msgs.len() - 3].content, true);
        }
        self.task(last, false)
    }

    fn task(&self, text: &str, retried: bool) -> String {
        let seed = self.seed.to_string();
        if text.starts_with("You are annotating clinical notes") {
            return cr_reply(text);
        }
        if text.starts_with("Your task is to prompt engineer") {
            return refined_prompt(text, &seed);
        }
        if text.starts_with("Now that you have refined the prompt") {
            if !retried && unit(&[&seed, "rag-prose", text]) < self.rag_prose_rate {
                return "The refined prompt already covers the main phrasings, so I suggest keeping it as is.".into();
            }
            return rag_examples(text);
        }
        if text.starts_with("Your task is to act as an intelligent agent") {
            return decision(text);
        }
        if text.starts_with("Select specific samples") {
            return selection(text);
        }
        if text.starts_with("Provide hyperparameters") {
            return serde_json::json!({
                "learning_rate": 0.0002,
                "per_device_train_batch_size": 4,
                "num_train_epochs": 3,
                "gradient_accumulation_steps": 2,
                "lora_r": 16,
                "lora_alpha": 32,
                "lora_dropout": 0.05,
                "max_grad_norm": 1.0,
                "weight_decay": 0.01,
                "lr_scheduler_type": "cosine",
                "warmup_ratio": 0.1,
                "optimizer": "adamw_torch",
                "target_modules": ["q_proj", "k_proj", "v_proj", "o_proj"]
            })
            .to_string();
        }
        "<prompt>\nAnswer yes, no or idk for the target symptom in the clinical note.\n</prompt>".into()
    }
}

impl ChatBackend for SimTeacher {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut resp = ChatResponse::text(self.answer(request));
        resp.elapsed_seconds = self.latency_seconds;
        Ok(resp)
    }
}

fn cr_reply(text: &str) -> String {
    static LABEL: OnceLock<Regex> = OnceLock::new();
    let label = re(r#"label of the note below is "(\w+)""#, &LABEL)
        .captures(text)
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| "idk".into());
    let note = text
        .split("### Note\n")
        .nth(1)
        .and_then(|rest| rest.split("\n\nRespond with").next())
        .unwrap_or_default();
    let context = note
        .split_inclusive(". ")
        .map(str::trim)
        .find(|s| family_of(s).is_some())
        .unwrap_or(note.trim())
        .to_string();
    let meaning = match label.as_str() {
        "yes" => "the symptom is present",
        "no" => "the symptom is negated or absent",
        _ => "its status cannot be determined",
    };
    serde_json::json!({
        "context": context,
        "reasoning": format!("The note states \"{}\", so {meaning}.", context.trim_end_matches('.')),
    })
    .to_string()
}

fn refined_prompt(text: &str, seed: &str) -> String {
    const VARIANTS: [&str; 3] = [
        "Read the clinical note and decide whether it documents the symptom of {s}. Answer yes if the symptom is present, no if it is negated or absent, and idk if its status is unclear.",
        "You label clinical notes for the symptom of {s}. Give yes when the note affirms it, no when the note rules it out, and idk when the note leaves it undetermined.",
        "Decide whether the note affirms, rules out, or leaves undetermined the symptom of {s}. Reply yes, no, or idk accordingly and cite the sentence you relied on.",
    ];
    static SYMPTOM: OnceLock<Regex> = OnceLock::new();
    let symptom = re(r"(?m)^Target symptom: (.+)$", &SYMPTOM)
        .captures(text)
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default();
    let pick = (unit(&[seed, "refine", text]) * VARIANTS.len() as f64) as usize % VARIANTS.len();
    format!("Here is the improved prompt.\n<prompt>\n{}\n</prompt>", VARIANTS[pick].replace("{s}", &symptom))
}

fn rag_examples(text: &str) -> String {
    static PAIR: OnceLock<Regex> = OnceLock::new();
    let pair = re(
        r#"(?m)^- note (\S+) \(label: (\w+)\)\n  context: "(.*)"\n  reasoning: (.*)$"#,
        &PAIR,
    );
    let mut seen = BTreeSet::new();
    let mut examples = Vec::new();
    for cap in pair.captures_iter(text) {
        let context = cap[3].to_string();
        let key = family_of(&context).map(|f| f.to_string()).unwrap_or_else(|| context.clone());
        if !seen.insert(key) {
            continue;
        }
        examples.push(format!(
            "Note excerpt: \"{context}\"\nAnswer: {}\nReasoning: {}",
            &cap[2], &cap[4]
        ));
        if examples.len() == protocol::MAX_RAG_EXAMPLES {
            break;
        }
    }
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| format!("Example {}:\n{e}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn decision(text: &str) -> String {
    let history = text
        .split("### Action history\n")
        .nth(1)
        .and_then(|h| h.split("\n\n").next())
        .unwrap_or_default();
    let rows: Vec<&str> = history.lines().filter(|l| l.starts_with("- epoch")).collect();
    let stalled = rows.len() >= 2
        && rows[rows.len() - 2..]
            .iter()
            .all(|r| r.contains("@prompt_refinement") && !r.contains("(improved)"));
    let (action, why) = if stalled {
        ("@finetuning", "the last prompt refinements did not improve the score")
    } else {
        ("@prompt_refinement", "the errors look like phrasing the prompt can address")
    };
    serde_json::json!({"action": action, "explanation": why}).to_string()
}

fn selection(text: &str) -> String {
    static SYMPTOM: OnceLock<Regex> = OnceLock::new();
    static ENTRY: OnceLock<Regex> = OnceLock::new();
    let symptom = re(r"(?m)^Target symptom: (.+)$", &SYMPTOM)
        .captures(text)
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default();
    let mut cr = Vec::new();
    let mut mmlu = Vec::new();
    for cap in re(r"(?m)^\[(\d+)\] (mmlu|context_reasoning)/([^:(]+)", &ENTRY).captures_iter(text) {
        let index: usize = cap[1].parse().unwrap_or_default();
        if &cap[2] == "context_reasoning" {
            if cap[3].trim() == symptom {
                cr.push(index);
            }
        } else {
            mmlu.push(index);
        }
    }
    let mut chosen: Vec<usize> = cr.into_iter().take(8).collect();
    let need = 12usize.saturating_sub(chosen.len());
    chosen.extend(mmlu.into_iter().take(need));
    serde_json::to_string(&chosen).expect("indices serialize")
}
