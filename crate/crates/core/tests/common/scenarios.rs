#![allow(dead_code)]
//! Scenario checks shared by the integration tests and the acceptance
//! target. Each returns a one-line detail on success.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use symrefine::corpus::{SymptomCatalog, SymptomLabel};
use symrefine::costing::{
    energy_cost, token_cost, Charge, CostLedger, Dollars, EnergyProfile, PriceProfile, Role, UsageSource,
};
use symrefine::gateway::{
    BackendError, Cassette, ChatBackend, ChatRequest, ChatResponse, FailureKind, Gateway, ScriptedBackend,
    TranscriptEntry,
};
use symrefine::metrics::{score, ConfusionMatrix3};
use symrefine::orchestrator::{run_symptom, RunReport, Runner, Termination};
use symrefine::protocol::{self, Action, HYPERPARAM_FIELDS};
use symrefine::report::{build_tables, tables_csv};
use symrefine::sim::{FixtureSpec, SimStudent, SimTeacher};
use symrefine::strategies::{FineTuneExecutor, FineTuneJobSpec, JobHandle, JobStatus, MockExecutor, RunMode};
use symrefine::vecstore::{EmbeddingVector, StoreEntry, VectorStore};

use super::oracles;
use super::*;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    }};
}

fn hash_of<T: Hash>(value: T) -> u64 {
    let mut h = DefaultHasher::new();
    value.hash(&mut h);
    h.finish()
}

fn unit<T: Hash>(value: T) -> f64 {
    (hash_of(value) >> 11) as f64 / (1u64 << 53) as f64
}

fn student_entries(entries: &[TranscriptEntry]) -> Vec<&TranscriptEntry> {
    entries.iter().filter(|e| e.role == Role::Student).collect()
}

fn last_message(e: &TranscriptEntry) -> &str {
    e.messages.last().map(|m| m.content.as_str()).unwrap_or_default()
}

fn json_label(label: SymptomLabel) -> String {
    protocol::render_student_output(label, "scripted")
}

/// Student that answers `truth` when `correct(system_prompt, note)` holds
/// and a wrong label otherwise.
fn scripted_student<F>(fx: &Fixture, correct: F) -> ScriptedBackend
where
    F: Fn(&str, &str) -> bool + Send + Sync + 'static,
{
    let truths: HashMap<String, SymptomLabel> = fx.dataset.notes().iter().map(|n| (n.text.clone(), n.truth)).collect();
    ScriptedBackend::new(move |req, _| {
        let system = req.messages.first().map(|m| m.content.as_str()).unwrap_or_default();
        let note = req.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        let truth = truths[note];
        let label = if correct(system, note) {
            truth
        } else {
            match truth {
                SymptomLabel::Present => SymptomLabel::Absent,
                _ => SymptomLabel::Present,
            }
        };
        Ok(ChatResponse::text(json_label(label)))
    })
}

pub fn small_fixture(seed: u64) -> Fixture {
    Fixture::with_spec(FixtureSpec {
        catalog: SymptomCatalog::new(["Dysuria"]).unwrap(),
        mmlu_records: 40,
        seed,
        ..FixtureSpec::default()
    })
}

fn random_teacher(seed: u64, pool_len: usize) -> ScriptedBackend {
    ScriptedBackend::new(move |req, call| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(call));
        if rng.gen_bool(0.03) {
            return Err(BackendError::new(FailureKind::Server, "scripted outage"));
        }
        let text = last_message_of(req);
        let reply = if text.starts_with("Your task is to prompt engineer") {
            if rng.gen_bool(0.9) {
                format!("<prompt>Label the note for the symptom. Variant {}.</prompt>", rng.gen_range(0..6))
            } else {
                "   ".to_string()
            }
        } else if text.starts_with("Now that you have refined") {
            if rng.gen_bool(0.7) {
                "Example 1:\nPatient denies it.\nAnswer: no\n\nExample 2:\nPatient complains of it.\nAnswer: yes".to_string()
            } else {
                "No examples needed.".to_string()
            }
        } else if text.starts_with("Your task is to act as an intelligent agent") {
            match rng.gen_range(0..4) {
                0 => r#"{"action": "@finetuning", "explanation": "try it"}"#.to_string(),
                1 => r#"{"action": "@prompt_refinement", "explanation": "refine"}"#.to_string(),
                2 => r#"{"action": "@teleport"}"#.to_string(),
                _ => "let me think about it".to_string(),
            }
        } else if text.starts_with("Select specific samples") {
            let n = rng.gen_range(5..20);
            let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..pool_len + 5)).collect();
            serde_json::to_string(&picks).unwrap()
        } else if text.starts_with("Provide hyperparameters") {
            let mut v = valid_hyperparams();
            if rng.gen_bool(0.2) {
                v.as_object_mut().unwrap().remove(HYPERPARAM_FIELDS[rng.gen_range(0..13)]);
            }
            v.to_string()
        } else {
            "<prompt>fallback</prompt>".to_string()
        };
        Ok(ChatResponse::text(reply))
    })
}

fn last_message_of(req: &ChatRequest) -> String {
    req.messages.last().map(|m| m.content.clone()).unwrap_or_default()
}

pub fn valid_hyperparams() -> serde_json::Value {
    serde_json::json!({
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
        "target_modules": ["q_proj", "v_proj"]
    })
}

/// Randomized scripted students and teachers over every mode; each run
/// must stop within the student-evaluation budget.
pub fn loop_bound(runs: u64) -> Outcome {
    let started = Instant::now();
    let fx = small_fixture(7);
    let n_train = fx.dataset.select("Dysuria", symrefine::corpus::Split::Train).len();
    let bound = 1 + 5 * 16;
    let mut max_seen = 0;
    for i in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let mode = RunMode::ALL[rng.gen_range(0..3)];
        let base: f64 = rng.gen_range(0.0..0.6);
        let spread: f64 = rng.gen_range(0.0..0.4);
        let student = scripted_student(&fx, move |system, note| {
            let p = base + spread * unit((i, system));
            unit((i, system, note)) < p
        });
        let gateway = Gateway::builder()
            .backend(STUDENT, Arc::new(student), student_cost())
            .backend(TEACHER, Arc::new(random_teacher(i, fx.pool.len())), teacher_cost())
            .sleeper(Arc::new(|_| {}))
            .build();
        let executor = match rng.gen_range(0..3) {
            0 => MockExecutor::new().failing("scripted failure"),
            1 => MockExecutor::new().with_pending_polls(2),
            _ => MockExecutor::new(),
        };
        let mut inputs = fx.inputs(&gateway);
        inputs.executor = &executor;
        let mut runner = Runner::new(run_config("Dysuria", mode), inputs).map_err(|e| e.to_string())?;
        runner
            .run_to_end(|_| {})
            .map_err(|e| format!("run {i} ({mode}) failed: {e}"))?;
        let state = runner.state();
        let batches = student_entries(&runner.session().transcript.entries()).len() / n_train;
        ensure!(state.termination.is_some(), "run {i} did not terminate");
        ensure!(
            state.student_evaluations as usize == batches,
            "run {i}: state counts {} evaluations, transcript shows {batches}",
            state.student_evaluations
        );
        ensure!(batches <= bound, "run {i}: {batches} evaluations exceed {bound}");
        max_seen = max_seen.max(batches);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{runs} runs, max {max_seen} evaluations (bound {bound}), {secs:.1}s"))
}

/// Number of refinement instructions in a transcript.
fn refinement_calls(entries: &[TranscriptEntry]) -> usize {
    entries
        .iter()
        .filter(|e| e.role == Role::Teacher && last_message(e).starts_with("Your task is to prompt engineer"))
        .count()
}

pub fn epoch_semantics() -> Outcome {
    let fx = small_fixture(3);
    let n_train = 20;

    // Constant score: the baseline plus one full epoch.
    let constant = ScriptedBackend::constant(json_label(SymptomLabel::Present));
    let gateway = Gateway::builder()
        .backend(STUDENT, Arc::new(constant), student_cost())
        .backend(TEACHER, Arc::new(SimTeacher::new(3)), teacher_cost())
        .build();
    let mut runner = Runner::new(run_config("Dysuria", RunMode::RagOnly), fx.inputs(&gateway)).map_err(|e| e.to_string())?;
    runner.run_to_end(|_| {}).map_err(|e| e.to_string())?;
    let entries = runner.session().transcript.entries();
    let batches = student_entries(&entries).len() / n_train;
    let rounds = refinement_calls(&entries);
    ensure!(batches == 17, "constant student: {batches} evaluation batches in transcript, expected 17");
    ensure!(rounds == 16, "constant student: {rounds} refinement calls, expected 16");
    ensure!(
        runner.state().termination == Some(Termination::NoImprovement { epoch: 1 }),
        "constant student: termination {:?}",
        runner.state().termination
    );

    // Correct as soon as the prompt differs from the initial one.
    let initial = protocol::initial_prompt(&fx.templates, "Dysuria").unwrap().base_instruction;
    let improving = scripted_student(&fx, move |system, _| !system.starts_with(&initial));
    let gateway = Gateway::builder()
        .backend(STUDENT, Arc::new(improving), student_cost())
        .backend(TEACHER, Arc::new(SimTeacher::new(3)), teacher_cost())
        .build();
    let mut runner = Runner::new(run_config("Dysuria", RunMode::RagOnly), fx.inputs(&gateway)).map_err(|e| e.to_string())?;
    runner.run_to_end(|_| {}).map_err(|e| e.to_string())?;
    let entries = runner.session().transcript.entries();
    let students = student_entries(&entries);
    let batches = students.len() / n_train;
    ensure!(batches == 18, "improving student: {batches} batches, expected 1 + 1 + 16");
    // The second batch is the first one after a refinement and scores perfectly.
    let second_correct = students[n_train..2 * n_train]
        .iter()
        .filter(|e| {
            let truth = fx.dataset.notes().iter().find(|n| n.text == last_message(e)).unwrap().truth;
            e.content.as_deref() == Some(json_label(truth).as_str())
        })
        .count();
    ensure!(second_correct == n_train, "round 1 batch: {second_correct}/{n_train} correct");
    let h = &runner.state().history;
    ensure!(
        h[1].epoch == 1 && h[1].round == 1 && h[1].improved,
        "round 1 record: epoch {} round {} improved {}",
        h[1].epoch,
        h[1].round,
        h[1].improved
    );
    ensure!(h[2].epoch == 2 && h[2].round == 1, "next round is epoch {} round {}", h[2].epoch, h[2].round);
    ensure!(
        runner.state().termination == Some(Termination::NoImprovement { epoch: 2 }),
        "improving student: termination {:?}",
        runner.state().termination
    );
    Ok("constant: 16 rounds then stop; improving: epoch 1 ends at round 1".into())
}

fn random_label(rng: &mut ChaCha8Rng) -> SymptomLabel {
    oracles::LABELS[rng.gen_range(0..3)]
}

pub fn metric_oracle(sets: u64) -> Outcome {
    let tol = 1e-12;
    let mut worst: f64 = 0.0;
    for s in 0..sets {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let n = rng.gen_range(1..=50);
        let pairs: Vec<(SymptomLabel, Option<SymptomLabel>)> = (0..n)
            .map(|_| {
                let t = random_label(&mut rng);
                let p = if rng.gen_bool(0.1) { None } else { Some(random_label(&mut rng)) };
                (t, p)
            })
            .collect();
        let mut m = ConfusionMatrix3::default();
        for (t, p) in &pairs {
            m.record(*t, *p);
        }
        let got = score(&m);
        let want = oracles::score(&pairs);
        let mut diffs = vec![(got.accuracy - want.accuracy).abs(), (got.macro_f1 - want.macro_f1).abs()];
        for i in 0..3 {
            diffs.push((got.per_class[i].precision - want.precision[i]).abs());
            diffs.push((got.per_class[i].recall - want.recall[i]).abs());
            diffs.push((got.per_class[i].f1 - want.f1[i]).abs());
        }
        let d = diffs.into_iter().fold(0.0, f64::max);
        ensure!(d <= tol, "set {s}: deviation {d:e} from oracle");
        worst = worst.max(d);
    }
    use SymptomLabel::*;
    let mut m = ConfusionMatrix3::default();
    for (t, p) in [(Present, Present), (Present, Absent), (Absent, Absent), (Unknown, Unknown)] {
        m.record(t, Some(p));
    }
    let r = score(&m);
    ensure!(r.accuracy == 0.75, "worked example accuracy {}", r.accuracy);
    ensure!(r.macro_f1 == 7.0 / 9.0, "worked example macro-F1 {} != 7/9", r.macro_f1);
    Ok(format!("{sets} sets, max deviation {worst:e} (tol {tol:e}); worked example 7/9"))
}

fn random_store(rng: &mut ChaCha8Rng, dim: usize, max_entries: usize) -> (VectorStore, Vec<(String, Vec<f64>)>) {
    let n = rng.gen_range(1..=max_entries);
    let mut raw: Vec<(String, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        // About a fifth of the entries copy an earlier vector, producing ties.
        let v = if i > 0 && rng.gen_bool(0.2) {
            raw[rng.gen_range(0..i)].1.clone()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        raw.push((format!("n{:03}", rng.gen_range(0..100_000)), v));
    }
    raw.sort_by(|a, b| a.0.cmp(&b.0));
    raw.dedup_by(|a, b| a.0 == b.0);
    let mut store = VectorStore::new(dim);
    for (id, v) in &raw {
        store
            .insert(StoreEntry {
                note_id: id.clone(),
                symptom: "Dysuria".into(),
                text: id.clone(),
                vector: EmbeddingVector::new(v.clone()).unwrap(),
                cr: None,
            })
            .unwrap();
    }
    (store, raw)
}

pub fn retrieval_oracle(stores: u64) -> Outcome {
    let dim = 768;
    let mut ties = 0;
    for s in 0..stores {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
        let (store, raw) = random_store(&mut rng, dim, 300);
        // Query with a stored vector half the time, so ties sit at the top.
        let query: Vec<f64> = if rng.gen_bool(0.5) {
            raw[rng.gen_range(0..raw.len())].1.clone()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let q = EmbeddingVector::new(query.clone()).unwrap();
        for k in [1, 3, raw.len()] {
            let got = store.knn(&q, k).map_err(|e| e.to_string())?;
            let want = oracles::knn(&raw, &query, k);
            let got_ids: Vec<&str> = got.iter().map(|n| n.note_id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
            ensure!(got_ids == want_ids, "store {s}, k={k}: {got_ids:?} != {want_ids:?}");
            for (g, (_, w)) in got.iter().zip(&want) {
                ensure!((g.similarity - w).abs() < 1e-12, "store {s}, k={k}: similarity {} vs {w}", g.similarity);
            }
        }
        let all = oracles::knn(&raw, &query, raw.len());
        ties += all.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }
    ensure!(ties > 0, "no tie cases were generated");
    Ok(format!("{stores} stores, dim {dim}, k in {{1,3,all}}, {ties} tied neighbour pairs"))
}

pub fn cost_constants(appends: usize) -> Outcome {
    let price = PriceProfile::default();
    ensure!(
        token_cost(1_000_000, 0, &price) == Dollars::parse("5.00").unwrap(),
        "1M input tokens cost {}",
        token_cost(1_000_000, 0, &price)
    );
    ensure!(
        token_cost(0, 1_000_000, &price) == Dollars::parse("15.00").unwrap(),
        "1M output tokens cost {}",
        token_cost(0, 1_000_000, &price)
    );
    let kilowatt = EnergyProfile::with_watts(1000.0).unwrap();
    let kwh = energy_cost(3600.0, &kilowatt);
    ensure!(kwh == Dollars::parse("0.1688").unwrap(), "1 kWh costs {kwh}");

    let ledger = CostLedger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut micros: i128 = 0;
    for _ in 0..appends {
        let m = rng.gen_range(0..5_000_000i64);
        micros += m as i128;
        ledger.append(Charge {
            role: if rng.gen_bool(0.5) { Role::Student } else { Role::Teacher },
            backend: "b".into(),
            input_tokens: rng.gen_range(0..4000),
            output_tokens: rng.gen_range(0..500),
            elapsed_seconds: rng.gen_range(0.0..3.0),
            dollars: Dollars::from_micros(m),
            source: UsageSource::Reported,
        });
    }
    let total = ledger.totals().dollars;
    let summed: Dollars = ledger.entries().iter().map(|e| e.dollars).sum();
    let expected = Dollars::new(Decimal::from_i128_with_scale(micros, 6));
    ensure!(total == summed, "running total {total} != entry sum {summed}");
    ensure!(total == expected, "running total {total} != independent tally {expected}");
    Ok(format!("$5.00 / $15.00 per 1M tokens, $0.1688 per kWh, {appends} appends sum to {total} exactly"))
}

/// Mean best score among rounds whose epoch is at most `epochs`.
fn best_within(report: &RunReport, epochs: u32) -> f64 {
    report
        .rounds
        .iter()
        .filter(|r| r.epoch <= epochs)
        .map(|r| r.best_score)
        .fold(f64::MIN, f64::max)
}

pub fn convergence() -> Outcome {
    let fx = Fixture::new(0);
    let names = fx.dataset.notes().iter().map(|n| n.symptom.clone()).collect::<std::collections::BTreeSet<_>>();
    ensure!(names.len() == 12, "fixture has {} symptoms", names.len());
    let gateway = sim_builder(&fx.dataset, 0).build();
    let mut reports = Vec::new();
    for symptom in &names {
        let shape = (
            fx.dataset.select(symptom, symrefine::corpus::Split::Train).len(),
            fx.dataset.select(symptom, symrefine::corpus::Split::Test).len(),
        );
        ensure!(shape == (20, 5), "{symptom}: split shape {shape:?}");
        let out = run_symptom(run_config(symptom, RunMode::RagOnly), fx.inputs(&gateway), None, |_| {})
            .map_err(|e| format!("{symptom}: {e}"))?;
        reports.push(out.report);
    }
    let n = reports.len() as f64;
    let baseline = reports.iter().map(|r| r.baseline.accuracy).sum::<f64>() / n;
    let within2 = reports.iter().map(|r| best_within(r, 2)).sum::<f64>() / n;
    ensure!((baseline - 0.40).abs() <= 0.2, "mean baseline accuracy {baseline:.3} outside 0.40 +/- 0.2");
    ensure!(within2 >= 0.85, "mean accuracy within 2 epochs {within2:.3} < 0.85");

    let tables = build_tables(&reports);
    let rounds: usize = reports.iter().map(|r| r.rounds.len()).sum();
    ensure!(tables.trajectories.len() == rounds, "trajectory rows {} != rounds {rounds}", tables.trajectories.len());
    ensure!(tables.pcr.len() == 13, "pcr rows {}", tables.pcr.len());
    ensure!(
        tables.summary.iter().all(|r| r.n == 12),
        "summary rows must aggregate 12 symptoms"
    );
    let csv = tables_csv(&tables);
    for header in ["# trajectories v1", "# summary v1", "# pcr v1"] {
        ensure!(csv.contains(header), "csv lacks `{header}`");
    }
    Ok(format!("mean train accuracy {baseline:.3} -> {within2:.3} within 2 epochs over 12 symptoms"))
}

/// Fails the first submitted job, delegates everything else.
pub struct FirstJobFails {
    inner: MockExecutor,
    submitted: AtomicUsize,
    first: std::sync::Mutex<Option<String>>,
}

impl FirstJobFails {
    pub fn new() -> Self {
        Self {
            inner: MockExecutor::new(),
            submitted: AtomicUsize::new(0),
            first: std::sync::Mutex::new(None),
        }
    }
}

impl FineTuneExecutor for FirstJobFails {
    fn submit(&self, spec: &FineTuneJobSpec) -> Result<JobHandle, symrefine::strategies::ExecutorError> {
        let handle = self.inner.submit(spec)?;
        if self.submitted.fetch_add(1, Ordering::SeqCst) == 0 {
            *self.first.lock().unwrap() = Some(handle.job_id.clone());
        }
        Ok(handle)
    }

    fn poll(&self, handle: &JobHandle) -> Result<JobStatus, symrefine::strategies::ExecutorError> {
        if self.first.lock().unwrap().as_deref() == Some(handle.job_id.as_str()) {
            return Ok(JobStatus::Failed {
                reason: "out of GPU memory".into(),
            });
        }
        self.inner.poll(handle)
    }
}

/// SimTeacher with decisions taken from a fixed script.
fn decision_teacher(decisions: Vec<&'static str>) -> ScriptedBackend {
    let sim = SimTeacher::new(11);
    let next = AtomicUsize::new(0);
    ScriptedBackend::new(move |req, _| {
        if last_message_of(req).starts_with("Your task is to act as an intelligent agent") {
            let i = next.fetch_add(1, Ordering::SeqCst);
            return Ok(ChatResponse::text(decisions.get(i).copied().unwrap_or("{}")));
        }
        sim.send(req)
    })
}

pub fn hybrid_protocol() -> Outcome {
    let fx = small_fixture(11);
    let decisions = vec![
        "I would refine the prompt again.",
        r#"{"action": "@finetuning", "explanation": "errors persist"}"#,
        r#"{"action": "@finetuning", "explanation": "try again"}"#,
        r#"{"action": "@teleport", "explanation": "?"}"#,
        "```json\n{\"action\": \"@prompt_refinement\", \"explanation\": \"phrasing\"}\n```",
        r#"{"action": "@finetuning""#,
    ];
    let mut student = SimStudent::new(fx.dataset.notes(), 11);
    student.guided_rate = 0.7;
    let gateway = Gateway::builder()
        .backend(STUDENT, Arc::new(student), student_cost())
        .backend(TEACHER, Arc::new(decision_teacher(decisions)), teacher_cost())
        .build();
    let executor = FirstJobFails::new();
    let mut inputs = fx.inputs(&gateway);
    inputs.executor = &executor;
    let mut runner = Runner::new(run_config("Dysuria", RunMode::Hybrid), inputs).map_err(|e| e.to_string())?;
    runner.step().map_err(|e| e.to_string())?;

    // (fallback expected, action, aborted)
    let expected = [
        (true, Action::PromptRefinement, false),
        (false, Action::FineTuning, true),
        (false, Action::FineTuning, false),
        (true, Action::PromptRefinement, false),
        (false, Action::PromptRefinement, false),
        (true, Action::PromptRefinement, false),
    ];
    for (i, (fallback, action, aborted)) in expected.into_iter().enumerate() {
        let before = runner.state().clone();
        let seen = runner.session().transcript.len();
        runner.step().map_err(|e| e.to_string())?;
        let after = runner.state();
        let rec = after.history.last().unwrap();
        let decision = rec.decision.as_ref().ok_or("round has no decision")?;
        ensure!(decision.fallback_applied == fallback, "round {i}: fallback_applied {}", decision.fallback_applied);
        ensure!(rec.action == Some(action), "round {i}: dispatched {:?}, expected {action:?}", rec.action);
        if fallback {
            ensure!(
                rec.events.iter().any(|e| e.contains("fallback")),
                "round {i}: fallback not logged in events {:?}",
                rec.events
            );
        }
        let new_entries: Vec<TranscriptEntry> = runner.session().transcript.entries()[seen..].to_vec();
        let students = student_entries(&new_entries).len();
        ensure!(rec.aborted.is_some() == aborted, "round {i}: aborted {:?}", rec.aborted);
        if aborted {
            ensure!(students == 0, "round {i}: aborted fine-tune still evaluated the student");
            ensure!(
                new_entries.iter().any(|e| last_message(e).starts_with("Provide hyperparameters")),
                "round {i}: transcript lacks the hyperparameter exchange"
            );
            ensure!(after.prompts == before.prompts, "round {i}: prompts changed");
            ensure!(after.best == before.best, "round {i}: best changed");
            ensure!(after.prompt_scores == before.prompt_scores, "round {i}: scores changed");
            ensure!(after.current_model_ref == before.current_model_ref, "round {i}: model changed");
            ensure!(after.student_evaluations == before.student_evaluations, "round {i}: evaluation counted");
        } else {
            ensure!(students == 20, "round {i}: {students} student calls, expected 20");
        }
        let first = new_entries.first().ok_or("round made no calls")?;
        ensure!(
            last_message(first).starts_with("Your task is to act as an intelligent agent"),
            "round {i}: first call is not the decision"
        );
        let second = new_entries.get(1).map(last_message).unwrap_or_default();
        let opener = match action {
            Action::PromptRefinement => "Your task is to prompt engineer",
            Action::FineTuning => "Select specific samples",
        };
        ensure!(second.starts_with(opener), "round {i}: second call does not start with `{opener}`");
        if runner.state().is_finished() {
            return Err(format!("run ended after round {i}"));
        }
    }
    let model = &runner.state().current_model_ref;
    ensure!(model == "student+ft1", "model after one successful fine-tune is {model}");
    Ok("malformed decisions fall back with fallback_applied; aborted fine-tune left state unchanged".into())
}

/// Hybrid run recorded live, then replayed.
pub struct Recorded {
    pub fx: Fixture,
    pub cassette: Vec<symrefine::gateway::CassetteEntry>,
    pub report: String,
    pub transcript: String,
}

pub fn record(symptom: &str, mode: RunMode) -> Recorded {
    let fx = small_fixture(5);
    let cassette = Arc::new(Cassette::new());
    let gateway = sim_builder(&fx.dataset, 5).record(cassette.clone()).build();
    let executor = MockExecutor::new();
    let mut inputs = fx.inputs(&gateway);
    inputs.executor = &executor;
    let out = run_symptom(run_config(symptom, mode), inputs, None, |_| {}).unwrap();
    Recorded {
        report: out.report.to_json(),
        transcript: out.session.transcript.to_jsonl(),
        cassette: cassette.entries(),
        fx,
    }
}

fn replay_gateway(entries: &[symrefine::gateway::CassetteEntry]) -> Gateway {
    Gateway::builder()
        .replay_backend(STUDENT, student_cost())
        .replay_backend(TEACHER, teacher_cost())
        .replay(Arc::new(Cassette::from_entries(entries.to_vec())))
        .build()
}

pub fn determinism() -> Outcome {
    let mut checked = 0;
    for mode in [RunMode::Hybrid, RunMode::FinetuneOnly] {
        let rec = record("Dysuria", mode);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let gw = replay_gateway(&rec.cassette);
            let executor = MockExecutor::new();
            let mut inputs = rec.fx.inputs(&gw);
            inputs.executor = &executor;
            let out = run_symptom(run_config("Dysuria", mode), inputs, None, |_| {})
                .map_err(|e| format!("{mode}: replay: {e}"))?;
            outputs.push((out.report.to_json(), out.session.transcript.to_jsonl()));
        }
        ensure!(outputs[0] == outputs[1], "{mode}: two replays differ");
        ensure!(outputs[0].0 == rec.report, "{mode}: replayed report differs from the recorded run");
        ensure!(outputs[0].1 == rec.transcript, "{mode}: replayed transcript differs from the recorded run");

        let steps = serde_json::from_str::<serde_json::Value>(&rec.report).unwrap()["rounds"]
            .as_array()
            .unwrap()
            .len();
        for cut in [1, 2, steps / 2, steps - 1] {
            let gw = replay_gateway(&rec.cassette);
            let executor = MockExecutor::new();
            let mut inputs = rec.fx.inputs(&gw);
            inputs.executor = &executor;
            let mut runner = Runner::new(run_config("Dysuria", mode), inputs).map_err(|e| e.to_string())?;
            for _ in 0..cut {
                runner.step().map_err(|e| e.to_string())?;
            }
            let saved = runner.checkpoint().to_json();
            drop(runner);
            let checkpoint = symrefine::orchestrator::Checkpoint::from_json(&saved).map_err(|e| e.to_string())?;
            let gw = replay_gateway(&rec.cassette);
            let executor = MockExecutor::new();
            let mut inputs = rec.fx.inputs(&gw);
            inputs.executor = &executor;
            let out = run_symptom(run_config("ignored", mode), inputs, Some(checkpoint), |_| {})
                .map_err(|e| format!("{mode}: resume after {cut} steps: {e}"))?;
            ensure!(out.report.to_json() == rec.report, "{mode}: report after resume at step {cut} differs");
            ensure!(
                out.session.transcript.to_jsonl() == rec.transcript,
                "{mode}: transcript after resume at step {cut} differs"
            );
            checked += 1;
        }
    }
    Ok(format!("replays byte-identical; {checked} resume points match the uninterrupted run"))
}

pub fn parser_compliance() -> Outcome {
    let t = symrefine::protocol::Templates::default();
    let p = protocol::initial_prompt(&t, "Dysuria").map_err(|e| e.to_string())?;
    let want = "Answer the following yes/no/idk question. Does the following clinical note mention the symptom of Dysuria?";
    ensure!(p.base_instruction == want, "initial prompt is {:?}", p.base_instruction);
    ensure!(p.render() == want, "rendered initial prompt is {:?}", p.render());
    ensure!(protocol::initial_prompt(&t, "").is_err(), "empty symptom accepted");

    let fx = small_fixture(1);
    let nine: Vec<usize> = (0..9).collect();
    let ten: Vec<usize> = (0..10).collect();
    ensure!(
        protocol::parse_ft_selection(&serde_json::to_string(&nine).unwrap(), &fx.pool).is_err(),
        "9 indices accepted"
    );
    let sel = protocol::parse_ft_selection(&serde_json::to_string(&ten).unwrap(), &fx.pool).map_err(|e| e.to_string())?;
    ensure!(sel.indices == ten, "10 indices parsed as {:?}", sel.indices);
    let padded = format!("{:?}", [0, 1, 2, 3, 4, 5, 6, 7, 8, 8, 100_000]);
    ensure!(
        protocol::parse_ft_selection(&padded, &fx.pool).is_err(),
        "duplicates and out-of-range indices counted toward the minimum"
    );

    let full = valid_hyperparams();
    protocol::parse_ft_hyperparams(&full.to_string()).map_err(|e| format!("valid hyperparameters rejected: {e}"))?;
    for field in HYPERPARAM_FIELDS {
        let mut v = full.clone();
        v.as_object_mut().unwrap().remove(field);
        match protocol::parse_ft_hyperparams(&v.to_string()) {
            Ok(_) => return Err(format!("missing `{field}` accepted")),
            Err(e) => ensure!(e.to_string().contains(field), "error for missing `{field}` does not name it: {e}"),
        }
    }
    Ok(format!("initial prompt exact; selection minimum 10; all {} hyperparameter fields required", HYPERPARAM_FIELDS.len()))
}
