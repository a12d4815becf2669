//! The same contract suite runs against the in-process mock and, over
//! HTTP, against a stub service that validates with the shipped schema.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use jsonschema::JSONSchema;
use serde_json::{json, Value};
use symrefine::strategies::{
    wait_for_job, ExecutorError, ExecutorSettings, FineTuneExecutor, FineTuneJobSpec, HttpExecutor, JobStatus,
    MockExecutor, FINETUNE_JOB_SCHEMA,
};

fn schema() -> JSONSchema {
    let schema: Value = serde_json::from_str(FINETUNE_JOB_SCHEMA).unwrap();
    JSONSchema::compile(&schema).unwrap()
}

fn spec_json(job_id: &str, samples: usize) -> Value {
    let samples: Vec<Value> = (0..samples)
        .map(|i| {
            json!({
                "prompt": format!("question {i}"),
                "target": format!("answer {i}"),
                "provenance": if i % 2 == 0 { "mmlu_clinical" } else { "context_reasoning" },
            })
        })
        .collect();
    json!({
        "job_id": job_id,
        "base_model_ref": "student",
        "hyperparams": {
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
        },
        "samples": samples,
    })
}

fn spec(job_id: &str, samples: usize) -> FineTuneJobSpec {
    serde_json::from_value(spec_json(job_id, samples)).unwrap()
}

fn contract(executor: &dyn FineTuneExecutor) {
    let handle = executor.submit(&spec("job-a", 12)).unwrap();
    assert_eq!(handle.job_id, "job-a");

    match executor.submit(&spec("job-a", 12)) {
        Err(ExecutorError::Rejected { status: 409, .. }) => {}
        other => panic!("duplicate job id: {other:?}"),
    }
    match executor.submit(&spec("job-b", 9)) {
        Err(ExecutorError::Rejected { status: 422, .. }) => {}
        other => panic!("nine samples: {other:?}"),
    }
    let unknown = symrefine::strategies::JobHandle { job_id: "nope".into() };
    assert!(matches!(executor.poll(&unknown), Err(ExecutorError::NotFound(_))));

    // Pending until terminal, then terminal forever.
    let mut seen = Vec::new();
    for _ in 0..6 {
        seen.push(executor.poll(&handle).unwrap());
    }
    let first_terminal = seen.iter().position(JobStatus::is_terminal).expect("job resolves");
    assert!(seen[..first_terminal].iter().all(|s| *s == JobStatus::Pending));
    assert!(seen[first_terminal..].iter().all(|s| *s == seen[first_terminal]));
    match &seen[first_terminal] {
        JobStatus::Succeeded { model_ref } => assert_eq!(model_ref, "student+ft1"),
        other => panic!("unexpected terminal status {other:?}"),
    }

    let handle = executor.submit(&spec("job-c", 10)).unwrap();
    let settings = ExecutorSettings {
        poll_interval: Duration::from_millis(1),
        timeout: Duration::from_secs(5),
    };
    let status = wait_for_job(executor, &handle, settings, &|d| thread::sleep(d)).unwrap();
    assert!(matches!(status, JobStatus::Succeeded { .. }));
}

struct StubJob {
    polls_left: u32,
    model_ref: String,
}

/// Minimal executor service: schema-checked `POST /jobs`, `GET /jobs/{id}`.
fn spawn_stub(pending_polls: u32) -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
    let jobs: Arc<Mutex<HashMap<String, StubJob>>> = Arc::default();
    thread::spawn(move || {
        let schema = schema();
        for mut request in server.incoming_requests() {
            let url = request.url().to_string();
            let (status, body) = match (request.method(), url.as_str()) {
                (tiny_http::Method::Post, "/jobs") => {
                    let mut text = String::new();
                    request.as_reader().read_to_string(&mut text).unwrap();
                    let value: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
                    let mut jobs = jobs.lock().unwrap();
                    let job_id = value["job_id"].as_str().unwrap_or_default().to_string();
                    if !schema.is_valid(&value) {
                        (422, json!({"detail": "job spec does not match the schema"}))
                    } else if jobs.contains_key(&job_id) {
                        (409, json!({"detail": format!("duplicate job_id {job_id}")}))
                    } else {
                        let base = value["base_model_ref"].as_str().unwrap();
                        jobs.insert(
                            job_id.clone(),
                            StubJob {
                                polls_left: pending_polls,
                                model_ref: symrefine::strategies::next_model_ref(base),
                            },
                        );
                        (201, json!({"job_id": job_id, "status": "pending"}))
                    }
                }
                (tiny_http::Method::Get, path) if path.starts_with("/jobs/") => {
                    let id = &path["/jobs/".len()..];
                    match jobs.lock().unwrap().get_mut(id) {
                        None => (404, json!({"detail": "unknown job"})),
                        Some(job) if job.polls_left > 0 => {
                            job.polls_left -= 1;
                            (200, json!({"status": "pending"}))
                        }
                        Some(job) => (200, json!({"status": "succeeded", "model_ref": job.model_ref})),
                    }
                }
                _ => (404, json!({"detail": "no route"})),
            };
            let response = tiny_http::Response::from_string(body.to_string())
                .with_status_code(status)
                .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
            let _ = request.respond(response);
        }
    });
    addr
}

#[test]
fn mock_executor_meets_contract() {
    contract(&MockExecutor::new().with_pending_polls(2));
}

#[test]
fn http_executor_meets_contract() {
    let url = spawn_stub(2);
    contract(&HttpExecutor::new(url, Duration::from_secs(5)).unwrap());
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let executor = HttpExecutor::new("http://127.0.0.1:9", Duration::from_secs(2)).unwrap();
    assert!(matches!(executor.submit(&spec("x", 10)), Err(ExecutorError::Transport(_))));
}

#[test]
fn schema_accepts_serialized_specs() {
    let schema = schema();
    let value = serde_json::to_value(spec("job", 10)).unwrap();
    assert!(schema.is_valid(&value));
}

#[test]
fn schema_and_validate_agree() {
    let schema = schema();
    let mut cases: Vec<Value> = Vec::new();
    cases.push(spec_json("job", 9));
    cases.push(spec_json("", 10));
    let mut v = spec_json("job", 10);
    v["hyperparams"]["lora_dropout"] = json!(1.0);
    cases.push(v);
    let mut v = spec_json("job", 10);
    v["hyperparams"]["warmup_ratio"] = json!(1.5);
    cases.push(v);
    let mut v = spec_json("job", 10);
    v["hyperparams"]["num_train_epochs"] = json!(0);
    cases.push(v);
    let mut v = spec_json("job", 10);
    v["hyperparams"]["learning_rate"] = json!(0.0);
    cases.push(v);
    for (i, case) in cases.iter().enumerate() {
        assert!(!schema.is_valid(case), "case {i} passes the schema");
        if let Ok(spec) = serde_json::from_value::<FineTuneJobSpec>(case.clone()) {
            assert!(spec.validate().is_err(), "case {i} passes validate()");
        }
    }
    let mut v = spec_json("job", 10);
    v["samples"][0]["provenance"] = json!("web");
    assert!(!schema.is_valid(&v));
    assert!(serde_json::from_value::<FineTuneJobSpec>(v).is_err());
    let mut v = spec_json("job", 10);
    v["hyperparams"].as_object_mut().unwrap().remove("optimizer");
    assert!(!schema.is_valid(&v));
    assert!(serde_json::from_value::<FineTuneJobSpec>(v).is_err());
}
