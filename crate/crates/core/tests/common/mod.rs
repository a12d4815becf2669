#![allow(dead_code)]

pub mod oracles;
pub mod scenarios;

use std::sync::Arc;
use std::time::Duration;

use symrefine::corpus::{Dataset, FineTunePool, SymptomCatalog};
use symrefine::costing::{CostBasis, Dollars, EnergyProfile, PriceProfile};
use symrefine::gateway::{Gateway, GatewayBuilder, Session};
use symrefine::orchestrator::{RunConfig, RunInputs};
use symrefine::prep::prep_all;
use symrefine::protocol::Templates;
use symrefine::sim::{generate_mmlu, generate_notes, FixtureSpec, SimStudent, SimTeacher};
use symrefine::strategies::{ExecutorSettings, MockExecutor, RunMode};
use symrefine::vecstore::{HashEmbedder, VectorStore};

pub const STUDENT: &str = "student";
pub const TEACHER: &str = "teacher";

pub fn student_cost() -> CostBasis {
    CostBasis::Energy(EnergyProfile::with_watts(300.0).unwrap())
}

pub fn teacher_cost() -> CostBasis {
    CostBasis::Tokens(PriceProfile::default())
}

pub fn sim_builder(notes: &Dataset, seed: u64) -> GatewayBuilder {
    Gateway::builder()
        .backend(STUDENT, Arc::new(SimStudent::new(notes.notes(), seed)), student_cost())
        .backend(TEACHER, Arc::new(SimTeacher::new(seed)), teacher_cost())
        .sleeper(Arc::new(|_| {}))
}

/// Simulated corpus with a prepared store and fine-tune pool.
pub struct Fixture {
    pub dataset: Dataset,
    pub store: VectorStore,
    pub pool: FineTunePool,
    pub templates: Templates,
    pub executor: MockExecutor,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        Self::with_spec(FixtureSpec {
            seed,
            ..FixtureSpec::default()
        })
    }

    pub fn with_spec(spec: FixtureSpec) -> Self {
        let catalog = spec.catalog.clone();
        let dataset = Dataset::from_notes(generate_notes(&spec), &catalog).unwrap();
        let templates = Templates::default();
        let gateway = sim_builder(&dataset, spec.seed).build();
        let session = Session::new();
        let (store, _) = prep_all(
            &dataset,
            &HashEmbedder::new(64, spec.seed),
            &gateway,
            &session,
            &templates,
            TEACHER,
            4,
            None,
        )
        .unwrap();
        let pool = FineTunePool::new(generate_mmlu(spec.mmlu_records, spec.seed), &store);
        Self {
            dataset,
            store,
            pool,
            templates,
            executor: MockExecutor::new(),
        }
    }

    pub fn inputs<'a>(&'a self, gateway: &'a Gateway) -> RunInputs<'a> {
        RunInputs {
            dataset: &self.dataset,
            store: &self.store,
            pool: &self.pool,
            executor: &self.executor,
            executor_settings: ExecutorSettings {
                poll_interval: Duration::ZERO,
                timeout: Duration::from_secs(60),
            },
            gateway,
            templates: &self.templates,
            sleeper: Arc::new(|_| {}),
        }
    }
}

pub fn run_config(symptom: &str, mode: RunMode) -> RunConfig {
    RunConfig::new(symptom, mode, STUDENT, TEACHER)
}

pub fn default_catalog() -> SymptomCatalog {
    SymptomCatalog::default()
}

pub fn dollars(s: &str) -> Dollars {
    serde_json::from_value(serde_json::Value::String(s.into())).unwrap()
}
