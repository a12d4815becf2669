//! Student-teacher prompt refinement for symptom extraction from clinical
//! notes.

pub mod config;
pub mod corpus;
pub mod costing;
pub mod gateway;
pub mod metrics;
pub mod orchestrator;
pub mod prep;
pub mod protocol;
pub mod report;
pub mod sim;
pub mod strategies;
pub mod vecstore;
