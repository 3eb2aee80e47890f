//! Knowledge-graph retrieval-augmented generation engine.

pub mod builder;
pub mod config;
pub mod eval;
pub mod gateway;
pub mod ingestion;
pub mod logic;
pub mod orchestrator;
pub mod prompts;
pub mod retrieval;
pub mod store;
pub mod tokens;
pub mod verify;
