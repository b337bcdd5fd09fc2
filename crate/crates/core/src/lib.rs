//! Constraint-aware selection of remote sensing foundation models.

pub mod catalog;
pub mod extraction;
pub mod gateway;
pub mod llm_json;
pub mod query;
pub mod retrieval;
pub mod ranking;
pub mod dialogue;
pub mod memory;
pub mod orchestrator;
pub mod eval;
pub mod config;
