//! HTTP service and CLI plumbing around the selection agent.

pub mod api;
pub mod runtime;

pub use api::{one_shot_select, router, AppState, AutoAnswer};
pub use runtime::Runtime;
