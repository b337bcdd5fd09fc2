#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use fmsel::Runtime;
use fmsel_core::catalog::load_catalog;
use fmsel_core::config::Config;
use fmsel_core::gateway::{HashingEmbedder, ScriptedProvider};

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn config() -> Config {
    let mut c = Config::default();
    c.paths.catalog = repo_path("data/catalog.jsonl");
    c
}

pub fn runtime_with(config: Config) -> Runtime {
    let (catalog, _) = load_catalog(&config.paths.catalog).unwrap();
    let script = Arc::new(ScriptedProvider::load(&repo_path("data/scripted_demo.json")).unwrap());
    Runtime::assemble(config, catalog, script.clone(), script, Arc::new(HashingEmbedder::default())).unwrap()
}

pub fn runtime() -> Runtime {
    runtime_with(config())
}

pub const FULL_QUERY: &str = "Flood mapping with Sentinel-1 SAR in Bangladesh";
pub const VAGUE_QUERY: &str = "I need a model for my project";
