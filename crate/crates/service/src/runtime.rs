//! Loads everything a running agent needs from a [`Config`].

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use fmsel_core::catalog::{load_catalog, Catalog};
use fmsel_core::config::Config;
use fmsel_core::eval::EvalContext;
use fmsel_core::gateway::{Embedder, TextGenerator};
use fmsel_core::memory::MemoryStore;
use fmsel_core::orchestrator::Agent;
use fmsel_core::retrieval::{build_index, VectorIndex};

#[derive(Clone)]
pub struct Runtime {
    pub config: Config,
    pub catalog: Arc<Catalog>,
    pub index: Arc<VectorIndex>,
    pub generator: Arc<dyn TextGenerator>,
    /// Answers clarification questions when auto-answering is requested.
    pub user: Arc<dyn TextGenerator>,
    pub embedder: Arc<dyn Embedder>,
    pub memory: Arc<MemoryStore>,
}

impl Runtime {
    pub fn from_config(config: Config) -> Result<Self> {
        let (catalog, report) = load_catalog(&config.paths.catalog)
            .with_context(|| format!("loading catalog {}", config.paths.catalog.display()))?;
        if !report.is_clean() {
            tracing::warn!(issues = report.issues.len(), "catalog loaded with issues");
        }
        let generator = config.build_generator()?;
        let user = config.build_user()?;
        let embedder = config.build_embedder()?;
        Self::assemble(config, catalog, generator, user, embedder)
    }

    /// Builds a runtime around already-constructed parts; paths in `config`
    /// are still used for the index cache and memory file.
    pub fn assemble(
        config: Config,
        catalog: Catalog,
        generator: Arc<dyn TextGenerator>,
        user: Arc<dyn TextGenerator>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self> {
        let index = load_or_build_index(&catalog, embedder.as_ref(), config.paths.index_cache.as_deref())?;
        let memory = match &config.paths.memory {
            Some(path) => {
                let (store, skipped) = MemoryStore::open(path)?;
                if skipped > 0 {
                    tracing::warn!(skipped, path = %path.display(), "memory entries skipped");
                }
                store
            }
            None => MemoryStore::in_memory(),
        };
        Ok(Runtime {
            config,
            catalog: Arc::new(catalog),
            index: Arc::new(index),
            generator,
            user,
            embedder,
            memory: Arc::new(memory),
        })
    }

    pub fn agent(&self) -> Agent {
        Agent {
            catalog: self.catalog.clone(),
            index: self.index.clone(),
            generator: self.generator.clone(),
            embedder: self.embedder.clone(),
            memory: self.memory.clone(),
            config: self.config.agent.clone(),
        }
    }

    pub fn eval_context(&self) -> EvalContext {
        let mut ctx = EvalContext::new(
            self.catalog.clone(),
            self.index.clone(),
            self.generator.clone(),
            self.embedder.clone(),
        );
        ctx.simulated_user = self.user.clone();
        ctx.agent_config = self.config.agent.clone();
        ctx
    }
}

fn cache_matches(index: &VectorIndex, catalog: &Catalog, dimension: usize) -> bool {
    let cached: BTreeSet<&str> = index.entries().iter().map(|e| e.key.as_str()).collect();
    let wanted: BTreeSet<&str> = catalog.iter().map(|r| r.model_id.as_str()).collect();
    index.dimension() == dimension && cached == wanted
}

/// Uses the cache when it covers exactly the catalog's ids at the
/// embedder's dimension; otherwise rebuilds and rewrites it.
pub fn load_or_build_index(catalog: &Catalog, embedder: &dyn Embedder, cache: Option<&Path>) -> Result<VectorIndex> {
    if let Some(path) = cache.filter(|p| p.exists()) {
        match VectorIndex::load(path) {
            Ok(index) if cache_matches(&index, catalog, embedder.dimension()) => return Ok(index),
            Ok(_) => tracing::info!(path = %path.display(), "index cache is stale; rebuilding"),
            Err(e) => tracing::warn!(error = %e, "index cache unreadable; rebuilding"),
        }
    }
    let index = build_index(catalog, embedder)?;
    if let Some(path) = cache {
        index.save(path).with_context(|| format!("writing index cache {}", path.display()))?;
    }
    Ok(index)
}
