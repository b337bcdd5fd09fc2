//! Benchmark generation, expert-score aggregation, selection metrics and
//! baseline systems.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::gateway::{Embedder, GenerationRequest, TextGenerator};
use crate::memory::MemoryStore;
use crate::orchestrator::{Agent, AgentConfig, SimulatedUser};
use crate::query::parse_query;
use crate::ranking::{icl_rank, parse_numbered_listing, RankedCandidate, RankingConfig, Survivor};
use crate::retrieval::VectorIndex;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("slot `{0}` has an empty vocabulary")]
    EmptySlot(String),
    #[error("template {template} uses unknown slot `{slot}`")]
    UnknownSlot { template: String, slot: String },
    #[error("weights must be non-negative and sum to 1 (sum is {0})")]
    WeightSum(f64),
    #[error("criterion score {0} is outside [1,5] or not a multiple of 0.5")]
    ScoreOutOfRange(f64),
    #[error("query {0} has no scored model")]
    EmptySelection(String),
    #[error("ratings file: {0}")]
    Ratings(String),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("{system} failed on {query_id}: {message}")]
    System {
        system: String,
        query_id: String,
        message: String,
    },
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateCategory {
    DataAvailability,
    ComputationalResources,
    ApplicationComplexity,
    EvaluationPriorities,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub template_id: String,
    pub text: String,
    pub category: TemplateCategory,
}

pub const SLOTS: &[&str] = &["application", "modality", "sensor", "region", "spatial_resolution", "device"];

const TEMPLATE_TABLE: &[(&str, TemplateCategory, &str)] = &[
    ("A1", TemplateCategory::DataAvailability, "I’m looking for a model I can use out-of-the-box for {application} using {modality} data. I don’t have any labeled training data."),
    ("A2", TemplateCategory::DataAvailability, "I have a well-labeled dataset for {application} with {modality} in {region}. Which model would be best to fully fine-tune from scratch?"),
    ("A3", TemplateCategory::DataAvailability, "I only have a few labeled samples for {application} using {sensor}. I want a model that can adapt well in a few-shot setting."),
    ("A4", TemplateCategory::DataAvailability, "I have a lot of unlabeled {modality} imagery from {region}. I need a model that works well with self-supervised or unsupervised learning for {application}."),
    ("A5", TemplateCategory::DataAvailability, "My data uses {sensor} with {spatial_resolution} resolution, but most models I’ve seen don’t support it. Can you recommend one that can be adapted?"),
    ("B1", TemplateCategory::ComputationalResources, "I'm working on {application} but only have access to a laptop with no GPU. Which model would be small enough to run locally?"),
    ("B2", TemplateCategory::ComputationalResources, "I’m using a desktop with a single GPU and doing {application} on {modality} imagery. Which models balance performance and efficiency?"),
    ("B3", TemplateCategory::ComputationalResources, "For {application}, I have access to cloud GPUs and can afford large models. What’s the most powerful foundation model I can try?"),
    ("C1", TemplateCategory::ApplicationComplexity, "I'm doing basic {application} (e.g., 3–4 land classes). What lightweight model would you suggest for fast experimentation?"),
    ("C2", TemplateCategory::ApplicationComplexity, "I'm working on multi-class classification {application} with {modality} images. The task isn't trivial, but I don’t need pixel-level precision."),
    ("C3", TemplateCategory::ApplicationComplexity, "I need a model for high-resolution segmentation or fine-grained {application}. Accuracy and spatial detail are important."),
    ("D1", TemplateCategory::EvaluationPriorities, "For {application} using {sensor} data, I mainly care about achieving the highest overall accuracy, even if the model is large."),
    ("D2", TemplateCategory::EvaluationPriorities, "For {application} using {sensor} imagery, I want clean and accurate outputs with minimal false detections; clear boundaries and reliable predictions are most important."),
    ("D3", TemplateCategory::EvaluationPriorities, "For {application} using {sensor} imagery, I need to ensure all target instances are captured, even if some false alarms occur; completeness is critical."),
    ("D4", TemplateCategory::EvaluationPriorities, "I need fast inference for {application} in near real-time on {device}. What’s a good lightweight model?"),
    ("Composite", TemplateCategory::Composite, "I'm doing {application} on {modality} in {region}, but I only have few-shot labels and limited compute. Which model fits this setup best?"),
];

pub fn builtin_templates() -> Vec<QueryTemplate> {
    TEMPLATE_TABLE
        .iter()
        .map(|(id, category, text)| QueryTemplate {
            template_id: id.to_string(),
            text: text.to_string(),
            category: *category,
        })
        .collect()
}

/// Slot names referenced by `{slot}` markers, in order of appearance.
pub fn template_slots(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start + 1..].find('}') else { break };
        out.push(rest[start + 1..start + 1 + len].to_string());
        rest = &rest[start + 1 + len + 1..];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotVocabulary(pub BTreeMap<String, Vec<String>>);

impl Default for SlotVocabulary {
    fn default() -> Self {
        let v = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut m = BTreeMap::new();
        m.insert(
            "application".into(),
            v(&["land cover classification", "flood mapping", "crop type mapping", "building footprint segmentation", "wildfire burn scar detection", "urban change detection"]),
        );
        m.insert("modality".into(), v(&["multispectral", "SAR", "RGB", "hyperspectral"]));
        m.insert("sensor".into(), v(&["Sentinel-2", "Sentinel-1", "Landsat-8", "EnMAP"]));
        m.insert("region".into(), v(&["Europe", "East Africa", "the Amazon basin", "South Asia"]));
        m.insert("spatial_resolution".into(), v(&["10 m", "30 m", "0.5 m"]));
        m.insert("device".into(), v(&["a Jetson edge device", "a CPU-only laptop", "a Raspberry Pi"]));
        SlotVocabulary(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkQuery {
    pub query_id: String,
    pub template_id: String,
    pub category: TemplateCategory,
    pub text: String,
}

/// Fills every template `count_per_template` times with slot values drawn
/// by a seeded sampler. Ids are `<template>-<n>`, stable for a fixed seed.
pub fn instantiate_benchmark(
    templates: &[QueryTemplate],
    vocab: &SlotVocabulary,
    count_per_template: usize,
    seed: u64,
) -> Result<Vec<BenchmarkQuery>, EvalError> {
    for t in templates {
        for slot in template_slots(&t.text) {
            match vocab.0.get(&slot) {
                None if !SLOTS.contains(&slot.as_str()) => {
                    return Err(EvalError::UnknownSlot {
                        template: t.template_id.clone(),
                        slot,
                    })
                }
                None => return Err(EvalError::EmptySlot(slot)),
                Some(values) if values.is_empty() => return Err(EvalError::EmptySlot(slot)),
                Some(_) => {}
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in templates {
        for n in 1..=count_per_template {
            let mut text = t.text.clone();
            for slot in template_slots(&t.text) {
                let value = vocab.0[&slot].choose(&mut rng).expect("non-empty vocabulary");
                text = text.replacen(&format!("{{{slot}}}"), value, 1);
            }
            out.push(BenchmarkQuery {
                query_id: format!("{}-{n}", t.template_id),
                template_id: t.template_id.clone(),
                category: t.category,
                text,
            });
        }
    }
    Ok(out)
}

/// Optional rewording pass; keeps the original on failure or empty output.
pub fn paraphrase<G: TextGenerator + ?Sized>(generator: &G, queries: &[BenchmarkQuery]) -> Vec<BenchmarkQuery> {
    queries
        .iter()
        .map(|q| {
            let prompt = format!(
                "Rewrite the following request in your own words, keeping every requirement. Output only the rewritten request.\n\n{}",
                q.text
            );
            let text = generator
                .generate(&GenerationRequest::new(prompt))
                .map(|r| r.text.trim().to_string())
                .ok()
                .filter(|t| !t.is_empty())
                .unwrap_or_else(|| q.text.clone());
            BenchmarkQuery { text, ..q.clone() }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Expert scores

pub const CRITERIA: [&str; 7] = [
    "application_compatibility",
    "modality_match",
    "reported_performance",
    "efficiency",
    "popularity",
    "generalizability",
    "recency",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionWeights(pub [f64; 7]);

impl Default for CriterionWeights {
    fn default() -> Self {
        CriterionWeights([0.25, 0.20, 0.20, 0.15, 0.05, 0.10, 0.05])
    }
}

impl CriterionWeights {
    pub fn validate(&self) -> Result<(), EvalError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(EvalError::WeightSum(sum));
        }
        Ok(())
    }

    /// Zeroes criterion `i` and rescales the rest to sum to 1.
    pub fn ablate(&self, i: usize) -> CriterionWeights {
        let mut w = self.0;
        w[i] = 0.0;
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            for x in w.iter_mut() {
                *x /= sum;
            }
        }
        CriterionWeights(w)
    }
}

fn check_score(s: f64) -> Result<(), EvalError> {
    if !(1.0..=5.0).contains(&s) || ((s * 2.0).round() - s * 2.0).abs() > 1e-9 {
        return Err(EvalError::ScoreOutOfRange(s));
    }
    Ok(())
}

/// `20 * sum(w_i * score_i)`: maps the 1-5 weighted mean onto 20-100.
pub fn aggregate_expert_score(scores: &[f64; 7], weights: &CriterionWeights) -> Result<f64, EvalError> {
    weights.validate()?;
    for s in scores {
        check_score(*s)?;
    }
    Ok(20.0 * scores.iter().zip(weights.0.iter()).map(|(s, w)| s * w).sum::<f64>())
}

/// Publication-year rubric: 2025 and later score 5, one point less per
/// year back, floored at 1.
pub fn recency_score(year: i32) -> f64 {
    (year - 2020).clamp(1, 5) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRating {
    pub query_id: String,
    pub system: String,
    pub model_id: String,
    pub scores: [f64; 7],
}

#[derive(Debug, Deserialize, Serialize)]
struct RatingRow {
    query_id: String,
    system: String,
    model_id: String,
    application_compatibility: f64,
    modality_match: f64,
    reported_performance: f64,
    efficiency: f64,
    popularity: f64,
    generalizability: f64,
    recency: f64,
}

/// Reads a CSV with header
/// `query_id,system,model_id,<seven criterion columns>`.
pub fn parse_ratings(text: &str) -> Result<Vec<ExpertRating>, EvalError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<RatingRow>().enumerate() {
        let row = row.map_err(|e| EvalError::Ratings(format!("row {}: {e}", i + 1)))?;
        let scores = [
            row.application_compatibility,
            row.modality_match,
            row.reported_performance,
            row.efficiency,
            row.popularity,
            row.generalizability,
            row.recency,
        ];
        for s in scores {
            check_score(s).map_err(|e| EvalError::Ratings(format!("row {}: {e}", i + 1)))?;
        }
        out.push(ExpertRating {
            query_id: row.query_id,
            system: row.system,
            model_id: row.model_id,
            scores,
        });
    }
    Ok(out)
}

pub fn write_ratings(ratings: &[ExpertRating]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in ratings {
        let [a, b, c, d, e, f, g] = r.scores;
        w.serialize(RatingRow {
            query_id: r.query_id.clone(),
            system: r.system.clone(),
            model_id: r.model_id.clone(),
            application_compatibility: a,
            modality_match: b,
            reported_performance: c,
            efficiency: d,
            popularity: e,
            generalizability: f,
            recency: g,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredModel {
    pub model_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    /// The system's selection in rank order (at most three are used).
    pub top: Vec<ScoredModel>,
    /// Models sharing the highest expert score for this query.
    pub preferred: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub avg_top1: f64,
    pub avg_set: f64,
    pub top1_hit_rate: f64,
    pub hq_hit_rate: f64,
    pub mrr: f64,
}

pub const HQ_THRESHOLD: f64 = 80.0;
pub const TOP_N: usize = 3;

pub fn compute_metrics(outcomes: &[QueryOutcome], hq_threshold: f64) -> Result<EvalMetrics, EvalError> {
    if outcomes.is_empty() {
        return Ok(EvalMetrics {
            avg_top1: 0.0,
            avg_set: 0.0,
            top1_hit_rate: 0.0,
            hq_hit_rate: 0.0,
            mrr: 0.0,
        });
    }
    let (mut top1, mut set, mut hits, mut hq, mut rr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for o in outcomes {
        let top = &o.top[..o.top.len().min(TOP_N)];
        let first = top.first().ok_or_else(|| EvalError::EmptySelection(o.query_id.clone()))?;
        top1 += first.score;
        set += top.iter().map(|m| m.score).sum::<f64>() / top.len() as f64;
        if o.preferred.contains(&first.model_id) {
            hits += 1.0;
        }
        if first.score >= hq_threshold {
            hq += 1.0;
        }
        if let Some(pos) = top.iter().position(|m| o.preferred.contains(&m.model_id)) {
            rr += 1.0 / (pos + 1) as f64;
        }
    }
    let n = outcomes.len() as f64;
    Ok(EvalMetrics {
        avg_top1: top1 / n,
        avg_set: set / n,
        top1_hit_rate: hits / n,
        hq_hit_rate: hq / n,
        mrr: rr / n,
    })
}

/// Scores per (query, model). Ratings are per model-query pair; when the
/// same pair is rated under several systems the first row wins.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn new(ratings: &[ExpertRating], weights: &CriterionWeights) -> Result<Self, EvalError> {
        let mut scores = HashMap::new();
        for r in ratings {
            let s = aggregate_expert_score(&r.scores, weights)?;
            scores.entry((r.query_id.clone(), r.model_id.clone())).or_insert(s);
        }
        Ok(ScoreTable { scores })
    }

    pub fn get(&self, query_id: &str, model_id: &str) -> Option<f64> {
        self.scores.get(&(query_id.to_string(), model_id.to_string())).copied()
    }

    /// Ids with the highest score for `query_id` among `pool`.
    pub fn preferred(&self, query_id: &str, pool: &HashSet<String>) -> Vec<String> {
        let scored: Vec<(&String, f64)> = pool.iter().filter_map(|m| self.get(query_id, m).map(|s| (m, s))).collect();
        let Some(best) = scored.iter().map(|(_, s)| *s).reduce(f64::max) else {
            return Vec::new();
        };
        let mut out: Vec<String> = scored
            .into_iter()
            .filter(|(_, s)| (s - best).abs() < 1e-9)
            .map(|(m, _)| m.clone())
            .collect();
        out.sort();
        out
    }
}

// ---------------------------------------------------------------------------
// Systems

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Agent,
    NaiveAgent,
    DbRetrieval,
    UnstructuredRag,
}

impl SystemName {
    pub const ALL: [SystemName; 4] = [
        SystemName::Agent,
        SystemName::NaiveAgent,
        SystemName::DbRetrieval,
        SystemName::UnstructuredRag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemName::Agent => "agent",
            SystemName::NaiveAgent => "naive_agent",
            SystemName::DbRetrieval => "db_retrieval",
            SystemName::UnstructuredRag => "unstructured_rag",
        }
    }

    pub fn parse(name: &str) -> Result<Self, EvalError> {
        SystemName::ALL
            .into_iter()
            .find(|s| s.as_str() == name.trim())
            .ok_or_else(|| EvalError::UnknownSystem(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSelection {
    pub query_id: String,
    pub system: SystemName,
    pub ranked: Vec<RankedCandidate>,
    /// The system fell back to a simpler ordering.
    pub degraded: bool,
}

/// Shared resources every system runs against.
#[derive(Clone)]
pub struct EvalContext {
    pub catalog: Arc<Catalog>,
    pub index: Arc<VectorIndex>,
    pub generator: Arc<dyn TextGenerator>,
    pub embedder: Arc<dyn Embedder>,
    /// Answers clarification questions for the full agent.
    pub simulated_user: Arc<dyn TextGenerator>,
    pub agent_config: AgentConfig,
    pub rag_context_k: usize,
}

impl EvalContext {
    pub fn new(
        catalog: Arc<Catalog>,
        index: Arc<VectorIndex>,
        generator: Arc<dyn TextGenerator>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        EvalContext {
            catalog,
            index,
            simulated_user: generator.clone(),
            generator,
            embedder,
            agent_config: AgentConfig::default(),
            rag_context_k: 10,
        }
    }
}

fn similarity_ranking(hits: &[crate::retrieval::RetrievalHit], n: usize) -> Vec<RankedCandidate> {
    hits.iter()
        .take(n)
        .enumerate()
        .map(|(i, h)| RankedCandidate {
            model_id: h.key.clone(),
            rank: i as u32 + 1,
            reasons: vec![format!("retrieval similarity {:.3}", h.similarity)],
            selection_confidence: h.similarity.clamp(0.0, 1.0),
        })
        .collect()
}

/// Top-3 nearest records to the raw query text.
pub fn db_retrieval(ctx: &EvalContext, raw_query: &str) -> Result<Vec<RankedCandidate>, EvalError> {
    let hits = ctx
        .index
        .search_text(ctx.embedder.as_ref(), raw_query, TOP_N, -1.0)
        .map_err(|e| sys_err(SystemName::DbRetrieval, "", e))?;
    Ok(similarity_ranking(&hits, TOP_N))
}

pub fn rag_prompt(user_input: &str, context_str: &str) -> String {
    format!(
        "You are an expert in remote sensing foundation models.\n\n\
         The user has provided the following task description:\n{user_input}\n\n\
         Below is a set of candidate models with their documentation:\n{context_str}\n\n\
         Your task: \n\
         1. Select and rank the top 3 remote sensing foundation models most suitable for the task.\n\
         2. For each selected model, provide: \n\
         -- A short explanation of why it fits the task requirements.\n\
         -- The reason for its ranking position compared to others.\n\
         -- Any other relevant information from the context.\n\
         3. Follow this exact output format: \n\n    \
         1. model: <model_name> \n    explanation: \n    - <reason 1> \n    - <reason 2> \n    - <reason 3> \n    \n    \
         2. model: <model_name> \n    explanation: \n    - <reason 1> \n    - <reason 2> \n    - <reason 3> \n    \n    \
         3. model: <model_name> \n    explanation: \n    - <reason 1> \n    - <reason 2> \n    - <reason 3> \n"
    )
}

/// `(model_name, reasons)` in listed order from a RAG answer.
pub fn parse_rag_output(text: &str) -> Vec<(String, Vec<String>)> {
    parse_numbered_listing(text)
        .unwrap_or_default()
        .into_iter()
        .map(|m| (m.model, m.reasons))
        .collect()
}

/// One generation over raw record documentation. Falls back to retrieval
/// order when the answer names no known model.
pub fn unstructured_rag(ctx: &EvalContext, raw_query: &str) -> Result<(Vec<RankedCandidate>, bool), EvalError> {
    let hits = ctx
        .index
        .search_text(ctx.embedder.as_ref(), raw_query, ctx.rag_context_k, -1.0)
        .map_err(|e| sys_err(SystemName::UnstructuredRag, "", e))?;
    let context: String = hits
        .iter()
        .filter_map(|h| ctx.catalog.get(&h.key))
        .map(|r| {
            format!(
                "Model: {}\nDescription: {}\n\n",
                r.model_name,
                r.short_description.as_deref().unwrap_or("(no description)")
            )
        })
        .collect();
    let answer = ctx
        .generator
        .generate(&GenerationRequest::new(rag_prompt(raw_query, context.trim_end())))
        .map(|r| r.text)
        .unwrap_or_default();
    let mut ranked: Vec<RankedCandidate> = Vec::new();
    for (name, reasons) in parse_rag_output(&answer) {
        let Some(record) = ctx.catalog.find_by_name(&name).or_else(|| ctx.catalog.get(name.trim())) else {
            continue;
        };
        if ranked.iter().any(|r| r.model_id == record.model_id) {
            continue;
        }
        ranked.push(RankedCandidate {
            model_id: record.model_id.clone(),
            rank: ranked.len() as u32 + 1,
            reasons: if reasons.is_empty() { vec!["selected by the model".into()] } else { reasons },
            selection_confidence: 0.0,
        });
        if ranked.len() == TOP_N {
            break;
        }
    }
    if ranked.is_empty() {
        return Ok((similarity_ranking(&hits, TOP_N), true));
    }
    Ok((ranked, false))
}

/// Parse, retrieve and rank once each: no clarification, filtering,
/// memory, confidence gating or fallback.
pub fn naive_agent(ctx: &EvalContext, raw_query: &str) -> Result<(Vec<RankedCandidate>, bool), EvalError> {
    let parsed = parse_query(ctx.generator.as_ref(), raw_query).map_err(|e| sys_err(SystemName::NaiveAgent, "", e))?;
    let text = parsed.query.render_retrieval_text().unwrap_or_else(|| raw_query.to_string());
    let cfg = &ctx.agent_config;
    let hits = ctx
        .index
        .search_text(ctx.embedder.as_ref(), &text, cfg.retrieval_k, cfg.retrieval_min_similarity)
        .map_err(|e| sys_err(SystemName::NaiveAgent, "", e))?;
    let survivors: Vec<Survivor<'_>> = hits
        .iter()
        .filter_map(|h| {
            ctx.catalog.get(&h.key).map(|record| Survivor {
                record,
                similarity: h.similarity,
            })
        })
        .collect();
    if survivors.is_empty() {
        return Ok((Vec::new(), true));
    }
    let ranking = RankingConfig {
        repeats: 1,
        ..cfg.ranking.clone()
    };
    let outcome = icl_rank(ctx.generator.as_ref(), &parsed.query, &survivors, None, &ranking)
        .map_err(|e| sys_err(SystemName::NaiveAgent, "", e))?;
    Ok((outcome.ranked.into_iter().take(TOP_N).collect(), outcome.degraded))
}

/// The full loop with a simulated user and a private task memory.
pub fn full_agent(ctx: &EvalContext, query_id: &str, raw_query: &str) -> Result<(Vec<RankedCandidate>, bool), EvalError> {
    let agent = Agent {
        catalog: ctx.catalog.clone(),
        index: ctx.index.clone(),
        generator: ctx.generator.clone(),
        embedder: ctx.embedder.clone(),
        memory: Arc::new(MemoryStore::in_memory()),
        config: ctx.agent_config.clone(),
    };
    let user = SimulatedUser {
        generator: ctx.simulated_user.clone(),
    };
    let state = agent
        .new_session(query_id, raw_query, TOP_N)
        .map_err(|e| sys_err(SystemName::Agent, query_id, e))?;
    let (state, _) = agent.run_with(state, &user).map_err(|e| sys_err(SystemName::Agent, query_id, e))?;
    let ranked = state
        .recommendations
        .iter()
        .map(|r| RankedCandidate {
            model_id: r.model_id.clone(),
            rank: r.rank,
            reasons: r.reasons.clone(),
            selection_confidence: r.selection_confidence,
        })
        .collect();
    Ok((ranked, state.ranking_degraded || state.phase == crate::orchestrator::Phase::FallbackDone))
}

fn sys_err(system: SystemName, query_id: &str, e: impl std::fmt::Display) -> EvalError {
    EvalError::System {
        system: system.as_str().into(),
        query_id: query_id.into(),
        message: e.to_string(),
    }
}

pub fn run_system(ctx: &EvalContext, system: SystemName, query: &BenchmarkQuery) -> Result<SystemSelection, EvalError> {
    let tag = |e: EvalError| match e {
        EvalError::System { system, message, .. } => EvalError::System {
            system,
            query_id: query.query_id.clone(),
            message,
        },
        other => other,
    };
    let (ranked, degraded) = match system {
        SystemName::Agent => full_agent(ctx, &query.query_id, &query.text),
        SystemName::NaiveAgent => naive_agent(ctx, &query.text),
        SystemName::DbRetrieval => db_retrieval(ctx, &query.text).map(|r| (r, false)),
        SystemName::UnstructuredRag => unstructured_rag(ctx, &query.text),
    }
    .map_err(tag)?;
    Ok(SystemSelection {
        query_id: query.query_id.clone(),
        system,
        ranked,
        degraded,
    })
}

/// Runs every system on every query, in parallel across queries. Results
/// are ordered by system, then query.
pub fn run_comparison(
    ctx: &EvalContext,
    queries: &[BenchmarkQuery],
    systems: &[SystemName],
) -> Result<Vec<SystemSelection>, EvalError> {
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(queries.len().max(1));
    let chunk = queries.len().div_ceil(workers).max(1);
    let mut results: Vec<Result<Vec<SystemSelection>, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for q in part {
                        for s in systems {
                            out.push(run_system(ctx, *s, q)?);
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut all = Vec::new();
    for r in results.drain(..) {
        all.extend(r?);
    }
    let order: HashMap<&str, usize> = queries.iter().enumerate().map(|(i, q)| (q.query_id.as_str(), i)).collect();
    all.sort_by_key(|s| (s.system, order[s.query_id.as_str()]));
    Ok(all)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: SystemName,
    pub metrics: EvalMetrics,
    pub scored_queries: usize,
    /// Queries where no selected model had a rating.
    pub unscored_queries: Vec<String>,
    pub degraded_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub query_id: String,
    pub system: SystemName,
    pub selected: Vec<String>,
    pub scores: Vec<Option<f64>>,
    pub preferred: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub systems: Vec<SystemReport>,
    pub details: Vec<QueryDetail>,
    pub unrated_selections: usize,
}

/// Scores selections against expert ratings. The preferred set of a query
/// is drawn from every rated candidate of that query.
pub fn score_comparison(
    selections: &[SystemSelection],
    ratings: &[ExpertRating],
    weights: &CriterionWeights,
    hq_threshold: f64,
) -> Result<ComparisonReport, EvalError> {
    let table = ScoreTable::new(ratings, weights)?;
    let mut pools: HashMap<&str, HashSet<String>> = HashMap::new();
    for r in ratings {
        pools.entry(r.query_id.as_str()).or_default().insert(r.model_id.clone());
    }
    let mut by_system: BTreeMap<SystemName, Vec<&SystemSelection>> = BTreeMap::new();
    for s in selections {
        by_system.entry(s.system).or_default().push(s);
    }
    let mut details = Vec::new();
    let mut systems = Vec::new();
    let mut unrated_selections = 0;
    for (system, sels) in by_system {
        let mut outcomes = Vec::new();
        let mut unscored = Vec::new();
        for s in &sels {
            let scores: Vec<Option<f64>> = s.ranked.iter().map(|r| table.get(&s.query_id, &r.model_id)).collect();
            unrated_selections += scores.iter().filter(|x| x.is_none()).count();
            let preferred = pools
                .get(s.query_id.as_str())
                .map(|pool| table.preferred(&s.query_id, pool))
                .unwrap_or_default();
            let top: Vec<ScoredModel> = s
                .ranked
                .iter()
                .zip(&scores)
                .filter_map(|(r, sc)| {
                    sc.map(|score| ScoredModel {
                        model_id: r.model_id.clone(),
                        score,
                    })
                })
                .collect();
            details.push(QueryDetail {
                query_id: s.query_id.clone(),
                system,
                selected: s.ranked.iter().map(|r| r.model_id.clone()).collect(),
                scores,
                preferred: preferred.clone(),
            });
            if top.is_empty() {
                unscored.push(s.query_id.clone());
            } else {
                outcomes.push(QueryOutcome {
                    query_id: s.query_id.clone(),
                    top,
                    preferred,
                });
            }
        }
        systems.push(SystemReport {
            system,
            metrics: compute_metrics(&outcomes, hq_threshold)?,
            scored_queries: outcomes.len(),
            unscored_queries: unscored,
            degraded_queries: sels.iter().filter(|s| s.degraded).count(),
        });
    }
    Ok(ComparisonReport {
        systems,
        details,
        unrated_selections,
    })
}

impl ComparisonReport {
    /// Tab-separated metrics table, one row per system.
    pub fn to_table(&self) -> String {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        w.write_record(["system", "avg_top1", "avg_set", "top1_hit", "hq_hit", "mrr", "scored", "degraded"])
            .expect("in-memory write");
        for s in &self.systems {
            let m = &s.metrics;
            w.write_record([
                s.system.as_str().to_string(),
                format!("{:.2}", m.avg_top1),
                format!("{:.2}", m.avg_set),
                format!("{:.2}%", m.top1_hit_rate * 100.0),
                format!("{:.2}%", m.hq_hit_rate * 100.0),
                format!("{:.3}", m.mrr),
                s.scored_queries.to_string(),
                s.degraded_queries.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sixteen_templates_with_known_slots() {
        let t = builtin_templates();
        assert_eq!(t.len(), 16);
        for tpl in &t {
            for slot in template_slots(&tpl.text) {
                assert!(SLOTS.contains(&slot.as_str()), "{slot}");
            }
        }
    }

    #[test]
    fn a1_instantiation() {
        let mut vocab = SlotVocabulary::default();
        vocab.0.insert("application".into(), vec!["flood mapping".into()]);
        vocab.0.insert("modality".into(), vec!["SAR".into()]);
        let qs = instantiate_benchmark(&builtin_templates()[..1], &vocab, 1, 7).unwrap();
        assert_eq!(
            qs[0].text,
            "I’m looking for a model I can use out-of-the-box for flood mapping using SAR data. I don’t have any labeled training data."
        );
        assert_eq!(qs[0].query_id, "A1-1");
    }

    #[test]
    fn one_instance_per_template_is_deterministic() {
        let vocab = SlotVocabulary::default();
        let a = instantiate_benchmark(&builtin_templates(), &vocab, 1, 42).unwrap();
        let b = instantiate_benchmark(&builtin_templates(), &vocab, 1, 42).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        assert!(a.iter().all(|q| !q.text.contains('{')));
    }

    #[test]
    fn empty_slot_is_an_error() {
        let mut vocab = SlotVocabulary::default();
        vocab.0.insert("device".into(), vec![]);
        assert!(matches!(
            instantiate_benchmark(&builtin_templates(), &vocab, 1, 0),
            Err(EvalError::EmptySlot(s)) if s == "device"
        ));
    }

    #[test]
    fn expert_score_rows() {
        let w = CriterionWeights::default();
        assert_abs_diff_eq!(aggregate_expert_score(&[3.0, 3.0, 4.0, 4.0, 4.0, 4.0, 3.0], &w).unwrap(), 70.0, epsilon = 1e-9);
        assert_abs_diff_eq!(aggregate_expert_score(&[5.0, 5.0, 4.0, 4.0, 4.5, 4.5, 3.0], &w).unwrap(), 89.5, epsilon = 1e-9);
        assert_abs_diff_eq!(aggregate_expert_score(&[3.0, 3.0, 3.5, 1.5, 3.0, 3.0, 5.0], &w).unwrap(), 59.5, epsilon = 1e-9);
    }

    #[test]
    fn expert_score_errors() {
        let w = CriterionWeights::default();
        assert!(matches!(aggregate_expert_score(&[3.0; 7], &CriterionWeights([0.2; 7])), Err(EvalError::WeightSum(_))));
        assert!(matches!(aggregate_expert_score(&[3.2, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], &w), Err(EvalError::ScoreOutOfRange(_))));
        assert!(matches!(aggregate_expert_score(&[5.5, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], &w), Err(EvalError::ScoreOutOfRange(_))));
    }

    #[test]
    fn ablation_renormalizes() {
        let w = CriterionWeights::default().ablate(0);
        assert_eq!(w.0[0], 0.0);
        w.validate().unwrap();
        assert_abs_diff_eq!(w.0[1], 0.20 / 0.75, epsilon = 1e-12);
    }

    #[test]
    fn recency_rubric() {
        assert_eq!(recency_score(2026), 5.0);
        assert_eq!(recency_score(2025), 5.0);
        assert_eq!(recency_score(2024), 4.0);
        assert_eq!(recency_score(2023), 3.0);
        assert_eq!(recency_score(2022), 2.0);
        assert_eq!(recency_score(2021), 1.0);
        assert_eq!(recency_score(1999), 1.0);
    }

    fn outcome(id: &str, top: &[(&str, f64)], preferred: &[&str]) -> QueryOutcome {
        QueryOutcome {
            query_id: id.into(),
            top: top
                .iter()
                .map(|(m, s)| ScoredModel {
                    model_id: m.to_string(),
                    score: *s,
                })
                .collect(),
            preferred: preferred.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn mrr_hand_example() {
        let o = vec![
            outcome("1", &[("p", 90.0), ("a", 70.0), ("b", 60.0)], &["p"]),
            outcome("2", &[("a", 70.0), ("p", 90.0), ("b", 60.0)], &["p"]),
            outcome("3", &[("a", 70.0), ("b", 60.0), ("p", 90.0)], &["p"]),
            outcome("4", &[("a", 70.0), ("b", 60.0), ("c", 50.0)], &["p"]),
        ];
        let m = compute_metrics(&o, HQ_THRESHOLD).unwrap();
        assert_abs_diff_eq!(m.mrr, (1.0 + 0.5 + 1.0 / 3.0) / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.top1_hit_rate, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m.hq_hit_rate, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m.avg_top1, (90.0 + 70.0 * 3.0) / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.avg_set, 220.0 / 3.0 * 3.0 / 4.0 + 60.0 / 4.0, epsilon = 1e-9);
    }

    #[test]
    fn perfect_system() {
        let o: Vec<_> = (0..5).map(|i| outcome(&i.to_string(), &[("p", 100.0)], &["p"])).collect();
        let m = compute_metrics(&o, HQ_THRESHOLD).unwrap();
        assert_eq!((m.avg_top1, m.top1_hit_rate, m.hq_hit_rate, m.mrr), (100.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn ties_in_preferred_set_count() {
        let table = ScoreTable::new(
            &[
                ExpertRating { query_id: "q".into(), system: "s".into(), model_id: "a".into(), scores: [4.0; 7] },
                ExpertRating { query_id: "q".into(), system: "t".into(), model_id: "b".into(), scores: [4.0; 7] },
                ExpertRating { query_id: "q".into(), system: "t".into(), model_id: "c".into(), scores: [3.0; 7] },
            ],
            &CriterionWeights::default(),
        )
        .unwrap();
        let pool: HashSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(table.preferred("q", &pool), vec!["a", "b"]);
    }

    #[test]
    fn ratings_csv_round_trip() {
        let text = "query_id,system,model_id,application_compatibility,modality_match,reported_performance,efficiency,popularity,generalizability,recency\n\
                    q2,agent,CACo,3,3,4,4,4,4,3\n";
        let r = parse_ratings(text).unwrap();
        assert_eq!(r[0].scores, [3.0, 3.0, 4.0, 4.0, 4.0, 4.0, 3.0]);
        assert_eq!(parse_ratings(&write_ratings(&r)).unwrap(), r);
        assert!(parse_ratings("query_id,system,model_id\nq,s,m\n").is_err());
        assert!(parse_ratings(&text.replace(",3\n", ",7\n")).is_err());
    }

    #[test]
    fn rag_output_parse() {
        let text = "1. model: SatMAE \nexplanation: \n- fits\n- strong\n\n2. model: Prithvi\nexplanation:\n- temporal\n\n3. model: DOFA\nexplanation:\n- flexible";
        let parsed = parse_rag_output(text);
        let names: Vec<_> = parsed.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["SatMAE", "Prithvi", "DOFA"]);
        assert_eq!(parsed[0].1, vec!["fits", "strong"]);
    }

    fn arb_outcomes() -> impl Strategy<Value = Vec<QueryOutcome>> {
        prop::collection::vec(
            (
                prop::collection::vec((0usize..5, 20.0..100.0f64), 1..4),
                prop::collection::vec(0usize..5, 0..3),
            ),
            1..20,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (top, pref))| QueryOutcome {
                    query_id: i.to_string(),
                    top: top.into_iter().map(|(m, s)| ScoredModel { model_id: format!("m{m}"), score: s }).collect(),
                    preferred: pref.into_iter().map(|m| format!("m{m}")).collect(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn linear_in_each_criterion(base in prop::collection::vec(2u8..=8, 7), i in 0usize..7) {
            let w = CriterionWeights::default();
            let scores: [f64; 7] = std::array::from_fn(|j| base[j] as f64 / 2.0);
            let mut bumped = scores;
            bumped[i] += 0.5;
            let delta = aggregate_expert_score(&bumped, &w).unwrap() - aggregate_expert_score(&scores, &w).unwrap();
            prop_assert!((delta - 10.0 * w.0[i]).abs() < 1e-9);
        }

        #[test]
        fn metrics_bounded_and_order_free(outcomes in arb_outcomes(), seed in any::<u64>()) {
            let m = compute_metrics(&outcomes, HQ_THRESHOLD).unwrap();
            for r in [m.top1_hit_rate, m.hq_hit_rate, m.mrr] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            prop_assert!(m.top1_hit_rate <= m.mrr + 1e-12);
            let mut shuffled = outcomes.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let m2 = compute_metrics(&shuffled, HQ_THRESHOLD).unwrap();
            prop_assert!((m.avg_top1 - m2.avg_top1).abs() < 1e-9);
            prop_assert!((m.avg_set - m2.avg_set).abs() < 1e-9);
            prop_assert!((m.mrr - m2.mrr).abs() < 1e-9);
            prop_assert_eq!(m.top1_hit_rate, m2.top1_hit_rate);
            prop_assert_eq!(m.hq_hit_rate, m2.hq_hit_rate);
        }
    }
}
