//! Hard-constraint filtering and in-context LLM ranking of candidates.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::catalog::{Catalog, ModelRecord};
use crate::extraction::{aggregate_iterations, confidence_with_optional_logprob, ExtractionConfig, Observation};
use crate::gateway::{GenerationRequest, TextGenerator};
use crate::llm_json::extract_json;
use crate::query::StructuredQuery;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("nothing to rank: the survivor set is empty")]
    NoSurvivors,
    #[error("invalid ranking config: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Canonical matching

const ALIASES: &[(&str, &str)] = &[
    ("ms", "multispectral"),
    ("msi", "multispectral"),
    ("multispectralimagery", "multispectral"),
    ("hsi", "hyperspectral"),
    ("syntheticapertureradar", "sar"),
    ("radar", "sar"),
    ("optical", "rgb"),
    ("s1", "sentinel1"),
    ("s2", "sentinel2"),
    ("l8", "landsat8"),
    ("acc", "accuracy"),
    ("oa", "accuracy"),
    ("overallaccuracy", "accuracy"),
    ("top1accuracy", "accuracy"),
    ("meaniou", "miou"),
    ("f1score", "f1"),
    ("multitemporal", "multitemporal"),
    ("timeseries", "multitemporal"),
];

/// Case-folded alphanumeric form with aliases applied, so that
/// "Multi-Spectral", "multispectral" and "MS" compare equal.
pub fn canonical_token(text: &str) -> String {
    let compact: String = text
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    ALIASES
        .iter()
        .find(|(from, _)| *from == compact)
        .map(|(_, to)| (*to).to_string())
        .unwrap_or(compact)
}

fn canonical_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(canonical_token)
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Equality of canonical forms, or one side appearing as a run of whole
/// words in the other ("land cover" matches "Land cover classification").
pub fn terms_match(a: &str, b: &str) -> bool {
    let (ca, cb) = (canonical_token(a), canonical_token(b));
    if ca.is_empty() || cb.is_empty() {
        return false;
    }
    if ca == cb {
        return true;
    }
    let (wa, wb) = (canonical_words(a), canonical_words(b));
    let whole_a = [ca];
    let whole_b = [cb];
    contains_run(&wb, &wa) || contains_run(&wa, &wb) || contains_run(&wb, &whole_a) || contains_run(&wa, &whole_b)
}

/// Splits a compound modality request ("SAR + multispectral").
pub fn modality_parts(text: &str) -> Vec<String> {
    text.split([',', '/', '+', '&', ';'])
        .flat_map(|p| p.split(" and "))
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

// ---------------------------------------------------------------------------
// Hard filter

pub const CONSTRAINT_MODALITY: &str = "modality";
pub const CONSTRAINT_SENSOR: &str = "sensor";
pub const CONSTRAINT_MIN_PERFORMANCE: &str = "min_performance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub constraint: String,
    pub satisfied: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elimination {
    pub model_id: String,
    pub constraint: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub surviving: Vec<String>,
    /// One entry per violated constraint; a model may appear several times.
    pub eliminated: Vec<Elimination>,
}

impl FilterReport {
    pub fn eliminated_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.eliminated
            .iter()
            .map(|e| e.model_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }
}

fn check_modality(record: &ModelRecord, wanted: &str) -> ConstraintCheck {
    let have = record.modalities();
    let missing: Vec<String> = modality_parts(wanted)
        .into_iter()
        .filter(|part| !have.iter().any(|m| terms_match(part, m)))
        .collect();
    ConstraintCheck {
        constraint: CONSTRAINT_MODALITY.into(),
        satisfied: missing.is_empty(),
        detail: if missing.is_empty() {
            format!("supports {wanted}")
        } else if have.is_empty() {
            format!("requires {}; record lists no modalities", missing.join(", "))
        } else {
            format!("requires {}; supports only {}", missing.join(", "), have.join(", "))
        },
    }
}

fn check_sensor(record: &ModelRecord, wanted: &[&str]) -> ConstraintCheck {
    let have = record.sensors();
    let hit = wanted
        .iter()
        .find(|w| have.iter().any(|s| canonical_token(s) == canonical_token(w)));
    ConstraintCheck {
        constraint: CONSTRAINT_SENSOR.into(),
        satisfied: hit.is_some(),
        detail: match hit {
            Some(s) => format!("supports {s}"),
            None if have.is_empty() => format!("requires one of {}; record lists no sensors", wanted.join(", ")),
            None => format!("requires one of {}; supports {}", wanted.join(", "), have.join(", ")),
        },
    }
}

fn check_metric(record: &ModelRecord, application: Option<&str>, metric: &str, minimum: f64) -> ConstraintCheck {
    let benches = record.benchmarks();
    let scoped: Vec<_> = match application {
        Some(app) => benches
            .iter()
            .filter(|b| {
                [b.application.as_deref(), b.application_type.as_deref()]
                    .into_iter()
                    .flatten()
                    .any(|a| terms_match(a, app))
            })
            .collect(),
        None => Vec::new(),
    };
    let pool: Vec<_> = if scoped.is_empty() { benches.iter().collect() } else { scoped };
    let want = canonical_token(metric);
    let best = pool
        .iter()
        .flat_map(|b| b.scores())
        .filter(|(name, _)| canonical_token(name) == want)
        .map(|(_, v)| v)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    let satisfied = best.is_some_and(|b| b >= minimum);
    ConstraintCheck {
        constraint: CONSTRAINT_MIN_PERFORMANCE.into(),
        satisfied,
        detail: match best {
            Some(b) if satisfied => format!("{metric} {b} >= {minimum}"),
            Some(b) => format!("{metric} {b} below required {minimum}"),
            None => format!("no reported {metric} (required {minimum})"),
        },
    }
}

/// Every hard constraint the query sets, evaluated against `record`.
/// Performance requirements are checked one metric at a time.
pub fn constraint_checks(record: &ModelRecord, query: &StructuredQuery) -> Vec<ConstraintCheck> {
    let mut out = Vec::new();
    if let Some(m) = &query.modality {
        out.push(check_modality(record, m));
    }
    let sensors = query.sensors();
    if !sensors.is_empty() {
        out.push(check_sensor(record, &sensors));
    }
    if let Some(perf) = &query.min_performance {
        for (metric, value) in perf.pairs() {
            out.push(check_metric(record, query.application.as_deref(), metric, value));
        }
    }
    out
}

/// Deterministic elimination of candidates violating a hard constraint.
/// Unset constraints are vacuous.
pub fn hard_filter(candidates: &[&ModelRecord], query: &StructuredQuery) -> FilterReport {
    let mut report = FilterReport::default();
    for record in candidates {
        let violations: Vec<_> = constraint_checks(record, query)
            .into_iter()
            .filter(|c| !c.satisfied)
            .collect();
        if violations.is_empty() {
            report.surviving.push(record.model_id.clone());
        } else {
            report.eliminated.extend(violations.into_iter().map(|c| Elimination {
                model_id: record.model_id.clone(),
                constraint: c.constraint,
                detail: c.detail,
            }));
        }
    }
    assert_partition(candidates, &report);
    report
}

fn assert_partition(candidates: &[&ModelRecord], report: &FilterReport) {
    let surviving: HashSet<&str> = report.surviving.iter().map(String::as_str).collect();
    let eliminated: HashSet<&str> = report.eliminated_ids().into_iter().collect();
    assert!(surviving.is_disjoint(&eliminated), "filter report overlaps");
    let input: HashSet<&str> = candidates.iter().map(|r| r.model_id.as_str()).collect();
    let union: HashSet<&str> = surviving.union(&eliminated).copied().collect();
    assert_eq!(input, union, "filter report does not cover its input");
}

// ---------------------------------------------------------------------------
// Ranking output parsing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListedModel {
    pub model: String,
    pub rank: Option<i64>,
    pub reasons: Vec<String>,
}

fn value_as_reasons(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|r| r.as_str().map(|s| s.trim().to_string()))
            .filter(|s| !s.is_empty())
            .collect(),
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.trim().to_string()],
        _ => Vec::new(),
    }
}

fn value_as_rank(v: Option<&Value>) -> Option<i64> {
    match v? {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn listed_from_json(v: &Value) -> Option<Vec<ListedModel>> {
    let items = match v {
        Value::Array(items) => items,
        Value::Object(map) => map.values().find_map(Value::as_array)?,
        _ => return None,
    };
    let mut out = Vec::new();
    for item in items {
        let Some(obj) = item.as_object() else { continue };
        let name = ["model", "model_name", "name"]
            .iter()
            .find_map(|k| obj.get(*k).and_then(Value::as_str));
        let Some(name) = name.map(str::trim).filter(|n| !n.is_empty()) else {
            continue;
        };
        out.push(ListedModel {
            model: name.to_string(),
            rank: value_as_rank(obj.get("rank")),
            reasons: value_as_reasons(obj.get("reason").or_else(|| obj.get("reasons")).or_else(|| obj.get("explanation"))),
        });
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Parses "1. Name" / "1. model: Name" headings followed by "- reason"
/// bullets. Lines such as "explanation:" are skipped.
pub fn parse_numbered_listing(text: &str) -> Option<Vec<ListedModel>> {
    let mut out: Vec<ListedModel> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let digits = line.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &line[digits..];
            if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                let mut name = rest.trim();
                if let Some(n) = name
                    .strip_prefix("model:")
                    .or_else(|| name.strip_prefix("Model:"))
                {
                    name = n.trim();
                }
                let name = name.trim_matches(|c| c == '*' || c == '`').trim();
                if !name.is_empty() {
                    out.push(ListedModel {
                        model: name.to_string(),
                        rank: line[..digits].parse().ok(),
                        reasons: Vec::new(),
                    });
                    continue;
                }
            }
        }
        if let Some(bullet) = line.strip_prefix('-').or_else(|| line.strip_prefix('*')).or_else(|| line.strip_prefix('•')) {
            let bullet = bullet.trim_start_matches('-').trim();
            if let (Some(last), false) = (out.last_mut(), bullet.is_empty()) {
                last.reasons.push(bullet.to_string());
            }
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Reads a ranking generation: the JSON list form first, then the
/// numbered-list form used by the few-shot example in the ranking prompt.
pub fn parse_ranking_output(text: &str) -> Option<Vec<ListedModel>> {
    extract_json(text)
        .as_ref()
        .and_then(listed_from_json)
        .or_else(|| parse_numbered_listing(text))
}

// ---------------------------------------------------------------------------
// Prompting

const RANKING_PROMPT_HEAD: &str = r#"You are an expert in remote sensing foundation model selection.

You will be given:
1. A structured user query specifying task requirements and constraints.
2. A list of candidate models retrieved from a database, each with metadata fields.

Your goal:
- Rank the candidate models from most to least suitable for the user's query.
- For each model, provide a brief explanation in several bullet points describing why it is placed at that rank.
- Prioritize hard constraints (application, modality, required sensor, and min_performance if provided), then consider secondary preferences (spatial/temporal resolution, application type, domain keywords, etc.).
- When two models equally satisfy the constraints and preferences, prefer the model that is more efficient, better validated on diverse benchmarks, or more versatile(multimodal, multi-temporal).

[Example]
Structured Query:
{
  "application": "land cover classification",
  "modality": "multispectral",
  "sensor": ["Sentinel-2"],
  "min_performance": {
    "metric": ["accuracy"],
    "value": [85]
  }
}

Candidate Models:
1. S2MAE
2. Prithvi
3. CACo

Ranking Output:
1. S2MAE
   - Directly supports Sentinel-2 multispectral data
   - Achieves 99.1% accuracy on EuroSAT, exceeding 85% requirement
   - Purpose-built for land cover classification
2. Prithvi
   - Supports multi-temporal multispectral data, including Sentinel-2
   - Accuracy slightly below requirement on similar tasks
   - More generalist FM
3. CACo
   - Only supports RGB modality
   - Accuracy below the 85% requirement
   - Designed mainly for change detection and event retrieval

Your Task:
Given the following new query and candidates, produce a ranked list with explanations.
"#;

const RANKING_PROMPT_TAIL: &str = r#"Please output the ranked list as JSON in the following format:
[
  {
    "model": <model_name>,
    "rank": <integer>,
    "reason": [<short bullet points>]
  },
  ...
]"#;

pub const MEMORY_CONTEXT_HEADER: &str = "Previous selections for similar queries:";

/// Compact metadata block for one candidate.
pub fn candidate_summary(index: usize, record: &ModelRecord) -> String {
    let mut s = format!("{index}. {}\n", record.model_name);
    if !record.modalities().is_empty() {
        s.push_str(&format!("   modalities: {}\n", record.modalities().join(", ")));
    }
    if !record.sensors().is_empty() {
        s.push_str(&format!("   sensors: {}\n", record.sensors().join(", ")));
    }
    for bench in record.benchmarks().iter().take(3) {
        let scores: Vec<String> = bench.scores().map(|(m, v)| format!("{m} {v}")).collect();
        let label = bench
            .application
            .as_deref()
            .or(bench.application_type.as_deref())
            .unwrap_or("benchmark");
        let dataset = bench.dataset.as_deref().unwrap_or("unnamed dataset");
        s.push_str(&format!("   benchmark: {label} on {dataset}: {}\n", scores.join(", ")));
    }
    if let Some(p) = record.num_parameters {
        s.push_str(&format!("   parameters: {p}\n"));
    }
    s
}

pub fn ranking_prompt(query: &StructuredQuery, survivors: &[&ModelRecord], memory_context: Option<&str>) -> String {
    let candidates: String = survivors
        .iter()
        .enumerate()
        .map(|(i, r)| candidate_summary(i + 1, r))
        .collect();
    let mut prompt = format!(
        "{RANKING_PROMPT_HEAD}\nStructured Query:\n{}\n\nCandidate Models:\n{candidates}\n",
        query.to_json_pretty()
    );
    if let Some(ctx) = memory_context.filter(|c| !c.trim().is_empty()) {
        prompt.push_str(&format!("{MEMORY_CONTEXT_HEADER}\n{}\n\n", ctx.trim()));
    }
    prompt.push_str(RANKING_PROMPT_TAIL);
    prompt
}

// ---------------------------------------------------------------------------
// Ranking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub model_id: String,
    pub rank: u32,
    pub reasons: Vec<String>,
    pub selection_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    pub repeats: usize,
    pub sampling_temperature: f64,
    pub confidence: ExtractionConfig,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            repeats: 3,
            sampling_temperature: 0.7,
            confidence: ExtractionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub ranked: Vec<RankedCandidate>,
    /// No generation could be parsed; the order is retrieval similarity.
    pub degraded: bool,
    /// Top-1 id per generation; `None` for unusable generations.
    pub top1_votes: Vec<Option<String>>,
}

/// A survivor with its retrieval similarity.
#[derive(Debug, Clone, Copy)]
pub struct Survivor<'a> {
    pub record: &'a ModelRecord,
    pub similarity: f64,
}

/// Confidence that the modal top-1 is right: modal vote fraction combined
/// with the mean log-probability of the agreeing generations.
pub fn selection_confidence(top1_votes: &[&str], mean_logprob: Option<f64>, config: &ExtractionConfig) -> f64 {
    assert!(!top1_votes.is_empty(), "selection_confidence needs at least one vote");
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for v in top1_votes {
        match counts.iter_mut().find(|(k, _)| k == v) {
            Some((_, c)) => *c += 1,
            None => counts.push((v, 1)),
        }
    }
    let modal = counts.iter().map(|(_, c)| *c).max().unwrap_or(0);
    let sc = modal as f64 / top1_votes.len() as f64;
    confidence_with_optional_logprob(mean_logprob, sc, config).1
}

struct Generation {
    order: Option<Vec<(String, Vec<String>)>>,
    logprob: Option<f64>,
}

fn resolve_listing(listed: Vec<ListedModel>, survivors: &[Survivor<'_>]) -> Vec<(String, Vec<String>)> {
    let mut entries: Vec<(usize, ListedModel)> = listed.into_iter().enumerate().collect();
    // Stable: generations that omit ranks keep their listed order.
    entries.sort_by_key(|(pos, m)| (m.rank.unwrap_or(i64::MAX), *pos));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (_, m) in entries {
        let name = m.model.trim().to_lowercase();
        let Some(s) = survivors.iter().find(|s| {
            s.record.model_name.trim().to_lowercase() == name || s.record.model_id.trim().to_lowercase() == name
        }) else {
            continue;
        };
        if seen.insert(s.record.model_id.clone()) {
            out.push((s.record.model_id.clone(), m.reasons));
        }
    }
    out
}

fn by_similarity<'a>(survivors: &[Survivor<'a>]) -> Vec<Survivor<'a>> {
    let mut sorted = survivors.to_vec();
    sorted.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.record.model_id.cmp(&b.record.model_id))
    });
    sorted
}

const UNMENTIONED_REASON: &str = "Not placed by the ranker; ordered by retrieval similarity";
const NO_REASON: &str = "Placed by the ranker without a stated reason";

fn complete_order(
    mut order: Vec<(String, Vec<String>)>,
    survivors: &[Survivor<'_>],
) -> Vec<(String, Vec<String>)> {
    for s in by_similarity(survivors) {
        if !order.iter().any(|(id, _)| *id == s.record.model_id) {
            order.push((s.record.model_id.clone(), vec![UNMENTIONED_REASON.to_string()]));
        }
    }
    for (_, reasons) in order.iter_mut() {
        if reasons.is_empty() {
            reasons.push(NO_REASON.to_string());
        }
    }
    order
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs `config.repeats` ranking generations and combines them: the final
/// order is that of the most confident generation agreeing with the modal
/// top-1 choice. Each candidate's confidence reflects how often the
/// generations put it at the same position.
pub fn icl_rank<G: TextGenerator + ?Sized>(
    generator: &G,
    query: &StructuredQuery,
    survivors: &[Survivor<'_>],
    memory_context: Option<&str>,
    config: &RankingConfig,
) -> Result<RankingOutcome, RankingError> {
    if survivors.is_empty() {
        return Err(RankingError::NoSurvivors);
    }
    if config.repeats == 0 {
        return Err(RankingError::Config("repeats must be >= 1".into()));
    }
    let records: Vec<&ModelRecord> = survivors.iter().map(|s| s.record).collect();
    let prompt = ranking_prompt(query, &records, memory_context);
    let generations: Vec<Generation> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.repeats)
            .map(|seed| {
                let prompt = &prompt;
                scope.spawn(move || {
                    let request = GenerationRequest::new(prompt.clone())
                        .with_seed(seed as u64)
                        .with_temperature(config.sampling_temperature);
                    match generator.generate(&request) {
                        Ok(result) => Generation {
                            order: parse_ranking_output(&result.text)
                                .map(|listed| resolve_listing(listed, survivors))
                                .filter(|o| !o.is_empty()),
                            logprob: result.mean_token_logprob,
                        },
                        Err(e) => {
                            tracing::warn!(error = %e, seed, "ranking generation failed");
                            Generation { order: None, logprob: None }
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ranking worker panicked")).collect()
    });
    let top1_votes: Vec<Option<String>> = generations
        .iter()
        .map(|g| g.order.as_ref().map(|o| o[0].0.clone()))
        .collect();

    if survivors.len() == 1 {
        let id = survivors[0].record.model_id.clone();
        let reasons = generations
            .iter()
            .find_map(|g| g.order.as_ref().map(|o| o[0].1.clone()))
            .filter(|r| !r.is_empty())
            .unwrap_or_else(|| vec!["Only candidate satisfying the hard constraints".to_string()]);
        let logprob = mean(generations.iter().filter_map(|g| g.logprob));
        let ids = vec![id.as_str(); config.repeats];
        return Ok(RankingOutcome {
            ranked: vec![RankedCandidate {
                model_id: id.clone(),
                rank: 1,
                reasons,
                selection_confidence: selection_confidence(&ids, logprob, &config.confidence),
            }],
            degraded: false,
            top1_votes,
        });
    }

    let observations: Vec<Observation> = generations
        .iter()
        .map(|g| Observation {
            value: g.order.as_ref().map(|o| Value::String(o[0].0.clone())),
            logprob: g.logprob,
        })
        .collect();
    let Some(modal) = aggregate_iterations(&observations) else {
        let ranked = by_similarity(survivors)
            .iter()
            .enumerate()
            .map(|(i, s)| RankedCandidate {
                model_id: s.record.model_id.clone(),
                rank: i as u32 + 1,
                reasons: vec![UNMENTIONED_REASON.to_string()],
                selection_confidence: 0.0,
            })
            .collect();
        return Ok(RankingOutcome {
            ranked,
            degraded: true,
            top1_votes,
        });
    };
    let modal_id = modal.value.as_str().expect("top-1 votes are strings").to_string();
    let chosen = generations
        .iter()
        .enumerate()
        .filter(|(_, g)| g.order.as_ref().is_some_and(|o| o[0].0 == modal_id))
        .max_by(|(ia, a), (ib, b)| {
            a.logprob
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&b.logprob.unwrap_or(f64::NEG_INFINITY))
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("the modal vote has a generation");
    let final_order = complete_order(generations[chosen].order.clone().unwrap_or_default(), survivors);
    let completed: Vec<Option<Vec<String>>> = generations
        .iter()
        .map(|g| {
            g.order
                .clone()
                .map(|o| complete_order(o, survivors).into_iter().map(|(id, _)| id).collect())
        })
        .collect();

    let ranked = final_order
        .into_iter()
        .enumerate()
        .map(|(pos, (id, reasons))| {
            let agreeing: Vec<usize> = completed
                .iter()
                .enumerate()
                .filter(|(_, o)| o.as_ref().is_some_and(|o| o[pos] == id))
                .map(|(i, _)| i)
                .collect();
            let sc = agreeing.len() as f64 / generations.len() as f64;
            let logprob = mean(agreeing.iter().filter_map(|&i| generations[i].logprob));
            let confidence = confidence_with_optional_logprob(logprob, sc, &config.confidence).1;
            RankedCandidate {
                model_id: id,
                rank: pos as u32 + 1,
                reasons,
                selection_confidence: confidence,
            }
        })
        .collect();
    Ok(RankingOutcome {
        ranked,
        degraded: false,
        top1_votes,
    })
}

/// Serializes a ranking as the `[{model, rank, reason}]` document.
pub fn ranking_document(ranked: &[RankedCandidate], catalog: &Catalog) -> Value {
    Value::Array(
        ranked
            .iter()
            .map(|r| {
                let name = catalog
                    .get(&r.model_id)
                    .map(|m| m.model_name.clone())
                    .unwrap_or_else(|| r.model_id.clone());
                json!({"model": name, "rank": r.rank, "reason": r.reasons})
            })
            .collect(),
    )
}
