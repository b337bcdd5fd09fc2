//! Schema-guided record extraction with per-field confidence.
//!
//! Each source set is sent to the generator `N` times. Every output is
//! parsed and validated, flattened into dot paths, and the paths are voted
//! on. A field's confidence blends a sigmoid-normalized mean log-probability
//! with the fraction of iterations that agreed on its modal value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::catalog::{validate_record, ModelRecord};
use crate::gateway::{GatewayError, GenerationRequest, TextGenerator};
use crate::llm_json::extract_json;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("at least one source document is required")]
    NoSources,
    #[error("invalid extraction config: {0}")]
    Config(String),
    #[error("no iteration produced a usable `{0}`")]
    MissingIdentity(&'static str),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub iterations: usize,
    /// Sigmoid temperature applied to the mean log-probability.
    pub temperature_tau: f64,
    pub w_logp: f64,
    pub w_cons: f64,
    /// Fields scoring below this are flagged for review.
    pub threshold: f64,
    /// Sampling temperature for the generation calls.
    pub sampling_temperature: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            iterations: 5,
            temperature_tau: 0.5,
            w_logp: 0.7,
            w_cons: 0.3,
            threshold: 0.75,
            sampling_temperature: 0.7,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.iterations == 0 {
            return Err(ExtractionError::Config("iterations must be >= 1".into()));
        }
        if !(self.temperature_tau > 0.0) {
            return Err(ExtractionError::Config("temperature_tau must be > 0".into()));
        }
        if self.w_logp < 0.0 || self.w_cons < 0.0 || (self.w_logp + self.w_cons - 1.0).abs() > 1e-9 {
            return Err(ExtractionError::Config(
                "w_logp and w_cons must be non-negative and sum to 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ExtractionError::Config("threshold must be in [0,1]".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `clamp(2 * sigmoid(mean_logprob / tau), 0, 1)`. Maps a certain output
/// (mean log-prob 0) to 1.
pub fn normalized_logprob(mean_logprob: f64, tau: f64) -> f64 {
    (2.0 * sigmoid(mean_logprob / tau)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub normalized_logprob: f64,
    pub confidence: f64,
    pub flagged: bool,
}

pub fn field_confidence(mean_logprob: f64, self_consistency: f64, config: &ExtractionConfig) -> ConfidenceScore {
    let norm = normalized_logprob(mean_logprob, config.temperature_tau);
    let confidence = config.w_logp * norm + config.w_cons * self_consistency;
    ConfidenceScore {
        normalized_logprob: norm,
        confidence,
        flagged: confidence < config.threshold,
    }
}

/// Like [`field_confidence`], but when the provider reported no
/// log-probabilities the score falls back to self-consistency alone.
pub fn confidence_with_optional_logprob(
    mean_logprob: Option<f64>,
    self_consistency: f64,
    config: &ExtractionConfig,
) -> (Option<f64>, f64, bool) {
    match mean_logprob {
        Some(l) => {
            let s = field_confidence(l, self_consistency, config);
            (Some(s.normalized_logprob), s.confidence, s.flagged)
        }
        None => (None, self_consistency, self_consistency < config.threshold),
    }
}

/// One iteration's view of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub value: Option<Value>,
    pub logprob: Option<f64>,
}

impl Observation {
    pub fn new(value: Value, logprob: f64) -> Self {
        Observation {
            value: Some(value),
            logprob: Some(logprob),
        }
    }
}

/// Canonical form used for agreement: strings trimmed and case-folded,
/// arrays treated as sets, object keys sorted.
pub fn canonical(value: &Value) -> Value {
    match value {
        Value::String(s) => Value::String(s.trim().to_lowercase()),
        Value::Array(items) => {
            let mut canon: Vec<Value> = items.iter().map(canonical).collect();
            canon.sort_by_key(|v| v.to_string());
            canon.dedup();
            Value::Array(canon)
        }
        Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().map(|(k, v)| (k.clone(), canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Number(n) => match n.as_f64() {
            Some(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Value::from(f as i64),
            _ => value.clone(),
        },
        other => other.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueCount {
    pub value: Value,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub value: Value,
    pub self_consistency: f64,
    /// Mean of the log-probabilities of the iterations that agreed.
    pub mean_logprob: Option<f64>,
    pub candidates: Vec<ValueCount>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Majority vote over `N` observations. Absent values do not vote but do
/// count towards `N`. Equal counts are resolved by the higher mean
/// log-probability, then by first appearance.
pub fn aggregate_iterations(observations: &[Observation]) -> Option<Aggregate> {
    struct Group {
        first: Value,
        count: usize,
        logprobs: Vec<f64>,
    }
    let total = observations.len();
    let mut groups: Vec<(Value, Group)> = Vec::new();
    for obs in observations {
        let Some(value) = obs.value.as_ref().filter(|v| !v.is_null()) else {
            continue;
        };
        let key = canonical(value);
        let idx = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((
                    key,
                    Group {
                        first: value.clone(),
                        count: 0,
                        logprobs: Vec::new(),
                    },
                ));
                groups.len() - 1
            }
        };
        let g = &mut groups[idx].1;
        g.count += 1;
        if let Some(l) = obs.logprob {
            g.logprobs.push(l);
        }
    }
    let mut best: Option<usize> = None;
    for (i, (_, g)) in groups.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &groups[b].1;
                let better = g.count > cur.count
                    || (g.count == cur.count
                        && mean(&g.logprobs).unwrap_or(f64::NEG_INFINITY)
                            > mean(&cur.logprobs).unwrap_or(f64::NEG_INFINITY));
                if better { Some(i) } else { Some(b) }
            }
        };
    }
    let winner = &groups[best?].1;
    Some(Aggregate {
        value: winner.first.clone(),
        self_consistency: winner.count as f64 / total as f64,
        mean_logprob: mean(&winner.logprobs),
        candidates: groups
            .iter()
            .map(|(_, g)| ValueCount {
                value: g.first.clone(),
                count: g.count,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfidence {
    pub field_path: String,
    pub candidates: Vec<ValueCount>,
    pub chosen_value: Option<Value>,
    pub mean_logprob: Option<f64>,
    pub self_consistency: f64,
    pub normalized_logprob: Option<f64>,
    pub confidence: f64,
    pub flagged: bool,
}

impl FieldConfidence {
    fn absent(field_path: impl Into<String>) -> Self {
        FieldConfidence {
            field_path: field_path.into(),
            candidates: Vec::new(),
            chosen_value: None,
            mean_logprob: None,
            self_consistency: 0.0,
            normalized_logprob: None,
            confidence: 0.0,
            flagged: true,
        }
    }
}

/// Top-level record fields, in schema order.
pub const SCHEMA_FIELDS: &[&str] = &[
    "model_id",
    "model_name",
    "version",
    "release_date",
    "last_updated",
    "short_description",
    "paper_link",
    "citations",
    "repository",
    "weights",
    "backbone",
    "num_layers",
    "num_parameters",
    "pretext_training_type",
    "masking_strategy",
    "pretraining",
    "domain_knowledge",
    "backbone_modifications",
    "supported_sensors",
    "modality_integration_type",
    "modalities",
    "spectral_alignment",
    "temporal_alignment",
    "spatial_resolution",
    "temporal_resolution",
    "bands",
    "pretraining_phases",
    "benchmarks",
];

const PRETRAINING_FIELDS: &str = "dataset, regions_coverage, time_range, num_images, token_size, image_resolution, epochs, batch_size, learning_rate, augmentations, processing, sampling, processing_level, cloud_cover, missing_data, masking_ratio";
const BENCHMARK_FIELDS: &str = "application_type, application, dataset, metrics, metrics_value, sensor, regions, original_samples, num_samples, sampling_percentage, num_classes, classes, image_resolution, spatial_resolution, bands_used, augmentations, optimizer, batch_size, learning_rate, epochs, loss_function, split_ratio";

pub fn extraction_prompt(sources: &[String]) -> String {
    let mut p = String::from(
        "You extract structured metadata about a remote sensing foundation model from its documentation.\n\n\
         Return exactly one JSON object with these top-level fields:\n",
    );
    p.push_str(&SCHEMA_FIELDS.join(", "));
    p.push_str("\n\nEach entry of \"pretraining_phases\" is an object with: ");
    p.push_str(PRETRAINING_FIELDS);
    p.push_str("\nEach entry of \"benchmarks\" is an object with: ");
    p.push_str(BENCHMARK_FIELDS);
    p.push_str(
        "\n\nRules:\n\
         - Dates use YYYY-MM-DD.\n\
         - num_parameters is in millions.\n\
         - spectral_alignment and temporal_alignment are one of \"full\", \"partial\", \"none\".\n\
         - metrics and metrics_value are aligned lists of equal length.\n\
         - Omit any field the sources do not state. Do not guess.\n\n\
         Sources:\n",
    );
    for (i, s) in sources.iter().enumerate() {
        p.push_str(&format!("### Source {}\n{}\n\n", i + 1, s.trim()));
    }
    p
}

/// Flattens a record document into `(dot path, leaf value)` pairs. Arrays of
/// objects are expanded by index; arrays of scalars are leaves.
pub fn flatten_record(doc: &Map<String, Value>) -> Vec<(String, Value)> {
    fn walk(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
        match value {
            Value::Null => {}
            Value::Object(map) => {
                for (k, v) in map {
                    walk(&format!("{prefix}.{k}"), v, out);
                }
            }
            Value::Array(items) if !items.is_empty() && items.iter().all(Value::is_object) => {
                for (i, item) in items.iter().enumerate() {
                    walk(&format!("{prefix}.{i}"), item, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.clone())),
        }
    }
    let mut out = Vec::new();
    for (k, v) in doc {
        walk(k, v, &mut out);
    }
    out
}

fn set_path(root: &mut Map<String, Value>, path: &str, value: Value) {
    let segments: Vec<&str> = path.split('.').collect();
    let mut cursor: &mut Value = root
        .entry(segments[0].to_string())
        .or_insert(Value::Null);
    for seg in &segments[1..] {
        match seg.parse::<usize>() {
            Ok(idx) => {
                if !cursor.is_array() {
                    *cursor = Value::Array(Vec::new());
                }
                let arr = cursor.as_array_mut().expect("array");
                while arr.len() <= idx {
                    arr.push(Value::Object(Map::new()));
                }
                cursor = &mut arr[idx];
            }
            Err(_) => {
                if !cursor.is_object() {
                    *cursor = Value::Object(Map::new());
                }
                cursor = cursor
                    .as_object_mut()
                    .expect("object")
                    .entry(seg.to_string())
                    .or_insert(Value::Null);
            }
        }
    }
    *cursor = value;
}

fn remove_path(root: &mut Map<String, Value>, path: &str) {
    let segments: Vec<&str> = path.split('.').collect();
    let (last, parents) = segments.split_last().expect("non-empty path");
    let mut cursor: Option<&mut Value> = None;
    for (i, seg) in parents.iter().enumerate() {
        let next = if i == 0 {
            root.get_mut(*seg)
        } else {
            let cur = cursor.take().expect("cursor");
            match seg.parse::<usize>() {
                Ok(idx) => cur.as_array_mut().and_then(|a| a.get_mut(idx)),
                Err(_) => cur.as_object_mut().and_then(|m| m.get_mut(*seg)),
            }
        };
        match next {
            Some(v) => cursor = Some(v),
            None => return,
        }
    }
    match cursor {
        None => {
            root.remove(*last);
        }
        Some(Value::Object(m)) => {
            m.remove(*last);
        }
        Some(Value::Array(a)) => {
            if let Ok(idx) = last.parse::<usize>() {
                if idx < a.len() {
                    a[idx] = Value::Object(Map::new());
                }
            }
        }
        Some(_) => {}
    }
}

/// A parsed, validated iteration: its flattened fields and log-probability.
struct Iteration {
    fields: BTreeMap<String, Value>,
    logprob: Option<f64>,
}

fn parse_iteration(text: &str, logprob: Option<f64>) -> Option<Iteration> {
    let Value::Object(doc) = extract_json(text)? else {
        return None;
    };
    let record: ModelRecord = serde_json::from_value(Value::Object(doc.clone())).ok()?;
    // Re-serialize so aliases (e.g. `task`) land on canonical keys.
    let Value::Object(doc) = serde_json::to_value(&record).ok()? else {
        return None;
    };
    let violations = validate_record(&record);
    let mut fields: BTreeMap<String, Value> = flatten_record(&doc).into_iter().collect();
    for v in &violations {
        fields.retain(|path, _| path != &v.field && !path.starts_with(&format!("{}.", v.field)));
    }
    Some(Iteration { fields, logprob })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutput {
    pub record: ModelRecord,
    pub fields: Vec<FieldConfidence>,
    /// Iterations whose output could not be parsed as a record.
    pub unparseable_iterations: usize,
}

impl ExtractionOutput {
    pub fn flagged(&self) -> impl Iterator<Item = &FieldConfidence> {
        self.fields.iter().filter(|f| f.flagged)
    }

    /// Review sidecar: one JSON line per flagged field.
    pub fn review_jsonl(&self) -> String {
        let mut out = String::new();
        for f in self.flagged() {
            let line = serde_json::json!({
                "model_id": self.record.model_id,
                "field_path": f.field_path,
                "candidates": f.candidates,
                "chosen_value": f.chosen_value,
                "confidence": f.confidence,
                "self_consistency": f.self_consistency,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

pub fn run_extraction<G: TextGenerator + ?Sized>(
    generator: &G,
    sources: &[String],
    config: &ExtractionConfig,
) -> Result<ExtractionOutput, ExtractionError> {
    config.validate()?;
    if sources.iter().all(|s| s.trim().is_empty()) {
        return Err(ExtractionError::NoSources);
    }
    let prompt = extraction_prompt(sources);
    let results: Vec<Result<_, GatewayError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.iterations)
            .map(|i| {
                let req = GenerationRequest::new(prompt.clone())
                    .with_seed(i as u64)
                    .with_temperature(config.sampling_temperature);
                scope.spawn(move || generator.generate(&req))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generation thread panicked"))
            .collect()
    });

    let mut iterations = Vec::with_capacity(results.len());
    let mut unparseable = 0;
    for r in results {
        let gen = r?;
        match parse_iteration(&gen.text, gen.mean_token_logprob) {
            Some(it) => iterations.push(Some(it)),
            None => {
                unparseable += 1;
                iterations.push(None);
            }
        }
    }

    let mut paths: Vec<String> = Vec::new();
    for it in iterations.iter().flatten() {
        for p in it.fields.keys() {
            if !paths.contains(p) {
                paths.push(p.clone());
            }
        }
    }
    paths.sort_by_key(|p| path_order(p));

    let mut fields = Vec::new();
    let mut doc = Map::new();
    for path in &paths {
        let observations: Vec<Observation> = iterations
            .iter()
            .map(|it| match it {
                Some(it) => Observation {
                    value: it.fields.get(path).cloned(),
                    logprob: it.logprob,
                },
                None => Observation {
                    value: None,
                    logprob: None,
                },
            })
            .collect();
        let Some(agg) = aggregate_iterations(&observations) else {
            continue;
        };
        let (norm, confidence, flagged) =
            confidence_with_optional_logprob(agg.mean_logprob, agg.self_consistency, config);
        set_path(&mut doc, path, agg.value.clone());
        fields.push(FieldConfidence {
            field_path: path.clone(),
            candidates: agg.candidates,
            chosen_value: Some(agg.value),
            mean_logprob: agg.mean_logprob,
            self_consistency: agg.self_consistency,
            normalized_logprob: norm,
            confidence,
            flagged,
        });
    }

    for name in SCHEMA_FIELDS {
        let seen = paths
            .iter()
            .any(|p| p == name || p.starts_with(&format!("{name}.")));
        if !seen {
            fields.push(FieldConfidence::absent(*name));
        }
    }

    // Values voted independently can disagree with each other (e.g. metric
    // lists of different lengths); drop whatever the assembled record
    // violates and flag it.
    let record = loop {
        let record: ModelRecord = match serde_json::from_value(Value::Object(doc.clone())) {
            Ok(r) => r,
            Err(_) => {
                let id = doc.get("model_id").and_then(Value::as_str).map(str::trim);
                if id.map_or(true, str::is_empty) {
                    return Err(ExtractionError::MissingIdentity("model_id"));
                }
                return Err(ExtractionError::MissingIdentity("model_name"));
            }
        };
        let violations = validate_record(&record);
        if violations.is_empty() {
            break record;
        }
        for v in &violations {
            if v.field == "model_id" || v.field == "model_name" {
                return Err(ExtractionError::MissingIdentity(if v.field == "model_id" {
                    "model_id"
                } else {
                    "model_name"
                }));
            }
            remove_path(&mut doc, &v.field);
            for f in fields
                .iter_mut()
                .filter(|f| f.field_path == v.field || f.field_path.starts_with(&format!("{}.", v.field)))
            {
                f.chosen_value = None;
                f.flagged = true;
            }
        }
    };

    Ok(ExtractionOutput {
        record,
        fields,
        unparseable_iterations: unparseable,
    })
}

fn path_order(path: &str) -> (usize, String) {
    let head = path.split('.').next().unwrap_or(path);
    let idx = SCHEMA_FIELDS
        .iter()
        .position(|f| *f == head)
        .unwrap_or(SCHEMA_FIELDS.len());
    (idx, path.to_string())
}
