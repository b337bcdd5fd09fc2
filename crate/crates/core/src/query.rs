//! Structured user queries: parsing free text into constraints and merging
//! clarification answers.
//!
//! The wire form keeps the historical key `avaliable_data` (sic); the
//! correctly spelled `available_data` is accepted on input.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::{GatewayError, GenerationRequest, TextGenerator};
use crate::llm_json::extract_json;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("query text is empty")]
    EmptyInput,
    #[error("invalid query: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A value the schema allows as either one string or a list of strings.
/// The original shape is re-emitted on serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    pub fn items(&self) -> Vec<&str> {
        match self {
            OneOrMany::One(s) => vec![s.as_str()],
            OneOrMany::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }

    fn from_items(mut items: Vec<String>) -> Option<Self> {
        items.retain(|s| !s.trim().is_empty());
        match items.len() {
            0 => None,
            1 => Some(OneOrMany::One(items.remove(0))),
            _ => Some(OneOrMany::Many(items)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextOrNumber {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for TextOrNumber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TextOrNumber::Number(n) => write!(f, "{n}"),
            TextOrNumber::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinPerformance {
    pub metric: Vec<String>,
    pub value: Vec<f64>,
}

impl MinPerformance {
    pub fn pairs(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.metric.iter().map(String::as_str).zip(self.value.iter().copied())
    }

    fn check(&self) -> Result<(), String> {
        if self.metric.len() != self.value.len() {
            return Err(format!(
                "min_performance has {} metrics but {} values",
                self.metric.len(),
                self.value.len()
            ));
        }
        if self.value.iter().any(|v| !v.is_finite()) {
            return Err("min_performance values must be finite".into());
        }
        if self.metric.iter().any(|m| m.trim().is_empty()) {
            return Err("min_performance metric names must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuredQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_resolution: Option<TextOrNumber>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_resolution: Option<TextOrNumber>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<String>>,
    #[serde(
        default,
        rename = "avaliable_data",
        alias = "available_data",
        skip_serializing_if = "Option::is_none"
    )]
    pub available_data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deployment_device: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority_metrics: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_performance: Option<MinPerformance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_keywords: Option<Vec<String>>,
}

/// Field names as they appear on the wire, in schema order.
pub const QUERY_FIELDS: &[&str] = &[
    "application",
    "modality",
    "sensor",
    "spatial_resolution",
    "temporal_resolution",
    "bands",
    "avaliable_data",
    "deployment_device",
    "priority_metrics",
    "min_performance",
    "region",
    "domain_keywords",
];

pub const MANDATORY_FIELDS: &[&str] = &["application", "modality"];

/// Maps accepted spellings onto the wire name.
pub fn canonical_field(name: &str) -> Option<&'static str> {
    let n = name.trim();
    if n == "available_data" {
        return Some("avaliable_data");
    }
    QUERY_FIELDS.iter().copied().find(|f| *f == n)
}

fn clean_text(s: Option<String>) -> Option<String> {
    s.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

fn clean_list(v: Option<Vec<String>>) -> Option<Vec<String>> {
    v.map(|items| {
        items
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
    })
    .filter(|items| !items.is_empty())
}

impl StructuredQuery {
    pub fn new(application: &str, modality: &str) -> Self {
        StructuredQuery {
            application: Some(application.into()),
            modality: Some(modality.into()),
            ..Default::default()
        }
    }

    /// Parses the wire form strictly (typed fields must have the right
    /// shape; unknown keys are ignored) and normalizes empty values away.
    pub fn from_json(text: &str) -> Result<Self, QueryError> {
        let q: StructuredQuery =
            serde_json::from_str(text).map_err(|e| QueryError::Invalid(e.to_string()))?;
        let q = q.normalized();
        q.validate().map_err(QueryError::Invalid)?;
        Ok(q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("query serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("query serializes")
    }

    /// Empty strings and lists become absent.
    pub fn normalized(self) -> Self {
        StructuredQuery {
            application: clean_text(self.application),
            modality: clean_text(self.modality),
            sensor: self.sensor.and_then(|s| match s {
                OneOrMany::One(x) => clean_text(Some(x)).map(OneOrMany::One),
                OneOrMany::Many(v) => clean_list(Some(v)).map(OneOrMany::Many),
            }),
            spatial_resolution: self.spatial_resolution.and_then(clean_resolution),
            temporal_resolution: self.temporal_resolution.and_then(clean_resolution),
            bands: clean_list(self.bands),
            available_data: clean_text(self.available_data),
            deployment_device: clean_text(self.deployment_device),
            priority_metrics: clean_list(self.priority_metrics),
            min_performance: self.min_performance.filter(|m| !m.metric.is_empty() || !m.value.is_empty()),
            region: self.region.and_then(|s| match s {
                OneOrMany::One(x) => clean_text(Some(x)).map(OneOrMany::One),
                OneOrMany::Many(v) => clean_list(Some(v)).map(OneOrMany::Many),
            }),
            domain_keywords: clean_list(self.domain_keywords),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(m) = &self.min_performance {
            m.check()?;
        }
        Ok(())
    }

    pub fn is_mandatory_complete(&self) -> bool {
        missing_mandatory(self).is_empty()
    }

    pub fn sensors(&self) -> Vec<&str> {
        self.sensor.as_ref().map(OneOrMany::items).unwrap_or_default()
    }

    /// Whether the wire field `name` currently holds a value.
    pub fn is_set(&self, name: &str) -> bool {
        match canonical_field(name) {
            Some("application") => self.application.is_some(),
            Some("modality") => self.modality.is_some(),
            Some("sensor") => self.sensor.is_some(),
            Some("spatial_resolution") => self.spatial_resolution.is_some(),
            Some("temporal_resolution") => self.temporal_resolution.is_some(),
            Some("bands") => self.bands.is_some(),
            Some("avaliable_data") => self.available_data.is_some(),
            Some("deployment_device") => self.deployment_device.is_some(),
            Some("priority_metrics") => self.priority_metrics.is_some(),
            Some("min_performance") => self.min_performance.is_some(),
            Some("region") => self.region.is_some(),
            Some("domain_keywords") => self.domain_keywords.is_some(),
            _ => false,
        }
    }

    pub fn unset_fields(&self) -> Vec<&'static str> {
        QUERY_FIELDS.iter().copied().filter(|f| !self.is_set(f)).collect()
    }

    /// Typed-token rendering used as the retrieval query. `None` when no
    /// retrievable field is set.
    pub fn render_retrieval_text(&self) -> Option<String> {
        let mut parts = Vec::new();
        if let Some(a) = &self.application {
            parts.push(format!("[APPLICATION] {a}"));
        }
        if let Some(m) = &self.modality {
            parts.push(format!("[MODALITY] {m}"));
        }
        let sensors = self.sensors();
        if !sensors.is_empty() {
            parts.push(format!("[SENSOR] {}", sensors.join(", ")));
        }
        if let Some(r) = &self.spatial_resolution {
            parts.push(format!("[RESOLUTION] {r}"));
        }
        if parts.is_empty() {
            None
        } else {
            Some(parts.join(" "))
        }
    }
}

fn clean_resolution(r: TextOrNumber) -> Option<TextOrNumber> {
    match r {
        TextOrNumber::Number(n) if n.is_finite() => Some(TextOrNumber::Number(n)),
        TextOrNumber::Number(_) => None,
        TextOrNumber::Text(s) => clean_text(Some(s)).map(TextOrNumber::Text),
    }
}

pub fn missing_mandatory(query: &StructuredQuery) -> Vec<&'static str> {
    let mut out = Vec::new();
    if query.application.as_deref().map_or(true, |s| s.trim().is_empty()) {
        out.push("application");
    }
    if query.modality.as_deref().map_or(true, |s| s.trim().is_empty()) {
        out.push("modality");
    }
    out
}

// ---------------------------------------------------------------------------
// Lenient decoding of model output

fn as_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn as_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => items.iter().map(as_string).collect(),
        Value::String(s) => Some(split_list(s)),
        _ => None,
    }
}

fn as_resolution(v: &Value) -> Option<TextOrNumber> {
    match v {
        Value::Number(n) => n.as_f64().map(TextOrNumber::Number),
        Value::String(s) => Some(TextOrNumber::Text(s.clone())),
        _ => None,
    }
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => first_number(s).map(|(n, _, _)| n),
        _ => None,
    }
}

fn as_min_performance(v: &Value) -> Option<MinPerformance> {
    let obj = v.as_object()?;
    let metric = obj.get("metric").and_then(as_list)?;
    let value = match obj.get("value")? {
        Value::Array(items) => items.iter().map(as_number).collect::<Option<Vec<_>>>()?,
        other => vec![as_number(other)?],
    };
    Some(MinPerformance { metric, value })
}

/// Decodes a query document leniently: fields of the wrong shape are
/// dropped and reported, strings are accepted where lists are expected.
pub fn decode_query_lenient(doc: &Map<String, Value>) -> (StructuredQuery, Vec<String>) {
    let mut q = StructuredQuery::default();
    let mut problems = Vec::new();
    for (key, value) in doc {
        if value.is_null() {
            continue;
        }
        let Some(field) = canonical_field(key) else {
            continue;
        };
        let ok = match field {
            "application" => as_string(value).map(|s| q.application = Some(s)),
            "modality" => match value {
                Value::Array(_) => as_list(value).map(|v| q.modality = Some(v.join(", "))),
                _ => as_string(value).map(|s| q.modality = Some(s)),
            },
            "sensor" => match value {
                Value::String(s) => {
                    q.sensor = Some(OneOrMany::One(s.clone()));
                    Some(())
                }
                _ => as_list(value).map(|v| q.sensor = Some(OneOrMany::Many(v))),
            },
            "region" => match value {
                Value::String(s) => {
                    q.region = Some(OneOrMany::One(s.clone()));
                    Some(())
                }
                _ => as_list(value).map(|v| q.region = Some(OneOrMany::Many(v))),
            },
            "spatial_resolution" => as_resolution(value).map(|r| q.spatial_resolution = Some(r)),
            "temporal_resolution" => as_resolution(value).map(|r| q.temporal_resolution = Some(r)),
            "bands" => as_list(value).map(|v| q.bands = Some(v)),
            "avaliable_data" => as_string(value).map(|s| q.available_data = Some(s)),
            "deployment_device" => as_string(value).map(|s| q.deployment_device = Some(s)),
            "priority_metrics" => as_list(value).map(|v| q.priority_metrics = Some(v)),
            "domain_keywords" => as_list(value).map(|v| q.domain_keywords = Some(v)),
            "min_performance" => as_min_performance(value).map(|m| q.min_performance = Some(m)),
            _ => None,
        };
        if ok.is_none() {
            problems.push(format!("field `{key}` has an unexpected shape: {value}"));
        }
    }
    let mut q = q.normalized();
    if let Err(e) = q.validate() {
        problems.push(e);
        q.min_performance = None;
    }
    (q, problems)
}

pub const QUERY_SCHEMA: &str = r#"{
  "application": "string",                          // Mandatory
  "modality": "string",                      // Mandatory
  "sensor": "string or list of strings",     // Optional
  "spatial_resolution": "string or numeric", // Optional
  "temporal_resolution": "string or numeric",// Optional
  "bands": "list of strings",                // Optional
  "avaliable_data": "string",                // Optional
  "deployment_device": "string",             // Optional
  "priority_metrics": "list of string",      // Optional
  "min_performance": {                       // Optional
    "metric": "list of string",
    "value": "list of number"
  },
  "region": "string or list of strings",     // Optional
  "domain_keywords": "list of strings"       // Optional
}"#;

pub const PARSE_PROMPT_HEADER: &str =
    "You are the query interpreter of a remote sensing foundation model selection assistant.";

pub fn parse_prompt(free_text: &str) -> String {
    format!(
        "{PARSE_PROMPT_HEADER}\n\
         Convert the user's request into a JSON object following this schema:\n\
         {QUERY_SCHEMA}\n\n\
         Rules:\n\
         - Output only the JSON object.\n\
         - Include a field only if the request states it. Never invent values.\n\
         - application and modality are mandatory; omit them if the request does not state them.\n\n\
         User request:\n{free_text}\n"
    )
}

fn repair_prompt(free_text: &str, previous: &str, problem: &str) -> String {
    format!(
        "{}\nYour previous answer was rejected: {problem}\n\
         Previous answer:\n{previous}\n\
         Reply again with a single valid JSON object.\n",
        parse_prompt(free_text)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub query: StructuredQuery,
    /// A repair re-prompt was needed.
    pub repaired: bool,
    /// The parser output could not be used; the query is empty.
    pub degraded: bool,
    pub problems: Vec<String>,
}

/// One generation call with the schema prompt, plus one repair attempt
/// when the output is unusable or malformed.
pub fn parse_query<G: TextGenerator + ?Sized>(
    generator: &G,
    free_text: &str,
) -> Result<ParsedQuery, QueryError> {
    if free_text.trim().is_empty() {
        return Err(QueryError::EmptyInput);
    }
    let first = generator.generate(&GenerationRequest::new(parse_prompt(free_text)))?;
    let attempt = |text: &str| -> Result<(StructuredQuery, Vec<String>), String> {
        match extract_json(text) {
            Some(Value::Object(doc)) => Ok(decode_query_lenient(&doc)),
            _ => Err("output is not a JSON object".to_string()),
        }
    };
    match attempt(&first.text) {
        Ok((query, problems)) if problems.is_empty() => Ok(ParsedQuery {
            query,
            repaired: false,
            degraded: false,
            problems,
        }),
        first_outcome => {
            let problem = match &first_outcome {
                Ok((_, p)) => p.join("; "),
                Err(e) => e.clone(),
            };
            let second = generator.generate(&GenerationRequest::new(repair_prompt(
                free_text,
                &first.text,
                &problem,
            )))?;
            match (attempt(&second.text), first_outcome) {
                (Ok((query, problems)), _) => Ok(ParsedQuery {
                    query,
                    repaired: true,
                    degraded: false,
                    problems,
                }),
                (Err(_), Ok((query, problems))) => Ok(ParsedQuery {
                    query,
                    repaired: true,
                    degraded: false,
                    problems,
                }),
                (Err(e), Err(_)) => Ok(ParsedQuery {
                    query: StructuredQuery::default(),
                    repaired: true,
                    degraded: true,
                    problems: vec![e],
                }),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Clarification answers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationAnswer {
    pub field_path: String,
    pub raw_text: String,
}

impl ClarificationAnswer {
    pub fn new(field_path: impl Into<String>, raw_text: impl Into<String>) -> Self {
        ClarificationAnswer {
            field_path: field_path.into(),
            raw_text: raw_text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub query: StructuredQuery,
    /// Answers naming no query field; they were skipped.
    pub unknown_fields: Vec<String>,
    /// Answers whose text could not be coerced to the field type.
    pub rejected: Vec<String>,
}

/// Splits an enumeration such as "Sentinel-1, Sentinel-2 and Landsat-8".
pub fn split_list(text: &str) -> Vec<String> {
    text.split([',', ';'])
        .flat_map(|part| part.split(" and "))
        .flat_map(|part| part.split(" & "))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// First decimal number in `text`: `(value, start, end)` byte offsets.
fn first_number(text: &str) -> Option<(f64, usize, usize)> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let glued = i > 0 && (bytes[i - 1].is_ascii_alphanumeric() || bytes[i - 1] == b'.');
        if bytes[i].is_ascii_digit() && glued {
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            continue;
        }
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let raw = text[start..i].trim_end_matches('.');
            if let Ok(v) = raw.parse::<f64>() {
                return Some((v, start, start + raw.len()));
            }
        }
        i += 1;
    }
    None
}

const COMPARATOR_WORDS: &[&str] = &[
    "≥", ">=", "=>", ">", "=", ":", "at least", "of at least", "minimum", "min", "above", "over",
    "greater than", "or more", "or higher", "of",
];

fn strip_comparators(text: &str) -> String {
    let mut s = text.trim().trim_matches('%').trim().to_string();
    loop {
        let before = s.clone();
        for w in COMPARATOR_WORDS {
            let lower = s.to_lowercase();
            if lower.ends_with(w) {
                s.truncate(s.len() - w.len());
                s = s.trim().to_string();
            }
            let lower = s.to_lowercase();
            if lower.starts_with(w) && (w.len() < 2 || lower[w.len()..].starts_with(' ') || !w.chars().all(char::is_alphabetic)) {
                s = s[w.len()..].trim().to_string();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Parses "accuracy ≥ 85, mIoU at least 80%" into aligned metric/value lists.
pub fn parse_min_performance(text: &str) -> Option<MinPerformance> {
    let mut metric = Vec::new();
    let mut value = Vec::new();
    for segment in split_list(text) {
        let Some((v, start, end)) = first_number(&segment) else {
            continue;
        };
        let before = strip_comparators(&segment[..start]);
        let name = if before.is_empty() {
            strip_comparators(&segment[end..])
        } else {
            before
        };
        if name.is_empty() {
            continue;
        }
        metric.push(name);
        value.push(v);
    }
    if metric.is_empty() {
        None
    } else {
        Some(MinPerformance { metric, value })
    }
}

fn coerce_resolution(text: &str) -> TextOrNumber {
    match text.trim().parse::<f64>() {
        Ok(n) if n.is_finite() => TextOrNumber::Number(n),
        _ => TextOrNumber::Text(text.trim().to_string()),
    }
}

/// Applies answers in order; later answers overwrite earlier values for
/// the same field. Blank answers leave the field unchanged.
pub fn merge_answers(query: &StructuredQuery, answers: &[ClarificationAnswer]) -> MergeOutcome {
    let mut q = query.clone();
    let mut unknown_fields = Vec::new();
    let mut rejected = Vec::new();
    for answer in answers {
        let text = answer.raw_text.trim();
        let Some(field) = canonical_field(&answer.field_path) else {
            unknown_fields.push(answer.field_path.clone());
            continue;
        };
        if text.is_empty() {
            continue;
        }
        match field {
            "application" => q.application = Some(text.to_string()),
            "modality" => q.modality = Some(text.to_string()),
            "sensor" => q.sensor = OneOrMany::from_items(split_list(text)),
            "region" => q.region = OneOrMany::from_items(split_list(text)),
            "spatial_resolution" => q.spatial_resolution = Some(coerce_resolution(text)),
            "temporal_resolution" => q.temporal_resolution = Some(coerce_resolution(text)),
            "bands" => q.bands = Some(split_list(text)),
            "avaliable_data" => q.available_data = Some(text.to_string()),
            "deployment_device" => q.deployment_device = Some(text.to_string()),
            "priority_metrics" => q.priority_metrics = Some(split_list(text)),
            "domain_keywords" => q.domain_keywords = Some(split_list(text)),
            "min_performance" => match parse_min_performance(text) {
                Some(m) => q.min_performance = Some(m),
                None => rejected.push(answer.field_path.clone()),
            },
            _ => unknown_fields.push(answer.field_path.clone()),
        }
    }
    MergeOutcome {
        query: q.normalized(),
        unknown_fields,
        rejected,
    }
}
