//! Foundation-model metadata catalog.
//!
//! Records are stored one JSON document per line. Only `model_id` and
//! `model_name` are required; every other field may be absent. Fields this
//! crate does not know about are carried through untouched so that a catalog
//! written by a newer schema survives a load/save cycle.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate model_id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}` failed validation: {violations:?}")]
    Invalid { id: String, violations: Vec<Violation> },
}

/// Whether a model explicitly handles spectral or temporal structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    Full,
    Partial,
    None,
}

impl Alignment {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "full" => Some(Alignment::Full),
            "partial" => Some(Alignment::Partial),
            "none" => Some(Alignment::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_updated: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_link: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citations: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repository: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<i64>,
    /// Millions of parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_parameters: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretext_training_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masking_strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretraining: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_knowledge: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_modifications: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supported_sensors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_integration_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<Vec<String>>,
    /// Raw value; see [`ModelRecord::spectral`] for the typed view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_alignment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_alignment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_resolution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_resolution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretraining_phases: Option<Vec<PretrainingPhase>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmarks: Option<Vec<BenchmarkEntry>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainingPhase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions_coverage: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_range: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_images: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_size: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_resolution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentations: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processing: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processing_level: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_cover: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masking_ratio: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    /// Older records spell this `task`; both are read, `application_type` is written.
    #[serde(default, alias = "task", skip_serializing_if = "Option::is_none")]
    pub application_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub metrics_value: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_samples: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_samples: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_percentage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_resolution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_resolution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands_used: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentations: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_ratio: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl BenchmarkEntry {
    /// `(metric, value)` pairs; extra values past the shorter list are ignored.
    pub fn scores(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.metrics
            .iter()
            .zip(self.metrics_value.iter())
            .map(|(m, v)| (m.as_str(), *v))
    }
}

impl ModelRecord {
    pub fn new(model_id: impl Into<String>, model_name: impl Into<String>) -> Self {
        ModelRecord {
            model_id: model_id.into(),
            model_name: model_name.into(),
            ..Default::default()
        }
    }

    pub fn spectral(&self) -> Option<Alignment> {
        self.spectral_alignment.as_deref().and_then(Alignment::parse)
    }

    pub fn temporal(&self) -> Option<Alignment> {
        self.temporal_alignment.as_deref().and_then(Alignment::parse)
    }

    pub fn modalities(&self) -> &[String] {
        self.modalities.as_deref().unwrap_or(&[])
    }

    pub fn sensors(&self) -> &[String] {
        self.supported_sensors.as_deref().unwrap_or(&[])
    }

    pub fn benchmarks(&self) -> &[BenchmarkEntry] {
        self.benchmarks.as_deref().unwrap_or(&[])
    }

    /// Publication year, falling back to the last model-card update.
    pub fn year(&self) -> Option<i32> {
        use chrono::Datelike;
        self.release_date.or(self.last_updated).map(|d| d.year())
    }
}

/// One schema rule broken by a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn check_url(out: &mut Vec<Violation>, field: &str, value: &Option<String>) {
    if let Some(raw) = value {
        if url::Url::parse(raw).is_err() {
            out.push(Violation::new(field, "must be an absolute URL"));
        }
    }
}

fn check_alignment(out: &mut Vec<Violation>, field: &str, value: &Option<String>) {
    if let Some(raw) = value {
        if Alignment::parse(raw).is_none() {
            out.push(Violation::new(
                field,
                format!("enum {{full, partial, none}}; got `{raw}`"),
            ));
        }
    }
}

fn check_positive(out: &mut Vec<Violation>, field: &str, value: Option<i64>) {
    if let Some(v) = value {
        if v < 1 {
            out.push(Violation::new(field, format!("must be positive; got {v}")));
        }
    }
}

/// Checks a record against every schema invariant. Never fails; an empty
/// list means the record is valid.
pub fn validate_record(record: &ModelRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.model_id.trim().is_empty() {
        out.push(Violation::new("model_id", "must be non-empty"));
    }
    if record.model_name.trim().is_empty() {
        out.push(Violation::new("model_name", "must be non-empty"));
    }
    check_alignment(&mut out, "spectral_alignment", &record.spectral_alignment);
    check_alignment(&mut out, "temporal_alignment", &record.temporal_alignment);
    if let Some(c) = record.citations {
        if c < 0 {
            out.push(Violation::new("citations", format!("must be >= 0; got {c}")));
        }
    }
    check_positive(&mut out, "num_layers", record.num_layers);
    if let Some(p) = record.num_parameters {
        if !(p.is_finite() && p > 0.0) {
            out.push(Violation::new("num_parameters", format!("must be > 0; got {p}")));
        }
    }
    check_url(&mut out, "paper_link", &record.paper_link);
    check_url(&mut out, "repository", &record.repository);
    check_url(&mut out, "weights", &record.weights);

    for (i, phase) in record.pretraining_phases.iter().flatten().enumerate() {
        let at = |f: &str| format!("pretraining_phases.{i}.{f}");
        if let Some(r) = phase.masking_ratio {
            if !(0.0..=1.0).contains(&r) {
                out.push(Violation::new(at("masking_ratio"), format!("must be in [0,1]; got {r}")));
            }
        }
        check_positive(&mut out, &at("num_images"), phase.num_images);
        check_positive(&mut out, &at("epochs"), phase.epochs);
        check_positive(&mut out, &at("batch_size"), phase.batch_size);
    }

    for (i, bench) in record.benchmarks().iter().enumerate() {
        let at = |f: &str| format!("benchmarks.{i}.{f}");
        if bench.metrics.len() != bench.metrics_value.len() {
            out.push(Violation::new(
                at("metrics_value"),
                format!(
                    "length {} does not match metrics length {}",
                    bench.metrics_value.len(),
                    bench.metrics.len()
                ),
            ));
        }
        if bench.metrics_value.iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(at("metrics_value"), "values must be finite"));
        }
        if let Some(p) = bench.sampling_percentage {
            if !(0.0..=100.0).contains(&p) {
                out.push(Violation::new(
                    at("sampling_percentage"),
                    format!("must be in [0,100]; got {p}"),
                ));
            }
        }
        if let (Some(n), Some(classes)) = (bench.num_classes, &bench.classes) {
            if n != classes.len() as i64 {
                out.push(Violation::new(
                    at("num_classes"),
                    format!("{n} does not match {} listed classes", classes.len()),
                ));
            }
        }
    }
    out
}

fn push_segment(out: &mut Vec<String>, token: &str, value: &str) {
    let value = value.trim();
    if !value.is_empty() {
        out.push(format!("[{token}] {value}"));
    }
}

fn join_list(values: &[String]) -> String {
    values
        .iter()
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Text fed to the embedder for one record. Every segment carries a
/// bracketed type token; the segment order is fixed so that index vectors
/// are reproducible.
pub fn render_retrieval_text(record: &ModelRecord) -> String {
    let mut parts = Vec::new();
    push_segment(&mut parts, "NAME", &record.model_name);
    if let Some(d) = &record.short_description {
        push_segment(&mut parts, "DESCRIPTION", d);
    }
    let mut seen = HashSet::new();
    for bench in record.benchmarks() {
        if let Some(app) = &bench.application {
            if seen.insert(app.trim().to_lowercase()) {
                push_segment(&mut parts, "APPLICATION", app);
            }
        }
    }
    push_segment(&mut parts, "MODALITY", &join_list(record.modalities()));
    push_segment(&mut parts, "SENSOR", &join_list(record.sensors()));
    if let Some(r) = &record.spatial_resolution {
        push_segment(&mut parts, "RESOLUTION", r);
    }
    if let Some(b) = &record.backbone {
        push_segment(&mut parts, "BACKBONE", b);
    }
    parts.join(" ")
}

/// Parses a single catalog line. Structural errors only; schema rules are
/// checked by [`validate_record`].
pub fn parse_record_line(line: &str) -> Result<ModelRecord, serde_json::Error> {
    serde_json::from_str(line)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadIssueKind {
    Malformed(String),
    Invalid(Vec<Violation>),
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadIssue {
    /// 1-based line number.
    pub line: usize,
    pub kind: LoadIssueKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub issues: Vec<LoadIssue>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn duplicates(&self) -> usize {
        self.issues
            .iter()
            .filter(|i| matches!(i.kind, LoadIssueKind::DuplicateId(_)))
            .count()
    }
}

/// Immutable set of validated records with an id index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    records: Vec<ModelRecord>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_records(records: Vec<ModelRecord>) -> Result<Self, CatalogError> {
        let mut catalog = Catalog::default();
        for record in records {
            let violations = validate_record(&record);
            if !violations.is_empty() {
                return Err(CatalogError::Invalid {
                    id: record.model_id,
                    violations,
                });
            }
            if catalog.by_id.contains_key(&record.model_id) {
                return Err(CatalogError::DuplicateId(record.model_id));
            }
            catalog.push_unchecked(record);
        }
        Ok(catalog)
    }

    fn push_unchecked(&mut self, record: ModelRecord) {
        self.by_id.insert(record.model_id.clone(), self.records.len());
        self.records.push(record);
    }

    /// Parses JSONL text. Bad lines are skipped and reported; the first
    /// occurrence of an id wins.
    pub fn parse_jsonl(text: &str) -> (Catalog, LoadReport) {
        let mut catalog = Catalog::default();
        let mut report = LoadReport::default();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record = match parse_record_line(line) {
                Ok(r) => r,
                Err(e) => {
                    report.issues.push(LoadIssue {
                        line: line_no,
                        kind: LoadIssueKind::Malformed(e.to_string()),
                    });
                    continue;
                }
            };
            let violations = validate_record(&record);
            if !violations.is_empty() {
                report.issues.push(LoadIssue {
                    line: line_no,
                    kind: LoadIssueKind::Invalid(violations),
                });
                continue;
            }
            if catalog.by_id.contains_key(&record.model_id) {
                report.issues.push(LoadIssue {
                    line: line_no,
                    kind: LoadIssueKind::DuplicateId(record.model_id),
                });
                continue;
            }
            catalog.push_unchecked(record);
        }
        (catalog, report)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            // ModelRecord serialization cannot fail: all keys are strings.
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CatalogError> {
        fs::write(path, self.to_jsonl()).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Returns a new catalog with `record` added or replacing the entry of
    /// the same id.
    pub fn with_record(&self, record: ModelRecord) -> Result<Catalog, CatalogError> {
        let violations = validate_record(&record);
        if !violations.is_empty() {
            return Err(CatalogError::Invalid {
                id: record.model_id,
                violations,
            });
        }
        let mut next = self.clone();
        match next.by_id.get(&record.model_id) {
            Some(&i) => next.records[i] = record,
            None => next.push_unchecked(record),
        }
        Ok(next)
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelRecord> {
        self.by_id.get(model_id).map(|&i| &self.records[i])
    }

    /// Case-insensitive lookup by id first, then by display name.
    pub fn find_by_name(&self, name: &str) -> Option<&ModelRecord> {
        let wanted = name.trim().to_lowercase();
        self.get(name.trim())
            .or_else(|| {
                self.records
                    .iter()
                    .find(|r| r.model_id.to_lowercase() == wanted)
            })
            .or_else(|| {
                self.records
                    .iter()
                    .find(|r| r.model_name.trim().to_lowercase() == wanted)
            })
    }

    pub fn records(&self) -> &[ModelRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ModelRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn load_catalog(path: &Path) -> Result<(Catalog, LoadReport), CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Catalog::parse_jsonl(&text))
}

#[cfg(test)]
mod tests {
    use super::*;

    const A2_MAE: &str = include_str!("../fixtures/a2_mae.json");

    fn a2_mae() -> ModelRecord {
        serde_json::from_str(A2_MAE).unwrap()
    }

    #[test]
    fn a2_mae_loads_as_single_valid_record() {
        let line = serde_json::to_string(&a2_mae()).unwrap();
        let (catalog, report) = Catalog::parse_jsonl(&line);
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(catalog.len(), 1);
        assert_eq!(catalog.get("A2-MAE").unwrap().benchmarks().len(), 7);
    }

    #[test]
    fn task_alias_reads_into_application_type() {
        let rec = a2_mae();
        assert_eq!(
            rec.benchmarks()[0].application_type.as_deref(),
            Some("Classification")
        );
        let out = serde_json::to_string(&rec).unwrap();
        assert!(out.contains("\"application_type\":\"Classification\""));
        assert!(!out.contains("\"task\""));
    }

    #[test]
    fn empty_file_is_empty_catalog() {
        let (catalog, report) = Catalog::parse_jsonl("");
        assert!(catalog.is_empty());
        assert!(report.is_clean());
    }

    #[test]
    fn duplicate_id_keeps_first_and_reports_second() {
        let text = "{\"model_id\":\"X\",\"model_name\":\"first\"}\n{\"model_id\":\"X\",\"model_name\":\"second\"}\n";
        let (catalog, report) = Catalog::parse_jsonl(text);
        assert_eq!(catalog.len(), 1);
        assert_eq!(catalog.get("X").unwrap().model_name, "first");
        assert_eq!(report.duplicates(), 1);
        assert_eq!(report.issues[0].line, 2);
    }

    #[test]
    fn malformed_lines_are_skipped_with_line_numbers() {
        let text = "{\"model_id\":\"A\",\"model_name\":\"A\"}\nnot json\n{\"model_name\":\"no id\"}\n";
        let (catalog, report) = Catalog::parse_jsonl(text);
        assert_eq!(catalog.len(), 1);
        let lines: Vec<_> = report.issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![2, 3]);
    }

    #[test]
    fn a2_mae_validates_clean() {
        assert!(validate_record(&a2_mae()).is_empty());
    }

    #[test]
    fn out_of_enum_alignment_is_one_violation() {
        let mut rec = a2_mae();
        rec.spectral_alignment = Some("half".into());
        let v = validate_record(&rec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "spectral_alignment");
        assert!(v[0].rule.contains("enum"));
    }

    #[test]
    fn metric_length_mismatch_is_one_violation() {
        let mut rec = a2_mae();
        let benches = rec.benchmarks.as_mut().unwrap();
        benches[0].metrics_value.push(1.0);
        assert_eq!(benches[0].metrics, vec!["Accuracy"]);
        assert_eq!(benches[0].metrics_value, vec![99.09, 1.0]);
        let v = validate_record(&rec);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "benchmarks.0.metrics_value");
    }

    #[test]
    fn range_rules() {
        let mut rec = ModelRecord::new("m", "M");
        rec.citations = Some(-1);
        rec.num_parameters = Some(0.0);
        rec.pretraining_phases = Some(vec![PretrainingPhase {
            masking_ratio: Some(1.5),
            num_images: Some(0),
            ..Default::default()
        }]);
        rec.benchmarks = Some(vec![BenchmarkEntry {
            sampling_percentage: Some(101.0),
            num_classes: Some(3),
            classes: Some(vec!["a".into(), "b".into()]),
            ..Default::default()
        }]);
        let fields: Vec<_> = validate_record(&rec).into_iter().map(|v| v.field).collect();
        assert_eq!(
            fields,
            vec![
                "citations",
                "num_parameters",
                "pretraining_phases.0.masking_ratio",
                "pretraining_phases.0.num_images",
                "benchmarks.0.sampling_percentage",
                "benchmarks.0.num_classes",
            ]
        );
    }

    #[test]
    fn rendering_contains_typed_segments() {
        let text = render_retrieval_text(&a2_mae());
        assert!(text.starts_with("[NAME] A2-MAE [DESCRIPTION] "));
        assert!(text.contains("[MODALITY] Multispectral"));
        assert!(text.contains("[APPLICATION] Land cover classification"));
        assert!(text.contains("[SENSOR] Sentinel-2, Landsat-8"));
        assert!(text.ends_with("[BACKBONE] ViT-Large"));
        let name = text.find("[NAME]").unwrap();
        let app = text.find("[APPLICATION]").unwrap();
        let modality = text.find("[MODALITY]").unwrap();
        let res = text.find("[RESOLUTION]").unwrap();
        assert!(name < app && app < modality && modality < res);
    }

    #[test]
    fn minimal_record_renders_name_only() {
        assert_eq!(render_retrieval_text(&ModelRecord::new("m", "M")), "[NAME] M");
    }

    #[test]
    fn rendering_is_deterministic() {
        let rec = a2_mae();
        assert_eq!(render_retrieval_text(&rec), render_retrieval_text(&rec));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"model_id":"u","model_name":"U","license":"MIT","benchmarks":[{"metrics":[],"metrics_value":[],"notes":"x"}]}"#;
        let rec = parse_record_line(line).unwrap();
        assert_eq!(rec.extra.get("license"), Some(&Value::from("MIT")));
        let again = parse_record_line(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(rec, again);
        assert_eq!(again.benchmarks()[0].extra.get("notes"), Some(&Value::from("x")));
    }

    #[test]
    fn with_record_returns_new_value() {
        let base = Catalog::from_records(vec![ModelRecord::new("a", "A")]).unwrap();
        let next = base.with_record(ModelRecord::new("b", "B")).unwrap();
        assert_eq!(base.len(), 1);
        assert_eq!(next.len(), 2);
        let replaced = next.with_record(ModelRecord::new("a", "A2")).unwrap();
        assert_eq!(replaced.get("a").unwrap().model_name, "A2");
        assert_eq!(replaced.len(), 2);
    }
}
