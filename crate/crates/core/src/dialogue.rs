//! Clarification questions and final explanations.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::Catalog;
use crate::gateway::{GenerationRequest, TextGenerator};
use crate::llm_json::extract_json;
use crate::query::{canonical_field, missing_mandatory, StructuredQuery, MANDATORY_FIELDS};
use crate::ranking::{candidate_summary, RankedCandidate};

pub const MAX_ROUNDS: u32 = 3;
pub const MAX_QUESTIONS_PER_ROUND: usize = 3;

/// Optional fields asked about when no better suggestion is available.
pub const FALLBACK_PRIORITY: &[&str] = &["sensor", "avaliable_data", "deployment_device", "min_performance"];

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("clarification round {0} exceeds the limit of {MAX_ROUNDS}")]
    RoundOutOfRange(u32),
    #[error("every query field is already set; nothing to ask")]
    NothingToAsk,
    #[error("ranked model `{0}` is not in the catalog")]
    UnknownModel(String),
    #[error("nothing to explain: the ranking is empty")]
    EmptyRanking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClarificationTrigger {
    MissingMandatory,
    TooManyCandidates,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub field_path: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationRequest {
    pub questions: Vec<ClarificationQuestion>,
    pub round_index: u32,
    pub trigger: ClarificationTrigger,
}

/// Fixed question text per field.
pub fn template_question(field: &str) -> String {
    match canonical_field(field).unwrap_or(field) {
        "application" => "What task do you want the model for, for example land cover classification or flood mapping?",
        "modality" => "Which data modality will you use, for example multispectral, SAR, RGB or hyperspectral?",
        "sensor" => "Which sensor does your imagery come from, for example Sentinel-2 or Landsat-8?",
        "spatial_resolution" => "What spatial resolution does your imagery have?",
        "temporal_resolution" => "How often are your images acquired, or do you need time series?",
        "bands" => "Which spectral bands are available in your data?",
        "avaliable_data" => "How much labeled training data do you have for fine-tuning?",
        "deployment_device" => "Where will the model run, for example a GPU server, a workstation or an edge device?",
        "priority_metrics" => "Which evaluation metrics matter most to you?",
        "min_performance" => "Do you need a minimum score on some metric, for example accuracy of at least 85?",
        "region" => "Which geographic region will you apply the model to?",
        "domain_keywords" => "Are there domain keywords that describe your use case?",
        _ => "Can you tell me more about your requirements?",
    }
    .to_string()
}

fn trigger_description(trigger: ClarificationTrigger) -> &'static str {
    match trigger {
        ClarificationTrigger::MissingMandatory => "mandatory fields are missing",
        ClarificationTrigger::TooManyCandidates => "too many candidate models satisfy the current constraints",
        ClarificationTrigger::LowConfidence => "the ranking of the candidate models is uncertain",
    }
}

pub fn clarification_prompt(query: &StructuredQuery, trigger: ClarificationTrigger, unset: &[&str], context: Option<&str>) -> String {
    let mut p = format!(
        "You are helping a user choose a remote sensing foundation model.\n\
         More information is needed because {}.\n\n\
         Current structured query:\n{}\n\n\
         Fields not yet specified: {}\n",
        trigger_description(trigger),
        query.to_json_pretty(),
        unset.join(", ")
    );
    if let Some(ctx) = context.filter(|c| !c.trim().is_empty()) {
        p.push_str(&format!("\nCandidate models under consideration:\n{}\n", ctx.trim()));
    }
    p.push_str(&format!(
        "\nAsk at most {MAX_QUESTIONS_PER_ROUND} short questions about unspecified fields whose answers would best \
         separate the candidates. Output only JSON:\n\
         [{{\"field_path\": <field name>, \"question\": <question text>}}]\n"
    ));
    p
}

fn parse_questions(text: &str, unset: &[&str]) -> Vec<ClarificationQuestion> {
    let items = match extract_json(text) {
        Some(Value::Array(items)) => items,
        Some(Value::Object(map)) => map.values().find_map(Value::as_array).cloned().unwrap_or_default(),
        _ => return Vec::new(),
    };
    let mut out: Vec<ClarificationQuestion> = Vec::new();
    for item in items {
        let (Some(field), Some(question)) = (
            item.get("field_path").and_then(Value::as_str).and_then(canonical_field),
            item.get("question").and_then(Value::as_str).map(str::trim),
        ) else {
            continue;
        };
        if question.is_empty() || !unset.contains(&field) || out.iter().any(|q| q.field_path == field) {
            continue;
        }
        out.push(ClarificationQuestion {
            field_path: field.to_string(),
            question: question.to_string(),
        });
        if out.len() == MAX_QUESTIONS_PER_ROUND {
            break;
        }
    }
    out
}

fn fallback_questions(unset: &[&str]) -> Vec<ClarificationQuestion> {
    let preferred = FALLBACK_PRIORITY.iter().filter(|f| unset.contains(f));
    let rest = unset.iter().filter(|f| !FALLBACK_PRIORITY.contains(f));
    preferred
        .chain(rest)
        .take(MAX_QUESTIONS_PER_ROUND)
        .map(|f| ClarificationQuestion {
            field_path: f.to_string(),
            question: template_question(f),
        })
        .collect()
}

/// Questions for one clarification round. Missing mandatory fields get
/// fixed templates; otherwise the generator proposes questions about
/// unset fields, with a fixed priority list as fallback.
pub fn generate_clarifications<G: TextGenerator + ?Sized>(
    generator: &G,
    query: &StructuredQuery,
    trigger: ClarificationTrigger,
    round_index: u32,
    context: Option<&str>,
) -> Result<ClarificationRequest, DialogueError> {
    if round_index == 0 || round_index > MAX_ROUNDS {
        return Err(DialogueError::RoundOutOfRange(round_index));
    }
    let missing = missing_mandatory(query);
    if trigger == ClarificationTrigger::MissingMandatory || !missing.is_empty() {
        if missing.is_empty() {
            return Err(DialogueError::NothingToAsk);
        }
        return Ok(ClarificationRequest {
            questions: missing
                .iter()
                .map(|f| ClarificationQuestion {
                    field_path: f.to_string(),
                    question: template_question(f),
                })
                .collect(),
            round_index,
            trigger: ClarificationTrigger::MissingMandatory,
        });
    }
    let unset: Vec<&str> = query
        .unset_fields()
        .into_iter()
        .filter(|f| !MANDATORY_FIELDS.contains(f))
        .collect();
    if unset.is_empty() {
        return Err(DialogueError::NothingToAsk);
    }
    let request = GenerationRequest::new(clarification_prompt(query, trigger, &unset, context));
    let mut questions = match generator.generate(&request) {
        Ok(result) => parse_questions(&result.text, &unset),
        Err(e) => {
            tracing::warn!(error = %e, "clarification generation failed");
            Vec::new()
        }
    };
    if questions.is_empty() {
        questions = fallback_questions(&unset);
    }
    Ok(ClarificationRequest {
        questions,
        round_index,
        trigger,
    })
}

// ---------------------------------------------------------------------------
// Explanations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub model_name: String,
    pub explanation: Vec<String>,
    pub paper_link: Option<String>,
    pub repository: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSet {
    pub entries: Vec<ExplanationEntry>,
    /// Entries built from ranking reasons because the generation was unusable.
    pub fallback_count: usize,
}

pub fn explanation_prompt(query: &StructuredQuery, ranked_models: &str) -> String {
    format!(
        "You are an expert in remote sensing foundation model selection.\n\n\
         The structured user query is:\n{}\n\n\
         The final ranked candidate models with their metadata are:\n{ranked_models}\n\n\
         Your task:\n\
         1. For each model, output a JSON object with:\n   \
         - \"model_name\"\n   \
         - \"explanation\" (several bullet points on why it is recommended)\n   \
         - \"paper_link\"\n   \
         - \"repository\"\n\
         2. Highlight how the model satisfies or partially satisfies the query.\n\
         3. Mention key trade-offs if relevant (accuracy vs. efficiency, modality \n\
         coverage, etc.).\n",
        query.to_json_pretty()
    )
}

fn bullets(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim().trim_start_matches(['-', '*', '•']).trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        Some(Value::String(s)) => s
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*', '•']).trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        _ => Vec::new(),
    }
}

/// `(model_name, bullets)` pairs from an explanation generation.
pub fn parse_explanation_output(text: &str) -> Option<Vec<(String, Vec<String>)>> {
    let items = match extract_json(text)? {
        Value::Array(items) => items,
        Value::Object(map) if map.contains_key("model_name") => vec![Value::Object(map)],
        Value::Object(map) => map.values().find_map(Value::as_array)?.clone(),
        _ => return None,
    };
    let out: Vec<(String, Vec<String>)> = items
        .iter()
        .filter_map(|item| {
            let name = item.get("model_name").or_else(|| item.get("model"))?.as_str()?.trim();
            (!name.is_empty()).then(|| (name.to_string(), bullets(item.get("explanation"))))
        })
        .collect();
    (!out.is_empty()).then_some(out)
}

/// One generation call explaining the final ranking. Links always come from
/// the catalog, never from the generation.
pub fn generate_explanations<G: TextGenerator + ?Sized>(
    generator: &G,
    query: &StructuredQuery,
    ranked: &[RankedCandidate],
    catalog: &Catalog,
) -> Result<ExplanationSet, DialogueError> {
    if ranked.is_empty() {
        return Err(DialogueError::EmptyRanking);
    }
    let records = ranked
        .iter()
        .map(|r| catalog.get(&r.model_id).ok_or_else(|| DialogueError::UnknownModel(r.model_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let block: String = records
        .iter()
        .zip(ranked)
        .map(|(rec, r)| {
            let mut s = candidate_summary(r.rank as usize, rec);
            for reason in &r.reasons {
                s.push_str(&format!("   - {reason}\n"));
            }
            if let Some(l) = &rec.paper_link {
                s.push_str(&format!("   paper_link: {l}\n"));
            }
            if let Some(l) = &rec.repository {
                s.push_str(&format!("   repository: {l}\n"));
            }
            s
        })
        .collect();
    let parsed = match generator.generate(&GenerationRequest::new(explanation_prompt(query, &block))) {
        Ok(result) => parse_explanation_output(&result.text).unwrap_or_default(),
        Err(e) => {
            tracing::warn!(error = %e, "explanation generation failed");
            Vec::new()
        }
    };
    let mut fallback_count = 0;
    let entries = records
        .iter()
        .zip(ranked)
        .map(|(rec, r)| {
            let generated = parsed
                .iter()
                .find(|(name, _)| {
                    let n = name.to_lowercase();
                    n == rec.model_name.to_lowercase() || n == rec.model_id.to_lowercase()
                })
                .map(|(_, b)| b.clone())
                .filter(|b| !b.is_empty());
            let explanation = generated.unwrap_or_else(|| {
                fallback_count += 1;
                r.reasons.clone()
            });
            ExplanationEntry {
                model_name: rec.model_name.clone(),
                explanation,
                paper_link: rec.paper_link.clone(),
                repository: rec.repository.clone(),
            }
        })
        .collect();
    Ok(ExplanationSet { entries, fallback_count })
}
