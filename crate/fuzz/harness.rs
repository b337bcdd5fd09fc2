//! Fuzz bodies shared by the cargo-fuzz targets and the corpus replay
//! test in fmsel-core, so both exercise the same assertions.
#![allow(dead_code)]

use fmsel_core::catalog::{parse_record_line, validate_record, Catalog};
use fmsel_core::dialogue::parse_explanation_output;
use fmsel_core::eval::{parse_rag_output, parse_ratings, write_ratings};
use fmsel_core::gateway::{
    decode_chat_completion, decode_embedding, GenerationRequest, ScriptFixture, ScriptedProvider, TextGenerator,
};
use fmsel_core::llm_json::extract_json;
use fmsel_core::memory::parse_memory_line;
use fmsel_core::query::{
    decode_query_lenient, merge_answers, parse_min_performance, split_list, ClarificationAnswer, StructuredQuery,
    QUERY_FIELDS,
};
use fmsel_core::ranking::{parse_numbered_listing, parse_ranking_output};
use fmsel_core::retrieval::VectorIndex;

pub fn answer_text(data: &[u8]) {
    let Some((&selector, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let _ = parse_min_performance(text);
    let _ = split_list(text);
    let field = QUERY_FIELDS[selector as usize % QUERY_FIELDS.len()];
    let answers = [ClarificationAnswer::new(field, text)];
    let once = merge_answers(&StructuredQuery::default(), &answers);
    let twice = merge_answers(&once.query, &answers);
    assert_eq!(once.query, twice.query);
}

pub fn catalog_line(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(record) = parse_record_line(text) {
        let _ = validate_record(&record);
        let line = serde_json::to_string(&record).unwrap();
        assert_eq!(parse_record_line(&line).unwrap(), record);
    }
    let (catalog, _) = Catalog::parse_jsonl(text);
    let (again, report) = Catalog::parse_jsonl(&catalog.to_jsonl());
    assert!(report.is_clean());
    assert_eq!(again.len(), catalog.len());
}

pub fn chat_completion(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(result) = decode_chat_completion(text) {
        assert!(result.mean_token_logprob.map_or(true, |l| l <= 0.0));
    }
}

pub fn embedding(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = decode_embedding(text);
}

pub fn explanation_output(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(entries) = parse_explanation_output(text) {
        assert!(entries.iter().all(|(name, _)| !name.is_empty()));
    }
}

pub fn index_cache(data: &[u8]) {
    if let Ok(index) = VectorIndex::decode(data) {
        let bytes = index.encode();
        assert_eq!(VectorIndex::decode(&bytes).unwrap().encode(), bytes);
    }
}

pub fn llm_json(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(v) = extract_json(text) {
        assert!(v.is_object() || v.is_array());
    }
}

pub fn memory_line(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entry) = parse_memory_line(text) {
        assert!(entry.vector.iter().all(|x| x.is_finite()));
    }
}

pub fn rag_output(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for (name, _) in parse_rag_output(text) {
        assert!(!name.trim().is_empty());
    }
}

pub fn ranking_output(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(items) = parse_ranking_output(text) {
        assert!(!items.is_empty());
    }
    let _ = parse_numbered_listing(text);
}

pub fn ratings_file(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_ratings(text) {
        assert_eq!(parse_ratings(&write_ratings(&rows)).unwrap(), rows);
    }
}

pub fn script_fixture(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(fixture) = ScriptFixture::parse(text) {
        let provider = ScriptedProvider::from_fixture(fixture);
        let _ = provider.generate(&GenerationRequest::new("probe").with_seed(7));
    }
}

pub fn structured_query(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(q) = StructuredQuery::from_json(text) {
        assert_eq!(StructuredQuery::from_json(&q.to_json()).unwrap(), q);
        let _ = q.render_retrieval_text();
    }
    if let Some(serde_json::Value::Object(doc)) = extract_json(text) {
        let (q, _) = decode_query_lenient(&doc);
        let _ = q.unset_fields();
    }
}
