//! The selection loop as an explicit per-session state machine.
//!
//! Each call to [`Agent::advance`] executes one phase. Clarification
//! rounds pause the machine in `awaiting_answers`; answers re-enter at the
//! parsed state and retrieval, filtering and ranking run again from scratch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ModelRecord};
use crate::dialogue::{
    generate_clarifications, generate_explanations, ClarificationRequest, ClarificationTrigger, DialogueError,
    ExplanationEntry,
};
use crate::gateway::{Embedder, GenerationRequest, TextGenerator};
use crate::memory::{format_memory_context, recall_memory, MemoryError, MemoryStore};
use crate::query::{merge_answers, missing_mandatory, parse_query, ClarificationAnswer, QueryError, StructuredQuery};
use crate::ranking::{
    constraint_checks, hard_filter, icl_rank, ConstraintCheck, Elimination, RankedCandidate, RankingConfig,
    RankingError, Survivor,
};
use crate::retrieval::{RetrievalError, RetrievalHit, VectorIndex};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("session complete")]
    SessionComplete,
    #[error("answers are only accepted while awaiting answers (phase is {0:?})")]
    UnexpectedAnswers(Phase),
    #[error("the session is awaiting answers")]
    AnswersRequired,
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Parsing,
    AwaitingAnswers,
    Retrieving,
    Filtering,
    Ranking,
    Explaining,
    Done,
    FallbackDone,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::FallbackDone)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_clarify: u32,
    pub max_candidates: usize,
    pub confidence_threshold: f64,
    pub retrieval_k: usize,
    pub retrieval_min_similarity: f64,
    pub ranking: RankingConfig,
    pub memory_m: usize,
    pub memory_min_similarity: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_clarify: 3,
            max_candidates: 15,
            confidence_threshold: 0.60,
            retrieval_k: 20,
            retrieval_min_similarity: 0.30,
            ranking: RankingConfig::default(),
            memory_m: 3,
            memory_min_similarity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLimits {
    pub max_candidates: usize,
    pub confidence_threshold: f64,
    pub retrieval_k: usize,
    pub retrieval_min_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub model_id: String,
    pub model_name: String,
    pub rank: u32,
    pub selection_confidence: f64,
    pub reasons: Vec<String>,
    pub explanation: Vec<String>,
    pub paper_link: Option<String>,
    pub repository: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosestMatch {
    pub model_id: String,
    pub satisfied: usize,
    pub total: usize,
    pub similarity: f64,
    pub checks: Vec<ConstraintCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub raw_query: String,
    pub query: StructuredQuery,
    pub parsed: bool,
    pub clarify_counter: u32,
    pub max_clarify: u32,
    pub candidates: Vec<RetrievalHit>,
    pub survivors: Vec<String>,
    pub eliminated: Vec<Elimination>,
    pub ranking: Vec<RankedCandidate>,
    pub ranking_degraded: bool,
    pub overall_confidence: f64,
    pub phase: Phase,
    pub k: usize,
    pub limits: SessionLimits,
    pub pending: Option<ClarificationRequest>,
    pub trace: Vec<Phase>,
    /// Mandatory fields were still missing when clarification stopped.
    pub incomplete_query: bool,
    pub query_parse_degraded: bool,
    pub recommendations: Vec<Recommendation>,
    pub closest: Option<ClosestMatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputStatus {
    InProgress,
    NeedsClarification,
    Done,
    FallbackDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMetadata {
    pub incomplete_query: bool,
    pub query_parse_degraded: bool,
    pub ranking_degraded: bool,
    pub no_viable_model: bool,
    pub clarify_counter: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutput {
    pub status: OutputStatus,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clarification: Option<ClarificationRequest>,
    pub recommendations: Vec<Recommendation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closest: Option<ClosestMatch>,
    pub metadata: OutputMetadata,
}

impl AgentOutput {
    fn from_state(state: &SessionState) -> Self {
        let status = match state.phase {
            Phase::AwaitingAnswers => OutputStatus::NeedsClarification,
            Phase::Done => OutputStatus::Done,
            Phase::FallbackDone => OutputStatus::FallbackDone,
            _ => OutputStatus::InProgress,
        };
        AgentOutput {
            status,
            phase: state.phase,
            clarification: (state.phase == Phase::AwaitingAnswers)
                .then(|| state.pending.clone())
                .flatten(),
            recommendations: state.recommendations.clone(),
            overall_confidence: (state.phase == Phase::Done).then_some(state.overall_confidence),
            closest: state.closest.clone(),
            metadata: OutputMetadata {
                incomplete_query: state.incomplete_query,
                query_parse_degraded: state.query_parse_degraded,
                ranking_degraded: state.ranking_degraded,
                no_viable_model: state.phase == Phase::FallbackDone && state.closest.is_none(),
                clarify_counter: state.clarify_counter,
            },
        }
    }
}

/// Picks the candidate satisfying the most hard constraints; ties go to
/// higher similarity, then to the smaller key. `None` when no candidate
/// resolves in the catalog.
pub fn select_closest_model(
    candidates: &[RetrievalHit],
    query: &StructuredQuery,
    catalog: &Catalog,
) -> Option<ClosestMatch> {
    candidates
        .iter()
        .filter_map(|hit| {
            let record = catalog.get(&hit.key)?;
            let checks = constraint_checks(record, query);
            Some(ClosestMatch {
                model_id: hit.key.clone(),
                satisfied: checks.iter().filter(|c| c.satisfied).count(),
                total: checks.len(),
                similarity: hit.similarity,
                checks,
            })
        })
        .min_by(|a, b| {
            b.satisfied
                .cmp(&a.satisfied)
                .then(b.similarity.total_cmp(&a.similarity))
                .then_with(|| a.model_id.cmp(&b.model_id))
        })
}

/// Supplies answers to clarification questions outside the service path.
pub trait AnswerSource: Send + Sync {
    fn answer(&self, state: &SessionState, request: &ClarificationRequest) -> Vec<ClarificationAnswer>;
}

/// A generator playing the user: it sees the original request and one
/// question at a time. "UNKNOWN" or empty replies leave a field unset.
pub struct SimulatedUser<G> {
    pub generator: G,
}

pub fn simulated_user_prompt(raw_query: &str, field_path: &str, question: &str) -> String {
    format!(
        "You are a remote sensing practitioner looking for a foundation model.\n\
         Your original request was:\n{raw_query}\n\n\
         The assistant asks about `{field_path}`:\n{question}\n\n\
         Answer in a few words, consistent with your request. Reply UNKNOWN if you have no preference.\n"
    )
}

impl<G: TextGenerator> AnswerSource for SimulatedUser<G> {
    fn answer(&self, state: &SessionState, request: &ClarificationRequest) -> Vec<ClarificationAnswer> {
        request
            .questions
            .iter()
            .filter_map(|q| {
                let prompt = simulated_user_prompt(&state.raw_query, &q.field_path, &q.question);
                let text = self.generator.generate(&GenerationRequest::new(prompt)).ok()?.text;
                let text = text.trim();
                (!text.is_empty() && !text.eq_ignore_ascii_case("unknown"))
                    .then(|| ClarificationAnswer::new(q.field_path.clone(), text))
            })
            .collect()
    }
}

/// Fixed answers by field name.
#[derive(Debug, Clone, Default)]
pub struct StaticAnswers(pub Vec<(String, String)>);

impl AnswerSource for StaticAnswers {
    fn answer(&self, _: &SessionState, request: &ClarificationRequest) -> Vec<ClarificationAnswer> {
        request
            .questions
            .iter()
            .filter_map(|q| {
                self.0
                    .iter()
                    .find(|(f, _)| crate::query::canonical_field(f) == crate::query::canonical_field(&q.field_path))
                    .map(|(_, a)| ClarificationAnswer::new(q.field_path.clone(), a.clone()))
            })
            .collect()
    }
}

pub struct Agent {
    pub catalog: Arc<Catalog>,
    pub index: Arc<VectorIndex>,
    pub generator: Arc<dyn TextGenerator>,
    pub embedder: Arc<dyn Embedder>,
    pub memory: Arc<MemoryStore>,
    pub config: AgentConfig,
}

/// Upper bound on `advance` calls for any session under `config`.
pub fn step_bound(config: &AgentConfig) -> usize {
    // Each round: parsing, retrieving, filtering, ranking, awaiting; the
    // final pass adds explaining.
    6 * (config.max_clarify as usize + 1) + 2
}

impl Agent {
    pub fn new_session(&self, session_id: impl Into<String>, raw_query: &str, k: usize) -> Result<SessionState, OrchestratorError> {
        if raw_query.trim().is_empty() {
            return Err(QueryError::EmptyInput.into());
        }
        if k == 0 {
            return Err(OrchestratorError::InvalidK);
        }
        Ok(SessionState {
            session_id: session_id.into(),
            raw_query: raw_query.to_string(),
            query: StructuredQuery::default(),
            parsed: false,
            clarify_counter: 0,
            max_clarify: self.config.max_clarify,
            candidates: Vec::new(),
            survivors: Vec::new(),
            eliminated: Vec::new(),
            ranking: Vec::new(),
            ranking_degraded: false,
            overall_confidence: 0.0,
            phase: Phase::Parsing,
            k,
            limits: SessionLimits {
                max_candidates: self.config.max_candidates,
                confidence_threshold: self.config.confidence_threshold,
                retrieval_k: self.config.retrieval_k,
                retrieval_min_similarity: self.config.retrieval_min_similarity,
            },
            pending: None,
            trace: Vec::new(),
            incomplete_query: false,
            query_parse_degraded: false,
            recommendations: Vec::new(),
            closest: None,
        })
    }

    /// Executes exactly one phase step.
    pub fn advance(
        &self,
        mut state: SessionState,
        answers: Option<&[ClarificationAnswer]>,
    ) -> Result<(SessionState, AgentOutput), OrchestratorError> {
        if state.phase.is_terminal() {
            return Err(OrchestratorError::SessionComplete);
        }
        match (state.phase, answers) {
            (Phase::AwaitingAnswers, None) => return Err(OrchestratorError::AnswersRequired),
            (phase, Some(_)) if phase != Phase::AwaitingAnswers => {
                return Err(OrchestratorError::UnexpectedAnswers(phase))
            }
            _ => {}
        }
        state.trace.push(state.phase);
        match state.phase {
            Phase::Parsing => self.step_parse(&mut state)?,
            Phase::AwaitingAnswers => {
                let merged = merge_answers(&state.query, answers.unwrap_or_default());
                if !merged.unknown_fields.is_empty() {
                    tracing::warn!(fields = ?merged.unknown_fields, "answers for unknown fields ignored");
                }
                state.query = merged.query;
                state.pending = None;
                state.phase = Phase::Parsing;
            }
            Phase::Retrieving => self.step_retrieve(&mut state)?,
            Phase::Filtering => self.step_filter(&mut state)?,
            Phase::Ranking => self.step_rank(&mut state)?,
            Phase::Explaining => self.step_explain(&mut state)?,
            Phase::Done | Phase::FallbackDone => unreachable!("terminal phases return early"),
        }
        if state.phase.is_terminal() {
            state.trace.push(state.phase);
        }
        let output = AgentOutput::from_state(&state);
        Ok((state, output))
    }

    /// Advances until the session pauses for answers or terminates.
    pub fn run_to_pause(&self, mut state: SessionState) -> Result<(SessionState, AgentOutput), OrchestratorError> {
        loop {
            let (next, output) = self.advance(state, None)?;
            if next.phase == Phase::AwaitingAnswers || next.phase.is_terminal() {
                return Ok((next, output));
            }
            state = next;
        }
    }

    /// Submits answers and runs to the next pause.
    pub fn answer(
        &self,
        state: SessionState,
        answers: &[ClarificationAnswer],
    ) -> Result<(SessionState, AgentOutput), OrchestratorError> {
        let (state, output) = self.advance(state, Some(answers))?;
        if state.phase.is_terminal() {
            return Ok((state, output));
        }
        self.run_to_pause(state)
    }

    /// Runs a session to a terminal phase, answering clarifications from `user`.
    pub fn run_with(
        &self,
        state: SessionState,
        user: &dyn AnswerSource,
    ) -> Result<(SessionState, AgentOutput), OrchestratorError> {
        let (mut state, mut output) = self.run_to_pause(state)?;
        while state.phase == Phase::AwaitingAnswers {
            let request = state.pending.clone().expect("awaiting sessions carry a request");
            let answers = user.answer(&state, &request);
            (state, output) = self.answer(state, &answers)?;
        }
        Ok((state, output))
    }

    fn clarify(&self, state: &mut SessionState, trigger: ClarificationTrigger, context: Option<&str>) -> Result<bool, OrchestratorError> {
        match generate_clarifications(
            self.generator.as_ref(),
            &state.query,
            trigger,
            state.clarify_counter + 1,
            context,
        ) {
            Ok(request) => {
                state.clarify_counter += 1;
                state.pending = Some(request);
                state.phase = Phase::AwaitingAnswers;
                Ok(true)
            }
            Err(DialogueError::NothingToAsk) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    fn can_clarify(&self, state: &SessionState) -> bool {
        state.clarify_counter < state.max_clarify
    }

    fn step_parse(&self, state: &mut SessionState) -> Result<(), OrchestratorError> {
        if !state.parsed {
            let parsed = parse_query(self.generator.as_ref(), &state.raw_query)?;
            state.query = parsed.query;
            state.query_parse_degraded = parsed.degraded;
            state.parsed = true;
        }
        let missing = missing_mandatory(&state.query);
        if !missing.is_empty() && self.can_clarify(state) && self.clarify(state, ClarificationTrigger::MissingMandatory, None)? {
            return Ok(());
        }
        state.incomplete_query = !missing.is_empty();
        state.phase = Phase::Retrieving;
        Ok(())
    }

    fn step_retrieve(&self, state: &mut SessionState) -> Result<(), OrchestratorError> {
        let text = state
            .query
            .render_retrieval_text()
            .unwrap_or_else(|| state.raw_query.clone());
        state.candidates = self.index.search_text(
            self.embedder.as_ref(),
            &text,
            state.limits.retrieval_k,
            state.limits.retrieval_min_similarity,
        )?;
        state.survivors.clear();
        state.eliminated.clear();
        state.ranking.clear();
        state.phase = Phase::Filtering;
        Ok(())
    }

    fn candidate_records(&self, state: &SessionState) -> Vec<&ModelRecord> {
        state
            .candidates
            .iter()
            .filter_map(|h| self.catalog.get(&h.key))
            .collect()
    }

    fn step_filter(&self, state: &mut SessionState) -> Result<(), OrchestratorError> {
        let records = self.candidate_records(state);
        let report = hard_filter(&records, &state.query);
        state.survivors = report.surviving;
        state.eliminated = report.eliminated;
        if state.survivors.is_empty() {
            return self.fallback(state);
        }
        if state.survivors.len() > state.limits.max_candidates && self.can_clarify(state) {
            let names: Vec<&str> = state
                .survivors
                .iter()
                .filter_map(|id| self.catalog.get(id).map(|r| r.model_name.as_str()))
                .collect();
            let context = format!("{} candidates: {}", names.len(), names.join(", "));
            if self.clarify(state, ClarificationTrigger::TooManyCandidates, Some(&context))? {
                return Ok(());
            }
        }
        state.phase = Phase::Ranking;
        Ok(())
    }

    fn fallback(&self, state: &mut SessionState) -> Result<(), OrchestratorError> {
        state.closest = select_closest_model(&state.candidates, &state.query, &self.catalog);
        if let Some(closest) = &state.closest {
            let reasons: Vec<String> = closest
                .checks
                .iter()
                .map(|c| {
                    if c.satisfied {
                        format!("Meets {}: {}", c.constraint, c.detail)
                    } else {
                        format!("Misses {}: {}", c.constraint, c.detail)
                    }
                })
                .chain(std::iter::once(format!(
                    "Closest match: satisfies {} of {} hard constraints",
                    closest.satisfied, closest.total
                )))
                .collect();
            let ranked = vec![RankedCandidate {
                model_id: closest.model_id.clone(),
                rank: 1,
                reasons,
                selection_confidence: 0.0,
            }];
            let explanations = generate_explanations(self.generator.as_ref(), &state.query, &ranked, &self.catalog)?;
            state.recommendations = self.recommendations(&ranked, explanations.entries);
        }
        state.phase = Phase::FallbackDone;
        Ok(())
    }

    fn step_rank(&self, state: &mut SessionState) -> Result<(), OrchestratorError> {
        let survivors: Vec<Survivor<'_>> = state
            .survivors
            .iter()
            .filter_map(|id| {
                let record = self.catalog.get(id)?;
                let similarity = state
                    .candidates
                    .iter()
                    .find(|h| h.key == *id)
                    .map_or(0.0, |h| h.similarity);
                Some(Survivor { record, similarity })
            })
            .collect();
        let hits = recall_memory(
            self.embedder.as_ref(),
            &self.memory,
            &state.raw_query,
            self.config.memory_m.max(1),
            self.config.memory_min_similarity,
        )?;
        let context = format_memory_context(&hits);
        let outcome = icl_rank(
            self.generator.as_ref(),
            &state.query,
            &survivors,
            context.as_deref(),
            &self.config.ranking,
        )?;
        let top = outcome.ranked.iter().take(state.k);
        let n = outcome.ranked.len().min(state.k);
        state.overall_confidence = top.map(|r| r.selection_confidence).sum::<f64>() / n as f64;
        state.ranking = outcome.ranked;
        state.ranking_degraded = outcome.degraded;
        if state.overall_confidence < state.limits.confidence_threshold
            && self.can_clarify(state)
            && self.clarify(state, ClarificationTrigger::LowConfidence, None)?
        {
            return Ok(());
        }
        state.phase = Phase::Explaining;
        Ok(())
    }

    fn step_explain(&self, state: &mut SessionState) -> Result<(), OrchestratorError> {
        let top: Vec<RankedCandidate> = state.ranking.iter().take(state.k).cloned().collect();
        let explanations = generate_explanations(self.generator.as_ref(), &state.query, &top, &self.catalog)?;
        state.recommendations = self.recommendations(&top, explanations.entries);
        let ids = top.iter().map(|r| r.model_id.clone()).collect();
        if let Err(e) = self
            .memory
            .remember(self.embedder.as_ref(), &state.raw_query, &state.query, ids)
        {
            tracing::warn!(error = %e, "failed to record session in memory");
        }
        state.phase = Phase::Done;
        Ok(())
    }

    fn recommendations(&self, ranked: &[RankedCandidate], explanations: Vec<ExplanationEntry>) -> Vec<Recommendation> {
        ranked
            .iter()
            .zip(explanations)
            .map(|(r, e)| Recommendation {
                model_id: r.model_id.clone(),
                model_name: e.model_name,
                rank: r.rank,
                selection_confidence: r.selection_confidence,
                reasons: r.reasons.clone(),
                explanation: e.explanation,
                paper_link: e.paper_link,
                repository: e.repository,
            })
            .collect()
    }
}
