//! One consultation turn: distill the dialogue into a search query, retrieve
//! evidence from the knowledge index, then read the evidence to answer.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedError, Embedder, EmbedderConfig};
use crate::index::{
    Candidate, FineMode, Granularity, IndexError, KnowledgeIndex, RetrievalResult, DEFAULT_FANOUT,
};
use crate::llm::{ChatMessage, LlmClient, LlmConfig};
use crate::toolcall::{
    baseline_query, parse_tool_call_detailed, render_template, BaselineKind, DialogueHistory,
    DistillTemplate, ParseWarning, ToolCall, ToolCallError, ToolcallError,
};

const DEFAULT_READ_TEMPLATE: &str = include_str!("../assets/read_prompt.txt");
pub const DEFAULT_EVIDENCE_BUDGET: usize = 4000;
pub const TRUNCATION_MARKER: &str = " …[truncated]";
pub const NO_EVIDENCE: &str = "Evidence: (none)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Distill,
    Retrieve,
    Read,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Distill => "distill",
            Step::Retrieve => "retrieve",
            Step::Read => "read",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    LastQuestion,
    History,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSettings {
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_num")]
    pub num: usize,
    #[serde(default = "default_mode")]
    pub mode: FineMode,
    #[serde(default = "default_fanout")]
    pub fanout: usize,
}

fn default_granularity() -> Granularity {
    Granularity::Fine
}
fn default_num() -> usize {
    5
}
fn default_mode() -> FineMode {
    FineMode::Hierarchical
}
fn default_fanout() -> usize {
    DEFAULT_FANOUT
}
fn default_budget() -> usize {
    DEFAULT_EVIDENCE_BUDGET
}
fn default_fallback() -> Fallback {
    Fallback::LastQuestion
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            granularity: default_granularity(),
            num: default_num(),
            mode: default_mode(),
            fanout: default_fanout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub distiller: LlmConfig,
    pub reader: LlmConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
    #[serde(default = "default_budget")]
    pub evidence_budget: usize,
    #[serde(default = "default_fallback")]
    pub fallback_on_parse_failure: Fallback,
}

impl PipelineConfig {
    pub fn new(distiller: LlmConfig, reader: LlmConfig) -> Self {
        Self {
            distiller,
            reader,
            embedder: EmbedderConfig::default(),
            retrieval: RetrievalSettings::default(),
            evidence_budget: DEFAULT_EVIDENCE_BUDGET,
            fallback_on_parse_failure: Fallback::LastQuestion,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("distillation failed and fallback is disabled: {0}")]
    Aborted(DistillFailure),
    #[error("{step} step failed: {message}")]
    Transport { step: Step, message: String },
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] IndexError),
}

impl PipelineError {
    pub fn step(&self) -> Option<Step> {
        match self {
            PipelineError::Aborted(_) => Some(Step::Distill),
            PipelineError::Transport { step, .. } => Some(*step),
            PipelineError::Retrieval(_) => Some(Step::Retrieve),
            _ => None,
        }
    }
}

impl From<EmbedError> for PipelineError {
    fn from(e: EmbedError) -> Self {
        PipelineError::InvalidConfig(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillFailureKind {
    NoToolCall,
    UnbalancedParens,
    EmptyQuery,
    Transport,
}

impl From<ToolCallError> for DistillFailureKind {
    fn from(e: ToolCallError) -> Self {
        match e {
            ToolCallError::NoToolCall => DistillFailureKind::NoToolCall,
            ToolCallError::UnbalancedParens => DistillFailureKind::UnbalancedParens,
            ToolCallError::EmptyQuery => DistillFailureKind::EmptyQuery,
        }
    }
}

/// A distillation that did not yield a usable tool call. Keeps the raw reply
/// for instruction-follow accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillFailure {
    pub kind: DistillFailureKind,
    pub raw_reply: Option<String>,
    pub message: String,
}

impl fmt::Display for DistillFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Distilled {
    Ok {
        call: ToolCall,
        raw_reply: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<ParseWarning>,
    },
    Failed(DistillFailure),
}

impl Distilled {
    pub fn call(&self) -> Option<&ToolCall> {
        match self {
            Distilled::Ok { call, .. } => Some(call),
            Distilled::Failed(_) => None,
        }
    }

    pub fn followed(&self) -> bool {
        matches!(self, Distilled::Ok { .. })
    }
}

fn ms<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1000.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepTimings {
    #[serde(serialize_with = "ms", rename = "distill_ms")]
    pub distill: Duration,
    #[serde(serialize_with = "ms", rename = "retrieve_ms")]
    pub retrieve: Duration,
    #[serde(serialize_with = "ms", rename = "read_ms")]
    pub read: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnResult {
    pub trace_id: String,
    pub question: String,
    pub distilled: Distilled,
    /// Query actually sent to retrieval.
    pub query: String,
    /// Set when the query came from the fallback builder.
    pub fallback_used: Option<Fallback>,
    pub retrieval: RetrievalResult,
    pub answer: String,
    pub timings: StepTimings,
}

/// Truncates to at most `budget` characters, ending with a marker when cut.
pub fn truncate_chars(text: &str, budget: usize) -> String {
    if text.chars().count() <= budget {
        return text.to_string();
    }
    let marker_len = TRUNCATION_MARKER.chars().count();
    if budget <= marker_len {
        return text.chars().take(budget).collect();
    }
    let mut out: String = text.chars().take(budget - marker_len).collect();
    out.push_str(TRUNCATION_MARKER);
    out
}

/// Renders retrieved candidates as the reader's evidence block.
pub fn format_evidence(evidence: &[Candidate], budget: usize) -> String {
    if evidence.is_empty() {
        return NO_EVIDENCE.to_string();
    }
    let body = evidence
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. 「{}」: {}", i + 1, c.key, c.evidence_text))
        .collect::<Vec<_>>()
        .join("\n");
    format!("Evidence:\n{}", truncate_chars(&body, budget))
}

/// A configured pipeline with its model clients and embedder.
#[derive(Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    distiller: Arc<dyn LlmClient>,
    reader: Arc<dyn LlmClient>,
    embedder: Arc<dyn Embedder>,
    distill_template: DistillTemplate,
    read_template: String,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish()
    }
}

impl Pipeline {
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        let distiller = config
            .distiller
            .build()
            .map_err(|e| PipelineError::InvalidConfig(format!("distiller: {e}")))?;
        let reader = config
            .reader
            .build()
            .map_err(|e| PipelineError::InvalidConfig(format!("reader: {e}")))?;
        let embedder = config.embedder.build()?;
        Self::with_clients(config, distiller, reader, embedder)
    }

    /// Uses already-built clients; `config.distiller`/`reader`/`embedder` are
    /// kept only for reporting.
    pub fn with_clients(
        config: PipelineConfig,
        distiller: Arc<dyn LlmClient>,
        reader: Arc<dyn LlmClient>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, PipelineError> {
        if config.retrieval.num == 0 || config.evidence_budget == 0 || config.retrieval.fanout == 0
        {
            return Err(PipelineError::InvalidConfig(
                "num, fanout and evidence_budget must be >= 1".into(),
            ));
        }
        Ok(Self {
            config,
            distiller,
            reader,
            embedder,
            distill_template: DistillTemplate::default(),
            read_template: DEFAULT_READ_TEMPLATE.to_string(),
        })
    }

    pub fn with_distill_template(mut self, template: DistillTemplate) -> Self {
        self.distill_template = template;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Asks the distiller for a `search_engine(...)` call.
    pub fn distill(
        &self,
        history: &DialogueHistory,
        question: &str,
    ) -> Result<Distilled, PipelineError> {
        let prompt = self
            .distill_template
            .render(history, question)
            .map_err(|e| match e {
                ToolcallError::EmptyQuestion => PipelineError::EmptyQuestion,
                other => PipelineError::InvalidConfig(other.to_string()),
            })?;
        let reply = match self.distiller.complete(&[ChatMessage::user(prompt)]) {
            Ok(r) => r,
            Err(e) => {
                return Ok(Distilled::Failed(DistillFailure {
                    kind: DistillFailureKind::Transport,
                    raw_reply: None,
                    message: e.to_string(),
                }))
            }
        };
        Ok(match parse_tool_call_detailed(&reply) {
            Ok(p) => Distilled::Ok {
                call: p.call,
                raw_reply: reply,
                warnings: p.warnings,
            },
            Err(e) => Distilled::Failed(DistillFailure {
                kind: e.into(),
                message: e.to_string(),
                raw_reply: Some(reply),
            }),
        })
    }

    /// Searches the index and attaches evidence text to every candidate.
    ///
    /// Coarse hits carry the entity's full attribute set; fine hits carry the
    /// matched item text. Each evidence text is capped at `evidence_budget`
    /// characters.
    pub fn retrieve(
        &self,
        index: &KnowledgeIndex,
        query: &str,
    ) -> Result<RetrievalResult, PipelineError> {
        let s = &self.config.retrieval;
        self.retrieve_as(index, query, s.granularity, s.num)
    }

    /// [`retrieve`](Self::retrieve) with granularity and `num` overridden.
    pub fn retrieve_as(
        &self,
        index: &KnowledgeIndex,
        query: &str,
        granularity: Granularity,
        num: usize,
    ) -> Result<RetrievalResult, PipelineError> {
        let s = &self.config.retrieval;
        let emb = self.embedder.as_ref();
        let mut result = match granularity {
            Granularity::Coarse => index.search_coarse(query, num, emb)?,
            Granularity::Fine => index.search_fine(query, num, emb, s.mode, s.fanout)?,
        };
        for c in &mut result.candidates {
            if c.key.attribute.is_none() {
                let items = index.get_entity(&c.key.entity)?;
                c.evidence_text = items
                    .iter()
                    .map(|it| it.item_text.as_str())
                    .collect::<Vec<_>>()
                    .join("\n");
            }
            c.evidence_text = truncate_chars(&c.evidence_text, self.config.evidence_budget);
        }
        Ok(result)
    }

    pub fn build_read_prompt(
        &self,
        history: &DialogueHistory,
        question: &str,
        evidence: &[Candidate],
    ) -> Result<String, PipelineError> {
        if question.trim().is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        let history = history.render();
        let evidence = format_evidence(evidence, self.config.evidence_budget);
        let question = question.trim().replace('\n', "\n  ");
        Ok(render_template(
            &self.read_template,
            &[
                ("history", &history),
                ("evidence", &evidence),
                ("question", &question),
            ],
        ))
    }

    /// One reader call over the rendered evidence; returns the reply verbatim.
    pub fn read(
        &self,
        history: &DialogueHistory,
        question: &str,
        evidence: &[Candidate],
    ) -> Result<String, PipelineError> {
        let prompt = self.build_read_prompt(history, question, evidence)?;
        let answer = self
            .reader
            .complete(&[ChatMessage::user(prompt)])
            .map_err(|e| PipelineError::Transport {
                step: Step::Read,
                message: e.to_string(),
            })?;
        if answer.trim().is_empty() {
            return Err(PipelineError::Transport {
                step: Step::Read,
                message: "reader returned an empty answer".into(),
            });
        }
        Ok(answer)
    }

    /// Distill, retrieve and read for one question.
    pub fn run_turn(
        &self,
        index: &KnowledgeIndex,
        history: &DialogueHistory,
        question: &str,
    ) -> Result<TurnResult, PipelineError> {
        if question.trim().is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        let mut timings = StepTimings::default();

        let t = Instant::now();
        let distilled = self.distill(history, question)?;
        timings.distill = t.elapsed();

        let (query, fallback_used) = match &distilled {
            Distilled::Ok { call, .. } => (call.query.clone(), None),
            Distilled::Failed(f) if f.kind == DistillFailureKind::Transport => {
                return Err(PipelineError::Transport {
                    step: Step::Distill,
                    message: f.message.clone(),
                })
            }
            Distilled::Failed(f) => {
                let kind = match self.config.fallback_on_parse_failure {
                    Fallback::Fail => return Err(PipelineError::Aborted(f.clone())),
                    Fallback::LastQuestion => BaselineKind::LastQuestion,
                    Fallback::History => BaselineKind::History,
                };
                let q = baseline_query(history, question, kind)
                    .map_err(|_| PipelineError::EmptyQuestion)?;
                (q, Some(self.config.fallback_on_parse_failure))
            }
        };

        let t = Instant::now();
        let retrieval = self.retrieve(index, &query)?;
        timings.retrieve = t.elapsed();

        let t = Instant::now();
        let answer = self.read(history, question, &retrieval.candidates)?;
        timings.read = t.elapsed();

        Ok(TurnResult {
            trace_id: uuid::Uuid::new_v4().to_string(),
            question: question.to_string(),
            distilled,
            query,
            fallback_used,
            retrieval,
            answer,
            timings,
        })
    }
}

/// Appends one turn as a JSON line to a run log.
pub fn append_trace(path: &Path, turn: &TurnResult) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(turn).map_err(std::io::Error::other)?;
    line.push('\n');
    f.write_all(line.as_bytes())
}
