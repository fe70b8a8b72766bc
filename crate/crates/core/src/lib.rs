//! Distill-Retrieve-Read consultation engine.
//!
//! A dialogue is distilled into a `search_engine(...)` query by a model, the
//! query is run against an entity-attribute knowledge index, and a reader
//! model answers from the retrieved evidence. The crate also carries the
//! evaluation harness (hit rate, instruction-follow rate, Elo arena) and an
//! HTTP consultation service.

pub mod bench;
pub mod cli;
pub mod elo;
pub mod embedder;
pub mod index;
pub mod llm;
pub mod pipeline;
pub mod service;
pub mod toolcall;

pub use embedder::{Embedder, EmbedderConfig, EmbeddingVector, LocalHashEmbedder};
pub use index::{
    AttributeKey, Candidate, CandidateKey, FineMode, Granularity, KnowledgeIndex, MedicineRecord,
    RetrievalResult,
};
pub use llm::{ChatMessage, LlmClient, LlmConfig, ScriptEntry, ScriptedLlm};
pub use pipeline::{Pipeline, PipelineConfig, TurnResult};
pub use toolcall::{parse_tool_call, DialogueHistory, ToolCall, Turn};
