//! Question answering over clause-structured contract documents and a
//! relational contract store.
//!
//! Questions are routed by pattern rules either to a retrieval path (clause
//! chunks, embeddings, filtered similarity search, grounded prompt) or to a
//! text-to-SQL path (schema-aware prompt, read-only validation, bounded
//! execution), and the result is packaged as an [`agents::AnswerEnvelope`]
//! with citations, an optional table and an optional bar-chart spec.

pub mod agents;
pub mod embedding;
pub mod eval;
pub mod ingest;
pub mod llm;
pub mod prompts;
pub mod remote;
pub mod structured;
pub mod vectorstore;
