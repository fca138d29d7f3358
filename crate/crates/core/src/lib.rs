//! Iterative LLM-driven architecture search with a bounded feedback memory.
//!
//! The search loop alternates between a code generator, an evaluator, and a
//! prompt improver. Each improvement attempt is recorded as a diagnostic
//! triple `(problem, suggestion, outcome)` in a sliding window of the last
//! `K` attempts, and the window is rendered into the next improver prompt.
//!
//! Two backend families share the same loop code: the LLM/subprocess
//! backends used for real searches, and the deterministic [`sim`] backends
//! used for fast verification.

pub mod analytics;
pub mod config;
pub mod experiment;
pub mod gateway;
pub mod llm;
pub mod memory;
pub mod model;
pub mod prompt;
pub mod search;
pub mod sim;

pub use memory::HistoryWindow;
pub use model::{
    digest, Ablation, Candidate, DatasetSpec, DiagnosticTriple, EvaluationOutcome, FailureKind,
    OutcomeKind, RunConfig, RunLogRecord,
};
pub use prompt::ImproverOutput;
pub use search::{SearchResult, SearchState};
