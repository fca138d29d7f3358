//! Bounded sliding window of diagnostic triples.
//!
//! The window keeps exactly the most recent `K` improvement attempts in
//! insertion order. Eviction is strict FIFO and failures are kept like
//! successes, so the rendered history depends only on the last `K` appends.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::{truncate_message, DiagnosticTriple, EvaluationOutcome, MAX_MESSAGE_CHARS};

pub const EMPTY_HISTORY_MARKER: &str = "(no prior attempts)";
const HISTORY_HEADER: &str = "Recent improvement attempts (oldest first):";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    capacity: usize,
    entries: VecDeque<DiagnosticTriple>,
}

impl HistoryWindow {
    /// Creates an empty window. A capacity of zero is raised to one.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries, oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &DiagnosticTriple> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&DiagnosticTriple> {
        self.entries.back()
    }

    /// Returns a new window with `triple` as the newest entry.
    pub fn append(&self, triple: DiagnosticTriple) -> Self {
        let mut next = self.clone();
        next.push(triple);
        next
    }

    /// In-place variant of [`HistoryWindow::append`].
    pub fn push(&mut self, triple: DiagnosticTriple) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(triple);
    }

    /// Upper bound on the length, in characters, of [`render_history`] for
    /// a window of this capacity.
    pub fn max_rendered_chars(&self) -> usize {
        HISTORY_HEADER.len() + 1 + EMPTY_HISTORY_MARKER.len() + 1 + self.capacity * max_entry_chars()
    }
}

impl Default for HistoryWindow {
    fn default() -> Self {
        Self::new(crate::model::DEFAULT_WINDOW_SIZE)
    }
}

fn max_entry_chars() -> usize {
    // "Attempt N:" header (N < 10^20), three labelled lines, and the
    // longest outcome prefix. Continuation lines gain a 4-space indent, so a
    // field of n chars renders to at most 5n chars.
    let labels = "Attempt 00000000000000000000:\n  Problem: \n  Suggestion: \n  Outcome: error (ExtractionError): \n";
    labels.len() + 3 * 5 * MAX_MESSAGE_CHARS
}

/// Renders an outcome the way prompts show it: `accuracy: 28.2%` or
/// `error (Timeout): <message>`.
pub fn render_outcome(outcome: &EvaluationOutcome) -> String {
    match outcome {
        EvaluationOutcome::Success { accuracy } => {
            format!("accuracy: {}", crate::analytics::format_percent(*accuracy))
        }
        EvaluationOutcome::Failure { message, .. } => {
            format!("error ({}): {}", outcome.kind(), single_line(&truncate_message(message)))
        }
    }
}

fn single_line(text: &str) -> String {
    text.trim().replace('\n', "\n    ")
}

fn field(text: &str) -> String {
    if text.trim().is_empty() {
        "(none)".to_string()
    } else {
        single_line(&truncate_message(text))
    }
}

/// Textual history block, numbered oldest first.
pub fn render_history(window: &HistoryWindow) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    if window.is_empty() {
        out.push_str(EMPTY_HISTORY_MARKER);
        out.push('\n');
        return out;
    }
    for (i, entry) in window.entries().enumerate() {
        out.push_str(&format!(
            "Attempt {}:\n  Problem: {}\n  Suggestion: {}\n  Outcome: {}\n",
            i + 1,
            field(&entry.problem),
            field(&entry.suggestion),
            render_outcome(&entry.outcome),
        ));
    }
    out
}
