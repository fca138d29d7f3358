//! The generate / evaluate / improve loop.
//!
//! Each iteration builds a generator prompt from the best candidate and the
//! previous suggestions, evaluates the extracted candidate, updates the best
//! on a strictly greater accuracy, appends `(previous suggestion, outcome)`
//! to the history window, asks the improver for the next suggestions, and
//! appends one record to the run log. All per-iteration state can be
//! rebuilt from the log, which is what [`SearchLoop::resume`] does.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::gateway::Evaluator;
use crate::llm::{ChatTransport, LlmClient, LlmError, SamplingParams};
use crate::memory::HistoryWindow;
use crate::model::{
    digest, Ablation, Candidate, ConfigError, DiagnosticTriple, EvaluationOutcome, FailureKind,
    RunConfig, RunLogRecord,
};
use crate::prompt::{
    extract_code, parse_improver_response, Attempt, Exemplar, GeneratorPromptInputs,
    ImproverOutput, TemplateSet,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt run log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("log {0} already exists; pass --force to overwrite")]
    LogExists(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SearchError + '_ {
    move |source| SearchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What the generator backend sees for one call.
pub struct GenerationRequest<'a> {
    pub system_prompt: &'a str,
    pub prompt: &'a str,
    /// Reference implementation shown in the prompt, if any.
    pub best_source: Option<&'a str>,
    /// Suggestions shown in the prompt, if any.
    pub suggestions: Option<&'a ImproverOutput>,
    pub params: SamplingParams,
}

/// What the improver backend sees for one call.
pub struct ImprovementRequest<'a> {
    pub system_prompt: &'a str,
    pub prompt: &'a str,
    pub best_source: &'a str,
    pub best_accuracy: f64,
    pub current_source: &'a str,
    pub outcome: &'a EvaluationOutcome,
    pub window: &'a HistoryWindow,
    pub params: SamplingParams,
}

/// Produces the raw generator reply for a prompt.
pub trait CodeGenerator {
    fn generate(&mut self, request: &GenerationRequest<'_>) -> Result<String, LlmError>;
}

/// Produces the raw improver reply for a prompt.
pub trait PromptImprover {
    fn improve(&mut self, request: &ImprovementRequest<'_>) -> Result<String, LlmError>;
}

impl<T: ChatTransport> CodeGenerator for LlmClient<T> {
    fn generate(&mut self, request: &GenerationRequest<'_>) -> Result<String, LlmError> {
        self.complete(request.system_prompt, request.prompt, &request.params)
    }
}

impl<T: ChatTransport> PromptImprover for LlmClient<T> {
    fn improve(&mut self, request: &ImprovementRequest<'_>) -> Result<String, LlmError> {
        self.complete(request.system_prompt, request.prompt, &request.params)
    }
}

pub struct Backends {
    pub generator: Box<dyn CodeGenerator + Send>,
    pub improver: Box<dyn PromptImprover + Send>,
    pub evaluator: Box<dyn Evaluator + Send>,
}

/// Timestamp source for log records.
pub trait Clock: Send {
    fn now_ms(&mut self, iteration: u64) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self, _iteration: u64) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// `start_ms + iteration * step_ms`; keeps simulated logs byte-reproducible.
pub struct LogicalClock {
    pub start_ms: u64,
    pub step_ms: u64,
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self {
            start_ms: 0,
            step_ms: 1000,
        }
    }
}

impl Clock for LogicalClock {
    fn now_ms(&mut self, iteration: u64) -> u64 {
        self.start_ms + iteration * self.step_ms
    }
}

/// Destination of run-log records.
pub trait RunLog {
    fn append(&mut self, record: &RunLogRecord) -> Result<(), SearchError>;
    fn path(&self) -> Option<&Path> {
        None
    }
}

impl RunLog for Vec<RunLogRecord> {
    fn append(&mut self, record: &RunLogRecord) -> Result<(), SearchError> {
        self.push(record.clone());
        Ok(())
    }
}

/// Append-only JSON-lines log file.
pub struct JsonlLog {
    path: PathBuf,
    file: File,
    durable: bool,
}

impl JsonlLog {
    /// Creates a new log. Fails with [`SearchError::LogExists`] if a
    /// non-empty file is already there and `overwrite` is false.
    pub fn create(path: &Path, overwrite: bool) -> Result<Self, SearchError> {
        if !overwrite && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false) {
            return Err(SearchError::LogExists(path.to_path_buf()));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            durable: true,
        })
    }

    pub fn open_append(path: &Path) -> Result<Self, SearchError> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            durable: true,
        })
    }

    /// Skip the per-record fsync.
    pub fn without_sync(mut self) -> Self {
        self.durable = false;
        self
    }
}

impl RunLog for JsonlLog {
    fn append(&mut self, record: &RunLogRecord) -> Result<(), SearchError> {
        let mut line = serde_json::to_string(record).expect("run log records always serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(io_err(&self.path))?;
        if self.durable {
            self.file.sync_data().map_err(io_err(&self.path))?;
        }
        Ok(())
    }

    fn path(&self) -> Option<&Path> {
        Some(&self.path)
    }
}

/// Serializes records exactly as [`JsonlLog`] writes them.
pub fn to_jsonl(records: &[RunLogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("run log records always serialize"));
        out.push('\n');
    }
    out
}

/// Loop variables, all derivable from the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub iteration: u64,
    pub best_candidate: Option<Candidate>,
    pub best_accuracy: f64,
    pub pending_suggestions: Option<ImproverOutput>,
    pub window: HistoryWindow,
    pub llm_calls: u64,
    pub successful_evaluations: u64,
    /// Best distinct candidates, highest accuracy first (extended prompts).
    pub exemplars: Vec<Exemplar>,
    /// Last `K` attempts, oldest first (extended prompts).
    pub recent_attempts: VecDeque<Attempt>,
}

impl SearchState {
    pub fn new(window_size: usize) -> Self {
        Self {
            iteration: 0,
            best_candidate: None,
            best_accuracy: 0.0,
            pending_suggestions: None,
            window: HistoryWindow::new(window_size),
            llm_calls: 0,
            successful_evaluations: 0,
            exemplars: Vec::new(),
            recent_attempts: VecDeque::new(),
        }
    }

    /// Whether `outcome` would replace the current best: strictly greater
    /// accuracy, or the first success of the run.
    pub fn improves_best(&self, outcome: &EvaluationOutcome) -> bool {
        outcome
            .accuracy()
            .is_some_and(|a| a > self.best_accuracy || self.best_candidate.is_none())
    }

    /// Folds one log record into the state.
    pub fn apply(&mut self, record: &RunLogRecord, top_k: usize) {
        self.iteration = record.iteration;
        if let Some(acc) = record.outcome.accuracy() {
            if self.improves_best(&record.outcome) {
                self.best_accuracy = acc;
                self.best_candidate = Some(Candidate::new(
                    record.iteration,
                    record.iteration,
                    record.source_text.clone(),
                ));
            }
            self.successful_evaluations += 1;
            self.insert_exemplar(&record.source_text, acc, top_k.max(1));
        }
        self.window.push(record.triple_appended.clone());
        if self.recent_attempts.len() == self.window.capacity() {
            self.recent_attempts.pop_front();
        }
        self.recent_attempts.push_back(Attempt {
            source_text: record.source_text.clone(),
            outcome: record.outcome.clone(),
        });
        self.pending_suggestions = record.improver.clone();
        self.llm_calls = record.llm_calls;
    }

    fn insert_exemplar(&mut self, source: &str, accuracy: f64, top_k: usize) {
        if let Some(pos) = self.exemplars.iter().position(|e| e.source_text == source) {
            if self.exemplars[pos].accuracy >= accuracy {
                return;
            }
            self.exemplars.remove(pos);
        }
        let at = self
            .exemplars
            .iter()
            .position(|e| e.accuracy < accuracy)
            .unwrap_or(self.exemplars.len());
        self.exemplars.insert(
            at,
            Exemplar {
                source_text: source.to_string(),
                accuracy,
            },
        );
        self.exemplars.truncate(top_k);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_candidate: Option<Candidate>,
    pub best_accuracy: f64,
    pub total_iterations: u64,
    pub successful_evaluations: u64,
    pub log_path: Option<PathBuf>,
}

impl SearchResult {
    fn from_state(state: &SearchState, log_path: Option<PathBuf>) -> Self {
        Self {
            best_candidate: state.best_candidate.clone(),
            best_accuracy: state.best_accuracy,
            total_iterations: state.iteration,
            successful_evaluations: state.successful_evaluations,
            log_path,
        }
    }
}

type ProgressHook = Box<dyn FnMut(&RunLogRecord) + Send>;

pub struct SearchLoop {
    config: RunConfig,
    templates: TemplateSet,
    backends: Backends,
    clock: Box<dyn Clock>,
    progress: Option<ProgressHook>,
}

impl SearchLoop {
    pub fn new(config: RunConfig, backends: Backends) -> Result<Self, SearchError> {
        config.validate()?;
        Ok(Self {
            config,
            templates: TemplateSet::builtin(),
            backends,
            clock: Box::new(SystemClock),
            progress: None,
        })
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_clock(mut self, clock: impl Clock + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn with_progress(mut self, hook: impl FnMut(&RunLogRecord) + Send + 'static) -> Self {
        self.progress = Some(Box::new(hook));
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn initial_state(&self) -> SearchState {
        SearchState::new(self.config.window_size)
    }

    fn params(&self, counter: u64) -> SamplingParams {
        SamplingParams {
            base_seed: self.config.seed,
            call_counter: counter,
            ..self.config.sampling
        }
    }

    /// Runs one iteration, appends its record to `log`, and advances `state`.
    pub fn run_iteration(
        &mut self,
        state: &mut SearchState,
        log: &mut dyn RunLog,
    ) -> Result<RunLogRecord, SearchError> {
        let cfg = &self.config;
        let iteration = state.iteration + 1;
        let use_reference = cfg.ablation != Ablation::NoReference;
        let use_feedback = cfg.ablation != Ablation::NoFeedback;

        // 1. generate
        let best_for_prompt = state
            .best_candidate
            .as_ref()
            .filter(|_| use_reference)
            .map(|c| c.source_text.clone());
        let suggestions_for_prompt = state.pending_suggestions.clone().filter(|_| use_feedback);
        let mut inputs = GeneratorPromptInputs::new(cfg.dataset.clone());
        inputs.best_source = best_for_prompt.clone();
        inputs.previous_suggestions = suggestions_for_prompt.clone();
        inputs.extended = cfg.extended_prompt && use_reference;
        if inputs.extended {
            inputs.exemplars = state.exemplars.clone();
            inputs.recent_attempts = state.recent_attempts.iter().cloned().collect();
        }
        let prompt = self.templates.generator_prompt(&inputs);
        let prompt_digest = digest(&prompt);
        let mut calls = state.llm_calls;
        let reply = self.backends.generator.generate(&GenerationRequest {
            system_prompt: &self.templates.generator_system,
            prompt: &prompt,
            best_source: best_for_prompt.as_deref(),
            suggestions: suggestions_for_prompt.as_ref(),
            params: self.params(calls),
        });
        calls += 1;

        // 2. validate + evaluate
        let (source_text, outcome) = match reply {
            Ok(text) => match extract_code(&text) {
                Ok(source) => {
                    let candidate = Candidate::new(iteration, iteration, source);
                    let outcome = self.backends.evaluator.evaluate(&candidate);
                    (candidate.source_text, outcome)
                }
                Err(e) => (String::new(), EvaluationOutcome::failure(FailureKind::Extraction, e.to_string())),
            },
            Err(LlmError::EmptyResponse) => (
                String::new(),
                EvaluationOutcome::failure(FailureKind::Extraction, LlmError::EmptyResponse.to_string()),
            ),
            Err(e @ LlmError::Transport { .. }) => (
                String::new(),
                EvaluationOutcome::failure(FailureKind::Runtime, e.to_string()),
            ),
        };

        // 3. best update (strict)
        let (best_source_after, best_accuracy_after) = if state.improves_best(&outcome) {
            (source_text.clone(), outcome.accuracy().unwrap_or(0.0))
        } else {
            (
                state
                    .best_candidate
                    .as_ref()
                    .map(|c| c.source_text.clone())
                    .unwrap_or_default(),
                state.best_accuracy,
            )
        };

        // 4. window append of (s_{t-1}, a_t)
        let triple = DiagnosticTriple::from_suggestions(state.pending_suggestions.as_ref(), outcome.clone());
        let window_after = state.window.append(triple.clone());

        // 5. improve
        let improver = if use_feedback {
            let prompt = self.templates.improver_prompt(
                &best_source_after,
                best_accuracy_after,
                &source_text,
                &outcome,
                &window_after,
            );
            let reply = self.backends.improver.improve(&ImprovementRequest {
                system_prompt: &self.templates.improver_system,
                prompt: &prompt,
                best_source: &best_source_after,
                best_accuracy: best_accuracy_after,
                current_source: &source_text,
                outcome: &outcome,
                window: &window_after,
                params: self.params(calls),
            });
            calls += 1;
            match reply {
                Ok(text) => Some(parse_improver_response(&text)),
                Err(e) => {
                    log::warn!("iteration {iteration}: improver call failed: {e}");
                    None
                }
            }
        } else {
            None
        };

        // 6. record
        let record = RunLogRecord {
            iteration,
            timestamp: self.clock.now_ms(iteration),
            source_hash: digest(&source_text),
            source_text,
            outcome,
            triple_appended: triple,
            best_accuracy_after,
            prompt_digest,
            improver,
            llm_calls: calls,
        };
        log.append(&record)?;
        state.apply(&record, self.config.top_k_exemplars);
        if let Some(hook) = self.progress.as_mut() {
            hook(&record);
        }
        Ok(record)
    }

    /// Runs from the empty state until `max_iterations`.
    pub fn run(&mut self, log: &mut dyn RunLog) -> Result<SearchResult, SearchError> {
        let mut state = self.initial_state();
        self.continue_run(&mut state, log)
    }

    fn continue_run(
        &mut self,
        state: &mut SearchState,
        log: &mut dyn RunLog,
    ) -> Result<SearchResult, SearchError> {
        while state.iteration < self.config.max_iterations {
            self.run_iteration(state, log)?;
        }
        Ok(SearchResult::from_state(state, log.path().map(Path::to_path_buf)))
    }

    /// Creates `path` (refusing to clobber a non-empty file unless
    /// `overwrite`) and runs the search into it.
    pub fn run_to_file(&mut self, path: &Path, overwrite: bool) -> Result<SearchResult, SearchError> {
        let mut log = JsonlLog::create(path, overwrite)?;
        self.run(&mut log)
    }

    /// Rebuilds the state from the log at `path` and continues to
    /// `max_iterations`, appending to the same file.
    pub fn resume(&mut self, path: &Path) -> Result<SearchResult, SearchError> {
        let recovered = recover_log(path)?;
        if recovered.truncated_bytes > 0 {
            log::warn!(
                "{}: dropped a torn final line of {} bytes",
                path.display(),
                recovered.truncated_bytes
            );
        }
        let state = replay(&recovered.records, &self.config)?;
        let mut state = state;
        let mut log = JsonlLog::open_append(path)?;
        self.continue_run(&mut state, &mut log)
    }
}

/// Rebuilds [`SearchState`] from log records, checking their consistency.
pub fn replay(records: &[RunLogRecord], config: &RunConfig) -> Result<SearchState, SearchError> {
    let mut state = SearchState::new(config.window_size);
    for (i, record) in records.iter().enumerate() {
        let line = i + 1;
        if record.iteration != line as u64 {
            return Err(SearchError::CorruptLog {
                line,
                reason: format!("expected iteration {line}, found {}", record.iteration),
            });
        }
        state.apply(record, config.top_k_exemplars);
        if state.best_accuracy != record.best_accuracy_after {
            return Err(SearchError::CorruptLog {
                line,
                reason: format!(
                    "best_accuracy_after {} disagrees with replayed best {}",
                    record.best_accuracy_after, state.best_accuracy
                ),
            });
        }
    }
    Ok(state)
}

#[derive(Debug)]
pub struct RecoveredLog {
    pub records: Vec<RunLogRecord>,
    /// Bytes removed from the end of the file (a torn final line).
    pub truncated_bytes: u64,
}

/// Parses a run log. Complete lines must all be valid records; bytes after
/// the last newline are a torn write and are truncated from the file.
pub fn recover_log(path: &Path) -> Result<RecoveredLog, SearchError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let records = parse_lines(&bytes[..complete_len])?;
    let truncated_bytes = (bytes.len() - complete_len) as u64;
    if truncated_bytes > 0 {
        let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        file.set_len(complete_len as u64).map_err(io_err(path))?;
        file.sync_all().map_err(io_err(path))?;
    }
    Ok(RecoveredLog {
        records,
        truncated_bytes,
    })
}

/// Reads a complete run log without modifying it. A torn final line is an
/// error here; use [`recover_log`] before resuming.
pub fn read_log(path: &Path) -> Result<Vec<RunLogRecord>, SearchError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let line = bytes.iter().filter(|&&b| b == b'\n').count() + 1;
        return Err(SearchError::CorruptLog {
            line,
            reason: "final line is incomplete".into(),
        });
    }
    parse_lines(&bytes)
}

fn parse_lines(bytes: &[u8]) -> Result<Vec<RunLogRecord>, SearchError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SearchError::CorruptLog {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        reason: "invalid UTF-8".into(),
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let record: RunLogRecord = serde_json::from_str(line).map_err(|e| SearchError::CorruptLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some(prev) = records.last().map(|r: &RunLogRecord| r.iteration) {
            if record.iteration <= prev {
                return Err(SearchError::CorruptLog {
                    line: i + 1,
                    reason: format!("iteration {} does not follow {prev}", record.iteration),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}
