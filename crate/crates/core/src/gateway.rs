//! Candidate evaluation backends.
//!
//! The real backend runs the training worker in a fresh subprocess per
//! stage: one JSON request on its stdin, one JSON reply on its stdout. A
//! watchdog kills the worker's whole process group when the evaluation
//! deadline passes. Validation always runs before training, and both stages
//! share one deadline.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{Candidate, DatasetSpec, EvaluationOutcome, FailureKind};

pub const PROTOCOL_VERSION: &str = "1";
pub const DEFAULT_WORKER_SEED: u64 = 43;

const POLL_INTERVAL: Duration = Duration::from_millis(10);
const STDERR_TAIL_BYTES: usize = 64 * 1024;

/// Anything that can turn a candidate into an outcome.
pub trait Evaluator {
    fn evaluate(&mut self, candidate: &Candidate) -> EvaluationOutcome;
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&mut self, candidate: &Candidate) -> EvaluationOutcome {
        (**self).evaluate(candidate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Validate,
    TrainEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub name: String,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            name: "sgd".into(),
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub random_crop_pad: bool,
    pub crop_padding: u32,
    pub horizontal_flip: bool,
    pub normalize: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            random_crop_pad: true,
            crop_padding: 4,
            horizontal_flip: true,
            normalize: true,
        }
    }
}

/// Proxy-training protocol: one epoch of SGD with cosine annealing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub optimizer: OptimizerSpec,
    pub learning_rate: f64,
    pub cosine_annealing: bool,
    pub batch_size: u32,
    pub augmentation: Augmentation,
    /// Fraction of train/test data used; below 1.0 only for smoke tests.
    pub subset_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            optimizer: OptimizerSpec::default(),
            learning_rate: 0.01,
            cosine_annealing: true,
            batch_size: 128,
            augmentation: Augmentation::default(),
            subset_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), crate::model::ConfigError> {
        use crate::model::ConfigError;
        if self.epochs == 0 {
            return Err(ConfigError::invalid("worker.train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("worker.train.batch_size", "must be at least 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(ConfigError::invalid("worker.train.subset_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocolRequest {
    pub protocol_version: String,
    pub request_kind: RequestKind,
    pub source_text: String,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplyStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReply {
    pub status: ReplyStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub protocol_version: String,
}

/// Why a worker stage did not succeed, before classification.
#[derive(Debug, Clone, PartialEq)]
pub enum FailureReport {
    /// The worker replied with `status: "error"`.
    WorkerError { error_kind: String, message: String },
    /// The watchdog killed the worker.
    TimedOut { limit: Duration },
    /// Nonzero exit or death by signal without a usable reply.
    Exited {
        code: Option<i32>,
        signal: Option<i32>,
        stderr: String,
    },
    /// Exit status 0 but the reply was missing or did not follow the protocol.
    MalformedReply { reason: String, stderr: String },
    SpawnFailed(String),
}

fn last_nonempty_line(text: &str) -> Option<&str> {
    text.lines().rev().map(str::trim).find(|l| !l.is_empty())
}

fn tail(text: &str, max_chars: usize) -> &str {
    let count = text.chars().count();
    if count <= max_chars {
        return text;
    }
    let skip = count - max_chars;
    let idx = text.char_indices().nth(skip).map_or(0, |(i, _)| i);
    &text[idx..]
}

/// Deterministic mapping from a failure report to a classified outcome.
pub fn classify_failure(report: &FailureReport) -> EvaluationOutcome {
    match report {
        FailureReport::WorkerError { error_kind, message } => {
            let kind = match error_kind.as_str() {
                "validation" => FailureKind::Validation,
                "timeout" => FailureKind::Timeout,
                _ => FailureKind::Runtime,
            };
            EvaluationOutcome::failure(kind, message)
        }
        FailureReport::TimedOut { limit } => EvaluationOutcome::failure(
            FailureKind::Timeout,
            format!("evaluation exceeded the {:.1}s timeout and was killed", limit.as_secs_f64()),
        ),
        FailureReport::Exited { code, signal, stderr } => {
            let status = match (code, signal) {
                (Some(c), _) => format!("exit status {c}"),
                (None, Some(s)) => format!("killed by signal {s}"),
                (None, None) => "abnormal termination".to_string(),
            };
            let last = last_nonempty_line(stderr).unwrap_or("(no error output)");
            let mut message = format!("worker failed ({status}): {last}");
            if stderr.trim() != last {
                message.push('\n');
                message.push_str(tail(stderr.trim(), 1500));
            }
            EvaluationOutcome::failure(FailureKind::Runtime, message)
        }
        FailureReport::MalformedReply { reason, stderr } => {
            let mut message = format!("malformed worker reply: {reason}");
            if let Some(last) = last_nonempty_line(stderr) {
                message.push_str(&format!(" (stderr: {last})"));
            }
            EvaluationOutcome::failure(FailureKind::Runtime, message)
        }
        FailureReport::SpawnFailed(err) => {
            EvaluationOutcome::failure(FailureKind::Runtime, format!("failed to start worker: {err}"))
        }
    }
}

/// Outcome of running one worker process.
#[derive(Debug, Clone, PartialEq)]
pub enum StageResult {
    /// `status: "ok"`; accuracy present for training requests.
    Ok(Option<f64>),
    Failed(FailureReport),
}

pub struct SubprocessEvaluator {
    pub command: Vec<String>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub seed: u64,
    pub timeout: Duration,
    /// Working directory of the worker; also exported as `NASLOOP_SCRATCH`.
    pub scratch_dir: Option<PathBuf>,
}

impl SubprocessEvaluator {
    pub fn new(command: Vec<String>, dataset: DatasetSpec, timeout: Duration) -> Self {
        Self {
            command,
            dataset,
            train: TrainConfig::default(),
            seed: DEFAULT_WORKER_SEED,
            timeout,
            scratch_dir: None,
        }
    }

    pub fn request(&self, kind: RequestKind, candidate: &Candidate) -> TrainProtocolRequest {
        TrainProtocolRequest {
            protocol_version: PROTOCOL_VERSION.to_string(),
            request_kind: kind,
            source_text: candidate.source_text.clone(),
            dataset: self.dataset.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    /// Quick validation: instantiate and run one forward pass on a
    /// `2 x C x H x W` dummy batch.
    pub fn validate(&self, candidate: &Candidate) -> Result<(), EvaluationOutcome> {
        self.validate_within(candidate, self.timeout)
    }

    fn validate_within(&self, candidate: &Candidate, budget: Duration) -> Result<(), EvaluationOutcome> {
        if candidate.source_text.trim().is_empty() {
            return Err(EvaluationOutcome::failure(FailureKind::Validation, "candidate source is empty"));
        }
        let request = self.request(RequestKind::Validate, candidate);
        match self.run_stage(&request, budget) {
            StageResult::Ok(_) => Ok(()),
            StageResult::Failed(report) => Err(classify_failure(&report)),
        }
    }

    fn train_within(&self, candidate: &Candidate, budget: Duration) -> EvaluationOutcome {
        let request = self.request(RequestKind::TrainEval, candidate);
        match self.run_stage(&request, budget) {
            StageResult::Ok(Some(acc)) => EvaluationOutcome::success(acc),
            StageResult::Ok(None) => classify_failure(&FailureReport::MalformedReply {
                reason: "ok reply without accuracy".into(),
                stderr: String::new(),
            }),
            StageResult::Failed(report) => classify_failure(&report),
        }
    }

    /// Runs one worker process for `request`, killing it after `budget`.
    pub fn run_stage(&self, request: &TrainProtocolRequest, budget: Duration) -> StageResult {
        let Some((program, args)) = self.command.split_first() else {
            return StageResult::Failed(FailureReport::SpawnFailed("empty worker command".into()));
        };
        let payload = match serde_json::to_vec(request) {
            Ok(p) => p,
            Err(e) => return StageResult::Failed(FailureReport::SpawnFailed(e.to_string())),
        };
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.scratch_dir {
            cmd.current_dir(dir).env("NASLOOP_SCRATCH", dir);
        }
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return StageResult::Failed(FailureReport::SpawnFailed(format!("{program}: {e}"))),
        };
        let run = supervise(&mut child, payload, budget);
        interpret(run)
    }
}

impl Evaluator for SubprocessEvaluator {
    fn evaluate(&mut self, candidate: &Candidate) -> EvaluationOutcome {
        let deadline = Instant::now() + self.timeout;
        if let Err(outcome) = self.validate_within(candidate, self.timeout) {
            return outcome;
        }
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return classify_failure(&FailureReport::TimedOut { limit: self.timeout });
        }
        self.train_within(candidate, remaining)
    }
}

struct ProcessRun {
    status: Option<ExitStatus>,
    timed_out: Option<Duration>,
    stdout: Vec<u8>,
    stderr: String,
}

fn kill_group(child: &Child) {
    #[cfg(unix)]
    {
        // SAFETY: kill(2) with a negative pid signals the process group we
        // created for this child; it has no memory-safety preconditions.
        unsafe {
            libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
        }
    }
    #[cfg(not(unix))]
    {
        let _ = child;
    }
}

fn supervise(child: &mut Child, payload: Vec<u8>, budget: Duration) -> ProcessRun {
    let stdin = child.stdin.take();
    let writer = thread::spawn(move || {
        if let Some(mut stdin) = stdin {
            // The worker may exit without reading; a broken pipe is fine.
            let _ = stdin.write_all(&payload);
        }
    });
    let mut stdout = child.stdout.take();
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(s) = stdout.as_mut() {
            let _ = s.read_to_end(&mut buf);
        }
        buf
    });
    let mut stderr = child.stderr.take();
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(s) = stderr.as_mut() {
            let _ = s.read_to_end(&mut buf);
        }
        if buf.len() > STDERR_TAIL_BYTES {
            buf.drain(..buf.len() - STDERR_TAIL_BYTES);
        }
        String::from_utf8_lossy(&buf).into_owned()
    });

    let deadline = Instant::now() + budget;
    let mut timed_out = None;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                timed_out = Some(budget);
                kill_group(child);
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(POLL_INTERVAL),
            Err(_) => {
                kill_group(child);
                break child.wait().ok();
            }
        }
    };
    // Stray grandchildren could keep the pipes open; take them down too.
    kill_group(child);
    let _ = writer.join();
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    ProcessRun {
        status,
        timed_out,
        stdout,
        stderr,
    }
}

fn parse_reply(stdout: &[u8]) -> Result<WorkerReply, String> {
    let text = std::str::from_utf8(stdout).map_err(|e| format!("reply is not UTF-8: {e}"))?;
    let text = text.trim();
    if text.is_empty() {
        return Err("no reply on standard output".into());
    }
    let reply: WorkerReply = serde_json::from_str(text).map_err(|e| format!("{e}"))?;
    if reply.protocol_version != PROTOCOL_VERSION {
        return Err(format!(
            "protocol version {} (expected {PROTOCOL_VERSION})",
            reply.protocol_version
        ));
    }
    match (reply.status, reply.accuracy) {
        (ReplyStatus::Ok, Some(a)) if !(0.0..=1.0).contains(&a) => Err(format!("accuracy {a} outside [0, 1]")),
        (ReplyStatus::Error, Some(_)) => Err("error reply carries an accuracy".into()),
        _ => Ok(reply),
    }
}

fn interpret(run: ProcessRun) -> StageResult {
    if let Some(limit) = run.timed_out {
        return StageResult::Failed(FailureReport::TimedOut { limit });
    }
    let reply = parse_reply(&run.stdout);
    let success_exit = run.status.map(|s| s.success()).unwrap_or(false);
    match reply {
        Ok(WorkerReply { status: ReplyStatus::Error, error_kind, message, .. }) => {
            StageResult::Failed(FailureReport::WorkerError {
                error_kind: error_kind.unwrap_or_else(|| "runtime".into()),
                message: message.unwrap_or_else(|| last_nonempty_line(&run.stderr).unwrap_or("").to_string()),
            })
        }
        Ok(WorkerReply { status: ReplyStatus::Ok, accuracy, .. }) if success_exit => StageResult::Ok(accuracy),
        Err(reason) if success_exit => StageResult::Failed(FailureReport::MalformedReply {
            reason,
            stderr: run.stderr,
        }),
        _ => {
            #[cfg(unix)]
            let signal = {
                use std::os::unix::process::ExitStatusExt;
                run.status.and_then(|s| s.signal())
            };
            #[cfg(not(unix))]
            let signal = None;
            StageResult::Failed(FailureReport::Exited {
                code: run.status.and_then(|s| s.code()),
                signal,
                stderr: run.stderr,
            })
        }
    }
}
