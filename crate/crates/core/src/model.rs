//! Shared domain types and the run-log record schema.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::SamplingParams;
use crate::prompt::ImproverOutput;

/// Maximum number of characters kept from a failure message.
pub const MAX_MESSAGE_CHARS: usize = 2000;

/// Hex-encoded SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in hash.iter() {
        use fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Truncates `message` to at most [`MAX_MESSAGE_CHARS`] characters.
pub fn truncate_message(message: &str) -> String {
    match message.char_indices().nth(MAX_MESSAGE_CHARS) {
        Some((idx, _)) => message[..idx].to_string(),
        None => message.to_string(),
    }
}

/// One generated architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub iteration: u64,
    pub source_text: String,
    pub source_hash: String,
}

impl Candidate {
    pub fn new(id: u64, iteration: u64, source_text: impl Into<String>) -> Self {
        let source_text = source_text.into();
        let source_hash = digest(&source_text);
        Self {
            id,
            iteration,
            source_text,
            source_hash,
        }
    }
}

/// Discriminant of an [`EvaluationOutcome`], as written to logs and prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    Success,
    ValidationError,
    RuntimeError,
    Timeout,
    ExtractionError,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Success => "Success",
            OutcomeKind::ValidationError => "ValidationError",
            OutcomeKind::RuntimeError => "RuntimeError",
            OutcomeKind::Timeout => "Timeout",
            OutcomeKind::ExtractionError => "ExtractionError",
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The failure subset of [`OutcomeKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureKind {
    /// Shape check failed or the model could not be instantiated.
    Validation,
    /// Training crashed, the worker misbehaved, or the LLM was unreachable.
    Runtime,
    Timeout,
    /// No code could be found in the generator reply.
    Extraction,
}

impl From<FailureKind> for OutcomeKind {
    fn from(kind: FailureKind) -> Self {
        match kind {
            FailureKind::Validation => OutcomeKind::ValidationError,
            FailureKind::Runtime => OutcomeKind::RuntimeError,
            FailureKind::Timeout => OutcomeKind::Timeout,
            FailureKind::Extraction => OutcomeKind::ExtractionError,
        }
    }
}

/// Result of evaluating one candidate: an accuracy in `[0, 1]` or a
/// classified failure with a bounded message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OutcomeWire", into = "OutcomeWire")]
pub enum EvaluationOutcome {
    Success { accuracy: f64 },
    Failure { kind: FailureKind, message: String },
}

impl EvaluationOutcome {
    /// Success outcome; the accuracy is clamped into `[0, 1]`.
    pub fn success(accuracy: f64) -> Self {
        let accuracy = if accuracy.is_nan() {
            0.0
        } else {
            accuracy.clamp(0.0, 1.0)
        };
        EvaluationOutcome::Success { accuracy }
    }

    pub fn failure(kind: FailureKind, message: impl AsRef<str>) -> Self {
        EvaluationOutcome::Failure {
            kind,
            message: truncate_message(message.as_ref()),
        }
    }

    pub fn kind(&self) -> OutcomeKind {
        match self {
            EvaluationOutcome::Success { .. } => OutcomeKind::Success,
            EvaluationOutcome::Failure { kind, .. } => (*kind).into(),
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        match self {
            EvaluationOutcome::Success { accuracy } => Some(*accuracy),
            EvaluationOutcome::Failure { .. } => None,
        }
    }

    pub fn message(&self) -> Option<&str> {
        match self {
            EvaluationOutcome::Success { .. } => None,
            EvaluationOutcome::Failure { message, .. } => Some(message),
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, EvaluationOutcome::Success { .. })
    }
}

#[derive(Serialize, Deserialize)]
struct OutcomeWire {
    kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

impl From<EvaluationOutcome> for OutcomeWire {
    fn from(outcome: EvaluationOutcome) -> Self {
        match outcome {
            EvaluationOutcome::Success { accuracy } => OutcomeWire {
                kind: OutcomeKind::Success,
                accuracy: Some(accuracy),
                message: None,
            },
            EvaluationOutcome::Failure { kind, message } => OutcomeWire {
                kind: kind.into(),
                accuracy: None,
                message: Some(message),
            },
        }
    }
}

impl TryFrom<OutcomeWire> for EvaluationOutcome {
    type Error = String;

    fn try_from(wire: OutcomeWire) -> Result<Self, Self::Error> {
        let failure = |kind| match (&wire.accuracy, &wire.message) {
            (None, Some(message)) => Ok(EvaluationOutcome::Failure {
                kind,
                message: message.clone(),
            }),
            _ => Err(format!(
                "outcome {} requires a message and no accuracy",
                wire.kind
            )),
        };
        match wire.kind {
            OutcomeKind::Success => match (wire.accuracy, &wire.message) {
                (Some(a), None) if (0.0..=1.0).contains(&a) => {
                    Ok(EvaluationOutcome::Success { accuracy: a })
                }
                (Some(a), None) => Err(format!("accuracy {a} outside [0, 1]")),
                _ => Err("Success outcome requires an accuracy and no message".into()),
            },
            OutcomeKind::ValidationError => failure(FailureKind::Validation),
            OutcomeKind::RuntimeError => failure(FailureKind::Runtime),
            OutcomeKind::Timeout => failure(FailureKind::Timeout),
            OutcomeKind::ExtractionError => failure(FailureKind::Extraction),
        }
    }
}

/// One improvement attempt: the problem and suggestion authored by the
/// improver at step `t - 1`, paired with the outcome observed at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTriple {
    pub problem: String,
    pub suggestion: String,
    pub outcome: EvaluationOutcome,
}

impl DiagnosticTriple {
    pub fn new(
        problem: impl Into<String>,
        suggestion: impl Into<String>,
        outcome: EvaluationOutcome,
    ) -> Self {
        Self {
            problem: problem.into(),
            suggestion: suggestion.into(),
            outcome,
        }
    }

    /// Triple for an attempt that had no preceding suggestion.
    pub fn bootstrap(outcome: EvaluationOutcome) -> Self {
        Self::new("", "", outcome)
    }

    pub fn from_suggestions(previous: Option<&ImproverOutput>, outcome: EvaluationOutcome) -> Self {
        match previous {
            Some(s) => Self::new(s.reason.clone(), s.suggestions.clone(), outcome),
            None => Self::bootstrap(outcome),
        }
    }
}

/// Image classification dataset descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub input_channels: u32,
    pub input_height: u32,
    pub input_width: u32,
    pub num_classes: u32,
    pub task_description: String,
}

impl DatasetSpec {
    pub fn cifar10() -> Self {
        Self {
            name: "cifar10".into(),
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            num_classes: 10,
            task_description: "CIFAR-10 image classification (32x32 RGB images, 10 classes)".into(),
        }
    }

    pub fn cifar100() -> Self {
        Self {
            name: "cifar100".into(),
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            num_classes: 100,
            task_description:
                "CIFAR-100 image classification (32x32 RGB images, 100 fine-grained classes)"
                    .into(),
        }
    }

    pub fn imagenette() -> Self {
        Self {
            name: "imagenette".into(),
            input_channels: 3,
            input_height: 160,
            input_width: 160,
            num_classes: 10,
            task_description:
                "ImageNette image classification (160x160 RGB images, 10 ImageNet classes)".into(),
        }
    }

    /// Looks up one of the built-in datasets by name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Some(Self::cifar10()),
            "cifar100" | "cifar-100" => Some(Self::cifar100()),
            "imagenette" => Some(Self::imagenette()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("dataset.input_channels", self.input_channels),
            ("dataset.input_height", self.input_height),
            ("dataset.input_width", self.input_width),
        ] {
            if value == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(ConfigError::invalid("dataset.num_classes", "must be at least 2"));
        }
        Ok(())
    }
}

/// Loop variants from the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No improver calls; generator prompts carry no suggestions.
    NoFeedback,
    /// Generator prompts carry no reference (best) implementation.
    NoReference,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoFeedback => "no_feedback",
            Ablation::NoReference => "no_reference",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub const DEFAULT_WINDOW_SIZE: usize = 5;
pub const DEFAULT_EVALUATION_TIMEOUT: Duration = Duration::from_secs(30 * 60);

/// Parameters of one search run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub max_iterations: u64,
    pub window_size: usize,
    pub dataset: DatasetSpec,
    pub sampling: SamplingParams,
    pub seed: u64,
    pub evaluation_timeout: Duration,
    pub extended_prompt: bool,
    pub top_k_exemplars: usize,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn new(max_iterations: u64, dataset: DatasetSpec) -> Self {
        Self {
            max_iterations,
            window_size: DEFAULT_WINDOW_SIZE,
            dataset,
            sampling: SamplingParams::default(),
            seed: 0,
            evaluation_timeout: DEFAULT_EVALUATION_TIMEOUT,
            extended_prompt: false,
            top_k_exemplars: DEFAULT_WINDOW_SIZE,
            ablation: Ablation::None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_iterations == 0 {
            return Err(ConfigError::invalid("max_iterations", "must be at least 1"));
        }
        if self.window_size == 0 {
            return Err(ConfigError::invalid("window_size", "must be at least 1"));
        }
        if self.extended_prompt && self.top_k_exemplars == 0 {
            return Err(ConfigError::invalid("top_k_exemplars", "must be at least 1"));
        }
        if self.evaluation_timeout.is_zero() {
            return Err(ConfigError::invalid("evaluation_timeout", "must be positive"));
        }
        self.dataset.validate()?;
        self.sampling.validate()
    }
}

/// One line of the append-only run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLogRecord {
    pub iteration: u64,
    /// Milliseconds since the Unix epoch (logical for simulated runs).
    pub timestamp: u64,
    pub source_hash: String,
    pub source_text: String,
    pub outcome: EvaluationOutcome,
    pub triple_appended: DiagnosticTriple,
    pub best_accuracy_after: f64,
    pub prompt_digest: String,
    /// Improver output produced this iteration; absent when the improver
    /// was skipped or failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improver: Option<ImproverOutput>,
    /// LLM calls issued so far in the run, including this iteration's.
    pub llm_calls: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_string_is_fixed() {
        assert_eq!(
            digest(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_is_deterministic() {
        let src = "class Net(nn.Module):\n    pass\n";
        assert_eq!(digest(src), digest(src));
    }

    #[test]
    fn single_byte_mutations_change_digest() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let base: Vec<u8> = (0..256).map(|_| rng.random_range(b' '..=b'~')).collect();
        let base_text = String::from_utf8(base.clone()).unwrap();
        let base_digest = digest(&base_text);
        for _ in 0..1000 {
            let mut mutated = base.clone();
            let pos = rng.random_range(0..mutated.len());
            let mut byte = rng.random_range(b' '..=b'~');
            if byte == mutated[pos] {
                byte = if byte == b'~' { b' ' } else { byte + 1 };
            }
            mutated[pos] = byte;
            let text = String::from_utf8(mutated).unwrap();
            assert_ne!(digest(&text), base_digest);
        }
    }

    #[test]
    fn failure_messages_are_truncated() {
        let long = "x".repeat(5000);
        let outcome = EvaluationOutcome::failure(FailureKind::Runtime, &long);
        assert_eq!(outcome.message().unwrap().chars().count(), MAX_MESSAGE_CHARS);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let long = "é".repeat(2500);
        assert_eq!(truncate_message(&long).chars().count(), MAX_MESSAGE_CHARS);
    }

    #[test]
    fn outcome_wire_rejects_inconsistent_fields() {
        let bad = [
            r#"{"kind":"Success"}"#,
            r#"{"kind":"Success","accuracy":0.5,"message":"x"}"#,
            r#"{"kind":"Success","accuracy":1.5}"#,
            r#"{"kind":"Timeout","accuracy":0.5}"#,
            r#"{"kind":"RuntimeError"}"#,
        ];
        for text in bad {
            assert!(serde_json::from_str::<EvaluationOutcome>(text).is_err(), "{text}");
        }
        let ok: EvaluationOutcome =
            serde_json::from_str(r#"{"kind":"Timeout","message":"after 5s"}"#).unwrap();
        assert_eq!(ok.kind(), OutcomeKind::Timeout);
    }

    #[test]
    fn success_outcome_serializes_without_message() {
        let json = serde_json::to_string(&EvaluationOutcome::success(0.25)).unwrap();
        assert_eq!(json, r#"{"kind":"Success","accuracy":0.25}"#);
    }

    #[test]
    fn run_config_rejects_zero_iterations_and_window() {
        let mut cfg = RunConfig::new(0, DatasetSpec::cifar10());
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field, .. }) if field == "max_iterations"));
        cfg.max_iterations = 3;
        cfg.window_size = 0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field, .. }) if field == "window_size"));
        cfg.window_size = 5;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn dataset_registry() {
        assert_eq!(DatasetSpec::by_name("CIFAR-10").unwrap().num_classes, 10);
        assert_eq!(DatasetSpec::by_name("cifar100").unwrap().num_classes, 100);
        assert_eq!(DatasetSpec::by_name("imagenette").unwrap().input_height, 160);
        assert!(DatasetSpec::by_name("mnist").is_none());
    }
}
