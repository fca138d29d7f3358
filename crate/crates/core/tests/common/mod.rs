#![allow(dead_code)]

pub mod oracles;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use nasloop::gateway::Evaluator;
use nasloop::llm::{ChatRequest, ChatTransport, LlmEndpoint, LlmError, TransportFault};
use nasloop::search::{Backends, CodeGenerator, GenerationRequest, ImprovementRequest, PromptImprover};
use nasloop::{Candidate, EvaluationOutcome, FailureKind, HistoryWindow};

pub fn candidate_reply(i: u64) -> String {
    format!("Sure.\n```python\nclass Net:  # candidate {i}\n    width = {i}\n```\n")
}

/// What the generator saw on one call.
#[derive(Debug, Clone)]
pub struct SeenGeneration {
    pub prompt: String,
    pub best_source: Option<String>,
    pub suggestions: Option<String>,
    pub seed: u64,
}

/// What the improver saw on one call.
#[derive(Debug, Clone)]
pub struct SeenImprovement {
    pub prompt: String,
    pub best_accuracy: f64,
    pub window: HistoryWindow,
    pub seed: u64,
}

#[derive(Default)]
pub struct Journal {
    pub generations: Vec<SeenGeneration>,
    pub improvements: Vec<SeenImprovement>,
}

/// Replies with a distinct candidate per call, or scripted replies when given.
pub struct ScriptedGenerator {
    pub replies: VecDeque<Result<String, LlmError>>,
    pub calls: u64,
    pub journal: Arc<Mutex<Journal>>,
}

impl CodeGenerator for ScriptedGenerator {
    fn generate(&mut self, request: &GenerationRequest<'_>) -> Result<String, LlmError> {
        self.calls += 1;
        self.journal.lock().unwrap().generations.push(SeenGeneration {
            prompt: request.prompt.to_string(),
            best_source: request.best_source.map(str::to_string),
            suggestions: request.suggestions.map(|s| s.suggestions.clone()),
            seed: request.params.effective_seed(),
        });
        self.replies
            .pop_front()
            .unwrap_or_else(|| Ok(candidate_reply(self.calls)))
    }
}

/// Improver that names the iteration it was called in.
pub struct ScriptedImprover {
    pub calls: u64,
    pub fail_on: Vec<u64>,
    pub journal: Arc<Mutex<Journal>>,
}

impl PromptImprover for ScriptedImprover {
    fn improve(&mut self, request: &ImprovementRequest<'_>) -> Result<String, LlmError> {
        self.calls += 1;
        self.journal.lock().unwrap().improvements.push(SeenImprovement {
            prompt: request.prompt.to_string(),
            best_accuracy: request.best_accuracy,
            window: request.window.clone(),
            seed: request.params.effective_seed(),
        });
        if self.fail_on.contains(&self.calls) {
            return Err(LlmError::Transport {
                attempts: 1,
                message: "scripted improver failure".into(),
            });
        }
        let n = self.calls;
        Ok(format!("REASON: problem {n}\nINSPIRATION: idea {n}\nSUGGESTIONS: suggestion {n}\n"))
    }
}

/// Outcomes in order; `None` entries are runtime errors.
pub struct ScriptedEvaluator {
    pub outcomes: VecDeque<EvaluationOutcome>,
}

impl Evaluator for ScriptedEvaluator {
    fn evaluate(&mut self, _candidate: &Candidate) -> EvaluationOutcome {
        self.outcomes
            .pop_front()
            .unwrap_or_else(|| EvaluationOutcome::failure(FailureKind::Runtime, "script exhausted"))
    }
}

pub fn outcomes(script: &[Option<f64>]) -> VecDeque<EvaluationOutcome> {
    script
        .iter()
        .map(|a| match a {
            Some(a) => EvaluationOutcome::success(*a),
            None => EvaluationOutcome::failure(FailureKind::Runtime, "RuntimeError: scripted failure"),
        })
        .collect()
}

pub fn scripted_backends(script: &[Option<f64>]) -> (Backends, Arc<Mutex<Journal>>) {
    let journal = Arc::new(Mutex::new(Journal::default()));
    let backends = Backends {
        generator: Box::new(ScriptedGenerator {
            replies: VecDeque::new(),
            calls: 0,
            journal: journal.clone(),
        }),
        improver: Box::new(ScriptedImprover {
            calls: 0,
            fail_on: Vec::new(),
            journal: journal.clone(),
        }),
        evaluator: Box::new(ScriptedEvaluator {
            outcomes: outcomes(script),
        }),
    };
    (backends, journal)
}

/// Transport returning queued results and recording requests.
#[derive(Default)]
pub struct StubTransport {
    pub replies: Mutex<VecDeque<Result<String, TransportFault>>>,
    pub requests: Mutex<Vec<ChatRequest>>,
}

impl StubTransport {
    pub fn new(replies: Vec<Result<String, TransportFault>>) -> Self {
        Self {
            replies: Mutex::new(replies.into()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl ChatTransport for StubTransport {
    fn send(&self, _endpoint: &LlmEndpoint, request: &ChatRequest) -> Result<String, TransportFault> {
        self.requests.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Ok("default reply".into()))
    }
}

/// A log with the given per-iteration outcomes and consistent best values.
pub fn synthetic_log(accs: &[Option<f64>]) -> Vec<nasloop::RunLogRecord> {
    let mut best: Option<f64> = None;
    accs.iter()
        .enumerate()
        .map(|(i, a)| {
            let outcome = match a {
                Some(a) => EvaluationOutcome::success(*a),
                None => EvaluationOutcome::failure(FailureKind::Validation, "shape mismatch"),
            };
            if let Some(a) = a {
                if best.is_none_or(|b| *a > b) {
                    best = Some(*a);
                }
            }
            let source = format!("class Net:  # {i}\n");
            nasloop::RunLogRecord {
                iteration: i as u64 + 1,
                timestamp: (i as u64 + 1) * 1000,
                source_hash: nasloop::digest(&source),
                source_text: source,
                outcome: outcome.clone(),
                triple_appended: nasloop::DiagnosticTriple::bootstrap(outcome),
                best_accuracy_after: best.unwrap_or(0.0),
                prompt_digest: nasloop::digest(""),
                improver: None,
                llm_calls: 2 * (i as u64 + 1),
            }
        })
        .collect()
}

/// First success 0.282, maximum 0.692, 1519 successes out of 2000.
pub fn engineered_summary_log() -> Vec<nasloop::RunLogRecord> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut accs: Vec<Option<f64>> = Vec::with_capacity(2000);
    let mut successes = 0;
    for i in 0..2000 {
        let want_success = i == 0 || (successes < 1519 && (rng.random::<f64>() < 0.76 || 2000 - i <= 1519 - successes));
        if want_success {
            successes += 1;
            let a = match successes {
                1 => 0.282,
                1000 => 0.692,
                _ => rng.random_range(0.282..0.69),
            };
            accs.push(Some(a));
        } else {
            accs.push(None);
        }
    }
    assert_eq!(successes, 1519);
    synthetic_log(&accs)
}
