//! Deterministic stand-ins for the LLM roles and the trainer.
//!
//! A candidate is a real vector written as a `class Net` snippet. Its
//! "accuracy" is `1 - mean squared distance` to a hidden optimum plus seeded
//! noise. The simulated improver reads the history window and emits a
//! signed coordinate hint, which the simulated generator applies to the
//! best vector. Without a hint the generator falls back to an unbiased
//! random perturbation, and without a reference it samples from scratch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::Evaluator;
use crate::llm::{LlmError, SamplingParams};
use crate::memory::HistoryWindow;
use crate::model::{digest, Candidate, ConfigError, EvaluationOutcome, FailureKind};
use crate::prompt::ImproverOutput;
use crate::search::{
    Backends, CodeGenerator, GenerationRequest, ImprovementRequest, PromptImprover,
};

/// Hint step before any success.
pub const DEFAULT_STEP: f64 = 0.3;
const MIN_STEP: f64 = 0.02;
const MAX_STEP: f64 = 0.5;
const GENES_PREFIX: &str = "GENES = [";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dimension: usize,
    /// Amplitude of the uniform score noise.
    pub noise: f64,
    /// Probability that a generated candidate is malformed.
    pub failure_rate: f64,
    pub landscape_seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dimension: 8,
            noise: 0.02,
            failure_rate: 0.2,
            landscape_seed: 0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dimension == 0 {
            return Err(ConfigError::invalid("sim.dimension", "must be at least 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(ConfigError::invalid("sim.noise", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(ConfigError::invalid("sim.failure_rate", "must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLandscape {
    pub optimum: Vec<f64>,
    pub noise: f64,
    pub failure_rate: f64,
    pub seed: u64,
}

impl SimLandscape {
    /// Landscape with an optimum drawn uniformly from `[-0.5, 0.5]^d`.
    pub fn new(params: &SimParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.landscape_seed);
        let optimum = (0..params.dimension)
            .map(|_| rng.random_range(-0.5..=0.5))
            .collect();
        Self {
            optimum,
            noise: params.noise,
            failure_rate: params.failure_rate,
            seed: params.landscape_seed,
        }
    }

    pub fn dimension(&self) -> usize {
        self.optimum.len()
    }

    /// Noise-free score of `genes`.
    pub fn clean_score(&self, genes: &[f64]) -> f64 {
        (1.0 - mean_squared_distance(genes, &self.optimum)).clamp(0.0, 1.0)
    }

    /// Score with noise seeded by the landscape seed and the encoding.
    pub fn score(&self, encoding: &str, genes: &[f64]) -> f64 {
        let clean = self.clean_score(genes);
        if self.noise == 0.0 {
            return clean;
        }
        let hash = digest(encoding);
        let salt = u64::from_str_radix(&hash[..16], 16).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
        let jitter = rng.random_range(-self.noise..=self.noise);
        (clean + jitter).clamp(0.0, 1.0)
    }
}

pub fn mean_squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Writes a gene vector as a candidate source.
pub fn encode(genes: &[f64]) -> String {
    let body: Vec<String> = genes.iter().map(|g| format!("{g:?}")).collect();
    format!(
        "class Net:  # simulated architecture\n    {GENES_PREFIX}{}]\n",
        body.join(", ")
    )
}

/// Parses a gene vector of length `dimension` out of a candidate source.
pub fn decode(source: &str, dimension: usize) -> Result<Vec<f64>, String> {
    let start = source
        .find(GENES_PREFIX)
        .ok_or_else(|| "no GENES list in candidate".to_string())?
        + GENES_PREFIX.len();
    let end = source[start..]
        .find(']')
        .ok_or_else(|| "unterminated GENES list".to_string())?
        + start;
    let genes = source[start..end]
        .split(',')
        .enumerate()
        .map(|(i, tok)| {
            let tok = tok.trim();
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!("could not parse gene {i}: {tok:?}")),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if genes.len() != dimension {
        return Err(format!(
            "expected {dimension} genes, found {}",
            genes.len()
        ));
    }
    Ok(genes)
}

/// A signed coordinate move proposed by the simulated improver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hint {
    pub coordinate: usize,
    pub positive: bool,
    pub step: f64,
}

impl Hint {
    pub fn render(&self) -> String {
        format!(
            "HINT coord={} dir={} step={:.6}",
            self.coordinate,
            if self.positive { '+' } else { '-' },
            self.step
        )
    }

    /// Finds a hint in suggestion text.
    pub fn parse(text: &str) -> Option<Hint> {
        let start = text.find("HINT ")?;
        let mut coordinate = None;
        let mut positive = None;
        let mut step = None;
        for token in text[start + 5..].split_whitespace().take(3) {
            let (key, value) = token.split_once('=')?;
            match key {
                "coord" => coordinate = value.parse().ok(),
                "dir" => positive = Some(value == "+"),
                "step" => step = value.parse::<f64>().ok().filter(|s| s.is_finite()),
                _ => return None,
            }
        }
        Some(Hint {
            coordinate: coordinate?,
            positive: positive?,
            step: step?,
        })
    }

    fn direction(&self) -> (usize, bool) {
        (self.coordinate, self.positive)
    }
}

/// Produces a simulated generator reply.
pub fn sim_generate(
    best_encoding: Option<&str>,
    suggestions: Option<&str>,
    dimension: usize,
    failure_rate: f64,
    rng: &mut ChaCha8Rng,
) -> String {
    let base = best_encoding.and_then(|s| decode(s, dimension).ok());
    let hint = suggestions.and_then(Hint::parse).filter(|h| h.coordinate < dimension);
    let mut genes = match (base, hint) {
        (None, _) => (0..dimension).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        (Some(mut genes), Some(hint)) => {
            let scale = rng.random_range(0.8..=1.2);
            let delta = hint.step * scale;
            genes[hint.coordinate] += if hint.positive { delta } else { -delta };
            genes
        }
        (Some(mut genes), None) => {
            // Same move shape and size as the improver's opening hint, with
            // coordinate and sign drawn uniformly instead of from feedback.
            let c = rng.random_range(0..dimension);
            let delta = MAX_STEP * rng.random_range(0.8..=1.2);
            genes[c] += if rng.random::<bool>() { delta } else { -delta };
            genes
        }
    };
    let malformed = rng.random::<f64>() < failure_rate;
    let mut source = encode(&genes);
    if malformed {
        let i = rng.random_range(0..dimension);
        genes[i] = f64::NAN;
        let body: Vec<String> = genes
            .iter()
            .map(|g| if g.is_nan() { "???".to_string() } else { format!("{g:?}") })
            .collect();
        source = format!(
            "class Net:  # simulated architecture\n    {GENES_PREFIX}{}]\n",
            body.join(", ")
        );
    }
    format!("Here is the improved architecture.\n```python\n{source}```\n")
}

/// Scores a candidate source on `landscape`.
pub fn sim_evaluate(source: &str, landscape: &SimLandscape) -> EvaluationOutcome {
    match decode(source, landscape.dimension()) {
        Ok(genes) => EvaluationOutcome::success(landscape.score(source, &genes)),
        Err(e) => EvaluationOutcome::failure(FailureKind::Validation, e),
    }
}

/// Chooses the next hint from the current outcome and the history window.
///
/// Keeps a direction that just produced the best, flips the sign of a
/// direction that just made things worse, and otherwise moves to the
/// least recently tried coordinate that has not been penalized. The step
/// shrinks with the remaining gap `1 - best_accuracy`.
pub fn sim_improve(
    best_accuracy: f64,
    outcome: &EvaluationOutcome,
    window: &HistoryWindow,
    dimension: usize,
) -> ImproverOutput {
    let step = if best_accuracy > 0.0 {
        (1.0 - best_accuracy).max(0.0).sqrt().clamp(MIN_STEP, MAX_STEP)
    } else {
        DEFAULT_STEP
    };
    let hints: Vec<(Option<Hint>, &EvaluationOutcome)> = window
        .entries()
        .map(|e| (Hint::parse(&e.suggestion).filter(|h| h.coordinate < dimension), &e.outcome))
        .collect();
    let worse = |o: &EvaluationOutcome| o.accuracy().is_some_and(|a| a < best_accuracy);
    let penalized: Vec<(usize, bool)> = hints
        .iter()
        .filter(|(h, o)| h.is_some() && worse(o))
        .map(|(h, _)| h.unwrap().direction())
        .collect();
    let tried: Vec<(usize, bool)> = hints.iter().filter_map(|(h, _)| h.map(|h| h.direction())).collect();
    let latest = hints.last().and_then(|(h, _)| *h);

    let (hint, reason) = match latest {
        Some(h) if outcome.accuracy().is_some_and(|a| a >= best_accuracy) => (
            Hint { step, ..h },
            format!("The last move on coordinate {} reached the best score so far.", h.coordinate),
        ),
        Some(h) if worse(outcome) && !tried.contains(&(h.coordinate, !h.positive)) => (
            Hint { coordinate: h.coordinate, positive: !h.positive, step },
            format!("The last move on coordinate {} lowered the score.", h.coordinate),
        ),
        _ => {
            let allowed = |c: usize| {
                if !penalized.contains(&(c, true)) {
                    Some(true)
                } else if !penalized.contains(&(c, false)) {
                    Some(false)
                } else {
                    None
                }
            };
            // Sweep coordinates cyclically after the latest one, preferring
            // those absent from the window, then the least recently tried.
            let start = latest.map_or(0, |h| h.coordinate + 1);
            let order = (0..dimension).map(|i| (start + i) % dimension);
            let last_tried = |c: usize| tried.iter().rposition(|&(tc, _)| tc == c);
            let (c, positive) = order
                .clone()
                .filter(|&c| last_tried(c).is_none())
                .find_map(|c| allowed(c).map(|p| (c, p)))
                .or_else(|| {
                    order
                        .filter_map(|c| allowed(c).map(|p| (c, p)))
                        .min_by_key(|&(c, _)| last_tried(c))
                })
                .unwrap_or((last_recent_fallback(&tried, dimension), true));
            let reason = match outcome {
                EvaluationOutcome::Failure { kind, .. } => {
                    format!("The candidate failed ({}); trying a fresh direction.", crate::model::OutcomeKind::from(*kind))
                }
                _ => "No recent direction is promising; exploring another coordinate.".to_string(),
            };
            (Hint { coordinate: c, positive, step }, reason)
        }
    };
    ImproverOutput {
        reason,
        inspiration: "Coordinate-wise pattern search.".into(),
        suggestions: hint.render(),
    }
}

fn last_recent_fallback(tried: &[(usize, bool)], dimension: usize) -> usize {
    (0..dimension)
        .min_by_key(|c| tried.iter().rposition(|&(tc, _)| tc == *c).map_or(0, |p| p + 1))
        .unwrap_or(0)
}

/// Renders improver output as a labelled reply.
pub fn render_reply(out: &ImproverOutput) -> String {
    format!(
        "REASON: {}\nINSPIRATION: {}\nSUGGESTIONS: {}\n",
        out.reason, out.inspiration, out.suggestions
    )
}

/// Generator randomness for one call: one ChaCha stream per run seed,
/// positioned by the call counter, so runs with nearby seeds never share
/// draws the way `base_seed + call_counter` alone would.
pub fn call_rng(params: &SamplingParams) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(params.base_seed);
    rng.set_stream(params.call_counter);
    rng
}

pub struct SimGenerator {
    pub dimension: usize,
    pub failure_rate: f64,
}

impl CodeGenerator for SimGenerator {
    fn generate(&mut self, request: &GenerationRequest<'_>) -> Result<String, LlmError> {
        let mut rng = call_rng(&request.params);
        Ok(sim_generate(
            request.best_source,
            request.suggestions.map(|s| s.suggestions.as_str()),
            self.dimension,
            self.failure_rate,
            &mut rng,
        ))
    }
}

pub struct SimImprover {
    pub dimension: usize,
}

impl PromptImprover for SimImprover {
    fn improve(&mut self, request: &ImprovementRequest<'_>) -> Result<String, LlmError> {
        Ok(render_reply(&sim_improve(
            request.best_accuracy,
            request.outcome,
            request.window,
            self.dimension,
        )))
    }
}

pub struct SimEvaluator {
    pub landscape: SimLandscape,
}

impl Evaluator for SimEvaluator {
    fn evaluate(&mut self, candidate: &Candidate) -> EvaluationOutcome {
        sim_evaluate(&candidate.source_text, &self.landscape)
    }
}

/// Generator, improver, and evaluator for one simulated landscape.
pub fn sim_backends(params: &SimParams) -> Backends {
    let landscape = SimLandscape::new(params);
    Backends {
        generator: Box::new(SimGenerator {
            dimension: params.dimension,
            failure_rate: params.failure_rate,
        }),
        improver: Box::new(SimImprover {
            dimension: params.dimension,
        }),
        evaluator: Box::new(SimEvaluator { landscape }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiagnosticTriple, OutcomeKind};
    use crate::prompt::extract_code;

    fn landscape(noise: f64, failure_rate: f64) -> SimLandscape {
        SimLandscape::new(&SimParams { dimension: 4, noise, failure_rate, landscape_seed: 11 })
    }

    #[test]
    fn encoding_round_trips_exactly() {
        let genes = vec![0.1, -0.333333333333, 1e-17, 0.0];
        assert_eq!(decode(&encode(&genes), 4).unwrap(), genes);
        assert!(decode(&encode(&genes), 3).is_err());
    }

    #[test]
    fn bootstrap_generation_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let ra = sim_generate(None, None, 4, 0.0, &mut a);
        assert_eq!(ra, sim_generate(None, None, 4, 0.0, &mut b));
        let src = extract_code(&ra).unwrap();
        assert!(decode(&src, 4).is_ok());
    }

    #[test]
    fn aligned_hint_moves_closer() {
        let land = landscape(0.0, 0.0);
        let mut best = land.optimum.clone();
        best[2] += 0.5;
        let before = mean_squared_distance(&best, &land.optimum);
        let hint = Hint { coordinate: 2, positive: false, step: 0.3 };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reply = sim_generate(Some(&encode(&best)), Some(&hint.render()), 4, 0.0, &mut rng);
            let child = decode(&extract_code(&reply).unwrap(), 4).unwrap();
            assert!(mean_squared_distance(&child, &land.optimum) < before);
            assert!(land.clean_score(&child) > land.clean_score(&best));
        }
    }

    #[test]
    fn full_failure_rate_always_malformed() {
        let land = landscape(0.0, 1.0);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reply = sim_generate(None, None, 4, 1.0, &mut rng);
            let out = sim_evaluate(&extract_code(&reply).unwrap(), &land);
            assert_eq!(out.kind(), OutcomeKind::ValidationError);
        }
    }

    #[test]
    fn optimum_scores_one_without_noise() {
        let land = landscape(0.0, 0.0);
        let src = encode(&land.optimum);
        assert_eq!(sim_evaluate(&src, &land), EvaluationOutcome::success(1.0));
    }

    #[test]
    fn malformed_source_is_validation_error() {
        let land = landscape(0.02, 0.0);
        assert_eq!(sim_evaluate("class Net: pass", &land).kind(), OutcomeKind::ValidationError);
    }

    #[test]
    fn noisy_score_is_replayable() {
        let land = landscape(0.05, 0.0);
        let src = encode(&[0.1, 0.2, 0.3, 0.4]);
        let a = sim_evaluate(&src, &land);
        assert_eq!(a, sim_evaluate(&src, &land));
        let clean = land.clean_score(&[0.1, 0.2, 0.3, 0.4]);
        assert!((a.accuracy().unwrap() - clean).abs() <= 0.05 + 1e-12);
    }

    #[test]
    fn hint_round_trip() {
        let h = Hint { coordinate: 3, positive: false, step: 0.125 };
        assert_eq!(Hint::parse(&format!("Try this: {}", h.render())), Some(h));
        assert_eq!(Hint::parse("add more layers"), None);
    }

    fn entry(hint: Option<Hint>, outcome: EvaluationOutcome) -> DiagnosticTriple {
        DiagnosticTriple::new("", hint.map(|h| h.render()).unwrap_or_default(), outcome)
    }

    #[test]
    fn empty_window_hints_first_coordinate_positive() {
        let out = sim_improve(0.0, &EvaluationOutcome::success(0.0), &HistoryWindow::new(5), 4);
        let h = Hint::parse(&out.suggestions).unwrap();
        assert_eq!((h.coordinate, h.positive), (0, true));
    }

    #[test]
    fn avoids_penalized_coordinate() {
        let mut w = HistoryWindow::new(5);
        let best = 0.6;
        w.push(entry(Some(Hint { coordinate: 0, positive: true, step: 0.2 }), EvaluationOutcome::success(0.5)));
        w.push(entry(Some(Hint { coordinate: 0, positive: false, step: 0.2 }), EvaluationOutcome::success(0.55)));
        let out = sim_improve(best, &EvaluationOutcome::success(0.55), &w, 4);
        let h = Hint::parse(&out.suggestions).unwrap();
        assert_ne!(h.coordinate, 0);
    }

    #[test]
    fn flips_sign_after_single_worse_move() {
        let mut w = HistoryWindow::new(5);
        w.push(entry(Some(Hint { coordinate: 2, positive: true, step: 0.2 }), EvaluationOutcome::success(0.5)));
        let out = sim_improve(0.6, &EvaluationOutcome::success(0.5), &w, 4);
        let h = Hint::parse(&out.suggestions).unwrap();
        assert_eq!((h.coordinate, h.positive), (2, false));
    }

    #[test]
    fn repeats_successful_direction() {
        let mut w = HistoryWindow::new(5);
        w.push(entry(Some(Hint { coordinate: 1, positive: false, step: 0.2 }), EvaluationOutcome::success(0.7)));
        let out = sim_improve(0.7, &EvaluationOutcome::success(0.7), &w, 4);
        let h = Hint::parse(&out.suggestions).unwrap();
        assert_eq!((h.coordinate, h.positive), (1, false));
    }

    #[test]
    fn all_failures_cycle_to_least_recent_coordinate() {
        let fail = || EvaluationOutcome::failure(FailureKind::Validation, "bad genes");
        let mut w = HistoryWindow::new(5);
        for c in [0, 1, 2] {
            w.push(entry(Some(Hint { coordinate: c, positive: true, step: 0.3 }), fail()));
        }
        let h = Hint::parse(&sim_improve(0.0, &fail(), &w, 4).suggestions).unwrap();
        assert_eq!(h.coordinate, 3);

        let mut w = HistoryWindow::new(4);
        for c in [2, 0, 1, 3] {
            w.push(entry(Some(Hint { coordinate: c, positive: true, step: 0.3 }), fail()));
        }
        let h = Hint::parse(&sim_improve(0.0, &fail(), &w, 4).suggestions).unwrap();
        assert_eq!(h.coordinate, 2);
    }

    #[test]
    fn improver_is_deterministic() {
        let mut w = HistoryWindow::new(5);
        w.push(entry(Some(Hint { coordinate: 1, positive: true, step: 0.2 }), EvaluationOutcome::success(0.4)));
        let o = EvaluationOutcome::success(0.4);
        assert_eq!(sim_improve(0.5, &o, &w, 8), sim_improve(0.5, &o, &w, 8));
    }
}
