//! Multi-seed ablation experiment over the simulated landscape.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::format_percent;
use crate::model::{Ablation, RunConfig, RunLogRecord};
use crate::search::{LogicalClock, SearchError, SearchLoop};
use crate::sim::{sim_backends, SimParams};

pub const VARIANTS: [Ablation; 3] = [Ablation::None, Ablation::NoFeedback, Ablation::NoReference];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: Ablation,
    pub iterations: u64,
    pub successes: u64,
    pub first_success: Option<f64>,
    /// 0 when nothing succeeded.
    pub final_best: f64,
    /// `final_best - first_success`; 0 when nothing succeeded.
    pub improvement: f64,
}

impl RunSummary {
    pub fn from_log(seed: u64, variant: Ablation, log: &[RunLogRecord]) -> Self {
        let successes: Vec<f64> = log.iter().filter_map(|r| r.outcome.accuracy()).collect();
        let first = successes.first().copied();
        let best = successes.iter().copied().fold(0.0, f64::max);
        Self {
            seed,
            variant,
            iterations: log.len() as u64,
            successes: successes.len() as u64,
            first_success: first,
            final_best: best,
            improvement: first.map_or(0.0, |f| best - f),
        }
    }
}

/// Runs one simulated search and returns its full log.
pub fn simulate_run(base: &RunConfig, params: &SimParams, seed: u64, variant: Ablation) -> Result<Vec<RunLogRecord>, SearchError> {
    let mut config = base.clone();
    config.seed = seed;
    config.sampling.base_seed = seed;
    config.ablation = variant;
    let mut search = SearchLoop::new(config, sim_backends(params))?.with_clock(LogicalClock::default());
    let mut log = Vec::new();
    search.run(&mut log)?;
    Ok(log)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: Ablation,
    pub median_final_best: f64,
    pub median_improvement: f64,
    pub mean_success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationComparison {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub stats: Vec<VariantStats>,
    /// Fraction of seeds where the full loop's final best beats NoFeedback's.
    pub full_win_rate_vs_no_feedback: f64,
    pub full_win_rate_vs_no_reference: f64,
}

impl AblationComparison {
    pub fn stats_for(&self, variant: Ablation) -> Option<&VariantStats> {
        self.stats.iter().find(|s| s.variant == variant)
    }

    pub fn run(&self, seed: u64, variant: Ablation) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.seed == seed && r.variant == variant)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let cell = |r: Option<&RunSummary>| match r {
            Some(r) if r.successes > 0 => format!("{:>12}", format_percent(r.final_best)),
            Some(_) => format!("{:>12}", "no success"),
            None => format!("{:>12}", "-"),
        };
        let _ = writeln!(out, "{:>12} {:>12} {:>12} {:>12}", "seed", "full", "no_feedback", "no_reference");
        for &seed in &self.seeds {
            let _ = writeln!(
                out,
                "{seed:>12} {} {} {}",
                cell(self.run(seed, Ablation::None)),
                cell(self.run(seed, Ablation::NoFeedback)),
                cell(self.run(seed, Ablation::NoReference)),
            );
        }
        if self.seeds.len() > 1 {
            for (label, f) in [
                ("median best", (|s: &VariantStats| s.median_final_best) as fn(&VariantStats) -> f64),
                ("median gain", |s| s.median_improvement),
                ("success", |s| s.mean_success_rate),
            ] {
                let _ = write!(out, "{label:>12}");
                for v in VARIANTS {
                    let value = self.stats_for(v).map(f).unwrap_or(f64::NAN);
                    let _ = write!(out, " {:>12}", format_percent(value));
                }
                out.push('\n');
            }
            let _ = writeln!(
                out,
                "full loop beats no_feedback on {} of seeds, no_reference on {}",
                format_percent(self.full_win_rate_vs_no_feedback),
                format_percent(self.full_win_rate_vs_no_reference),
            );
        }
        out
    }
}

/// Runs every variant on every seed (in parallel) and aggregates.
pub fn compare_ablations(base: &RunConfig, params: &SimParams, seeds: &[u64]) -> Result<AblationComparison, SearchError> {
    let jobs: Vec<(u64, Ablation)> = seeds
        .iter()
        .flat_map(|&s| VARIANTS.iter().map(move |&v| (s, v)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, variant)| simulate_run(base, params, seed, variant).map(|log| RunSummary::from_log(seed, variant, &log)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(seeds, runs))
}

pub fn aggregate(seeds: &[u64], runs: Vec<RunSummary>) -> AblationComparison {
    let stats = VARIANTS
        .iter()
        .map(|&variant| {
            let of: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == variant).collect();
            let bests: Vec<f64> = of.iter().map(|r| r.final_best).collect();
            let gains: Vec<f64> = of.iter().map(|r| r.improvement).collect();
            let rate = of
                .iter()
                .map(|r| r.successes as f64 / r.iterations.max(1) as f64)
                .sum::<f64>()
                / of.len().max(1) as f64;
            VariantStats {
                variant,
                median_final_best: median(&bests),
                median_improvement: median(&gains),
                mean_success_rate: rate,
            }
        })
        .collect();
    let win_rate = |other: Ablation| {
        let wins = seeds
            .iter()
            .filter(|&&s| {
                let full = runs.iter().find(|r| r.seed == s && r.variant == Ablation::None);
                let alt = runs.iter().find(|r| r.seed == s && r.variant == other);
                matches!((full, alt), (Some(f), Some(a)) if f.final_best > a.final_best)
            })
            .count();
        wins as f64 / seeds.len().max(1) as f64
    };
    AblationComparison {
        seeds: seeds.to_vec(),
        full_win_rate_vs_no_feedback: win_rate(Ablation::NoFeedback),
        full_win_rate_vs_no_reference: win_rate(Ablation::NoReference),
        stats,
        runs,
    }
}
