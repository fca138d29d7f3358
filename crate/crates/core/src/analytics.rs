//! Report statistics and trajectory series over run logs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::RunLogRecord;

pub const DEFAULT_SMOOTHING_WINDOW: usize = 15;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("sequences have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: a sequence is constant or not finite")]
    DegenerateInput,
    #[error("run log is empty")]
    EmptyLog,
}

/// `0.282 -> "28.2%"`, rounding half away from zero at one decimal.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}%", round_tenth(fraction))
}

/// Signed percentage points: `0.41 -> "+41.0 pp"`.
pub fn format_points(fraction: f64) -> String {
    let v = round_tenth(fraction);
    let sign = if v >= 0.0 { "+" } else { "" };
    format!("{sign}{v:.1} pp")
}

/// Percentage rounded to one decimal. Rounds the per-mille value, since
/// `1519/2000 * 100` lands just under 75.95.
fn round_tenth(fraction: f64) -> f64 {
    (fraction * 1000.0).round() / 10.0 + 0.0
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), AnalyticsError> {
    if xs.len() != ys.len() {
        return Err(AnalyticsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(AnalyticsError::TooShort(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalyticsError::DegenerateInput);
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(AnalyticsError::DegenerateInput);
    }
    Ok(())
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share ranks i+1..=j.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, AnalyticsError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys)).ok_or(AnalyticsError::DegenerateInput)
}

fn tie_pairs(sorted: &[f64]) -> i64 {
    let mut total = 0i64;
    let mut run = 1i64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts strict inversions while merge-sorting `v` ascending.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + (n - j)].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64, AnalyticsError> {
    check_pair(xs, ys)?;
    let n = xs.len() as i64;
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = n * (n - 1) / 2;
    let sorted_x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tie_pairs(&sorted_x);
    let mut n3 = 0i64;
    let mut run = 1i64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;

    let mut y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; y.len()];
    let swaps = merge_count(&mut y, &mut buf);
    let n2 = tie_pairs(&y);

    let numerator = (n0 - n1 - n2 + n3 - 2 * swaps) as f64;
    let denominator = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    if denominator == 0.0 {
        return Err(AnalyticsError::DegenerateInput);
    }
    Ok((numerator / denominator).clamp(-1.0, 1.0))
}

/// Two-sided permutation p-values for rho and tau. Each shuffle has its
/// own seeded generator, so the result does not depend on thread count.
pub fn permutation_p_values(
    xs: &[f64],
    ys: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<(f64, f64), AnalyticsError> {
    let rho = spearman(xs, ys)?;
    let tau = kendall(xs, ys)?;
    if permutations == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let tol = 1e-12;
    let x_ranks = average_ranks(xs);
    let y_ranks = average_ranks(ys);
    let (hits_rho, hits_tau) = (0..permutations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx: Vec<usize> = (0..ys.len()).collect();
            idx.shuffle(&mut rng);
            let perm_y: Vec<f64> = idx.iter().map(|&k| ys[k]).collect();
            let perm_ranks: Vec<f64> = idx.iter().map(|&k| y_ranks[k]).collect();
            let r = pearson(&x_ranks, &perm_ranks).unwrap_or(0.0);
            let t = kendall(xs, &perm_y).unwrap_or(0.0);
            (
                (r.abs() >= rho.abs() - tol) as usize,
                (t.abs() >= tau.abs() - tol) as usize,
            )
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let p = |hits: usize| (hits + 1) as f64 / (permutations + 1) as f64;
    Ok((p(hits_rho), p(hits_tau)))
}

/// Per-iteration, smoothed, and best-so-far accuracy series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySeries {
    pub per_iteration: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub best_so_far: Vec<f64>,
    pub window: usize,
}

/// Centered moving average; the window is truncated at the series edges.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let left = (window - 1) / 2;
    let right = window - 1 - left;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(values.len() - 1);
            // Sum directly for short windows; the prefix difference can lose
            // precision on long series.
            if hi - lo < 64 {
                values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            } else {
                (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64
            }
        })
        .collect()
}

/// Failed iterations repeat the previous value (0 before the first success).
pub fn fill_failures(accuracies: &[Option<f64>]) -> Vec<f64> {
    let mut last = 0.0;
    accuracies
        .iter()
        .map(|a| {
            if let Some(v) = a {
                last = *v;
            }
            last
        })
        .collect()
}

pub fn running_best(accuracies: &[Option<f64>]) -> Vec<f64> {
    let mut best = 0.0f64;
    accuracies
        .iter()
        .map(|a| {
            if let Some(v) = a {
                best = best.max(*v);
            }
            best
        })
        .collect()
}

pub fn build_trajectories(log: &[RunLogRecord], window: usize) -> TrajectorySeries {
    let accs: Vec<Option<f64>> = log.iter().map(|r| r.outcome.accuracy()).collect();
    let per_iteration = fill_failures(&accs);
    let smoothed = if per_iteration.is_empty() {
        Vec::new()
    } else {
        moving_average(&per_iteration, window)
    };
    TrajectorySeries {
        best_so_far: running_best(&accs),
        per_iteration,
        smoothed,
        window,
    }
}

/// Which sequence the rank correlations are computed over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationBasis {
    /// Successful evaluations only, indexed by success order.
    #[default]
    SuccessOrder,
    /// Every iteration, using the failure-filled per-iteration series.
    Iteration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryOptions {
    pub basis: CorrelationBasis,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            basis: CorrelationBasis::SuccessOrder,
            permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub total_iterations: u64,
    pub successful_evaluations: u64,
    pub success_rate: f64,
    pub first_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub improvement: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub spearman_p: Option<f64>,
    pub kendall_p: Option<f64>,
    pub correlation_basis: CorrelationBasis,
    pub correlation_sample_size: usize,
    pub p_value_note: String,
    /// Set when the log has no successful evaluation.
    pub note: Option<String>,
}

impl SummaryReport {
    pub fn has_successes(&self) -> bool {
        self.successful_evaluations > 0
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let opt_pct = |v: Option<f64>| v.map(format_percent).unwrap_or_else(|| "n/a".into());
        let opt_num = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "undefined".into());
        let mut out = String::new();
        let rows = [
            ("Iterations", self.total_iterations.to_string()),
            (
                "Successes",
                format!("{} ({})", self.successful_evaluations, format_percent(self.success_rate)),
            ),
            ("1st acc.", opt_pct(self.first_accuracy)),
            ("Best acc.", opt_pct(self.best_accuracy)),
            (
                "Improve.",
                self.improvement.map(format_points).unwrap_or_else(|| "n/a".into()),
            ),
            ("Spearman rho", opt_num(self.spearman_rho)),
            ("Kendall tau", opt_num(self.kendall_tau)),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<14} {v}");
        }
        let _ = writeln!(out, "{}", self.p_value_note);
        if let Some(note) = &self.note {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

pub fn summarize(log: &[RunLogRecord], options: &SummaryOptions) -> Result<SummaryReport, AnalyticsError> {
    if log.is_empty() {
        return Err(AnalyticsError::EmptyLog);
    }
    let accs: Vec<Option<f64>> = log.iter().map(|r| r.outcome.accuracy()).collect();
    let successes: Vec<f64> = accs.iter().flatten().copied().collect();
    let total = log.len() as u64;
    let n_success = successes.len() as u64;
    let first = successes.first().copied();
    let best = successes.iter().copied().reduce(f64::max);

    let (xs, ys): (Vec<f64>, Vec<f64>) = match options.basis {
        CorrelationBasis::SuccessOrder => successes
            .iter()
            .enumerate()
            .map(|(i, &a)| ((i + 1) as f64, a))
            .unzip(),
        CorrelationBasis::Iteration => fill_failures(&accs)
            .into_iter()
            .zip(log)
            .map(|(a, r)| (r.iteration as f64, a))
            .unzip(),
    };
    let basis_label = match options.basis {
        CorrelationBasis::SuccessOrder => "successful evaluations (success order)",
        CorrelationBasis::Iteration => "iterations (failure-filled series)",
    };
    let (rho, tau, p_rho, p_tau, p_value_note) = match (spearman(&xs, &ys), kendall(&xs, &ys)) {
        (Ok(rho), Ok(tau)) => {
            let (p_rho, p_tau) = if options.permutations > 0 {
                let (a, b) = permutation_p_values(&xs, &ys, options.permutations, options.seed)?;
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            let note = match (p_rho, p_tau) {
                (Some(a), Some(b)) => format!(
                    "two-sided permutation p-values ({} shuffles, seed {}): rho p = {a:.4}, tau p = {b:.4}; n = {} {basis_label}",
                    options.permutations,
                    options.seed,
                    xs.len()
                ),
                _ => format!("p-values not computed; n = {} {basis_label}", xs.len()),
            };
            (Some(rho), Some(tau), p_rho, p_tau, note)
        }
        (Err(e), _) | (_, Err(e)) => (
            None,
            None,
            None,
            None,
            format!("correlations undefined ({e}); n = {} {basis_label}", xs.len()),
        ),
    };

    Ok(SummaryReport {
        total_iterations: total,
        successful_evaluations: n_success,
        success_rate: n_success as f64 / total as f64,
        first_accuracy: first,
        best_accuracy: best,
        improvement: first.zip(best).map(|(f, b)| b - f),
        spearman_rho: rho,
        kendall_tau: tau,
        spearman_p: p_rho,
        kendall_p: p_tau,
        correlation_basis: options.basis,
        correlation_sample_size: xs.len(),
        p_value_note,
        note: (n_success == 0).then(|| format!("NoSuccesses: none of the {total} iterations produced a successful evaluation")),
    })
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> io::Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    writer.flush()
}

/// Writes `summary.json`, `trajectories.csv`, and one CSV per series
/// (`per_iteration.csv`, `smoothed.csv`, `best_so_far.csv`) into `out_dir`.
pub fn write_report(out_dir: &Path, summary: &SummaryReport, series: &TrajectorySeries) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(summary).map_err(io::Error::other)?;
    fs::write(out_dir.join("summary.json"), json + "\n")?;
    let n = series.per_iteration.len();
    write_csv(
        &out_dir.join("trajectories.csv"),
        &["iteration", "per_iteration", "smoothed", "best_so_far"],
        (0..n).map(|i| {
            vec![
                (i + 1).to_string(),
                series.per_iteration[i].to_string(),
                series.smoothed[i].to_string(),
                series.best_so_far[i].to_string(),
            ]
        }),
    )?;
    for (name, values) in [
        ("per_iteration", &series.per_iteration),
        ("smoothed", &series.smoothed),
        ("best_so_far", &series.best_so_far),
    ] {
        write_csv(
            &out_dir.join(format!("{name}.csv")),
            &["iteration", name],
            values.iter().enumerate().map(|(i, v)| vec![(i + 1).to_string(), v.to_string()]),
        )?;
    }
    Ok(())
}
