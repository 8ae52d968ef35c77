//! Per-episode CSV traces and the `summary/v1` document.
//!
//! Every number in a run summary is derived from the run's two CSV files
//! by [`summarize_rows`]; [`verify`] re-reads the files and recomputes.

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::fit::{median, trace_fit, FitReport, FitSettings, KneeFit};
use composite_rl::agents::EpisodeRecord;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SUMMARY_SCHEMA: &str = "summary/v1";

/// One row of a trace CSV; the column order is part of the interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub cumulative_regret: f64,
    pub per_episode_regret: f64,
    #[serde(rename = "est_err_L")]
    pub est_err_l: f64,
    #[serde(rename = "est_err_S")]
    pub est_err_s: f64,
    #[serde(rename = "est_err_D")]
    pub est_err_d: Option<f64>,
    pub beta: f64,
    pub bonus_mean: f64,
    pub in_region: bool,
    pub lambda_min_design: f64,
    pub solver_iters: usize,
}

/// Companion CSV with the policy value and the per-episode audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub episode: usize,
    pub warm: bool,
    pub policy_value: f64,
    pub optimism_gap: Option<f64>,
    pub one_step_excess: Option<f64>,
    pub bonus_cap_excess: Option<f64>,
    pub tight_vs_naive_excess: Option<f64>,
    pub solver_converged: bool,
    pub warnings: usize,
}

pub fn trace_rows(records: &[EpisodeRecord]) -> Vec<TraceRow> {
    records
        .iter()
        .map(|r| TraceRow {
            episode: r.episode,
            cumulative_regret: r.cumulative_regret,
            per_episode_regret: r.per_episode_regret,
            est_err_l: r.est_err_l,
            est_err_s: r.est_err_s,
            est_err_d: r.est_err_d,
            beta: r.beta,
            bonus_mean: r.bonus_mean,
            in_region: r.in_region,
            lambda_min_design: r.lambda_min_design,
            solver_iters: r.solver_iters,
        })
        .collect()
}

pub fn audit_rows(records: &[EpisodeRecord]) -> Vec<AuditRow> {
    records
        .iter()
        .map(|r| AuditRow {
            episode: r.episode,
            warm: r.warm,
            policy_value: r.policy_value,
            optimism_gap: r.optimism_gap,
            one_step_excess: r.one_step_excess,
            bonus_cap_excess: r.bonus_cap_excess,
            tight_vs_naive_excess: r.tight_vs_naive_excess,
            solver_converged: r.solver_converged,
            warnings: r.warnings.len(),
        })
        .collect()
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(LabError::from)).collect()
}

/// Everything a summary reports about one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub n_episodes: usize,
    pub n_warm: usize,
    pub total_regret: f64,
    pub min_per_episode_regret: f64,
    pub in_region_fraction: Option<f64>,
    pub regret_fit: Option<FitReport>,
    /// Fit of `est_err_L + est_err_S`.
    pub error_fit: Option<FitReport>,
    pub min_optimism_gap_in_region: Option<f64>,
    pub max_one_step_excess_in_region: Option<f64>,
    pub max_bonus_cap_excess: Option<f64>,
    pub max_tight_vs_naive_excess: Option<f64>,
    pub mean_bonus_post_warm: Option<f64>,
    pub unconverged_solves: usize,
    pub solver_warnings: usize,
}

fn fold_opt(it: impl Iterator<Item = f64>, pick: fn(f64, f64) -> f64) -> Option<f64> {
    it.fold(None, |acc, x| Some(acc.map_or(x, |a| pick(a, x))))
}

pub fn summarize_rows(trace: &[TraceRow], audit: &[AuditRow], fit: &FitSettings) -> Result<RunStats> {
    if trace.len() != audit.len() || trace.iter().zip(audit).any(|(t, a)| t.episode != a.episode) {
        return Err(LabError::Verification("trace and audit rows are not aligned".into()));
    }
    let n = trace.len();
    let episodes: Vec<usize> = trace.iter().map(|r| r.episode).collect();
    let post: Vec<(&TraceRow, &AuditRow)> = trace.iter().zip(audit).filter(|(_, a)| !a.warm).collect();
    let in_region = post.iter().filter(|(t, _)| t.in_region);
    Ok(RunStats {
        n_episodes: n,
        n_warm: n - post.len(),
        total_regret: trace.last().map_or(0.0, |r| r.cumulative_regret),
        min_per_episode_regret: trace.iter().map(|r| r.per_episode_regret).fold(f64::INFINITY, f64::min),
        in_region_fraction: (!post.is_empty())
            .then(|| post.iter().filter(|(t, _)| t.in_region).count() as f64 / post.len() as f64),
        regret_fit: trace_fit(
            &episodes,
            &trace.iter().map(|r| r.cumulative_regret).collect::<Vec<_>>(),
            n,
            fit,
        ),
        error_fit: trace_fit(
            &episodes,
            &trace.iter().map(|r| r.est_err_l + r.est_err_s).collect::<Vec<_>>(),
            n,
            fit,
        ),
        min_optimism_gap_in_region: fold_opt(in_region.clone().filter_map(|(_, a)| a.optimism_gap), f64::min),
        max_one_step_excess_in_region: fold_opt(in_region.filter_map(|(_, a)| a.one_step_excess), f64::max),
        max_bonus_cap_excess: fold_opt(audit.iter().filter_map(|a| a.bonus_cap_excess), f64::max),
        max_tight_vs_naive_excess: fold_opt(audit.iter().filter_map(|a| a.tight_vs_naive_excess), f64::max),
        mean_bonus_post_warm: (!post.is_empty())
            .then(|| post.iter().map(|(t, _)| t.bonus_mean).sum::<f64>() / post.len() as f64),
        unconverged_solves: audit.iter().filter(|a| !a.solver_converged).count(),
        solver_warnings: audit.iter().map(|a| a.warnings).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `single`, `transfer-naive` or `transfer-tight`.
    pub label: String,
    pub seed: u64,
    pub n0: Option<usize>,
    pub trace_csv: String,
    pub audit_csv: String,
    pub optimal_value: f64,
    pub stats: RunStats,
}

/// Medians over the seeds of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub n0: Option<usize>,
    pub seeds: usize,
    pub median_total_regret: Option<f64>,
    pub median_regret_slope: Option<f64>,
    pub median_error_slope: Option<f64>,
    pub median_error_r_squared: Option<f64>,
    pub median_in_region_fraction: Option<f64>,
}

/// Paired-seed regret ratios `numerator / denominator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub numerator: String,
    pub denominator: String,
    pub per_seed: Vec<SeedRatio>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRatio {
    pub seed: u64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n0: usize,
    pub e: usize,
    pub s: usize,
    pub r: usize,
    pub seed: u64,
    pub cumulative_regret: f64,
}

/// One `(e, s, r)` slice of the sweep, ordered by `N0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub e: usize,
    pub s: usize,
    pub r: usize,
    pub n0: Vec<usize>,
    pub median_regret: Vec<f64>,
    /// Standard error of each median (scaled MAD).
    pub median_se: Vec<f64>,
    /// `N0* = N·(r·C_φ² + s)`.
    pub theoretical_crossover: f64,
    pub c_phi: f64,
    /// Two-segment fit of `ln(median regret)` on `ln N0`.
    pub knee: Option<KneeFit>,
    pub empirical_knee_n0: Option<f64>,
    /// Log-log slope between the last two grid points.
    pub final_segment_slope: Option<f64>,
    /// No step up by more than twice the combined standard error of the
    /// two medians.
    pub nonincreasing: bool,
    pub strictly_nonincreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub table_csv: String,
    pub curves: Vec<SweepCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub runs_checked: usize,
    pub max_abs_diff: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupSummary>,
    pub ratios: Vec<RatioSummary>,
    pub sweep: Option<SweepSummary>,
    pub verification: Option<Verification>,
}

impl Summary {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            schema: SUMMARY_SCHEMA.into(),
            command: command.into(),
            config: config.clone(),
            runs: vec![],
            groups: vec![],
            ratios: vec![],
            sweep: None,
            verification: None,
        }
    }

    pub fn group(&self, label: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn ratio(&self, numerator: &str, denominator: &str) -> Option<&RatioSummary> {
        self.ratios
            .iter()
            .find(|r| r.numerator == numerator && r.denominator == denominator)
    }

    pub fn runs_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunSummary> + 'a {
        self.runs.iter().filter(move |r| r.label == label)
    }

    /// Adds one group per label, in order of first appearance.
    pub fn add_groups(&mut self) {
        let mut labels: Vec<(String, Option<usize>)> = Vec::new();
        for r in &self.runs {
            if !labels.iter().any(|(l, n)| *l == r.label && *n == r.n0) {
                labels.push((r.label.clone(), r.n0));
            }
        }
        for (label, n0) in labels {
            let runs: Vec<&RunSummary> = self.runs.iter().filter(|r| r.label == label && r.n0 == n0).collect();
            let collect = |f: &dyn Fn(&RunStats) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(|r| f(&r.stats)).collect() };
            self.groups.push(GroupSummary {
                label,
                n0,
                seeds: runs.len(),
                median_total_regret: median(&collect(&|s| Some(s.total_regret))),
                median_regret_slope: median(&collect(&|s| s.regret_fit.map(|f| f.slope))),
                median_error_slope: median(&collect(&|s| s.error_fit.map(|f| f.slope))),
                median_error_r_squared: median(&collect(&|s| s.error_fit.map(|f| f.r_squared))),
                median_in_region_fraction: median(&collect(&|s| s.in_region_fraction)),
            });
        }
    }

    /// Paired ratio of total regrets over the seeds both labels share.
    pub fn add_ratio(&mut self, numerator: &str, denominator: &str) {
        let per_seed: Vec<SeedRatio> = self
            .runs_of(numerator)
            .map(|num| {
                let den = self.runs_of(denominator).find(|d| d.seed == num.seed);
                let ratio = den.and_then(|d| {
                    (d.stats.total_regret > 0.0).then(|| num.stats.total_regret / d.stats.total_regret)
                });
                SeedRatio { seed: num.seed, ratio }
            })
            .collect();
        let med = median(&per_seed.iter().filter_map(|r| r.ratio).collect::<Vec<_>>());
        self.ratios.push(RatioSummary {
            numerator: numerator.into(),
            denominator: denominator.into(),
            per_seed,
            median: med,
        });
    }
}

fn max_diff(a: &RunStats, b: &RunStats) -> f64 {
    fn d(x: f64, y: f64) -> f64 {
        if x == y {
            0.0
        } else {
            (x - y).abs()
        }
    }
    fn dopt(x: Option<f64>, y: Option<f64>) -> f64 {
        match (x, y) {
            (None, None) => 0.0,
            (Some(x), Some(y)) => d(x, y),
            _ => f64::INFINITY,
        }
    }
    fn dfit(x: Option<FitReport>, y: Option<FitReport>) -> f64 {
        match (x, y) {
            (None, None) => 0.0,
            (Some(x), Some(y)) if x.n_points == y.n_points => d(x.slope, y.slope)
                .max(d(x.intercept, y.intercept))
                .max(d(x.r_squared, y.r_squared)),
            _ => f64::INFINITY,
        }
    }
    let counts = a.n_episodes != b.n_episodes
        || a.n_warm != b.n_warm
        || a.unconverged_solves != b.unconverged_solves
        || a.solver_warnings != b.solver_warnings;
    if counts {
        return f64::INFINITY;
    }
    [
        d(a.total_regret, b.total_regret),
        d(a.min_per_episode_regret, b.min_per_episode_regret),
        dopt(a.in_region_fraction, b.in_region_fraction),
        dfit(a.regret_fit, b.regret_fit),
        dfit(a.error_fit, b.error_fit),
        dopt(a.min_optimism_gap_in_region, b.min_optimism_gap_in_region),
        dopt(a.max_one_step_excess_in_region, b.max_one_step_excess_in_region),
        dopt(a.max_bonus_cap_excess, b.max_bonus_cap_excess),
        dopt(a.max_tight_vs_naive_excess, b.max_tight_vs_naive_excess),
        dopt(a.mean_bonus_post_warm, b.mean_bonus_post_warm),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Re-reads every run's CSVs from `dir` and recomputes its statistics.
pub fn verify(summary: &Summary, dir: &Path, tol: f64) -> Result<Verification> {
    let mut worst = 0.0f64;
    for run in &summary.runs {
        let trace: Vec<TraceRow> = read_csv(&dir.join(&run.trace_csv))?;
        let audit: Vec<AuditRow> = read_csv(&dir.join(&run.audit_csv))?;
        let again = summarize_rows(&trace, &audit, &summary.config.fit)?;
        worst = worst.max(max_diff(&run.stats, &again));
    }
    Ok(Verification {
        runs_checked: summary.runs.len(),
        max_abs_diff: worst,
        ok: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, cum: f64) -> (TraceRow, AuditRow) {
        (
            TraceRow {
                episode: n,
                cumulative_regret: cum,
                per_episode_regret: 0.1,
                est_err_l: 1.0 / n as f64,
                est_err_s: 0.0,
                est_err_d: None,
                beta: if n == 1 { f64::INFINITY } else { 0.5 },
                bonus_mean: 0.0,
                in_region: true,
                lambda_min_design: 0.0,
                solver_iters: 3,
            },
            AuditRow {
                episode: n,
                warm: n == 1,
                policy_value: 1.0,
                optimism_gap: (n > 1).then_some(0.0),
                one_step_excess: None,
                bonus_cap_excess: None,
                tight_vs_naive_excess: None,
                solver_converged: true,
                warnings: 0,
            },
        )
    }

    #[test]
    fn csv_round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let (t, a): (Vec<_>, Vec<_>) = (1..=30).map(|n| row(n, 0.1 * n as f64)).unzip();
        write_csv(&dir.path().join("t.csv"), &t).unwrap();
        write_csv(&dir.path().join("a.csv"), &a).unwrap();
        let t2: Vec<TraceRow> = read_csv(&dir.path().join("t.csv")).unwrap();
        let a2: Vec<AuditRow> = read_csv(&dir.path().join("a.csv")).unwrap();
        assert_eq!(t, t2);
        assert_eq!(a, a2);
        let header = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert!(header.starts_with(
            "episode,cumulative_regret,per_episode_regret,est_err_L,est_err_S,est_err_D,beta,bonus_mean,in_region,lambda_min_design,solver_iters\n"
        ));
        let s = summarize_rows(&t2, &a2, &FitSettings::default()).unwrap();
        assert_eq!(s.n_warm, 1);
        assert!((s.error_fit.unwrap().slope + 1.0).abs() < 1e-12);
        assert!((s.regret_fit.unwrap().slope - 1.0).abs() < 1e-12);
    }
}
