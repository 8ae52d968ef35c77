//! The five CLI commands. Each writes its artefacts into `out` and
//! returns what it wrote.

use crate::config::ExperimentConfig;
use crate::diagnostics::{run_check, CheckReport};
use crate::error::{LabError, Result};
use crate::fit::{knee_fit, median, median_standard_error};
use crate::output::{
    audit_rows, read_csv, summarize_rows, trace_rows, verify, write_csv, RunSummary, Summary, SweepCurve, SweepRow,
    SweepSummary,
};
use composite_rl::agents::{run_ucb_q, run_ucb_tql_from, source_pilot, AgentOptions, Pilot, Variant};
use composite_rl::instance_gen::{generate_mdp, generate_task_pair, GenConfig};
use composite_rl::io::{self, Metadata};
use composite_rl::mdp::compute_regularity;
use composite_rl::{Mdp, Pair, Trace};
use rayon::prelude::*;
use std::path::Path;

/// Agreement required between a summary and its re-read CSVs.
pub const VERIFY_TOL: f64 = 1e-9;

pub fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Single => "single",
        Variant::TransferNaive => "transfer-naive",
        Variant::TransferTight => "transfer-tight",
    }
}

fn par_map<I: Sync, R: Send>(workers: usize, items: &[I], f: impl Fn(&I) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LabError::Pool(e.to_string()))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|source| LabError::File {
        path: out.display().to_string(),
        source,
    })
}

fn metadata(pairs: &[(&str, serde_json::Value)]) -> Metadata {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn instance(cfg: &ExperimentConfig, gen: &GenConfig) -> Result<Mdp> {
    Ok(generate_mdp(gen, cfg.override_assumptions)?)
}

fn pair(cfg: &ExperimentConfig, gen: &GenConfig) -> Result<Pair> {
    Ok(generate_task_pair(gen, cfg.override_assumptions)?)
}

/// Writes the trace and audit CSVs plus the final estimator of one run.
fn record_run(out: &Path, stem: &str, label: &str, seed: u64, n0: Option<usize>, trace: &Trace, cfg: &ExperimentConfig) -> Result<RunSummary> {
    let trace_csv = format!("{stem}.csv");
    let audit_csv = format!("{stem}_audit.csv");
    let t = trace_rows(&trace.records);
    let a = audit_rows(&trace.records);
    write_csv(&out.join(&trace_csv), &t)?;
    write_csv(&out.join(&audit_csv), &a)?;
    let est = io::EstimatorDoc::from_state(
        &trace.final_state,
        metadata(&[("label", label.into()), ("seed", seed.into())]),
    );
    io::save_json(&out.join(format!("{stem}_estimator.json")), &est)?;
    Ok(RunSummary {
        label: label.into(),
        seed,
        n0,
        trace_csv,
        audit_csv,
        optimal_value: trace.optimal_value,
        stats: summarize_rows(&t, &a, &cfg.fit)?,
    })
}

/// Writes `summary.json` after checking it against the CSVs on disk.
fn finish(mut summary: Summary, out: &Path) -> Result<Summary> {
    let ver = verify(&summary, out, VERIFY_TOL)?;
    if let Some(sw) = &summary.sweep {
        let rows: Vec<SweepRow> = read_csv(&out.join(&sw.table_csv))?;
        let again = sweep_curves(&rows, &summary.config, &sw.curves);
        if again != sw.curves {
            return Err(LabError::Verification("sweep table does not reproduce the curves".into()));
        }
    }
    if !ver.ok {
        return Err(LabError::Verification(format!(
            "recomputed statistics differ by {:.3e}",
            ver.max_abs_diff
        )));
    }
    summary.verification = Some(ver);
    io::save_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOutput {
    pub files: Vec<String>,
}

/// Per seed: the single-task instance `mdp_seed{k}.json`, the transfer
/// pair `pair_seed{k}.json` and its two tasks as separate instance files.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<GenOutput> {
    ensure_dir(out)?;
    let written = par_map(cfg.workers, &cfg.plan.seeds, |&seed| {
        let gen = cfg.gen_for(seed);
        let meta = |role: &str| {
            metadata(&[
                ("role", role.into()),
                ("run_seed", seed.into()),
                ("instance_seed", gen.seed.into()),
            ])
        };
        let mdp = instance(cfg, &gen)?;
        let pr = pair(cfg, &gen)?;
        let names = [
            format!("mdp_seed{seed}.json"),
            format!("source_seed{seed}.json"),
            format!("target_seed{seed}.json"),
            format!("pair_seed{seed}.json"),
        ];
        io::save_mdp(&out.join(&names[0]), &mdp, meta("single"))?;
        io::save_mdp(&out.join(&names[1]), &pr.source, meta("source"))?;
        io::save_mdp(&out.join(&names[2]), &pr.target, meta("target"))?;
        io::save_pair(&out.join(&names[3]), &pr, meta("pair"))?;
        Ok(names.to_vec())
    })?;
    Ok(GenOutput {
        files: written.into_iter().flatten().collect(),
    })
}

/// UCB-Q on each seed's single-task instance.
pub fn cmd_single(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    ensure_dir(out)?;
    let opts = AgentOptions {
        variant: Variant::Single,
        ..cfg.agent.clone()
    };
    let runs = par_map(cfg.workers, &cfg.plan.seeds, |&seed| {
        let mdp = instance(cfg, &cfg.gen_for(seed))?;
        let trace = run_ucb_q(&mdp, cfg.plan.n_episodes, &opts, seed)?;
        record_run(out, &format!("single_seed{seed}"), "single", seed, None, &trace, cfg)
    })?;
    let mut summary = Summary::new("single", cfg);
    summary.runs = runs;
    summary.add_groups();
    finish(summary, out)
}

fn transfer_seed(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Vec<RunSummary>> {
    let pr = pair(cfg, &cfg.gen_for(seed))?;
    let n = cfg.plan.n_episodes;
    let single_opts = AgentOptions {
        variant: Variant::Single,
        ..cfg.agent.clone()
    };
    let single = run_ucb_q(&pr.target, n, &single_opts, seed)?;
    let mut runs = vec![record_run(out, &format!("single_seed{seed}"), "single", seed, None, &single, cfg)?];
    let s0 = pr.source.sparsity_s().saturating_sub(pr.declared_e);
    let pilot = source_pilot(&pr.source, cfg.plan.n0, s0, &cfg.agent, seed)?;
    for &v in &cfg.plan.variants {
        let label = variant_label(v);
        let trace = transfer_run(cfg, &pr, &pilot, v, seed)?;
        runs.push(record_run(out, &format!("{label}_seed{seed}"), label, seed, Some(cfg.plan.n0), &trace, cfg)?);
    }
    Ok(runs)
}

fn transfer_run(cfg: &ExperimentConfig, pr: &Pair, pilot: &Pilot<f64>, v: Variant, seed: u64) -> Result<Trace> {
    let opts = AgentOptions {
        variant: v,
        ..cfg.agent.clone()
    };
    Ok(run_ucb_tql_from(pr, pilot, cfg.plan.n_episodes, &opts, seed)?)
}

/// UCB-Q on the target and UCB-TQL (each configured variant) from a
/// shared source pilot, per seed.
pub fn cmd_transfer(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    ensure_dir(out)?;
    let runs = par_map(cfg.workers, &cfg.plan.seeds, |&seed| transfer_seed(cfg, out, seed))?;
    let mut summary = Summary::new("transfer", cfg);
    summary.runs = runs.into_iter().flatten().collect();
    summary.add_groups();
    for &v in &cfg.plan.variants {
        summary.add_ratio(variant_label(v), "single");
    }
    let (naive, tight) = (variant_label(Variant::TransferNaive), variant_label(Variant::TransferTight));
    if cfg.plan.variants.contains(&Variant::TransferNaive) && cfg.plan.variants.contains(&Variant::TransferTight) {
        summary.add_ratio(tight, naive);
    }
    finish(summary, out)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    e: usize,
    s: usize,
    r: usize,
    n0: usize,
    seed: u64,
}

fn axis(values: &[usize], fallback: usize) -> Vec<usize> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// Median regret per `N0` for every `(e, s, r)` slice of the table.
/// `template` supplies the `C_φ` each curve was generated with.
pub fn sweep_curves(rows: &[SweepRow], cfg: &ExperimentConfig, template: &[SweepCurve]) -> Vec<SweepCurve> {
    let mut keys: Vec<(usize, usize, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.e, r.s, r.r)) {
            keys.push((r.e, r.s, r.r));
        }
    }
    let n = cfg.plan.n_episodes as f64;
    keys.into_iter()
        .map(|(e, s, r)| {
            let mut n0s: Vec<usize> = rows
                .iter()
                .filter(|x| (x.e, x.s, x.r) == (e, s, r))
                .map(|x| x.n0)
                .collect();
            n0s.sort_unstable();
            n0s.dedup();
            let samples: Vec<Vec<f64>> = n0s
                .iter()
                .map(|&n0| {
                    rows.iter()
                        .filter(|x| (x.e, x.s, x.r, x.n0) == (e, s, r, n0))
                        .map(|x| x.cumulative_regret)
                        .collect()
                })
                .collect();
            let med: Vec<f64> = samples.iter().map(|v| median(v).unwrap_or(f64::NAN)).collect();
            let se: Vec<f64> = samples.iter().map(|v| median_standard_error(v).unwrap_or(f64::NAN)).collect();
            let c_phi = template
                .iter()
                .find(|c| (c.e, c.s, c.r) == (e, s, r))
                .map_or(1.0, |c| c.c_phi);
            let positive = med.iter().all(|m| *m > 0.0) && n0s.iter().all(|&x| x > 0);
            let lx: Vec<f64> = n0s.iter().map(|&x| (x as f64).ln()).collect();
            let ly: Vec<f64> = med.iter().map(|m| m.ln()).collect();
            let knee = positive.then(|| knee_fit(&lx, &ly)).flatten();
            let k = n0s.len();
            let final_segment_slope = (positive && k >= 2).then(|| (ly[k - 1] - ly[k - 2]) / (lx[k - 1] - lx[k - 2]));
            SweepCurve {
                e,
                s,
                r,
                nonincreasing: (1..med.len()).all(|k| med[k] <= med[k - 1] + 2.0 * se[k].hypot(se[k - 1])),
                strictly_nonincreasing: med.windows(2).all(|w| w[1] <= w[0]),
                theoretical_crossover: n * (r as f64 * c_phi * c_phi + s as f64),
                c_phi,
                empirical_knee_n0: knee.map(|kf| kf.knee_x.exp()),
                knee,
                final_segment_slope,
                n0: n0s,
                median_regret: med,
                median_se: se,
            }
        })
        .collect()
}

/// Phase-transition sweep: UCB-TQL regret over the `N0` grid for every
/// `(e, s, r)` combination.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    cfg.validate_sweep()?;
    ensure_dir(out)?;
    let variant = match cfg.agent.variant {
        Variant::Single => Variant::TransferTight,
        v => v,
    };
    let label = variant_label(variant);
    let mut cells = Vec::new();
    for &e in &axis(&cfg.sweep.e, cfg.gen.diff_sparsity_e) {
        for &s in &axis(&cfg.sweep.s, cfg.gen.sparsity_s) {
            for &r in &axis(&cfg.sweep.r, cfg.gen.rank_r) {
                for &n0 in &cfg.sweep.n0 {
                    for &seed in &cfg.plan.seeds {
                        cells.push(Cell { e, s, r, n0, seed });
                    }
                }
            }
        }
    }
    let results = par_map(cfg.workers, &cells, |c| {
        let gen = GenConfig {
            diff_sparsity_e: c.e,
            sparsity_s: c.s,
            rank_r: c.r,
            ..cfg.gen_for(c.seed)
        };
        let pr = pair(cfg, &gen)?;
        let c_phi = compute_regularity(&pr.target)?.c_phi;
        let s0 = pr.source.sparsity_s().saturating_sub(pr.declared_e);
        let pilot = source_pilot(&pr.source, c.n0, s0, &cfg.agent, c.seed)?;
        let trace = transfer_run(cfg, &pr, &pilot, variant, c.seed)?;
        let stem = format!("sweep_n0{}_e{}_s{}_r{}_seed{}", c.n0, c.e, c.s, c.r, c.seed);
        let run = record_run(out, &stem, label, c.seed, Some(c.n0), &trace, cfg)?;
        Ok((run, c_phi))
    })?;
    let rows: Vec<SweepRow> = cells
        .iter()
        .zip(&results)
        .map(|(c, (run, _))| SweepRow {
            n0: c.n0,
            e: c.e,
            s: c.s,
            r: c.r,
            seed: c.seed,
            cumulative_regret: run.stats.total_regret,
        })
        .collect();
    let table_csv = "sweep.csv".to_string();
    write_csv(&out.join(&table_csv), &rows)?;
    let template: Vec<SweepCurve> = cells
        .iter()
        .zip(&results)
        .map(|(c, (_, c_phi))| SweepCurve {
            e: c.e,
            s: c.s,
            r: c.r,
            n0: vec![],
            median_regret: vec![],
            median_se: vec![],
            theoretical_crossover: 0.0,
            c_phi: *c_phi,
            knee: None,
            empirical_knee_n0: None,
            final_segment_slope: None,
            nonincreasing: true,
            strictly_nonincreasing: true,
        })
        .collect();
    let curves = sweep_curves(&rows, cfg, &template);
    let mut summary = Summary::new("sweep", cfg);
    summary.runs = results.into_iter().map(|(r, _)| r).collect();
    summary.add_groups();
    summary.sweep = Some(SweepSummary { table_csv, curves });
    finish(summary, out)
}

/// Diagnostics; writes `check.json`.
pub fn cmd_check(cfg: &ExperimentConfig, out: &Path) -> Result<CheckReport> {
    ensure_dir(out)?;
    let report = run_check(cfg)?;
    io::save_json(&out.join("check.json"), &report)?;
    Ok(report)
}
