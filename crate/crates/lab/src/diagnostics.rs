//! Instance and agent diagnostics behind the `check` command.

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::{audit_rows, summarize_rows, trace_rows, RunStats};
use composite_rl::agents::{bonus_terms, run_ucb_q, AgentOptions, ConfidenceSpec};
use composite_rl::estimation::{design_min_eigenvalue, RegressionData};
use composite_rl::instance_gen::{check_assumptions, generate_mdp, AssumptionReport, Subject};
use composite_rl::mdp::{sample_episode, UniformPolicy};
use composite_rl::{io, Mdp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const CHECK_SCHEMA: &str = "check/v1";

/// Closed-form single-task bonus against the linear functional
/// `Δ ↦ φᵀ(Δ_L + Δ_S)Ψᵀv` over the ball `‖Δ_L‖²_F + ‖Δ_S‖²_F ≤ β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusProbe {
    pub closed_form: f64,
    /// Largest value over the sampled boundary directions.
    pub max_sampled: f64,
    /// Value at `Δ_L = Δ_S = sqrt(β/2)·φwᵀ/‖φwᵀ‖_F`.
    pub attained: f64,
}

pub fn probe_bonus(mdp: &Mdp, row: usize, v: &DVector<f64>, beta: f64, directions: usize, rng: &mut impl Rng) -> BonusProbe {
    let f = mdp.features();
    let phi = f.phi_row(row);
    let w: DVector<f64> = f.psi().transpose() * v;
    let (c, d) = bonus_terms(&phi, &w, &ConfidenceSpec::single(beta, 1.0, 0.0));
    let (p, q) = (phi.len(), w.len());
    let mut max_sampled = f64::NEG_INFINITY;
    for _ in 0..directions {
        let dl = DMatrix::<f64>::from_fn(p, q, |_, _| rng.sample(StandardNormal));
        let ds = DMatrix::<f64>::from_fn(p, q, |_, _| rng.sample(StandardNormal));
        let norm = (dl.norm_squared() + ds.norm_squared()).sqrt();
        let scale = beta.sqrt() / norm;
        let val = phi.dot(&((dl + ds) * &w)) * scale;
        max_sampled = max_sampled.max(val);
    }
    let outer = &phi * w.transpose();
    let fro = outer.norm();
    let attained = if fro > 0.0 {
        let delta = outer * ((beta / 2.0).sqrt() / fro);
        2.0 * phi.dot(&(delta * &w))
    } else {
        0.0
    };
    BonusProbe {
        closed_form: c + d,
        max_sampled,
        attained,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonusCheck {
    pub probes: Vec<BonusProbe>,
    /// Largest `max_sampled − closed_form`.
    pub max_violation: f64,
    /// Largest `|attained − closed_form|`.
    pub max_attain_error: f64,
}

pub fn bonus_check(mdp: &Mdp, probes: usize, directions: usize, seed: u64) -> BonusCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = mdp.horizon() as f64;
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let row = rng.random_range(0..mdp.n_pairs());
        let v = DVector::from_fn(mdp.n_states(), |_, _| rng.random::<f64>() * h);
        let beta = 10f64.powf(rng.random_range(-3.0..1.0));
        out.push(probe_bonus(mdp, row, &v, beta, directions, &mut rng));
    }
    BonusCheck {
        max_violation: out.iter().map(|p| p.max_sampled - p.closed_form).fold(f64::NEG_INFINITY, f64::max),
        max_attain_error: out.iter().map(|p| (p.attained - p.closed_form).abs()).fold(0.0, f64::max),
        probes: out,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub schema: String,
    pub instance: String,
    pub assumptions: Option<AssumptionReport>,
    pub warm_start_episodes: usize,
    pub warm_start_lambda_min: Option<f64>,
    pub bonus: Option<BonusCheck>,
    pub audit: Option<RunStats>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    pub ok: bool,
}

/// Runs every diagnostic; the report's `ok` is false on any invariant
/// failure, including an instance file that fails validation.
pub fn run_check(cfg: &ExperimentConfig) -> Result<CheckReport> {
    let mut report = CheckReport {
        schema: CHECK_SCHEMA.into(),
        instance: String::new(),
        assumptions: None,
        warm_start_episodes: 0,
        warm_start_lambda_min: None,
        bonus: None,
        audit: None,
        failures: vec![],
        warnings: vec![],
        ok: false,
    };
    let gen = cfg.gen_for(cfg.plan.seeds[0]);
    let loaded = match &cfg.check.instance {
        Some(path) => {
            report.instance = path.display().to_string();
            io::load_mdp::<f64>(path)
        }
        None => {
            report.instance = format!("generated (seed {})", gen.seed);
            generate_mdp::<f64>(&gen, true)
        }
    };
    let mdp = match loaded {
        Ok(m) => m,
        Err(e) => {
            report.failures.push(format!("instance rejected: {e}"));
            return Ok(report);
        }
    };

    let assumptions = check_assumptions(
        Subject::Mdp(&mdp),
        &gen,
        cfg.check.separation_pairs,
        cfg.check.probe_episodes,
    )?;
    report.warnings.extend(assumptions.warnings.iter().cloned());
    report.assumptions = Some(assumptions);

    let (p, q) = (mdp.features().p(), mdp.features().q());
    let n_warm = cfg.agent.warm_episodes(p, q, mdp.horizon());
    report.warm_start_episodes = n_warm;
    if n_warm > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
        let uniform = UniformPolicy {
            n_actions: mdp.n_actions(),
        };
        let mut data = RegressionData::new(p, q);
        for n in 1..=n_warm {
            for smp in sample_episode(&mdp, &uniform, n, &mut rng)? {
                data.push_sample(mdp.features(), mdp.n_actions(), &smp);
            }
            data.end_episode();
        }
        let lam = design_min_eigenvalue(&data);
        if lam <= cfg.agent.solver.lambda_floor {
            report
                .warnings
                .push(format!("warm-start design is degenerate (λ_min = {lam:.3e})"));
        }
        report.warm_start_lambda_min = Some(lam);
    }

    let bonus = bonus_check(&mdp, cfg.check.bonus_probes, cfg.check.bonus_directions, gen.seed);
    if bonus.max_violation > 1e-10 {
        report
            .failures
            .push(format!("sampled direction exceeds the closed-form bonus by {:.3e}", bonus.max_violation));
    }
    if bonus.max_attain_error > 1e-10 {
        report
            .failures
            .push(format!("attaining direction misses the bonus by {:.3e}", bonus.max_attain_error));
    }
    report.bonus = Some(bonus);

    if cfg.check.episodes > 0 {
        let opts = AgentOptions {
            variant: composite_rl::agents::Variant::Single,
            ..cfg.agent.clone()
        };
        let trace = run_ucb_q(&mdp, cfg.check.episodes, &opts, cfg.plan.seeds[0])?;
        let stats = summarize_rows(&trace_rows(&trace.records), &audit_rows(&trace.records), &cfg.fit)?;
        if stats.min_optimism_gap_in_region.is_some_and(|g| g < -1e-9) {
            report.failures.push(format!(
                "optimism violated on an in-region episode (gap {:.3e})",
                stats.min_optimism_gap_in_region.unwrap_or_default()
            ));
        }
        if stats.max_one_step_excess_in_region.is_some_and(|x| x > 1e-9) {
            report.failures.push("one-step bound violated on an in-region episode".into());
        }
        if stats.max_bonus_cap_excess.is_some_and(|x| x > 1e-9) {
            report.failures.push("bonus exceeds its cap".into());
        }
        if stats.min_per_episode_regret < -1e-10 {
            report.failures.push(format!("negative regret {:.3e}", stats.min_per_episode_regret));
        }
        if stats.in_region_fraction.is_some_and(|f| f < 0.95) {
            report.warnings.push(format!(
                "truth inside the confidence region on {:.1}% of post-warm-start episodes",
                100.0 * stats.in_region_fraction.unwrap_or_default()
            ));
        }
        report.audit = Some(stats);
    }
    report.ok = report.failures.is_empty();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use composite_rl::instance_gen::GenConfig;

    #[test]
    fn bonus_dominates_and_is_attained() {
        let mdp = generate_mdp::<f64>(&GenConfig::reference(2), true).unwrap();
        let chk = bonus_check(&mdp, 5, 2000, 9);
        assert!(chk.max_violation <= 1e-12, "{}", chk.max_violation);
        assert!(chk.max_attain_error <= 1e-10);
    }
}
