//! Experiment configuration (`experiment/v1`).

use crate::error::{LabError, Result};
use crate::fit::FitSettings;
use composite_rl::agents::{AgentOptions, Variant};
use composite_rl::instance_gen::GenConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const EXPERIMENT_SCHEMA: &str = "experiment/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    /// Instance shape. The instance of run seed `k` is generated with
    /// seed `gen.seed + k`.
    pub gen: GenConfig,
    #[serde(default)]
    pub agent: AgentOptions,
    pub plan: RunPlan,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub check: CheckSettings,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub override_assumptions: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPlan {
    /// Target (or single-task) episodes `N`.
    pub n_episodes: usize,
    /// Source episodes `N0` for transfer.
    #[serde(default)]
    pub n0: usize,
    pub seeds: Vec<u64>,
    /// Transfer variants run by `transfer`, always alongside UCB-Q on the
    /// target.
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::TransferNaive, Variant::TransferTight]
}

/// Grid of the phase-transition sweep. Empty `e`, `s` or `r` axes fall
/// back to the value in `gen`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub n0: Vec<usize>,
    #[serde(default)]
    pub e: Vec<usize>,
    #[serde(default)]
    pub s: Vec<usize>,
    #[serde(default)]
    pub r: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSettings {
    /// Check this `composite-mdp/v1` file instead of a generated instance.
    pub instance: Option<PathBuf>,
    /// Length of the audited UCB-Q run.
    pub episodes: usize,
    /// Uniform-policy episodes for the design eigenvalue probe.
    pub probe_episodes: usize,
    pub separation_pairs: usize,
    pub bonus_probes: usize,
    pub bonus_directions: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            instance: None,
            episodes: 60,
            probe_episodes: 500,
            separation_pairs: 50,
            bonus_probes: 20,
            bonus_directions: 10_000,
        }
    }
}

/// A seed, a comma-separated list and `a..b` ranges (end exclusive), e.g.
/// `0..10` or `1,4,7..9`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || LabError::Config(format!("cannot parse seed list {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LabError::File {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `|S| = 6`, `|A| = 3`, `H = 5`, `r = 2`, `s = 6`, seeds `0..10`.
    pub fn reference(n_episodes: usize) -> Self {
        Self {
            schema: EXPERIMENT_SCHEMA.into(),
            gen: GenConfig::reference(0),
            agent: AgentOptions::default(),
            plan: RunPlan {
                n_episodes,
                n0: 0,
                seeds: (0..10).collect(),
                variants: default_variants(),
            },
            sweep: SweepAxes::default(),
            fit: FitSettings::default(),
            check: CheckSettings::default(),
            output_dir: None,
            workers: 1,
            override_assumptions: true,
        }
    }

    /// Transfer battery: reference shape with `s = 20`, `e = 2`,
    /// `N0 = 10⁴`, `N = 500`.
    pub fn transfer_reference() -> Self {
        let mut cfg = Self::reference(500);
        cfg.gen.sparsity_s = 20;
        cfg.gen.diff_sparsity_e = 2;
        cfg.plan.n0 = 10_000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(LabError::Config(format!(
                "schema {:?}, expected {EXPERIMENT_SCHEMA:?}",
                self.schema
            )));
        }
        if self.plan.seeds.is_empty() {
            return Err(LabError::Config("seed list is empty".into()));
        }
        if self.plan.n_episodes == 0 {
            return Err(LabError::Config("n_episodes must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(LabError::Config("workers must be at least 1".into()));
        }
        if self.plan.variants.contains(&Variant::Single) {
            return Err(LabError::Config(
                "transfer variants are transfer-naive and transfer-tight; UCB-Q always runs".into(),
            ));
        }
        self.fit.validate()?;
        self.gen.validate()?;
        self.agent.validate()?;
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<()> {
        if self.sweep.n0.is_empty() {
            return Err(LabError::Config("sweep.n0 must list at least one N0".into()));
        }
        Ok(())
    }

    /// Generator config of run seed `seed`.
    pub fn gen_for(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed: self.gen.seed.wrapping_add(seed),
            ..self.gen.clone()
        }
    }
}
