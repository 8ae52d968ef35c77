use clap::{Parser, Subcommand};
use composite_lab::commands;
use composite_lab::config::{parse_seeds, ExperimentConfig};
use composite_lab::output::Summary;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "composite-lab", version, about = "UCB-Q and UCB-TQL experiments on low-rank plus sparse MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON, schema "experiment/v1").
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `0..10` or `1,5,9`; overrides the config's seed list.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Proceed when the sufficient-sparsity bound is violated.
    #[arg(long, global = true)]
    override_assumptions: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate instances and task pairs.
    Gen,
    /// Single-task UCB-Q.
    Single,
    /// UCB-TQL against UCB-Q on the target task.
    Transfer,
    /// Phase-transition sweep over N0.
    Sweep,
    /// Assumption and invariant diagnostics.
    Check,
}

fn load(cli: &Cli) -> composite_lab::Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| composite_lab::LabError::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = &cli.seeds {
        cfg.plan.seeds = parse_seeds(s)?;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.override_assumptions |= cli.override_assumptions;
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn report(summary: &Summary) {
    for g in &summary.groups {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<16} n0={:<7} seeds={:<3} median regret {}  regret slope {}  error slope {}  in-region {}",
            g.label,
            g.n0.map_or("-".into(), |n| n.to_string()),
            g.seeds,
            fmt(g.median_total_regret),
            fmt(g.median_regret_slope),
            fmt(g.median_error_slope),
            fmt(g.median_in_region_fraction),
        );
    }
    for r in &summary.ratios {
        println!("ratio {}/{}: median {:?}", r.numerator, r.denominator, r.median);
    }
    if let Some(sw) = &summary.sweep {
        for c in &sw.curves {
            println!(
                "sweep e={} s={} r={}: N0 {:?} median regret {:?} crossover {:.0} knee {:?} final slope {:?}",
                c.e, c.s, c.r, c.n0, c.median_regret, c.theoretical_crossover, c.empirical_knee_n0, c.final_segment_slope
            );
        }
    }
}

fn run(cli: &Cli) -> composite_lab::Result<bool> {
    let (cfg, out) = load(cli)?;
    match cli.command {
        Command::Gen => {
            let g = commands::cmd_gen(&cfg, &out)?;
            println!("wrote {} files to {}", g.files.len(), out.display());
        }
        Command::Single => report(&commands::cmd_single(&cfg, &out)?),
        Command::Transfer => report(&commands::cmd_transfer(&cfg, &out)?),
        Command::Sweep => report(&commands::cmd_sweep(&cfg, &out)?),
        Command::Check => {
            let r = commands::cmd_check(&cfg, &out)?;
            for w in &r.warnings {
                println!("warning: {w}");
            }
            for f in &r.failures {
                println!("FAILED: {f}");
            }
            println!("check {}", if r.ok { "passed" } else { "failed" });
            return Ok(r.ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
