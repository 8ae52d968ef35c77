use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn small_config(dir: &Path, e: usize, n_episodes: usize) -> PathBuf {
    let cfg = json!({
        "schema": "experiment/v1",
        "gen": {
            "n_states": 4,
            "n_actions": 2,
            "horizon": 3,
            "rank_r": 1,
            "sparsity_s": 4,
            "diff_sparsity_e": e,
            "incoherence_budget_mu": 4.0,
            "perturb_magnitude": 0.05,
            "seed": 7
        },
        "plan": { "n_episodes": n_episodes, "n0": 20, "seeds": [0, 1] },
        "check": { "episodes": 10, "probe_episodes": 50, "bonus_directions": 200 }
    });
    let path = dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn lab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_composite-lab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr)
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, 5);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = lab(&["gen", "--override-assumptions"], &cfg, out);
        assert!(o.status.success(), "{}", stdout(&o));
    }
    let files = sorted_files(&a);
    assert_eq!(files.len(), 8);
    assert_eq!(files, sorted_files(&b));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seeds_flag_selects_instances() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, 5);
    let out = tmp.path().join("out");
    let o = lab(&["gen", "--override-assumptions", "--seeds", "3,5"], &cfg, &out);
    assert!(o.status.success(), "{}", stdout(&o));
    let files = sorted_files(&out);
    assert!(files.contains(&"mdp_seed3.json".to_string()));
    assert!(files.contains(&"pair_seed5.json".to_string()));
    assert!(!files.iter().any(|f| f.contains("seed0")));
}

#[test]
fn zero_difference_pair_has_identical_tasks() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 0, 5);
    let out = tmp.path().join("out");
    assert!(lab(&["gen", "--override-assumptions"], &cfg, &out).status.success());
    let strip = |name: &str| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("metadata");
        v
    };
    assert_eq!(strip("source_seed0.json"), strip("target_seed0.json"));
}

#[test]
fn sparsity_bound_is_enforced_without_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, 5);
    let o = lab(&["gen"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).contains("error"));
}

#[test]
fn missing_config_is_an_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_composite-lab"))
        .arg("single")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn one_episode_gives_one_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, 1);
    let out = tmp.path().join("out");
    let o = lab(&["single", "--override-assumptions", "--seeds", "0"], &cfg, &out);
    assert!(o.status.success(), "{}", stdout(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verification"]["ok"], true);
    let csv = summary["runs"][0]["trace_csv"].as_str().unwrap();
    let text = fs::read_to_string(out.join(csv)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].starts_with("episode,cumulative_regret,per_episode_regret,est_err_L,est_err_S,est_err_D,beta"));
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn transfer_summary_verifies() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, 8);
    let out = tmp.path().join("out");
    let o = lab(&["transfer", "--override-assumptions"], &cfg, &out);
    assert!(o.status.success(), "{}", stdout(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verification"]["ok"], true);
    // two seeds, UCB-Q plus both transfer variants
    assert_eq!(summary["runs"].as_array().unwrap().len(), 6);
}

#[test]
fn check_passes_on_a_generated_instance() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, 5);
    let o = lab(&["check", "--override-assumptions"], &cfg, &tmp.path().join("out"));
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("check passed"));
}

#[test]
fn check_rejects_a_tampered_sparse_core() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = small_config(tmp.path(), 2, 5);
    let gen_out = tmp.path().join("gen");
    assert!(lab(&["gen", "--override-assumptions"], &cfg_path, &gen_out).status.success());

    let file = gen_out.join("mdp_seed0.json");
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&file).unwrap()).unwrap();
    let entries = doc["core_sparse"].as_array_mut().unwrap();
    let v = entries[0]["value"].as_f64().unwrap();
    entries[0]["value"] = json!(v + 0.05);
    let tampered = tmp.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_string(&doc).unwrap()).unwrap();

    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["check"]["instance"] = json!(tampered);
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let o = lab(&["check", "--override-assumptions"], &cfg_path, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAILED"));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/check.json")).unwrap()).unwrap();
    assert_eq!(report["ok"], false);
}
