use std::path::Path;
use std::process::Command;

use rareval::harness::{run_experiment, summarize_rows, ExperimentConfig, ExperimentSummary};
use rareval::report::{parse_csv, RunSummary};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rareval"))
}

fn gridworld_config(method: &str, out: &Path) -> String {
    format!(
        r#"
seeds = [1, 2, 3]
output_dir = "{}"

[env]
name = "gridworld-lava"

[method]
{method}

[convergence]
window = 500
tolerance = 0.02
"#,
        out.display()
    )
}

const APE: &str = "name = \"ape_discrete\"\nbudget_steps = 6000";
const MC: &str = "name = \"mc\"\nbudget_episodes = 1500";

#[test]
fn summary_is_recomputable_from_the_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&gridworld_config(APE, dir.path())).unwrap();
    let out = run_experiment(&cfg).unwrap();

    let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let on_disk: ExperimentSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(on_disk, out.summary);

    let mut runs = Vec::new();
    for r in &out.reports {
        let stem = format!("{}_{}_seed{}", r.method, r.env, r.seed);
        let rows = parse_csv(&std::fs::read_to_string(dir.path().join(format!("{stem}.csv"))).unwrap()).unwrap();
        let rebuilt = summarize_rows(&r.method, &r.env, r.seed, &rows, &cfg.convergence);
        let json: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{stem}.json"))).unwrap()).unwrap();
        assert_eq!(rebuilt, json);
        runs.push(rebuilt);
    }
    let again = ExperimentSummary::from_runs(&out.summary.method, &out.summary.env, runs);
    assert_eq!(again, out.summary);
}

#[test]
fn reruns_give_identical_csv() {
    for method in [APE, MC] {
        let cfg = ExperimentConfig::from_toml(&gridworld_config(method, Path::new("unused"))).unwrap();
        let cfg = ExperimentConfig { output_dir: None, ..cfg };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.to_csv(false), y.to_csv(false));
        }
        assert_ne!(a.reports[0].to_csv(false), a.reports[1].to_csv(false));
    }
}

#[test]
fn discrete_methods_accept_a_grid_on_continuous_envs() {
    let cfg = ExperimentConfig::from_toml(
        r#"
seeds = [5]
[env]
name = "intersection-2d"
preset = "easy"
[method]
name = "cem_discrete"
budget_steps = 3000
[discretize.state]
low = [-1.0, -1.0]
high = [1.0, 1.0]
bins = [10, 10]
[discretize.action]
low = [-2.0, -2.0]
high = [2.0, 2.0]
bins = [5, 5]
"#,
    )
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.reports[0].transitions, 3000);
}

#[test]
fn cli_list_envs() {
    let out = bin().arg("list-envs").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("intersection-2d"));
}

#[test]
fn cli_gamblers_oracle() {
    let out = bin()
        .args(["oracle", "--env", "gamblers-ruin", "--N", "3", "--p", "0.3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("0.1139240506"));
}

#[test]
fn cli_exit_codes() {
    let missing = bin().args(["run", "--config", "/no/such/file.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8(missing.stderr).unwrap().contains("/no/such/file.toml"));

    let bad_flag = bin().args(["run", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(1));

    let continuous = bin().args(["oracle", "--env", "lander-1d"]).output().unwrap();
    assert_eq!(continuous.status.code(), Some(2));
}

#[test]
fn cli_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, gridworld_config(MC, Path::new("ignored"))).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "9", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("summary.json").is_file());
    assert!(out_dir.join("mc_gridworld-lava_seed9.csv").is_file());

    std::fs::write(&cfg_path, "seeds = [1]\n[env]\nname = \"nowhere\"\n").unwrap();
    let bad = bin().args(["run", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
