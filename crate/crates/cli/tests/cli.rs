use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dscp_cli::{RunConfig, Summary, SweepSummary};
use serde_json::{json, Value};

fn dscp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dscp")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, value: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn path_config(t: u64) -> Value {
    json!({
        "env": { "env": "path_planning" },
        "dscp": { "T": t, "eval_every": 50, "eval_episodes": 20 },
        "seeds": [0]
    })
}

fn tiny_tabular_config() -> Value {
    let table = |agent: usize| -> Vec<f64> { (0..16).map(|k| ((k + 5 * agent) as f64 * 0.37).sin()).collect() };
    json!({
        "env": {
            "env": "tabular",
            "model": {
                "graph": { "n": 2, "edges": [[1, 2]] },
                "gamma": 0.8,
                "kernels": [
                    [[[0.9, 0.1], [0.2, 0.8]], [[0.5, 0.5], [0.3, 0.7]]],
                    [[[0.6, 0.4], [0.1, 0.9]], [[0.7, 0.3], [0.4, 0.6]]]
                ],
                "initial": { "fixed": [0, 1] },
                "reward": {
                    "name": "table",
                    "params": { "state_sizes": [2, 2], "action_sizes": [2, 2], "tables": [table(0), table(1)] }
                }
            }
        },
        "dscp": { "T": 5, "eval_every": 5, "eval_episodes": 10 },
        "seeds": [0]
    })
}

fn out_arg(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn train_writes_three_files_with_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(100));
    let out = out_arg(dir.path(), "run");
    let o = dscp(&["train", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["checkpoint_seed0.json", "metrics_seed0.csv", "summary.json"]);
    let csv = fs::read_to_string(Path::new(&out).join("metrics_seed0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,J_est,J_se,grad_norm_est,consensus_err,lr,wall_ms");
    assert_eq!(lines.count(), 100);
}

#[test]
fn summary_revalidates_against_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(20));
    let out = out_arg(dir.path(), "run");
    assert!(dscp(&["train", "--config", &cfg, "--out", &out, "--set", "seeds=[1,2]"]).status.success());
    let text = fs::read_to_string(Path::new(&out).join("summary.json")).unwrap();
    let summary: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(summary.runs.len(), 2);
    assert_eq!(summary.runs[1].seed, 2);
    let value = serde_json::to_value(&summary.config).unwrap();
    let cfg = RunConfig::from_value(value).unwrap();
    cfg.build_model().unwrap();
    assert_eq!(serde_json::from_str::<Value>(&text).unwrap(), serde_json::to_value(&summary).unwrap());
}

#[test]
fn same_seed_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(60));
    let (a, b) = (out_arg(dir.path(), "a"), out_arg(dir.path(), "b"));
    assert!(dscp(&["train", "--config", &cfg, "--out", &a, "--seed", "7"]).status.success());
    assert!(dscp(&["train", "--config", &cfg, "--out", &b, "--seed", "7"]).status.success());
    let read = |d: &str| fs::read(Path::new(d).join("metrics_seed7.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let ck = |d: &str| fs::read(Path::new(d).join("checkpoint_seed7.json")).unwrap();
    assert_eq!(ck(&a), ck(&b));
}

#[test]
fn in_process_runs_match_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &path_config(40));
    let bin_out = out_arg(dir.path(), "bin");
    assert!(dscp(&["train", "--config", &cfg_path, "--out", &bin_out]).status.success());
    let cfg = dscp_cli::load_config(Path::new(&cfg_path), &[]).unwrap();
    let lib_a = dir.path().join("lib_a");
    let lib_b = dir.path().join("lib_b");
    dscp_cli::train(&cfg, &lib_a, false).unwrap();
    dscp_cli::train(&cfg, &lib_b, false).unwrap();
    let read = |d: &Path| fs::read(d.join("metrics_seed0.csv")).unwrap();
    assert_eq!(read(Path::new(&bin_out)), read(&lib_a));
    assert_eq!(read(&lib_a), read(&lib_b));
}

#[test]
fn missing_env_block_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({ "dscp": { "T": 10 } }));
    let o = dscp(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("schema") && err.contains("env"), "{err}");
}

#[test]
fn unknown_keys_and_bad_overrides_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(10));
    assert_eq!(dscp(&["train", "--config", &cfg, "--set", "dscp.unknown=1"]).status.code(), Some(2));
    assert_eq!(dscp(&["train", "--config", &cfg, "--set", "dscp.kappa_r=2"]).status.code(), Some(2));
    assert_eq!(dscp(&["train", "--config", &out_arg(dir.path(), "absent.json")]).status.code(), Some(2));
}

#[test]
fn rollout_dump_has_one_line_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(12));
    let out = out_arg(dir.path(), "run");
    assert!(dscp(&["train", "--config", &cfg, "--out", &out, "--dump-rollouts"]).status.success());
    let text = fs::read_to_string(Path::new(&out).join("rollouts_seed0.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[3]["t"], json!(4));
    assert!(lines[0]["rollout"]["rewards"].is_array());
}

#[test]
fn sweep_single_radius() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(30));
    let out = out_arg(dir.path(), "sweep");
    let o = dscp(&["sweep", "--config", &cfg, "--out", &out, "--kappa-p", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: SweepSummary = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("sweep.json")).unwrap()).unwrap();
    assert_eq!(s.entries.len(), 1);
    assert_eq!(s.entries[0].kappa_p, 0);
    assert_eq!(s.ordering, [0]);
    assert!(Path::new(&out).join("kappa_p0").join("metrics_seed0.csv").exists());
}

#[test]
fn sweep_three_radii_orders_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(30));
    let out = out_arg(dir.path(), "sweep");
    let o = dscp(&["sweep", "--config", &cfg, "--out", &out, "--kappa-p", "0,1,2", "--set", "seeds=[0,1]"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: SweepSummary = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("sweep.json")).unwrap()).unwrap();
    assert_eq!(s.entries.iter().map(|e| e.final_j.len()).sum::<usize>(), 6);
    let mut order = s.ordering.clone();
    order.sort();
    assert_eq!(order, [0, 1, 2]);
    let means: Vec<f64> = s.ordering.iter().map(|k| s.entries.iter().find(|e| e.kappa_p == *k).unwrap().mean_final_j).collect();
    assert!(means.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn negative_radius_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(10));
    assert_eq!(dscp(&["sweep", "--config", &cfg, "--kappa-p", "-1"]).status.code(), Some(2));
}

#[test]
fn eval_zero_checkpoint_matches_first_training_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = path_config(2);
    value["dscp"]["eval_episodes"] = json!(2000);
    value["dscp"]["eval_mode"] = json!("fixed_horizon");
    let cfg = write_config(dir.path(), &value);
    let out = out_arg(dir.path(), "run");
    assert!(dscp(&["train", "--config", &cfg, "--out", &out, "--set", "dscp.T=1"]).status.success());
    let summary: Summary = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("summary.json")).unwrap()).unwrap();
    let trained = &summary.runs[0];
    let ck = Path::new(&out).join("checkpoint_seed0.json");
    let o = dscp(&["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--episodes", "2000", "--seed", "11"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e: Value = serde_json::from_slice(&o.stdout).unwrap();
    let (j, se) = (e["J"].as_f64().unwrap(), e["se"].as_f64().unwrap());
    let z = (j - trained.final_j).abs() / (se * se + trained.final_se * trained.final_se).sqrt();
    assert!(z < 4.0, "eval {j} +- {se} vs train {} +- {}", trained.final_j, trained.final_se);
}

#[test]
fn eval_rejects_zero_episodes_and_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &path_config(1));
    let out = out_arg(dir.path(), "run");
    assert!(dscp(&["train", "--config", &cfg, "--out", &out]).status.success());
    let ck = Path::new(&out).join("checkpoint_seed0.json");
    let ck = ck.to_str().unwrap();
    assert_eq!(dscp(&["eval", "--config", &cfg, "--checkpoint", ck, "--episodes", "0"]).status.code(), Some(2));
    let other = write_config(dir.path(), &tiny_tabular_config());
    assert_eq!(dscp(&["eval", "--config", &other, "--checkpoint", ck, "--episodes", "10"]).status.code(), Some(2));
}

#[test]
fn eval_tiny_instance_matches_exact_objective() {
    use dscp::oracle::exact_J;
    use dscp::policy::{Checkpoint, MixingSpec, ParamLayout, PolicyParams, SoftmaxPolicy};

    let dir = tempfile::tempdir().unwrap();
    let value = tiny_tabular_config();
    let cfg_path = write_config(dir.path(), &value);
    let cfg = RunConfig::from_value(value).unwrap();
    let model = cfg.build_model().unwrap();
    let layout = ParamLayout::for_model(&model);
    let params = PolicyParams::from_agents((0..2).map(|i| (0..layout.dim(i)).map(|k| 0.3 * k as f64 - 0.5).collect()).collect());
    let ck_path = dir.path().join("ck.json");
    fs::write(&ck_path, serde_json::to_string(&Checkpoint::new(&params, 1, MixingSpec::default())).unwrap()).unwrap();
    let o = dscp(&["eval", "--config", &cfg_path, "--checkpoint", ck_path.to_str().unwrap(), "--episodes", "20000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e: Value = serde_json::from_slice(&o.stdout).unwrap();
    let policy = SoftmaxPolicy::new(&model, 1, MixingSpec::default()).unwrap();
    let exact = exact_J(&model, &policy, &params).unwrap();
    let (j, se) = (e["J"].as_f64().unwrap(), e["se"].as_f64().unwrap());
    assert!((j - exact).abs() < 4.0 * se.max(1e-12), "{j} +- {se} vs exact {exact}");
}

#[test]
fn verify_quick_passes() {
    let o = dscp(&["verify", "quick"]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    if cfg!(feature = "mutate-qhat-sign") {
        assert_eq!(o.status.code(), Some(1));
        assert_eq!(report["passed"], json!(false));
    } else {
        assert_eq!(o.status.code(), Some(0), "{report}");
        assert_eq!(report["passed"], json!(true));
    }
}
