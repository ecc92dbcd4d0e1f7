use std::path::Path;
use std::process::{Command, Output};

fn coto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coto")).args(args).output().expect("spawn coto")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "run.total_timesteps = 400\nrun.checkpoint_interval = 0\npolicy.hidden = 8,8\n\
         ppo.rollout_len = 200\nppo.epochs = 1\nbc.epochs = 1\neval.trials = 3\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn bad_config_exits_with_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "ppo.clip_eps = -1\n").unwrap();
    let out = coto(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo.clip_eps"));

    let out = coto(&["eval", "--set", "nope.key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = coto(&["train", "--arm", "coto_policy_only"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let out = coto(&["eval", "--ckpt", "/nonexistent/ckpt_1.json", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("a1");
    let out = coto(&["train", "--config", &cfg, "--seed", "7", "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.csv", "manifest.json", "config.cfg", "ckpt_400.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);

    let ckpt = run.join("ckpt_400.json");
    let out = coto(&["eval", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--mode", "both"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["trials"], 3);
    assert!(reports[0]["rl_percent"].is_number());

    let out = coto(&["eval", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--arm", "coto_policy_only"]);
    assert!(out.status.success());
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(reports[0]["rl_percent"].is_null());

    let figs = dir.path().join("figs");
    let out = coto(&["plot", run.to_str().unwrap(), "--out", figs.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(figs.join("reward.svg").exists() && figs.join("rl_fraction.svg").exists());
}

#[test]
fn multiple_seeds_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("multi");
    let out = coto(&["train", "--config", &cfg, "--seed", "1,2", "--out", run.to_str().unwrap(), "--arm", "pure_ppo"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("seed_1/train.csv").exists());
    assert!(run.join("seed_2/train.csv").exists());
}

#[test]
fn to_solve_prints_a_solution() {
    let out = coto(&["to-solve", "--goal-x", "2", "--goal-y", "-1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sol: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(sol["controls"].as_array().unwrap().len(), 20);
    assert!(sol["constraint_residual"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn gate_probe_traces_each_step() {
    let out = coto(&["gate-probe", "--seed", "3", "--steps", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert!(f[1] == "rl" || f[1] == "to");
        let (r_rl, r_to, reward): (f64, f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap(), f[6].parse().unwrap());
        assert!(reward >= r_to);
        assert_eq!(reward, r_rl.max(r_to));
    }
}
