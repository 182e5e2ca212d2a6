use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gtde");

fn gtde(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough to train in well under a second.
fn write_cfg(dir: &Path, env: &str, paradigm: &str, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "# tiny run\nenv = {env}\nparadigm = {paradigm}\nepisode_length = 6\nrollout_threads = 2\n\
         hidden = 8\ngat_size = 4\nheads = 2\niterations = 3\ncheckpoint_every = 2\n\
         out_dir = {}\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, env: &str, paradigm: &str, extra: &str) -> PathBuf {
    let cfg = write_cfg(dir, env, paradigm, extra);
    let o = gtde(&["train", "--config", cfg.to_str().unwrap(), "--set", "seed=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("out")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn dump_defaults_match_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for env in ["bandit_2", "battle_lite_4v4", "battle_lite_8v8", "buttons_4", "gather_lite_24"] {
        let o = gtde(&["dump-defaults", "--env", env]);
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o), read(&golden.join(format!("{env}.cfg"))), "{env}");
    }
}

#[test]
fn dumped_defaults_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = gtde(&["dump-defaults", "--env", "bandit_2"]);
    let cfg = dir.path().join("d.cfg");
    std::fs::write(&cfg, stdout(&o)).unwrap();
    let out = dir.path().join("out");
    let o = gtde(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "iterations=2",
        "--set",
        "rollout_threads=2",
        "--set",
        &format!("out_dir={}", out.display()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "buttons_4", "gtde", "");
    let jsonl = read(&out.join("metrics.jsonl"));
    assert_eq!(jsonl.lines().count(), 3);
    let csv = read(&out.join("metrics.csv"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("iteration,env_steps,"));
    assert!(out.join("checkpoint_2.ckpt").exists());
    assert!(out.join("checkpoint_3.ckpt").exists());
    assert!(out.join("config.cfg").exists());
    assert!(out.join("timing.csv").exists());
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = train(a.path(), "buttons_4", "gtde", "");
    let ob = train(b.path(), "buttons_4", "gtde", "");
    assert_eq!(read(&oa.join("metrics.jsonl")), read(&ob.join("metrics.jsonl")));
    assert_eq!(read(&oa.join("metrics.csv")), read(&ob.join("metrics.csv")));
    // the config echo differs only in out_dir
    let strip = |p: &Path| -> String { read(p).lines().filter(|l| !l.starts_with("out_dir")).collect() };
    assert_eq!(strip(&oa.join("checkpoint_3.ckpt")), strip(&ob.join("checkpoint_3.ckpt")));
}

#[test]
fn override_matches_editing_the_file() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = write_cfg(a.path(), "buttons_4", "gtde", "");
    let o = gtde(&["train", "--config", cfg.to_str().unwrap(), "--set", "paradigm=gtde_a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let edited = train(b.path(), "buttons_4", "gtde_a", "");
    assert_eq!(read(&a.path().join("out/metrics.jsonl")), read(&edited.join("metrics.jsonl")));
}

#[test]
fn unknown_key_exits_2_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "buttons_4", "gtde", "learning_rate = 0.1\n");
    let o = gtde(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = gtde(&["train", "--config", cfg.to_str().unwrap(), "--set", "env.nope=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn non_finite_rewards_abort_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "buttons_4", "dtde", "env.step_reward = nan\n");
    let o = gtde(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("numerical_abort_iter1.json"), "{}", stderr(&o));
    assert!(dir.path().join("out/numerical_abort_iter1.json").exists());
}

#[test]
fn eval_defaults_to_200_episodes_without_links() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "bandit_2", "gtde", "episode_length = 1\n");
    let ck = out.join("checkpoint_3.ckpt");
    let records = dir.path().join("episodes.jsonl");
    let o = gtde(&["eval", "--checkpoint", ck.to_str().unwrap(), "--records", records.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["episodes"], 200);
    assert_eq!(v["adjacency_constructions"], 0);
    assert_eq!(read(&records).lines().count(), 200);
    // greedy on a one-step bandit: every episode picks the same arm
    assert_eq!(v["std_reward"], 0.0);
    let again = gtde(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(stdout(&o), stdout(&again));
}

#[test]
fn eval_on_incompatible_env_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "buttons_4", "dtde", "");
    let ck = out.join("checkpoint_3.ckpt");
    let o = gtde(&["eval", "--checkpoint", ck.to_str().unwrap(), "--env", "bandit_2", "--episodes", "2"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn crossplay_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "buttons_4", "dtde", "");
    let ck = out.join("checkpoint_3.ckpt");
    let o = gtde(&["crossplay", "--a", ck.to_str().unwrap(), "--b", ck.to_str().unwrap(), "--episodes", "2"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "battle_lite_4v4", "dtde", "");
    let a = out.join("checkpoint_2.ckpt");
    let b = out.join("checkpoint_3.ckpt");
    let run = |x: &Path, y: &Path| -> f64 {
        let o = gtde(&["crossplay", "--a", x.to_str().unwrap(), "--b", y.to_str().unwrap(), "--episodes", "10"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["adjacency_constructions"], 0);
        v["win_rate_a"].as_f64().unwrap()
    };
    assert!((run(&a, &b) + run(&b, &a) - 1.0).abs() < 1e-12);
}

#[test]
fn inspect_groups_exports() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "buttons_4", "gtde", "");
    let ck = out.join("checkpoint_3.ckpt");
    let o = gtde(&["inspect-groups", "--checkpoint", ck.to_str().unwrap(), "--episodes", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let groups = read(&out.join("groups_1.jsonl"));
    assert_eq!(groups.lines().count(), 6 * 4);
    for line in groups.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let members: Vec<u64> = v["members"].as_array().unwrap().iter().map(|m| m.as_u64().unwrap()).collect();
        assert!(members.contains(&v["agent"].as_u64().unwrap()));
    }
    let freq = read(&out.join("link_frequency.csv"));
    for (i, row) in freq.lines().enumerate() {
        assert_eq!(row.split(',').nth(i).unwrap(), "1");
    }

    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "buttons_4", "ctde", "");
    let o = gtde(&["inspect-groups", "--checkpoint", out.join("checkpoint_3.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn ablate_summarises_each_paradigm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "buttons_4", "gtde", "iterations = 2\n");
    let o = gtde(&["ablate", "--config", cfg.to_str().unwrap(), "--paradigms", "dtde,gtde_a", "--seeds", "1,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read(&dir.path().join("out/ablation_summary.csv"));
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 3);
    let header: Vec<&str> = rows[0].split(',').collect();
    let col = header.iter().position(|h| *h == "avg_node_information_mean").unwrap();
    let dtde: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(dtde[0], "dtde");
    assert_eq!(dtde[col], "1");
    let all: Vec<&str> = rows[2].split(',').collect();
    assert_eq!(all[col], "4");
    assert_eq!(read(&dir.path().join("out/ablation_runs.csv")).lines().count(), 5);
}

#[test]
fn bad_checkpoint_version_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "bandit_2", "dtde", "episode_length = 1\n");
    let ck = out.join("checkpoint_3.ckpt");
    let text = read(&ck).replacen("gtde-checkpoint 1", "gtde-checkpoint 9", 1);
    std::fs::write(&ck, text).unwrap();
    let o = gtde(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("version"));
}
