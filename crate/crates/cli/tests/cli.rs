use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMOKE: &str = r#"
[generator]
cities = 2
locations = 12
users = 24
days = 6

[train]
batch_size = 8
max_epochs = 2

[train.model]
d = 16
heads = 2
layers = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trajmoe"));
    c.env_remove("TRAJMOE_OUT");
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    let o = bin().arg("--out").arg(out).args(args).output().unwrap();
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// The run directory a command just created under `out`.
fn newest_run(out: &Path, before: &[PathBuf]) -> PathBuf {
    let mut fresh: Vec<PathBuf> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !before.contains(p))
        .collect();
    assert_eq!(fresh.len(), 1, "expected one new run directory");
    fresh.pop().unwrap()
}

fn runs(out: &Path) -> Vec<PathBuf> {
    if !out.exists() {
        return vec![];
    }
    fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect()
}

fn run_in(out: &Path, args: &[&str]) -> (PathBuf, String) {
    let before = runs(out);
    let o = run(out, args);
    (newest_run(out, &before), String::from_utf8(o.stdout).unwrap())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect()
}

#[test]
fn gen_data_twice_gives_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = ["gen-data", "--seed", "7", "--cities", "3", "--locations", "12", "--users", "10"];
    let (ra, _) = run_in(&a, &args);
    let (rb, _) = run_in(&b, &args);
    let ta = tree(&ra.join("data"));
    assert_eq!(ta.len(), 6);
    assert_eq!(ta, tree(&rb.join("data")));
    let (rc, _) = run_in(&a, &["gen-data", "--seed", "8", "--cities", "3", "--locations", "12", "--users", "10"]);
    assert_ne!(ta, tree(&rc.join("data")));
}

#[test]
fn run_directory_named_by_seed_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, _) = run_in(tmp.path(), &["gen-data", "--seed", "11", "--cities", "1", "--users", "4"]);
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-seed11"));
    let m = manifest(&dir);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["subcommand"], "gen-data");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["artifacts"][0], "data");
    assert!(m["resolved_config"].as_str().unwrap().contains("cities = 1"));
}

#[test]
fn env_var_sets_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_trajmoe"))
        .env("TRAJMOE_OUT", tmp.path())
        .args(["gen-data", "--cities", "1", "--users", "3"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(runs(tmp.path()).len(), 1);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 4\n[generator]\ncities = 2\nusers = 5\n").unwrap();
    let out = tmp.path().join("o");
    let c = cfg.to_str().unwrap();
    let (dir, _) = run_in(&out, &["gen-data", "--config", c, "--cities", "1"]);
    assert_eq!(tree(&dir.join("data")).len(), 2);
    assert_eq!(manifest(&dir)["seed"], 4);
    assert!(manifest(&dir)["config_contents"].as_str().unwrap().contains("cities = 2"));
    let (dir, _) = run_in(&out, &["gen-data", "--config", c, "--seed", "9"]);
    assert_eq!(tree(&dir.join("data")).len(), 4);
    assert_eq!(manifest(&dir)["seed"], 9);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["eval", "--data", "x"],
        vec!["finetune", "--checkpoint", "c", "--data", "d"],
        vec!["experiment", "sideways", "--data", "d"],
        vec!["ablate", "--data", "d", "--variant", "remove_everything"],
    ] {
        let o = bin().arg("--out").arg(tmp.path()).args(&args).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    assert!(runs(tmp.path()).is_empty());
}

#[test]
fn runtime_errors_exit_1_and_record_status() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("--out")
        .arg(tmp.path())
        .args(["eval", "--checkpoint", "missing.json", "--data", "missing"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    let dirs = runs(tmp.path());
    assert_eq!(dirs.len(), 1);
    assert!(manifest(&dirs[0])["status"].as_str().unwrap().starts_with("error"));
}

#[test]
fn pretrain_finetune_eval_pipeline() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("runs");
    let (gen, _) = run_in(&out, &["gen-data", "--config", c, "--seed", "1"]);
    let data = gen.join("data");
    let d = data.to_str().unwrap();
    let data_before = tree(&data);

    let (pre, stdout) = run_in(&out, &["pretrain", "--config", c, "--seed", "1", "--data", d, "--cities", "1"]);
    assert!(stdout.starts_with("epochs 2"));
    let ck = pre.join("checkpoint.json");
    let ck_before = fs::read(&ck).unwrap();
    let k = ck.to_str().unwrap();

    let args = ["finetune", "--config", c, "--seed", "1", "--data", d, "--checkpoint", k];
    let (ft, _) = run_in(&out, &[&args[..], &["--cities", "0", "--fraction", "0.5", "--epochs", "1"]].concat());
    let tuned = ft.join("checkpoint.json");
    assert_ne!(fs::read(&tuned).unwrap(), ck_before);
    assert_eq!(manifest(&ft)["inputs"][0], k);

    let t = tuned.to_str().unwrap();
    let (ev, stdout) = run_in(&out, &["eval", "--config", c, "--seed", "1", "--data", d, "--checkpoint", t, "--k", "1,12"]);
    let rows = csv_rows(&stdout);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let a1: f64 = r["acc1"].parse().unwrap();
        let a5: f64 = r["acc5"].parse().unwrap();
        assert!((0.0..=a5).contains(&a1));
    }
    assert_eq!(fs::read_to_string(ev.join("reports.csv")).unwrap(), stdout);
    let extra = csv_rows(&fs::read_to_string(ev.join("acc_at_k.csv")).unwrap());
    assert_eq!(extra.len(), 4);
    assert!(extra.iter().filter(|r| r["k"] == "12").all(|r| r["acc"] == "1"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert!(summary["eval/city0"]["acc1"].is_number());

    let (gs, _) = run_in(&out, &["gate-stats", "--config", c, "--seed", "1", "--data", d, "--checkpoint", t]);
    let shares = csv_rows(&fs::read_to_string(gs.join("gate_slot_shares.csv")).unwrap());
    assert!(!shares.is_empty());
    let summaries = fs::read_to_string(gs.join("gate_weight_summary.csv")).unwrap();
    assert_eq!(summaries.lines().count(), 4);

    assert_eq!(tree(&data), data_before);
    assert_eq!(fs::read(&ck).unwrap(), ck_before);
    assert!(start.elapsed() < Duration::from_secs(300));
}

#[test]
fn experiment_jobs_do_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.toml");
    fs::write(&cfg, SMOKE.replace("max_epochs = 2", "max_epochs = 1")).unwrap();
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("runs");
    let (gen, _) = run_in(&out, &["gen-data", "--config", c, "--seed", "2", "--users", "12"]);
    let d = gen.join("data");
    let d = d.to_str().unwrap();
    let base = ["experiment", "ablation", "--config", c, "--seed", "2", "--data", d, "--cities", "0"];
    let variants = ["--variant", "full,remove_traj_gate,remove_fused_expert"];
    let (_, one) = run_in(&out, &[&base[..], &variants, &["--jobs", "1"]].concat());
    let (_, three) = run_in(&out, &[&base[..], &variants, &["--jobs", "3"]].concat());
    assert_eq!(one, three);
    assert_eq!(csv_rows(&one).len(), 3);
}

/// Every move is uniform over the whole city, so a fixed untrained scorer
/// hits the truth with probability 1/N per sample.
#[test]
fn random_init_eval_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("uniform.toml");
    fs::write(
        &cfg,
        "[generator]\ncities = 1\nlocations = 20\nanchors = 20\nnoise = 1.0\nusers = 100\n\n\
         [train.model]\nd = 16\nheads = 2\nlayers = 1\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("runs");
    let (gen, _) = run_in(&out, &["gen-data", "--config", c, "--seed", "3"]);
    let d = gen.join("data");
    let d = d.to_str().unwrap();
    let (pre, _) = run_in(&out, &["pretrain", "--config", c, "--seed", "3", "--data", d, "--epochs", "0"]);
    let k = pre.join("checkpoint.json");
    let (_, stdout) = run_in(&out, &["eval", "--config", c, "--seed", "3", "--data", d, "--checkpoint", k.to_str().unwrap()]);
    let row = &csv_rows(&stdout)[0];
    let n: f64 = row["samples"].parse().unwrap();
    let acc: f64 = row["acc1"].parse().unwrap();
    let p = 1.0 / 20.0;
    let se = (p * (1.0 - p) / n).sqrt();
    assert!(n > 200.0);
    assert!((acc - p).abs() <= 3.0 * se, "acc {acc} vs {p} +- {}", 3.0 * se);
}

#[test]
fn resolved_config_replays_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let (first, _) = run_in(&out, &["gen-data", "--seed", "21", "--cities", "2", "--users", "7", "--noise", "0.4"]);
    let resolved = manifest(&first)["resolved_config"].as_str().unwrap().to_string();
    let cfg = tmp.path().join("replay.toml");
    fs::write(&cfg, resolved).unwrap();
    let (second, _) = run_in(&out, &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(tree(&first.join("data")), tree(&second.join("data")));
    assert_eq!(manifest(&second)["seed"], 21);
}
