use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};
use tempfile::TempDir;

fn pvi() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pvi"));
    c.env_remove("PVI_SEED");
    c
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/blobs_sync.json")
}

fn small(dir: &Path, tag: &str) -> Value {
    json!({
        "seed": 5,
        "strategy": "pvi_sync",
        "model": { "kind": "logistic_regression", "mc_samples": 16, "mc_seed_base": 1 },
        "prior": { "mean": 0.0, "variance": 1.0 },
        "data": { "source": "blobs", "per_class": 60, "offset": [1.0, 1.0], "seed": 1 },
        "test": { "source": "blobs", "per_class": 40, "offset": [1.0, 1.0], "seed": 2 },
        "partition": { "mode": { "kind": "iid" }, "k": 4, "seed": 3 },
        "optimizer": { "rho": 0.5, "inner_steps": 3 },
        "damping": 0.5,
        "sync": { "rounds": 4 },
        "record_global_fe": true,
        "eval": { "mc_samples": 200, "seed": 0 },
        "output": {
            "metrics": dir.join(format!("{tag}_metrics.csv")),
            "checkpoint": dir.join(format!("{tag}_checkpoint.json"))
        }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn outputs(dir: &Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    (
        fs::read(dir.join(format!("{tag}_metrics.csv"))).unwrap(),
        fs::read(dir.join(format!("{tag}_checkpoint.json"))).unwrap(),
    )
}

#[test]
fn run_writes_metrics_and_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small(dir.path(), "a"));
    let o = pvi().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (metrics, checkpoint) = outputs(dir.path(), "a");
    let text = String::from_utf8(metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "event_time,event_type,worker,round,error,nll,messages_up,messages_down,global_fe"
    );
    assert_eq!(lines.count(), 4);
    let ck: Value = serde_json::from_slice(&checkpoint).unwrap();
    assert_eq!(ck["sites"].as_array().unwrap().len(), 4);
    assert_eq!(ck["prior"]["dim"], 3);
}

#[test]
fn identical_configs_give_identical_files() {
    let dir = TempDir::new().unwrap();
    for tag in ["a", "b"] {
        let cfg = write_config(dir.path(), &format!("{tag}.json"), &small(dir.path(), tag));
        let o = pvi().arg("run").arg(&cfg).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(outputs(dir.path(), "a"), outputs(dir.path(), "b"));
}

#[test]
fn every_strategy_runs_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let strategies: [(&str, Value); 8] = [
        ("global_vi", json!({ "sweeps": 3 })),
        ("pvi_sequential", json!({})),
        ("pvi_sync", json!({})),
        (
            "pvi_async",
            json!({ "async": { "budget": 6.0, "timing": [{ "duration": { "kind": "exponential", "mean": 1.0 } }] } }),
        ),
        ("bcm_same", json!({ "sweeps": 3 })),
        ("bcm_split", json!({ "sweeps": 3 })),
        (
            "pep_check",
            json!({ "sweeps": 1, "pep": { "alpha": 0.5, "rho": 0.5, "method": { "kind": "monte_carlo", "samples": 4000 } } }),
        ),
        (
            "spep_check",
            json!({ "sweeps": 1, "pep": { "alpha": 1.0, "rho": 0.1, "method": { "kind": "monte_carlo", "samples": 4000 } } }),
        ),
    ];
    for (name, extra) in strategies {
        let mut first = None;
        for run in 0..2 {
            let tag = format!("{name}{run}");
            let mut v = small(dir.path(), &tag);
            v["strategy"] = json!(name);
            for (k, x) in extra.as_object().unwrap() {
                v[k] = x.clone();
            }
            let cfg = write_config(dir.path(), &format!("{tag}.json"), &v);
            let o = pvi().arg("run").arg(&cfg).output().unwrap();
            assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
            let files = outputs(dir.path(), &tag);
            match &first {
                None => first = Some(files),
                Some(f) => assert_eq!(f, &files, "{name}"),
            }
        }
    }
}

#[test]
fn missing_strategy_section_exits_one_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let mut v = small(dir.path(), "a");
    v.as_object_mut().unwrap().remove("sync");
    let cfg = write_config(dir.path(), "c.json", &v);
    let o = pvi().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`sync`"), "{}", stderr(&o));
    assert!(!dir.path().join("a_metrics.csv").exists());
}

#[test]
fn missing_top_level_field_exits_one_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let mut v = small(dir.path(), "a");
    v.as_object_mut().unwrap().remove("output");
    let cfg = write_config(dir.path(), "c.json", &v);
    let o = pvi().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("output"), "{}", stderr(&o));
}

#[test]
fn overrides_and_env_seed_apply() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small(dir.path(), "a"));
    let o = pvi()
        .args(["run", "--dry-run", "--set", "optimizer.rho=0.25", "--set", "sync.rounds=9"])
        .arg(&cfg)
        .env("PVI_SEED", "123")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(resolved["optimizer"]["rho"], 0.25);
    assert_eq!(resolved["sync"]["rounds"], 9);
    assert_eq!(resolved["seed"], 123);

    let o = pvi().args(["run", "--dry-run"]).arg(&cfg).env("PVI_SEED", "abc").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("PVI_SEED"));
}

#[test]
fn env_seed_matches_the_same_seed_in_the_file() {
    let dir = TempDir::new().unwrap();
    let mut v = small(dir.path(), "a");
    v["seed"] = json!(77);
    let a = write_config(dir.path(), "a.json", &v);
    let b = write_config(dir.path(), "b.json", &small(dir.path(), "b"));
    assert_eq!(pvi().arg("run").arg(&a).output().unwrap().status.code(), Some(0));
    assert_eq!(pvi().arg("run").arg(&b).env("PVI_SEED", "77").output().unwrap().status.code(), Some(0));
    assert_eq!(outputs(dir.path(), "a"), outputs(dir.path(), "b"));
}

#[test]
fn dry_run_output_parses_back_to_itself() {
    let o = pvi().args(["run", "--dry-run"]).arg(bundled()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = TempDir::new().unwrap();
    let again = dir.path().join("again.json");
    fs::write(&again, &o.stdout).unwrap();
    let o2 = pvi().args(["run", "--dry-run"]).arg(&again).output().unwrap();
    assert_eq!(o.stdout, o2.stdout);
}

#[test]
fn eval_reproduces_the_final_metrics_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small(dir.path(), "a"));
    let run = pvi().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    let o = pvi()
        .arg("eval")
        .arg(&cfg)
        .arg(dir.path().join("a_checkpoint.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), stdout(&run));
}

#[test]
fn divergence_exits_two() {
    // One-sample curvature estimates on a far-off row, with no step
    // halvings allowed.
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("far.csv");
    fs::write(&csv, "f0,target\n30,1\n").unwrap();
    let mut diverged = 0;
    for seed in 0..16 {
        let v = json!({
            "seed": seed,
            "strategy": "global_vi",
            "model": { "kind": "logistic_regression", "mc_samples": 1, "mc_seed_base": 0 },
            "prior": { "mean": -1.0, "variance": 1.0 },
            "data": { "source": "csv", "path": csv },
            "optimizer": { "rho": 1.0, "inner_steps": 1, "max_halvings": 0 },
            "sweeps": 3,
            "output": { "metrics": dir.path().join("m.csv"), "checkpoint": dir.path().join("c.json") }
        });
        let cfg = write_config(dir.path(), "c.json.in", &v);
        let o = pvi().arg("run").arg(&cfg).output().unwrap();
        match o.status.code() {
            Some(0) => {}
            Some(2) => {
                let msg = stderr(&o);
                assert!(msg.contains("diverged") || msg.contains("rejected"), "{msg}");
                diverged += 1;
            }
            other => panic!("{other:?}: {}", stderr(&o)),
        }
    }
    assert!(diverged > 0);
}

#[test]
fn synth_is_deterministic_and_loads_back() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = pvi()
            .args(["synth", "--per-class", "50", "--separation", "4", "--offset", "-1,2", "--seed", "9", "--out"])
            .arg(p)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(text.starts_with("f0,f1,target\n"));
    assert_eq!(text.lines().count(), 101);

    let o = pvi().args(["synth", "--per-class", "50", "--separation", "4", "--offset", "-1,2", "--seed", "9"]).output().unwrap();
    assert_eq!(stdout(&o), text);
}

#[test]
fn synth_rejects_bad_counts() {
    for args in [["--classes", "1"], ["--per-class", "0"]] {
        let o = pvi().arg("synth").args(args).output().unwrap();
        assert_eq!(o.status.code(), Some(1));
    }
}

#[test]
fn unknown_suite_exits_one() {
    let o = pvi().args(["check", "nonsense"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_suites_pass() {
    for suite in ["properties", "pep_limit", "gradients"] {
        let o = pvi().args(["check", suite]).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{suite}:\n{}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains("PASS"));
        assert!(!stdout(&o).contains("FAIL"));
    }
    let o = pvi().args(["check", "pep_limit"]).output().unwrap();
    assert!(stdout(&o).contains("ratio"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(pvi().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(pvi().arg("frobnicate").output().unwrap().status.code(), Some(1));
}

#[test]
fn bundled_sync_config_finishes_within_a_minute() {
    let dir = TempDir::new().unwrap();
    let t0 = Instant::now();
    let o = pvi()
        .args(["run", "--set"])
        .arg(format!("output.metrics={}", dir.path().join("m.csv").display()))
        .arg("--set")
        .arg(format!("output.checkpoint={}", dir.path().join("c.json").display()))
        .arg(bundled())
        .output()
        .unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(elapsed < 60.0, "{elapsed}s");
    let err: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 0.15, "{err}");
}
