use std::path::Path;
use std::process::{Command, Output};

fn coverlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coverlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_str(stdout(o).lines().last().unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(coverlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(coverlab(&["eval", "--bogus"]).status.code(), Some(2));
    let both = coverlab(&["eval", "--episodes", "1"]);
    assert_eq!(both.status.code(), Some(2));
    let bad_name = coverlab(&["eval", "--baseline", "zigzag", "--episodes", "1"]);
    assert_eq!(bad_name.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&bad_name.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn runtime_errors_exit_1() {
    let o = coverlab(&[
        "eval",
        "--checkpoint",
        "/nonexistent/model.ck",
        "--episodes",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/model.ck"));
}

#[test]
fn baseline_eval_reports_json() {
    let o = coverlab(&[
        "eval",
        "--baseline",
        "lawnmower",
        "--episodes",
        "4",
        "--seed",
        "1",
    ]);
    let v = json(&o);
    assert_eq!(v["controller"], "lawnmower");
    assert_eq!(v["episodes"], 4);
    let again = json(&coverlab(&[
        "eval",
        "--baseline",
        "lawnmower",
        "--episodes",
        "4",
        "--seed",
        "1",
        "--sequential",
    ]));
    assert_eq!(v, again);
}

#[test]
fn config_layers_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "seed = 3\n[trainer]\nlr = 0.002\nbeta = 0.05\n").unwrap();
    let f = file.to_str().unwrap();
    let o = coverlab(&[
        "config",
        "--config",
        f,
        "--set",
        "trainer.lr=0.004",
        "--resolved",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("lr = 0.004"), "{text}");
    assert!(text.contains("beta = 0.05"), "{text}");
    assert!(text.contains("seed = 3"), "{text}");
    assert!(text.contains("gamma = 0.95"), "{text}");

    let o = coverlab(&["config", "--set", "trainer.gamma=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainer.gamma"));

    let reference = stdout(&coverlab(&["config"]));
    let ref_file = dir.path().join("ref.toml");
    std::fs::write(&ref_file, reference).unwrap();
    assert!(
        coverlab(&["config", "--config", ref_file.to_str().unwrap()])
            .status
            .success()
    );
}

#[test]
fn train_then_eval_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("out.ck");
    let log = dir.path().join("train.jsonl");
    let small = [
        "--set",
        "trainer.total_env_steps=40",
        "--set",
        "trainer.n_workers=2",
        "--set",
        "trainer.t_max=5",
        "--set",
        "env.horizon=[20, 30]",
        "--set",
        "env.n_objects=[2, 4]",
    ];
    let mut args = vec![
        "train",
        "--config",
        "default",
        "--out",
        ck.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ];
    args.extend(small);
    let v = json(&coverlab(&args));
    assert!(v["env_steps"].as_u64().unwrap() >= 40);
    assert!(Path::new(&format!("{}.opt", ck.display())).exists());
    let first = std::fs::read_to_string(&log).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in [
        "update",
        "env_steps",
        "capture_pct",
        "policy_loss",
        "value_loss",
        "entropy",
        "lr",
        "beta",
        "gamma",
    ] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }

    let mut eval = vec![
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--episodes",
        "2",
        "--mode",
        "stochastic",
    ];
    eval.extend(small);
    assert_eq!(json(&coverlab(&eval))["controller"], "learned-stochastic");

    let out = dir.path().join("analysis");
    let mut analyze = vec![
        "analyze",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--steps",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
        "--set",
        "render.scale=40",
    ];
    analyze.extend(small);
    json(&coverlab(&analyze));
    let sidecar = std::fs::read_to_string(out.join("contributions.jsonl")).unwrap();
    assert!(sidecar.lines().count() >= 1);
    let rec: serde_json::Value = serde_json::from_str(sidecar.lines().next().unwrap()).unwrap();
    for key in ["t", "pairs", "values", "action", "probs"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }

    let garbage = dir.path().join("garbage.ck");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = coverlab(&[
        "eval",
        "--checkpoint",
        garbage.to_str().unwrap(),
        "--episodes",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_trace_replay_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let t = trace.to_str().unwrap();
    json(&coverlab(&[
        "synth-trace",
        "--out",
        t,
        "--seed",
        "2",
        "--dropout",
        "0.1",
        "--set",
        "env.horizon=[40, 40]",
    ]));
    let frames = dir.path().join("frames");
    let v = json(&coverlab(&[
        "replay",
        "--trace",
        t,
        "--baseline",
        "lawnmower",
        "--sensors",
        "2",
        "--frames",
        frames.to_str().unwrap(),
        "--set",
        "render.scale=30",
    ]));
    assert_eq!(v["controller"], "lawnmower");
    assert!(std::fs::read_dir(&frames).unwrap().count() >= 2);

    let out = dir.path().join("render");
    let v = json(&coverlab(&[
        "render",
        "--steps",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
        "--set",
        "render.scale=25",
    ]));
    assert_eq!(v["frames"], 4);
    let img = std::fs::read(out.join("frame_00000.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n25 25\n255\n"));
    assert_eq!(img.len(), 13 + 25 * 25 * 3);
}

#[test]
fn gradcheck_passes() {
    let o = coverlab(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));
}
