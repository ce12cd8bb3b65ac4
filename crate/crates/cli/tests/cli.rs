use std::path::Path;
use std::process::{Command, Output};

fn mixwb(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixwb"))
        .arg("--quiet")
        .args(args)
        .current_dir(dir)
        .env_remove("MIXWB_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let o = mixwb(args, dir);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--out", "train", "--n", "3", "--width", "64", "--height", "64", "--seed", "1"], d);
    ok(&["synth", "--out", "test", "--n", "2", "--width", "64", "--height", "64", "--seed", "2"], d);
    ok(&["train", "--data", "train", "--out", "ckpt", "--net", "tiny", "--epochs", "1"], d);
    assert!(d.join("ckpt/checkpoint.tar").exists() && d.join("ckpt/history.json").exists());
    ok(&["render-presets", "--data", "test", "--out", "stacks", "--small-size", "64"], d);
    ok(&["infer", "--ckpt", "ckpt/checkpoint.tar", "--stack", "stacks", "--out", "pred", "--dump-weights", "w"], d);
    for id in ["scene_0000", "scene_0001"] {
        assert!(d.join(format!("pred/{id}.png")).exists());
        for p in ["t", "d", "s"] {
            assert!(d.join(format!("w/{id}/w_{p}.png")).exists());
        }
    }
    let o = ok(&["eval", "--pred", "pred", "--gt", "test", "--label", "tiny", "--out", "report.json"], d);
    assert!(String::from_utf8_lossy(&o.stdout).contains("tiny"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);
    assert!(d.join("report.txt").exists());
}

#[test]
fn seed_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mixwb"));
        c.args(["--quiet", "synth", "--n", "1", "--width", "32", "--height", "32", "--out", out]).current_dir(d);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        match env {
            Some(e) => c.env("MIXWB_SEED", e),
            None => c.env_remove("MIXWB_SEED"),
        };
        assert!(c.status().unwrap().success());
        std::fs::read(d.join(out).join("scene_0000/raw.png")).unwrap()
    };
    let env5 = run("a", Some("5"), None);
    let flag5 = run("b", Some("9"), Some("5"));
    let default = run("c", None, None);
    assert_eq!(env5, flag5);
    assert_ne!(env5, default);
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    assert_eq!(mixwb(&["synth", "--config", "bad.json", "--out", "x"], d).status.code(), Some(2));
    assert_eq!(mixwb(&["train", "--data", "missing", "--out", "x"], d).status.code(), Some(3));
    assert_eq!(mixwb(&["train", "--data", "missing", "--out", "x", "--patch", "60"], d).status.code(), Some(2));
}
