use std::path::Path;
use std::process::{Command, Output};

fn disdis(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disdis")).args(args).current_dir(dir).output().expect("binary runs")
}

const TINY: &str = r#"{
  "data": {"synth": {"generator": {"n_per_persona": 6}, "seed": 1, "eval_per_persona": 2}},
  "model": {"k": 4, "d_f": 6, "d_g": 4, "d_c": 4, "history_hidden": 6, "future_hidden": 4, "decoder_hidden": 6},
  "train": {"epochs": 2, "batch_size": 8}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = disdis(&["synth", "--out", out, "--seed", "7", "--per-persona", "5"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["synth.txt", "synth_labels.txt"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(file)).unwrap(), std::fs::read(dir.path().join("b").join(file)).unwrap());
    }
    let text = std::fs::read_to_string(dir.path().join("a/synth.txt")).unwrap();
    assert_eq!(text.lines().count(), 4 * 5 * 20);
}

#[test]
fn train_then_eval_and_pcmd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let o = disdis(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("epoch=1 ")));
    assert!(stdout.contains("most_likely_ade="));

    let o = disdis(&["eval", "--checkpoint", "run/checkpoint.json", "--out", "ev"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("run/pcmd.csv")).unwrap(), std::fs::read(dir.path().join("ev/pcmd.csv")).unwrap());

    let o = disdis(&["pcmd", "--config", &cfg, "--checkpoint", "run/checkpoint.json", "--out", "p"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("p/pcmd.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("m,k,ade,fde"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let o = disdis(&["gradcheck", "--config", &cfg], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("max_rel_err="));
}

#[test]
fn ablate_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let o = disdis(&["ablate", "--config", &cfg, "--out", "ab"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

fn assert_error(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} exit={code} message=")), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &TINY.replace("\"train\"", "\"trian\""));
    assert_error(&disdis(&["train", "--config", &cfg], dir.path()), 2, "config");
    assert_error(&disdis(&["train", "--config", "missing.json"], dir.path()), 2, "config");
    assert_error(&disdis(&["train"], dir.path()), 2, "config");
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"data": {"scenes": [{"path": "nowhere.txt"}]}}"#);
    assert_error(&disdis(&["train", "--config", &cfg], dir.path()), 3, "data");
    std::fs::write(dir.path().join("broken.txt"), "0 1 2.0\n").unwrap();
    let cfg = write_config(dir.path(), "d.json", r#"{"data": {"scenes": [{"path": "broken.txt"}]}}"#);
    assert_error(&disdis(&["train", "--config", &cfg], dir.path()), 3, "data");
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &TINY.replace("\"batch_size\": 8", "\"batch_size\": 8, \"lr\": 1e300"));
    assert_error(&disdis(&["train", "--config", &cfg], dir.path()), 4, "divergence");
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = disdis(&["fly"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
}
