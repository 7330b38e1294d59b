use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sbrush::manifest::Manifest;

const TINY: &str = r#"
seed = 3
[distill]
iters = 40
batch = 16
[eval]
every = 20
probes = 256
"#;

const TINY_TRAINED: &str = r#"
seed = 42
[net]
hidden = [16, 16]
[teacher]
mode = "trained"
dataset_size = 512
[teacher.train]
steps = 60
batch = 32
[distill]
iters = 20
batch = 8
[eval]
every = 10
probes = 128
"#;

fn sbrush(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbrush"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sbrush(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn err(args: &[&str]) -> String {
    let out = sbrush(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_reported() {
    let e = err(&["distill", "--config", "/nonexistent/run.toml"]);
    assert!(e.contains("config not found"), "{e}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[distill]\nitres = 5\n");
    let e = err(&["distill", "--config", s(&cfg)]);
    assert!(e.contains("itres"), "{e}");
}

#[test]
fn analytic_teacher_refuses_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TINY);
    let e = err(&["train-teacher", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert!(e.contains("analytic teacher needs no training"), "{e}");
}

#[test]
fn trained_teacher_is_deterministic_and_feeds_distillation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t.toml", TINY_TRAINED);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&b)]);
    let read = |d: &Path| std::fs::read(d.join("teacher/teacher.sbck")).unwrap();
    assert_eq!(read(&a), read(&b));
    let (ma, mb) = (Manifest::load(&a.join("teacher")).unwrap(), Manifest::load(&b.join("teacher")).unwrap());
    assert_eq!(ma.content_hash, mb.content_hash);

    ok(&["distill", "--config", s(&cfg), "--out", s(&a)]);
    assert!(a.join("distill/student.sbck").exists());
}

#[test]
fn distill_writes_artifacts_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TINY);
    let out = tmp.path().join("run");
    ok(&["distill", "--config", s(&cfg), "--out", s(&out)]);
    let dir = out.join("distill");
    for f in [
        "teacher.sbck",
        "student.sbck",
        "student_ema.sbck",
        "lora.sbck",
        "resume.sbck",
        "metrics.jsonl",
        "metrics.csv",
        "iters.jsonl",
        "config.toml",
        "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let e = err(&["distill", "--config", s(&cfg), "--out", s(&out)]);
    assert!(e.contains("--force"), "{e}");
    ok(&["distill", "--config", s(&cfg), "--out", s(&out), "--force"]);
}

#[test]
fn sds_run_has_no_lora_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &TINY.replace("[distill]\n", "[distill]\nloss_kind = \"sds\"\n"));
    ok(&["distill", "--config", s(&cfg), "--out", s(tmp.path())]);
    let dir = tmp.path().join("distill");
    assert!(dir.join("student.sbck").exists());
    assert!(!dir.join("lora.sbck").exists());
}

#[test]
fn sampling_writes_rows_and_checks_the_checkpoint_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TINY);
    ok(&["distill", "--config", s(&cfg), "--out", s(tmp.path())]);
    let dir = tmp.path().join("distill");
    let csv = tmp.path().join("samples.csv");
    ok(&[
        "sample",
        "--checkpoint",
        s(&dir.join("student_ema.sbck")),
        "--n",
        "30",
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("y,x0,x1"));
    let ys: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ys.len(), 30);
    assert_eq!(&ys[..4], ["0", "1", "2", "0"]);
    assert!(tmp.path().join("samples.timing.json").exists());

    let fixed = tmp.path().join("fixed.csv");
    ok(&[
        "sample",
        "--checkpoint",
        s(&dir.join("student.sbck")),
        "--n",
        "5",
        "--y",
        "2",
        "--out",
        s(&fixed),
    ]);
    assert!(std::fs::read_to_string(&fixed).unwrap().lines().skip(1).all(|l| l.starts_with("2,")));

    let e = err(&["sample", "--checkpoint", s(&dir.join("teacher.sbck")), "--out", s(&csv)]);
    assert!(e.contains("needs student"), "{e}");
    let e = err(&[
        "sample",
        "--checkpoint",
        s(&dir.join("student.sbck")),
        "--mode",
        "ddim:10",
        "--out",
        s(&csv),
    ]);
    assert!(e.contains("teacher checkpoint"), "{e}");
    ok(&[
        "sample",
        "--checkpoint",
        s(&dir.join("teacher.sbck")),
        "--mode",
        "ddim:10",
        "--n",
        "6",
        "--out",
        s(&csv),
    ]);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["distill", "--config", s(&cfg), "--out", s(&a)]);
    let stdout = ok(&["distill", "--config", s(&cfg), "--out", s(&b), "--stop-after", "20"]);
    assert!(stdout.contains("--resume"), "{stdout}");
    ok(&["distill", "--config", s(&cfg), "--out", s(&b), "--resume"]);
    let (ma, mb) = (Manifest::load(&a.join("distill")).unwrap(), Manifest::load(&b.join("distill")).unwrap());
    assert_eq!(ma.artifacts, mb.artifacts);
}

#[test]
fn inspect_and_interpolate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TINY);
    ok(&["distill", "--config", s(&cfg), "--out", s(tmp.path())]);
    let lora = tmp.path().join("distill/lora.sbck");
    let text = ok(&["inspect-checkpoint", s(&lora)]);
    assert!(text.contains("component: lora"), "{text}");
    assert!(text.contains("config_hash:"));

    let student = tmp.path().join("distill/student_ema.sbck");
    let out = tmp.path().join("interp.csv");
    ok(&["interpolate", "--checkpoint", s(&student), "--steps", "5", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 6);
    ok(&["interpolate", "--checkpoint", s(&student), "--mode", "slerp", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 10);
}

#[test]
fn ablation_summary_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let table = ok(&["ablate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["ablate", "--config", s(&cfg), "--out", s(&b)]);
    for arm in ["Full", "NoParam", "SmallRank", "SDS"] {
        assert!(table.contains(arm), "{table}");
    }
    let read = |d: &Path| std::fs::read_to_string(d.join("ablate/summary.csv")).unwrap();
    let summary = read(&a);
    assert_eq!(summary.lines().count(), 5);
    assert_eq!(summary, read(&b));
}
