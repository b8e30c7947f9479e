use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n = 10
data.width = 32
data.height = 32
teacher_epochs = 1
student_epochs = 1
teacher.d = 8
teacher.s = 4
teacher.m = 1
student.width = 4
student.outer_blocks = 2
student.inner_blocks = 1
student.reduction = 2
";

fn hkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hkd"))
        .args(args)
        .current_dir(dir)
        .env_remove("HKD_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = hkd(dir.path(), &["synth-data", "--config", "tiny.cfg", "--out-dir", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hkd(dir.path(), &["--help"])), 0);
    assert_eq!(code(&hkd(dir.path(), &["--version"])), 0);
    assert_eq!(code(&hkd(dir.path(), &["distill", "--help"])), 0);
}

#[test]
fn usage_and_config_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hkd(dir.path(), &["no-such-command"])), 4);
    assert_eq!(code(&hkd(dir.path(), &["bench"])), 4);
    fs::write(dir.path().join("bad.cfg"), "lr0 = fast\n").unwrap();
    let out = hkd(dir.path(), &["bench", "--config", "bad.cfg", "--out-dir", "o"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr0"));
    fs::write(dir.path().join("unknown.cfg"), "colour = red\n").unwrap();
    assert_eq!(code(&hkd(dir.path(), &["bench", "--config", "unknown.cfg", "--out-dir", "o"])), 4);
    let out = Command::new(env!("CARGO_BIN_EXE_hkd"))
        .args(["bench", "--out-dir", "o", "--runs", "1", "--warmup", "0"])
        .current_dir(dir.path())
        .env("HKD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hkd(dir.path(), &["bench", "--config", "absent.cfg", "--out-dir", "o"])), 2);
    assert_eq!(code(&hkd(dir.path(), &["train-student", "--data", "absent", "--out-dir", "o"])), 2);
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = setup();
    fs::write(dir.path().join("junk.hkd"), b"HKD1\x01").unwrap();
    let out = hkd(
        dir.path(),
        &["eval", "--config", "tiny.cfg", "--checkpoint", "junk.hkd", "--data", "data", "--out-dir", "e"],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_and_manifest() {
    let dir = setup();
    let root = dir.path();
    assert!(root.join("data/index.tsv").exists());

    let out = hkd(root, &["train-student", "--config", "tiny.cfg", "--seed", "3", "--data", "data", "--out-dir", "s"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["student.hkd", "history.csv", "manifest.txt"] {
        assert!(root.join("s").join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(root.join("s/manifest.txt")).unwrap();
    assert!(manifest.contains("command = train-student"));
    assert!(manifest.contains("seed = 3"));
    assert!(manifest.contains("phase = student"));
    assert!(manifest.contains("config_hash = "));
    assert!(manifest.contains("threads = 1"));

    let out = hkd(
        root,
        &["eval", "--config", "tiny.cfg", "--checkpoint", "s/student.hkd", "--data", "data", "--grid", "2", "--out-dir", "e"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(root.join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("id,psnr,ssim\n"));
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert!(root.join("e/grid.png").exists());

    let out = hkd(
        root,
        &["eval", "--checkpoint", "s/student.hkd", "--data", "data", "--out-dir", "wrong"],
    );
    assert_eq!(code(&out), 3, "default-sized student must not accept a tiny checkpoint");
}

#[test]
fn distill_with_given_teacher_and_flag_overrides() {
    let dir = setup();
    let root = dir.path();
    let out = hkd(root, &["train-teacher", "--config", "tiny.cfg", "--data", "data", "--out-dir", "t"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("t/teacher.hkd").exists());
    let out = hkd(
        root,
        &[
            "distill", "--config", "tiny.cfg", "--data", "data", "--teacher", "t/teacher.hkd", "--fa-loss", "kl", "--w-fa", "0.5",
            "--out-dir", "d",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(root.join("d/manifest.txt")).unwrap();
    assert!(manifest.contains("fa_loss = kl"));
    assert!(manifest.contains("w_fa = 0.5"));
    assert!(!root.join("d/teacher.hkd").exists());
}

#[test]
fn bench_reports_both_networks() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), "data.width = 32\ndata.height = 32\n").unwrap();
    assert_eq!(code(&hkd(dir.path(), &["bench", "--runs", "2", "--out-dir", "b"])), 4);
    let out = hkd(dir.path(), &["bench", "--config", "small.cfg", "--runs", "10", "--warmup", "3", "--out-dir", "b"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert!(csv.contains("student") && csv.contains("teacher"));
    assert!(dir.path().join("b/bench.md").exists());
}
