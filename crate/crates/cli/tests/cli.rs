use std::path::Path;
use std::process::{Command, Output};

fn arclite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arclite"))
        .args(args)
        .env_remove("ARCLITE_NUMA_MODE")
        .output()
        .expect("spawn arclite")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn make_toy(dir: &Path) -> String {
    let path = dir.join("toy.altw").display().to_string();
    let o = arclite(&["make-toy", "-o", &path, "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

#[test]
fn generate_is_deterministic_across_configs() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_toy(dir.path());
    let base = arclite(&["generate", "--model", &model, "--prompt", "4,8,15", "--n-gen", "6"]);
    assert!(base.status.success());
    let tokens = stdout(&base);
    assert_eq!(tokens.trim().split(',').count(), 6);
    let tp = arclite(&[
        "generate", "--model", &model, "--prompt", "4,8,15", "--n-gen", "6", "--threads", "2", "--tp", "2",
        "--sync-mode", "b",
    ]);
    assert!(tp.status.success(), "{}", String::from_utf8_lossy(&tp.stderr));
    assert_eq!(stdout(&tp), tokens);
}

#[test]
fn prompt_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_toy(dir.path());
    let prompt = dir.path().join("p.txt");
    std::fs::write(&prompt, "4, 8, 15\n").unwrap();
    let at = format!("@{}", prompt.display());
    let a = arclite(&["generate", "--model", &model, "--prompt", &at, "--n-gen", "3"]);
    let b = arclite(&["generate", "--model", &model, "--prompt", "4,8,15", "--n-gen", "3"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn quantize_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_toy(dir.path());
    let out = dir.path().join("q.altw").display().to_string();
    assert!(arclite(&["quantize", "--model", &model, "--output", &out]).status.success());
    let text = stdout(&arclite(&["inspect", "--model", &out]));
    assert!(text.contains("Q4B"));
    assert!(text.lines().any(|l| l.starts_with("blk.0.attn_norm") && l.contains("F32")));
}

#[test]
fn bench_emits_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_toy(dir.path());
    let o = arclite(&[
        "bench", "--model", &model, "--prompt", "1,2", "--n-gen", "3", "--threads", "1,2", "--tp", "1,2",
        "--sync-mode", "a,b", "--runs", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "threads,numa_mode,tp,sync,prefill_tps,decode_tps");
    assert_eq!(lines.len(), 1 + 8);
}

#[test]
fn exit_codes() {
    assert_eq!(arclite(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(arclite(&["generate", "--model", "x", "--prompt", "1", "--sync-mode", "c"]).status.code(), Some(2));
    let missing = arclite(&["inspect", "--model", "/nonexistent/model.altw"]);
    assert_eq!(missing.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let model = make_toy(dir.path());
    let bad = arclite(&["generate", "--model", &model, "--prompt", "9999", "--n-gen", "2"]);
    assert_eq!(bad.status.code(), Some(1));
}
