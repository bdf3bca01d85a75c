use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lowbit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowbit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = lowbit(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A random toy checkpoint and its 3-bit quantization.
fn models(dir: &TempDir) -> (PathBuf, PathBuf) {
    let f = dir.path().join("toy.ditf");
    let q = dir.path().join("toy.ditq");
    ok(&["init", "--out", s(&f), "--seed", "7"]);
    ok(&["quantize", "--in", s(&f), "--bits", "3", "--out", s(&q)]);
    (f, q)
}

#[test]
fn quantized_file_is_much_smaller() {
    let dir = TempDir::new().unwrap();
    let (f, q) = models(&dir);
    let ratio =
        std::fs::metadata(&q).unwrap().len() as f64 / std::fs::metadata(&f).unwrap().len() as f64;
    assert!(ratio <= 0.13, "ratio {ratio}");
    let shown = ok(&["inspect", "--model", s(&q)]);
    assert!(shown.contains("classifier"), "{shown}");
}

#[test]
fn optimize_rewrites_every_projection() {
    let dir = TempDir::new().unwrap();
    let prog = dir.path().join("step.loop");
    let out = dir.path().join("step.opt.loop");
    let report = dir.path().join("report.json");
    ok(&["synth", "--out", s(&prog)]);
    ok(&[
        "optimize",
        "--in",
        s(&prog),
        "--out",
        s(&out),
        "--report",
        s(&report),
    ]);

    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["matched"], 15);
    assert_eq!(r["rewritten"], 15);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.matches("call gemv(").count(), 15);
}

#[test]
fn greedy_runs_agree_across_modes() {
    let dir = TempDir::new().unwrap();
    let (f, _) = models(&dir);
    let run = |mode: &str| {
        ok(&[
            "run",
            "--model",
            s(&f),
            "--prompt",
            "1,2,3",
            "--steps",
            "12",
            "--mode",
            mode,
        ])
    };
    let naive = run("naive");
    assert!(!naive.trim().is_empty());
    assert_eq!(naive, run("optimized"));
}

#[test]
fn verify_passes_on_an_honest_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (f, q) = models(&dir);
    let o = lowbit(&[
        "verify",
        "--model-a",
        s(&f),
        "--model-b",
        s(&q),
        "--trials",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("verify: pass"));
}

#[test]
fn verify_fails_when_recorded_bounds_are_too_small() {
    let dir = TempDir::new().unwrap();
    let (f, q) = models(&dir);
    // The file ends with one f32 error bound per matrix; understate them all.
    let mut bytes = std::fs::read(&q).unwrap();
    let matrices = 1 + 2 * 7 + 1;
    let start = bytes.len() - 4 * matrices;
    for chunk in bytes[start..].chunks_mut(4) {
        chunk.copy_from_slice(&1e-9f32.to_le_bytes());
    }
    let forged = dir.path().join("forged.ditq");
    std::fs::write(&forged, bytes).unwrap();

    let o = lowbit(&[
        "verify",
        "--model-a",
        s(&f),
        "--model-b",
        s(&forged),
        "--trials",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("verify: FAIL"));
}

#[test]
fn bad_inputs_exit_with_status_two() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.ditf");
    std::fs::write(&junk, b"nope, not a model").unwrap();
    let o = lowbit(&["inspect", "--model", s(&junk)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a checkpoint"));

    let missing = dir.path().join("missing.ditf");
    assert_eq!(
        lowbit(&["run", "--model", s(&missing)]).status.code(),
        Some(2)
    );
}

#[test]
fn bench_derives_rates_from_a_given_throughput() {
    let dir = TempDir::new().unwrap();
    let (f, _) = models(&dir);
    let json = dir.path().join("bench.json");
    let text = ok(&[
        "bench",
        "--model",
        s(&f),
        "--tokens-per-second",
        "3.5",
        "--per-token-gflops",
        "12.95",
        "--watts",
        "18",
        "--out",
        s(&json),
    ]);
    assert!(text.contains("45.325"), "{text}");
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!((r["effective_gflops"].as_f64().unwrap() - 45.3).abs() <= 0.1);
    assert!((r["energy_joules_per_token"].as_f64().unwrap() - 5.14).abs() <= 0.05);
}
