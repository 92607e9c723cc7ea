use std::path::Path;
use std::process::{Command, Output};

fn ipl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: &str, size: &str, seed: &str) {
    let o = ipl(&["synth", "--out-dir", s(dir), "--count", count, "--size", size, "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn frames(dir: &Path, i: usize) -> [String; 3] {
    ["low", "mid", "high"].map(|p| s(&dir.join(format!("scene_{i:03}_{p}.ppm"))).to_string())
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "4", "64x64", "7");
    synth(&b, "4", "64x64", "7");
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(ca.len(), 16);
    assert_eq!(ca, cb);
}

#[test]
fn synth_ev_offsets() {
    let t = tempfile::tempdir().unwrap();
    let o = ipl(&["synth", "--out-dir", s(t.path()), "--count", "1", "--size", "32x16", "--ev", "-1,0,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ipl(&["synth", "--out-dir", s(t.path()), "--count", "1", "--size", "32x16", "--ev", "0,1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn metrics_on_identical_images() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "32x32", "1");
    let mid = t.path().join("scene_000_mid.ppm");
    let o = ipl(&["metrics", "--ref", s(&mid), "--test", s(&mid)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "psnr=100.0000 ssim=1.000000");
}

#[test]
fn usage_errors_exit_one() {
    let o = ipl(&["fuse", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(ipl(&[]).status.code(), Some(1));
    assert_eq!(ipl(&["synth", "--out-dir", "x", "--count", "1", "--size", "12"]).status.code(), Some(1));
    assert_eq!(ipl(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_fuse_bench_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "2", "32x32", "3");
    let weights = t.path().join("w.iplw");
    let csv = t.path().join("loss.csv");
    let o = ipl(&[
        "train", "--data-dir", s(&data), "--out-weights", s(&weights), "--steps", "3", "--lr", "1e-3",
        "--seed", "2", "--loss-csv", s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final_loss="));
    let curve = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("step,loss\n"));

    let [low, mid, high] = frames(&data, 0);
    let out = t.path().join("fused.ppm");
    let o = ipl(&[
        "fuse", "--low", &low, "--mid", &mid, "--high", &high, "--weights", s(&weights), "--out", s(&out),
        "--stats",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lfe_evals=") && text.contains("hits=") && text.contains("bytes_used="), "{text}");
    let header = std::fs::read(&out).unwrap();
    assert!(header.starts_with(b"P6\n32 32\n255\n"));

    // Cache off gives the same image at this size up to 8-bit rounding of the output.
    let out2 = t.path().join("fused_nc.ppm");
    let o = ipl(&[
        "fuse", "--low", &low, "--mid", &mid, "--high", &high, "--weights", s(&weights), "--out", s(&out2),
        "--no-cache",
    ]);
    assert!(o.status.success());
    let o = ipl(&["metrics", "--ref", s(&out), "--test", s(&out2)]);
    let psnr: f64 = stdout(&o).split_whitespace().next().unwrap()["psnr=".len()..].parse().unwrap();
    assert!(psnr > 40.0, "{psnr}");

    let bcsv = t.path().join("bench.csv");
    let o = ipl(&["bench", "--data-dir", s(&data), "--weights", s(&weights), "--repeats", "2", "--csv", s(&bcsv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mode=warm") && stdout(&o).contains("lfe_evals=0"));
    assert_eq!(std::fs::read_to_string(&bcsv).unwrap().lines().count(), 1 + 2 * (2 + 1 + 2));

    // Incompatible chunk override is a runtime error and writes nothing.
    let bad = t.path().join("bad.ppm");
    let o = ipl(&[
        "fuse", "--low", &low, "--mid", &mid, "--high", &high, "--weights", s(&weights), "--out", s(&bad),
        "--chunk-c", "3",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bad.exists());
}

#[test]
fn fuse_with_mismatched_sizes_names_both() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "1", "32x32", "1");
    synth(&b, "1", "48x32", "1");
    let weights = t.path().join("w.iplw");
    let o = ipl(&["train", "--data-dir", s(&a), "--out-weights", s(&weights), "--steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let [low, _, high] = frames(&a, 0);
    let [_, mid, _] = frames(&b, 0);
    let out = t.path().join("o.ppm");
    let o = ipl(&["fuse", "--low", &low, "--mid", &mid, "--high", &high, "--weights", s(&weights), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("(3, 48, 32)") && err.contains("(3, 32, 32)"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let o = ipl(&["metrics", "--ref", s(&t.path().join("x.ppm")), "--test", s(&t.path().join("y.ppm"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x.ppm"));
    let o = ipl(&["train", "--data-dir", s(t.path()), "--out-weights", s(&t.path().join("w"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!t.path().join("w").exists());
}

#[test]
fn gradcheck_passes() {
    let o = ipl(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let e: f64 = stdout(&o).trim()["max_rel_error=".len()..].parse().unwrap();
    assert!(e <= 1e-3);
}
