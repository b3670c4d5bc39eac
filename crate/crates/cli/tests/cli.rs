use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qna_core::tensor::write_tensor;
use qna_core::{RngSeed, Tensor};

fn qna(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qna")).args(args).output().expect("run qna")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&str> = std::str::from_utf8(&bytes[..bytes.len().min(32)])
        .unwrap_or_else(|e| std::str::from_utf8(&bytes[..e.valid_up_to()]).unwrap())
        .split_whitespace()
        .take(4)
        .collect();
    assert_eq!(header[0], "P5");
    let (w, h): (usize, usize) = (header[1].parse().unwrap(), header[2].parse().unwrap());
    let pixels = bytes[bytes.len() - w * h..].to_vec();
    (h, w, pixels)
}

#[test]
fn check_small_passes() {
    let o = qna(&["check", "--grid", "small", "--dtype", "f64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn check_reports_injected_fault() {
    let o = qna(&["check", "--dtype", "f32", "--inject-fault", "0.01"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL oracle k=1 s=1 h=1 L=1"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failing case: oracle"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(qna(&["check", "--grid", "enormous"]).status.code(), Some(2));
    assert_eq!(qna(&["model", "--variant", "huge"]).status.code(), Some(2));
    assert_eq!(qna(&["model", "--resolution", "223"]).status.code(), Some(2));
    assert_eq!(qna(&["bench", "--input", "16x16"]).status.code(), Some(2));
    assert_eq!(qna(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(qna(&["train-toy", "--bogus"]).status.code(), Some(2));
}

#[test]
fn model_tiny_totals() {
    let o = qna(&["model", "--variant", "tiny", "--resolution", "224", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let params = v["params"].as_u64().unwrap();
    let flops = v["flops"].as_u64().unwrap();
    assert!((14_400_000..=17_600_000).contains(&params));
    assert!((2_120_000_000..=2_880_000_000).contains(&flops));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["params"].as_u64().unwrap()).sum::<u64>(), params);

    let base = qna(&["model", "--variant", "base", "--report", "params"]);
    assert!(stdout(&base).contains("stage dims [96,"));
    assert!(!stdout(&base).contains("MACs"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = qna(&["bench", "--input", "32x32x8", "--impls", "qna_efficient", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "impl,k,stride,H,W,D,heads,L,dtype,latency_ms_mean,latency_ms_std,peak_extra_bytes,mac_count");
    assert_eq!(lines.len(), 8);
    let peaks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(11).unwrap()).collect();
    assert!(peaks.iter().all(|p| *p == peaks[0]));

    let all = dir.path().join("all.csv");
    let o = qna(&["bench", "--input", "8x8x4", "--k", "1,3", "--out", all.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&all).unwrap().lines().count(), 1 + 4 * 2);

    let bad = qna(&["bench", "--input", "8x8x4", "--out", "/nonexistent/dir/x.csv"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn viz_writes_one_map_per_query_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.qnat");
    write_tensor(&input, &Tensor::<f32>::randn([9, 11, 4], 1.0, &mut RngSeed(1).rng()).unwrap()).unwrap();
    let out = dir.path().join("maps");
    let o = qna(&[
        "viz",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--queries",
        "3",
        "--heads",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 6);
    let (h, w, px) = read_pgm(&out.join("attn_q2_h1.pgm"));
    assert_eq!((h, w), (9, 11));
    assert!(px.contains(&0) && px.contains(&255));

    let uniform = dir.path().join("uniform");
    let o = qna(&["viz", "--input", input.to_str().unwrap(), "--out", uniform.to_str().unwrap(), "--uniform"]);
    assert_eq!(o.status.code(), Some(0));
    let (h, w, px) = read_pgm(&uniform.join("attn_q0_h0.pgm"));
    // pixels whose covering windows are all fully in bounds
    let interior: Vec<u8> =
        (2..h - 2).flat_map(|i| (2..w - 2).map(move |j| (i, j))).map(|(i, j)| px[i * w + j]).collect();
    assert!(interior.iter().all(|&v| v == interior[0]));

    let flat = dir.path().join("k1");
    qna(&["viz", "--input", input.to_str().unwrap(), "--out", flat.to_str().unwrap(), "--k", "1"]);
    let (_, _, px) = read_pgm(&flat.join("attn_q1_h0.pgm"));
    assert!(px.iter().all(|&v| v == px[0]));
}

#[test]
fn viz_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.qnat");
    write_tensor(&input, &Tensor::<f64>::ones([4, 4]).unwrap()).unwrap();
    let o = qna(&["viz", "--input", input.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("missing.qnat");
    assert_eq!(qna(&["viz", "--input", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn train_toy_exit_codes_and_determinism() {
    let a = qna(&["train-toy", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0));
    let text = stdout(&a);
    assert!(text.contains("step    0 loss") && text.contains("step  190 loss") && text.contains("step  200 loss"));
    assert_eq!(stdout(&qna(&["train-toy", "--seed", "3"])), text);

    let frozen = qna(&["train-toy", "--lr", "0", "--steps", "20"]);
    assert_eq!(frozen.status.code(), Some(1));
}
