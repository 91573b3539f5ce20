use std::path::PathBuf;
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cryptogen"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

#[test]
fn verify_bundled_config_passes_and_is_stable() {
    let a = run(&["--seed", "7", "verify", "configs/toy.json"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&["--seed", "7", "verify", "configs/toy.json"]);
    assert_eq!(a.stdout, b.stdout);
    let summary: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["checks"].as_array().unwrap().len(), 8);
}

#[test]
fn corrupted_weights_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = root().join("crates/core/fixtures/toy");
    for entry in std::fs::read_dir(&src).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
    }
    std::fs::write(dir.path().join("layer1.w2.bin"), b"garbage").unwrap();
    let out = run(&["verify", "--model", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn unknown_method_lists_valid_ones() {
    let out = run(&["costs", "--method", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CryptoGen"));
}

#[test]
fn default_costs_show_reproduced_cells() {
    let out = run(&["costs", "--format", "csv"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 46);
    assert!(csv.contains("Gazelle,Mult,Prefill,\"m·d1\",98304.00,98304,reproduced"));
    assert!(csv.contains("CryptoGen,Ct,Prefill,\"m·d1/n\",12.00,12,reproduced"));
}

#[test]
fn bench_cache_column_follows_block_capacity() {
    let out = run(&["bench", "configs/toy.json", "--prefill", "4", "--gen", "20"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    for r in &rows[1..] {
        let t: usize = r[3].parse().unwrap();
        // toy head width 8 at 64 slots: 8 tokens per ciphertext
        assert_eq!(r[10].parse::<usize>().unwrap(), t.div_ceil(8));
    }
}

#[test]
fn generate_check_matches_oracle() {
    let out = run(&[
        "--seed",
        "3",
        "generate",
        "configs/toy.json",
        "--prompt",
        "1,2,3",
        "--gen",
        "5",
        "--check",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["tokens"].as_array().unwrap().len(), 5);
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);
}

#[test]
fn overlong_bench_is_rejected() {
    let out = run(&["bench", "--prefill", "120", "--gen", "20"]);
    assert_eq!(out.status.code(), Some(2));
}
