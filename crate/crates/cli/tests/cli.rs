use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsa-bootstrap"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL_SYNTHETIC: &str = r#"
[problem]
kind = "synthetic"
dim = 2
noise_a = 0.2
noise_b = 0.5
instance_seed = 3

[schedule]
c0 = 0.5
gammas = [0.5]

[normal_approx]
n_grid = [64, 256]
replicas = 500
reference_sample = 5000

[coverage]
n_grid = [128]
runs = 30

[bootstrap]
b = 40
levels = [0.8, 0.9]
"#;

#[test]
fn malformed_config_exits_with_one_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\nkind = \"synthetic\"\ndim = 2\nnoise_a = 0.1\nnoise_b = 0.1\n\n[schedule]\nbogus = 1\n");
    let out = run(&["certify", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 8") && err.contains("bogus"), "{err}");
}

#[test]
fn invalid_value_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "normal-approx",
        "--config",
        config("synthetic.toml").to_str().unwrap(),
        "--set",
        "schedule.gammas=[1.5]",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SYNTHETIC);
    let out = run(&[
        "normal-approx",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "schedule.c0=1000.0",
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverge"));
}

#[test]
fn self_test_distance_is_within_null_band() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SYNTHETIC);
    let out_dir = dir.path().join("out");
    let n = 20_000;
    let out = run(&[
        "normal-approx",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "normal_approx.self_test=true",
        "--set",
        &format!("normal_approx.replicas={n}"),
        "--set",
        &format!("normal_approx.reference_sample={n}"),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bound = 1.63 * (2.0 / n as f64).sqrt();
    let mut reader = csv::Reader::from_path(out_dir.join("normal_approx.csv")).unwrap();
    let mut rows = 0;
    for rec in reader.records() {
        let delta: f64 = rec.unwrap()[2].parse().unwrap();
        assert!(delta <= bound, "delta {delta} above {bound}");
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn outputs_and_resolved_config_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SYNTHETIC);
    let out_dir = dir.path().join("out");
    let out = run(&["coverage", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["coverage.csv", "coverage_runs.csv", "law_match.csv", "coverage.svg", "resolved_config.toml", "timing.toml"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let text = std::fs::read_to_string(out_dir.join("coverage.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("gamma,level,n,B,runs,covered,coverage,binomial_lo,binomial_hi"));
    assert_eq!(lines.count(), 2);

    let resolved = out_dir.join("resolved_config.toml");
    let again = dir.path().join("again");
    let out = run(&["coverage", "--config", resolved.to_str().unwrap(), "--out-dir", again.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(text, std::fs::read_to_string(again.join("coverage.csv")).unwrap());
}

#[test]
fn fixed_seed_desk_run_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("normal_approx.toml");
    let mut bytes = Vec::new();
    for run_id in 0..2 {
        let out_dir = dir.path().join(format!("run{run_id}"));
        let out = run(&[
            "normal-approx",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            "normal_approx.replicas=400",
            "--set",
            "normal_approx.reference_sample=4000",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        bytes.push((
            std::fs::read(out_dir.join("normal_approx.csv")).unwrap(),
            std::fs::read(out_dir.join("delta_n.svg")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn certify_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["certify", "--config", config("certify.toml").to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("certificate.txt")).unwrap();
    for section in ["[certificate]", "[td_constants]", "[[schedule]]"] {
        assert!(text.contains(section), "missing {section}");
    }
}
