use std::path::Path;
use std::process::{Command, Output};

use ncs_cli::commands::{bench_rows, solve_rows};
use ncs_cli::config::{BenchConfig, ExperimentConfig};
use ncs_core::codec::{report_bpp, Bitstream};
use ncs_core::ncs::SolverKind;

fn ncs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncs")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const SOLVE: &str = r#"{
    "prior": {"kind": "clustered", "dim": 16},
    "task": {"name": "inpaint_half", "operator": "inpaint_half"},
    "solvers": ["DPS", "NCS-DPS"],
    "steps": [20, 100],
    "k": 6,
    "seeds": [3, 4, 5],
    "record_wall_time": false
}"#;

#[test]
fn solve_writes_one_row_per_run_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "solve.json", SOLVE);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = ncs(&["solve", "--config", &config, "--out", out.to_str().unwrap(), "--threads", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "seed,solver,task,T,K,m,mse,psnr,wall_ms,degenerate_steps");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows[0].starts_with("3,DPS,inpaint_half,20,6,,"));
    assert!(rows[3].starts_with("3,NCS-DPS,inpaint_half,100,6,,"));
}

#[test]
fn seed_offset_shifts_every_seed() {
    let config = ExperimentConfig::parse(SOLVE).unwrap();
    let rows = solve_rows(&config, 100).unwrap();
    assert!(rows.iter().all(|r| (103..=105).contains(&r.seed)));
}

#[test]
fn ncs_dps_beats_dps_on_toy_inpainting() {
    let mut config = ExperimentConfig::parse(SOLVE).unwrap();
    config.steps = vec![20];
    config.seeds = serde_json::from_str(r#"{"start": 0, "count": 101}"#).unwrap();
    let rows = solve_rows(&config, 0).unwrap();
    let median = |solver| {
        let mut v: Vec<f64> = rows.iter().filter(|r| r.solver == solver).map(|r| r.mse).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(SolverKind::NcsDps) <= median(SolverKind::Dps));
}

#[test]
fn missing_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.json", "{\n  \"steps\": [10],\n  \"seeds\": [1]\n}");
    let o = ncs(&["solve", "--config", &config]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing field `prior`") && err.contains("line 4"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let o = ncs(&["sample", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sample_moments_of_standard_normal() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "sample.json",
        r#"{"prior": {"kind": "standard_normal", "dim": 1}, "steps": [50], "seeds": {"start": 0, "count": 5000}}"#,
    );
    let out = dir.path().join("samples.csv");
    let o = ncs(&["sample", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    let var = summary["variance"][0].as_f64().unwrap();
    assert!((0.9..=1.1).contains(&var), "variance {var}");
    assert_eq!(std::fs::read_to_string(out).unwrap().lines().count(), 5001);
}

#[test]
fn compress_decompress_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let signal: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect();
    let input = dir.path().join("x.f64");
    std::fs::write(&input, ncs_cli::io::signal_bytes(&signal)).unwrap();
    let params = write(
        dir.path(),
        "codec.json",
        r#"{"seed": 9, "steps": 30, "k": 256, "m": 3, "bits": 4, "n_side": 8,
            "beta_min": 0.003, "beta_max": 0.5, "prior_id": 1}"#,
    );
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let o = ncs(&["compress", "--config", &params, "--input", input.to_str().unwrap(),
        "--out", &path("x.ncsb"), "--recon", &path("enc.f64")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(o.stdout).unwrap();

    let stream = Bitstream::from_bytes(&std::fs::read(path("x.ncsb")).unwrap()).unwrap();
    let bpp = report_bpp(&stream.header);
    assert!(report.starts_with(&format!("bpp={bpp} payload_bits={}", 29 * (3 * 8 + 4 * 2))), "{report}");

    let o = ncs(&["decompress", "--input", &path("x.ncsb"), "--out", &path("dec.f64")]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(path("dec.f64")).unwrap(), std::fs::read(path("enc.f64")).unwrap());

    let bytes = std::fs::read(path("x.ncsb")).unwrap();
    std::fs::write(path("short.ncsb"), &bytes[..bytes.len() - 2]).unwrap();
    let o = ncs(&["decompress", "--input", &path("short.ncsb"), "--out", &path("bad.f64")]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bad_codec_params_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.f64");
    std::fs::write(&input, ncs_cli::io::signal_bytes(&[0.0; 4])).unwrap();
    let params = write(
        dir.path(),
        "codec.json",
        r#"{"seed": 1, "steps": 10, "k": 100, "m": 1, "bits": 0, "n_side": 2,
            "beta_min": 0.01, "beta_max": 0.2, "prior_id": 0}"#,
    );
    let out = dir.path().join("x.ncsb");
    let o = ncs(&["compress", "--config", &params, "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_quant_rows_respect_dominance() {
    let config = BenchConfig { m: vec![2, 3, 6], c: vec![1, 3], batch: 16, seed: 4, budget: 1 << 14 };
    let rows = bench_rows(&config).unwrap();
    for m in [2, 3, 6] {
        for c in [1, 3] {
            let get = |method| rows.iter().find(|r| r.method == method && r.m == m && r.bits == c).map(|r| r.objective);
            let dp = get("dp").unwrap();
            assert!(dp >= get("stagewise").unwrap());
            assert!(dp >= get("nn").unwrap());
            if let Some(ex) = get("exhaustive") {
                assert!((dp - ex).abs() <= 1e-12);
            }
        }
    }
    assert!(rows.iter().any(|r| r.method == "exhaustive"));
    assert!(!rows.iter().any(|r| r.method == "exhaustive" && r.m == 6 && r.bits == 3));
}

#[test]
fn bench_quant_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bench.json", r#"{"m": [2, 4], "c": [2], "batch": 4}"#);
    let out = dir.path().join("bench.csv");
    let o = ncs(&["bench-quant", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,m,C,wall_ns,objective");
    assert_eq!(text.lines().count(), 1 + 2 * 4);
}
