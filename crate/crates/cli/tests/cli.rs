#[path = "../../core/tests/support/mock_server.rs"]
mod mock_server;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mock_server::{MockServer, Response};
use promptseg_core::imaging::encode_luma8_png;
use promptseg_core::synth::{write_dataset, SynthParams};

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .env_remove("PROMPTSEG_CACHE_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, n_train: usize, n_test: usize, side: usize, noise: f64) -> String {
    let params = SynthParams { n_train, n_test, side, noise_sigma: noise, seed: 9 };
    write_dataset(dir, &params).unwrap().to_string_lossy().into_owned()
}

#[test]
fn validate_clean_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 1, 1, 16, 0.02);
    let o = promptseg(&["validate", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).starts_with("train: 1, test: 1\n"));
    assert!(stdout(&o).contains("image size 16x16: 2"));
}

#[test]
fn validate_reports_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2, 1, 16, 0.02);
    fs::remove_file(dir.path().join("masks/train_001.png")).unwrap();
    let o = promptseg(&["validate", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("error:") && l.contains("train_001.png")), "{out}");
}

#[test]
fn validate_unparseable_json_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    fs::write(&path, "{\"entries\": [}").unwrap();
    let o = promptseg(&["validate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("m.json:1:"));
}

#[test]
fn retrieve_lists_neighbors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4, 2, 24, 0.0);
    let o = promptseg(&["retrieve", "--manifest", &manifest, "--target-side", "24", "--test-id", "test_001", "--k", "2"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "train_002\t0.000000");
    let d: Vec<f64> = lines.iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(d[0] <= d[1]);

    let canvas = dir.path().join("out/canvas.png");
    let o = promptseg(&[
        "retrieve", "--manifest", &manifest, "--target-side", "24", "--test-id", "test_001", "--metric", "frobenius",
        "--dump-canvas", canvas.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let img = promptseg_core::decode_image(&fs::read(&canvas).unwrap()).unwrap();
    assert_eq!((img.width(), img.height()), (48, 72));
}

#[test]
fn retrieve_usage_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3, 1, 16, 0.0);
    let base = ["retrieve", "--manifest", manifest.as_str(), "--target-side", "16"];
    let run = |extra: &[&str]| promptseg(&[&base[..], extra].concat()).status.code();
    assert_eq!(run(&["--test-id", "test_000", "--k", "0"]), Some(2));
    assert_eq!(run(&["--test-id", "test_000", "--metric", "cosine"]), Some(2));
    assert_eq!(run(&["--test-id", "nope"]), Some(1));
    assert_eq!(run(&["--test-id", "test_000", "--k", "4"]), Some(1));
}

#[test]
fn predict_duplicate_recalls_exemplar_mask() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4, 2, 32, 0.0);
    let out = dir.path().join("new/dir/mask.png");
    let soft = dir.path().join("soft.png");
    let o = promptseg(&[
        "predict", "--manifest", &manifest, "--target-side", "32", "--test-id", "test_001", "--k", "2",
        "--out", out.to_str().unwrap(), "--soft-out", soft.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(fs::read(&out).unwrap(), fs::read(dir.path().join("masks/train_002.png")).unwrap());
    assert!(soft.is_file());
}

#[test]
fn predict_remote_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3, 1, 16, 0.02);
    let out = dir.path().join("mask.png");
    let args = |endpoint: &str| -> Vec<String> {
        ["predict", "--manifest", &manifest, "--target-side", "16", "--test-id", "test_000", "--backend", "remote",
            "--endpoint", endpoint, "--timeout-secs", "5", "--out", out.to_str().unwrap()]
            .map(String::from)
            .to_vec()
    };
    let call = |endpoint: &str| {
        let a = args(endpoint);
        promptseg(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    assert_eq!(call(&format!("http://127.0.0.1:{port}")).status.code(), Some(4));
    assert!(!out.exists());

    let failing = MockServer::start(|_| Response::error(500, "boom"));
    assert_eq!(call(&failing.url).status.code(), Some(5));
    assert!(!out.exists());

    let good = MockServer::start(|_| Response::png(encode_luma8_png(16, 16, &[200; 256]).unwrap()));
    assert_eq!(call(&good.url).status.code(), Some(0));
    assert!(out.exists());

    let o = promptseg(&["predict", "--manifest", &manifest, "--test-id", "test_000", "--backend", "remote", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn sweep_with_cache_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 5, 2, 24, 0.02);
    let cache = dir.path().join("cache");
    let reports = dir.path().join("reports");
    fs::create_dir_all(&reports).unwrap();
    let run = |out: &Path, cache_flag: bool| {
        let mut args = vec![
            "sweep", "--manifest", &manifest, "--target-side", "24", "--k-min", "1", "--k-max", "3",
            "--out", out.to_str().unwrap(),
        ];
        if cache_flag {
            args.extend(["--cache-dir", cache.to_str().unwrap()]);
        }
        promptseg(&args)
    };
    let o = run(&reports, false);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let written = PathBuf::from(stdout(&o).trim());
    let name = written.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("sweep_") && name.ends_with("_reference_v1.csv"), "{name}");
    let plain = fs::read(&written).unwrap();
    assert_eq!(String::from_utf8_lossy(&plain).lines().count(), 7);

    let cold = dir.path().join("cold.csv");
    let warm = dir.path().join("warm.csv");
    assert_eq!(run(&cold, true).status.code(), Some(0));
    assert_eq!(read_dir_sorted(&cache).len(), 2);
    assert_eq!(run(&warm, true).status.code(), Some(0));
    assert_eq!(fs::read(&cold).unwrap(), plain);
    assert_eq!(fs::read(&warm).unwrap(), plain);

    // The environment variable stands in for --cache-dir.
    let env_cache = dir.path().join("env_cache");
    let o = Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(["sweep", "--manifest", &manifest, "--target-side", "24", "--k-max", "2", "--metric", "ssim", "--out"])
        .arg(dir.path().join("env.json"))
        .args(["--format", "json"])
        .env("PROMPTSEG_CACHE_DIR", &env_cache)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(read_dir_sorted(&env_cache).len(), 1);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("env.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_rejects_oversized_k_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 6, 2, 16, 0.02);
    let out = dir.path().join("r.csv");
    let o = promptseg(&["sweep", "--manifest", &manifest, "--k-min", "1", "--k-max", "500", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("500"));
    assert!(!out.exists());
}

#[test]
fn sweep_records_failed_cells_and_exits_nonzero() {
    let server = MockServer::start(|req| {
        if req.text("k").as_deref() == Some("2") {
            Response::error(502, "bad gateway")
        } else {
            Response::png(encode_luma8_png(16, 16, &[255; 256]).unwrap())
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 3, 2, 16, 0.02);
    let out = dir.path().join("r.csv");
    let o = promptseg(&[
        "sweep", "--manifest", &manifest, "--target-side", "16", "--k-max", "3", "--metric", "frobenius",
        "--backend", "remote", "--endpoint", &server.url, "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().nth(2).unwrap(), "2,frobenius,,0,");
    assert!(stdout(&o).contains("failed: k=2 metric=frobenius"));
}

#[test]
fn synth_subcommand_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = promptseg(&["synth", "--out", dir.path().to_str().unwrap(), "--n-train", "2", "--n-test", "1", "--side", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let o = promptseg(&["validate", "--manifest", stdout(&o).trim()]);
    assert!(stdout(&o).starts_with("train: 2, test: 1"));
}
