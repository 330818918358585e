mod common;

use std::path::Path;
use std::process::Command;

use csvddnet::cli::bundle::{read_matrix, ModelBundle};
use csvddnet::cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn run_args(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["csvddnet"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.conf");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    assert_eq!(run_args(&[]).0, EXIT_USAGE);
    assert_eq!(run_args(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(
        run_args(&["train-dict", "--out", "x.bin"]).0,
        EXIT_USAGE,
        "--config is required"
    );
    let (code, _, err) = run_args(&["train-dict", "--config", "/nonexistent.conf", "--out", "x.bin"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("nonexistent.conf"), "{err}");
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dictionary_size = 4\n");
    let (code, _, _) = run_args(&["train-dict", "--config", &cfg, "--threads", "0", "--out", "x.bin"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.bin");
    let out = out.to_str().unwrap();
    for body in [
        "colour = blue\n",
        "lambda = 1\nlambda = 2\n",
        "lambda = -1\n",
        "receptive_fields = five\n",
    ] {
        let cfg = write_config(dir.path(), body);
        let (code, _, err) = run_args(&["train-dict", "--config", &cfg, "--out", out]);
        assert_eq!(code, EXIT_USAGE, "{body:?}: {err}");
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.bin");
    let cfg = write_config(dir.path(), "dictionary_size = 4\n");
    let (code, _, err) = run_args(&["train-dict", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("train_images"), "{err}");

    let cfg = write_config(dir.path(), "train_images = missing.idx\n");
    let (code, _, err) = run_args(&["train-dict", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("does not exist"), "{err}");
    assert!(!out.exists());
}

#[test]
fn corrupt_model_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.bin");
    std::fs::write(&model, b"CSVDDNET garbage").unwrap();
    let (_, gt) = common::write_near_duplicate_set(dir.path(), 2, 1);
    let cfg = write_config(
        dir.path(),
        &format!("retrieval_images = images\nretrieval_truth = {}\n", gt.display()),
    );
    let (code, _, err) = run_args(&["retrieve", "--config", &cfg, "--model", model.to_str().unwrap()]);
    assert_eq!(code, EXIT_FAILURE, "{err}");
}

#[test]
fn binary_runs_retrieval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    common::write_near_duplicate_set(dir.path(), 4, 2);
    let cfg = write_config(
        dir.path(),
        "receptive_fields = 5\npooling_sizes = 2\nsift_blocks = 2\ndictionary_size = 6\npatches = 2000\n\
         retrieval_images = images\nretrieval_truth = truth.txt\nretrieval_dims = 4\n",
    );
    let exe = env!("CARGO_BIN_EXE_csvddnet");
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let steps: [Vec<String>; 4] = [
        vec!["train-dict".into(), "--out".into(), p("dict.bin")],
        vec![
            "fit-balls".into(),
            "--model".into(),
            p("dict.bin"),
            "--out".into(),
            p("balls.bin"),
        ],
        vec![
            "encode".into(),
            "--model".into(),
            p("balls.bin"),
            "--split".into(),
            "retrieval".into(),
            "--out".into(),
            p("desc.mat"),
        ],
        vec![
            "retrieve".into(),
            "--model".into(),
            p("balls.bin"),
            "--features".into(),
            p("desc.mat"),
            "--out".into(),
            p("map.txt"),
        ],
    ];
    let mut last_stdout = String::new();
    for step in &steps {
        let out = Command::new(exe).args(step).args(["--config", &cfg]).output().unwrap();
        assert!(
            out.status.success(),
            "{step:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        last_stdout = String::from_utf8(out.stdout).unwrap();
    }
    let bundle = ModelBundle::load(Path::new(&p("balls.bin"))).unwrap();
    assert_eq!(bundle.scales.len(), 1);
    assert!(bundle.scales[0].balls.is_some());
    let desc = read_matrix(Path::new(&p("desc.mat"))).unwrap();
    assert_eq!((desc.rows(), desc.cols()), (8, 6 * 2 * 2 * 8));
    let report = std::fs::read_to_string(p("map.txt")).unwrap();
    assert_eq!(report, last_stdout);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2, "{report}");
    assert!(lines[0].starts_with("dim=full map="));
    assert!(lines[1].starts_with("dim=4 map="));
}
