//! End-to-end CLI contract tests, run in-process through `run_cli`.

use std::fs;
use std::path::PathBuf;

use protoquad::cli::run_cli;
use protoquad::io;
use protoquad::workflows::{synthetic_logistic, SyntheticSpec};

struct Dir(PathBuf);

impl Dir {
    fn new(name: &str) -> Self {
        let path =
            std::env::temp_dir().join(format!("protoquad_cli_{}_{}", std::process::id(), name));
        fs::create_dir_all(&path).unwrap();
        Dir(path)
    }

    fn path(&self, name: &str) -> String {
        self.0.join(name).display().to_string()
    }
}

impl Drop for Dir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn fixture(dir: &Dir) -> (String, String) {
    let spec = SyntheticSpec {
        train: 60,
        validation: 10,
        test: 25,
        dim: 12,
        param_scale: 2.0,
        density: 1.0,
        frequency_decay: 0.0,
        positive_rate: 0.5,
        clusters: 0,
        cluster_decay: 1.0,
        cluster_jitter: 0.1,
    };
    let (train, _, test) = synthetic_logistic(&spec, 12);
    let train_csv = dir.path("train.csv");
    let test_csv = dir.path("test.csv");
    io::save_dataset(&train, train_csv.as_ref()).unwrap();
    io::save_dataset(&test, test_csv.as_ref()).unwrap();
    (train_csv, test_csv)
}

#[test]
fn select_writes_requested_number_of_prototypes() {
    let dir = Dir::new("select");
    let (train_csv, test_csv) = fixture(&dir);
    let out = dir.path("report.json");
    let code = run_cli(&[
        "protoquad",
        "select",
        "--train",
        &train_csv,
        "--test",
        &test_csv,
        "--k",
        "10",
        "--mode",
        "full",
        "--seed",
        "7",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["selections"].as_array().unwrap().len(), 10);
    assert_eq!(report["method"], "sbq");
    assert_eq!(report["truncated"], false);
    assert_eq!(report["weights"].as_array().unwrap().len(), 10);
}

#[test]
fn select_accepts_precomputed_embeddings() {
    let dir = Dir::new("grads");
    let (train_csv, _) = fixture(&dir);
    let model = dir.path("model.json");
    assert_eq!(
        run_cli(&["protoquad", "train", "--data", &train_csv, "--out", &model]),
        0
    );
    let train_fg = dir.path("train.fg");
    let test_fg = dir.path("test.fg");
    assert_eq!(
        run_cli(&[
            "protoquad",
            "embed",
            "--data",
            &train_csv,
            "--model",
            &model,
            "--out",
            &train_fg
        ]),
        0
    );
    // A disjoint "test side" via predicted-label embeddings of the same file
    // keeps the fixture small.
    assert_eq!(
        run_cli(&[
            "protoquad",
            "embed",
            "--data",
            &train_csv,
            "--model",
            &model,
            "--predicted-labels",
            "--out",
            &test_fg,
        ]),
        0
    );
    let out = dir.path("report.json");
    let code = run_cli(&[
        "protoquad",
        "select",
        "--train-grads",
        &train_fg,
        "--test-grads",
        &test_fg,
        "--k",
        "4",
        "--mode",
        "practical",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["selections"].as_array().unwrap().len(), 4);
}

#[test]
fn select_dumps_kernel_matrix_on_request() {
    let dir = Dir::new("dump");
    let (train_csv, test_csv) = fixture(&dir);
    let out = dir.path("report.json");
    let dump = dir.path("kernel.csv");
    let code = run_cli(&[
        "protoquad",
        "select",
        "--train",
        &train_csv,
        "--test",
        &test_csv,
        "--k",
        "3",
        "--out",
        &out,
        "--dump-kernel",
        &dump,
    ]);
    assert_eq!(code, 0);
    let content = fs::read_to_string(&dump).unwrap();
    assert_eq!(content.lines().count(), 60);
    assert_eq!(content.lines().next().unwrap().split(',').count(), 60);
}

#[test]
fn diagnose_appendix_prints_table_and_exits_zero() {
    let dir = Dir::new("diag");
    let out = dir.path("diag.json");
    let code = run_cli(&[
        "protoquad",
        "diagnose",
        "--suite",
        "appendix",
        "--seed",
        "1",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let names: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        vec![
            "orthogonal-projection",
            "mmd-equivalence",
            "theorem-bound",
            "submodularity-ratio"
        ]
    );
    assert_eq!(report["all_passed"], true);
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run_cli(&["protoquad", "select", "--bogus"]), 2);
    assert_eq!(run_cli(&["protoquad", "frobnicate"]), 2);
}

#[test]
fn domain_errors_exit_one() {
    let dir = Dir::new("badcsv");
    let bad = dir.path("bad.csv");
    fs::write(&bad, "x,y\n1,2\n").unwrap(); // no label column
    let out = dir.path("model.json");
    assert_eq!(
        run_cli(&["protoquad", "train", "--data", &bad, "--out", &out]),
        1
    );

    // Mixing CSV and embedding inputs is rejected by the parser (exit 2).
    let (train_csv, _) = fixture(&dir);
    assert_eq!(
        run_cli(&[
            "protoquad",
            "select",
            "--train",
            &train_csv,
            "--train-grads",
            "x.fg",
            "--k",
            "2",
            "--out",
            &out,
        ]),
        2
    );
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let dir = Dir::new("repeat");
    let (train_csv, test_csv) = fixture(&dir);
    let mut bodies = Vec::new();
    for run in 0..2 {
        let out = dir.path(&format!("r{run}.json"));
        let code = run_cli(&[
            "protoquad",
            "select",
            "--train",
            &train_csv,
            "--test",
            &test_csv,
            "--k",
            "6",
            "--method",
            "distributed",
            "--partitions",
            "3",
            "--seed",
            "9",
            "--out",
            &out,
        ]);
        assert_eq!(code, 0);
        bodies.push(fs::read(&out).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run_cli(&["protoquad", "--help"]), 0);
    assert_eq!(run_cli(&["protoquad", "--version"]), 0);
    assert_eq!(run_cli(&["protoquad", "select", "--help"]), 0);
}
