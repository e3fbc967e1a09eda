use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use samrec::dataset::{build_sequences, five_core_filter, ingest, SequenceDataset};

fn samrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samrec"))
        .args(args)
        .env_remove("SAMREC_SEED")
        .env_remove("SAMREC_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = samrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn arg(key: &str, value: impl std::fmt::Display) -> String {
    format!("--{key}={value}")
}

/// Small synthetic data plus a tiny model so every command runs in seconds.
fn small_config(dir: &Path) -> String {
    let text = "\
synthetic.num_users = 60
synthetic.num_items = 30
synthetic.seq_len = 12
data.max_len = 8
model.dim = 8
model.num_layers = 1
train.epochs = 2
train.batch_size = 32
landscape.positions = 200
";
    let path = dir.join("small.conf");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn synthetic_into(dir: &Path) -> (String, String) {
    let conf = small_config(dir);
    let out = dir.join("data").display().to_string();
    ok(&["--config", &conf, "synthetic", &arg("output_dir", &out)]);
    (conf, format!("{out}/dataset.bin"))
}

#[test]
fn synthetic_train_eval_landscape_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (conf, data) = synthetic_into(tmp.path());
    let run = tmp.path().join("run").display().to_string();
    let common = ["--config", &conf];
    let flags = [arg("data.path", &data), arg("output_dir", &run)];
    let with = |cmd: &[&str]| -> Vec<String> {
        common
            .iter()
            .map(|s| s.to_string())
            .chain(cmd.iter().map(|s| s.to_string()))
            .chain(flags.iter().cloned())
            .collect()
    };
    let call = |cmd: &[&str]| {
        let v = with(cmd);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let line = call(&["train"]);
    let fields: Vec<&str> = line.trim().split('\t').collect();
    assert_eq!(fields[..3], ["dataset", "samrec", "0"]);
    let run_dir = Path::new(&run);
    for f in [
        "checkpoint.bin",
        "train_state.bin",
        "train_log.jsonl",
        "config.txt",
        "eval_test.json",
        "results.tsv",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run_dir.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    call(&["eval", "--split", "valid"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("eval_valid.json")).unwrap())
            .unwrap();
    assert_eq!(report["num_users_evaluated"], 60);

    call(&["landscape"]);
    let csv = fs::read(run_dir.join("landscape.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 1 + 41 * 41);
    call(&["landscape"]);
    assert_eq!(fs::read(run_dir.join("landscape.csv")).unwrap(), csv);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("landscape.json")).unwrap()).unwrap();
    assert_eq!(meta["normalization"], "filter");

    // resuming a finished run with more epochs appends to the log
    let mut resume = with(&["train", "--resume"]);
    resume.push(arg("train.epochs", 3));
    ok(&resume.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        fs::read_to_string(run_dir.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn preprocess_is_deterministic_and_counts_match() {
    let tmp = tempfile::tempdir().unwrap();
    let (conf, _) = synthetic_into(tmp.path());
    let raw = tmp.path().join("data/synthetic.tsv");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name).display().to_string();
        ok(&[
            "--config",
            &conf,
            "preprocess",
            "--input",
            &raw.display().to_string(),
            &arg("output_dir", &out),
        ]);
        outputs.push(fs::read(tmp.path().join(name).join("dataset.bin")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let ds = SequenceDataset::from_bytes(&outputs[0]).unwrap();
    let expected = build_sequences(&five_core_filter(&ingest(&raw).unwrap()), 8).unwrap();
    assert_eq!(ds, expected);
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("a/dataset_summary.json")).unwrap(),
    )
    .unwrap();
    let total: usize = ds.sequences().iter().map(Vec::len).sum();
    assert_eq!(summary["num_interactions"], total);
    assert_eq!(summary["num_users"], ds.num_users());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = arg("output_dir", tmp.path().display());
    let missing = tmp.path().join("nope.tsv").display().to_string();
    assert_eq!(
        samrec(&["preprocess", "--input", &missing, &out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        samrec(&["train", "--no-such-flag", &out]).status.code(),
        Some(1)
    );
    assert_eq!(
        samrec(&["train", "--sam.nope=1", &out]).status.code(),
        Some(1)
    );
    assert_eq!(
        samrec(&["train", "--sam.rho=abc", &out]).status.code(),
        Some(1)
    );
    assert_eq!(samrec(&["train", &out]).status.code(), Some(1));

    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "u1\ti1\t1\nu1\ti2\n").unwrap();
    let res = samrec(&["preprocess", "--input", &bad.display().to_string(), &out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains(":2"));
    assert_eq!(samrec(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("c.conf");
    fs::write(&conf, "sam.rho = 0.2\nseed = 3\n").unwrap();
    let text = ok(&[
        "--config",
        &conf.display().to_string(),
        "--seed=9",
        "--list-keys",
    ]);
    assert!(text.contains("\nsam.rho = 0.2\n"));
    assert!(text.contains("\nseed = 9\n"));
}

#[test]
fn sweep_rho_runs_the_default_radii() {
    let tmp = tempfile::tempdir().unwrap();
    let (conf, data) = synthetic_into(tmp.path());
    let run = tmp.path().join("sweep");
    ok(&[
        "--config",
        &conf,
        "sweep-rho",
        &arg("data.path", &data),
        &arg("output_dir", run.display()),
        "--train.epochs=1",
    ]);
    let table = fs::read_to_string(run.join("sweep_rho.tsv")).unwrap();
    let rhos: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(rhos, ["0.001", "0.01", "0.1", "1", "10"]);
    assert!(table.lines().skip(1).all(|l| l.ends_with("\tok")));
    assert_eq!(
        fs::read_to_string(run.join("sweep_rho.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn data_efficiency_shares_the_test_split() {
    let tmp = tempfile::tempdir().unwrap();
    let (conf, data) = synthetic_into(tmp.path());
    let run = tmp.path().join("eff");
    ok(&[
        "--config",
        &conf,
        "data-efficiency",
        &arg("data.path", &data),
        &arg("output_dir", run.display()),
        "--train.epochs=1",
    ]);
    let table = fs::read_to_string(run.join("data_efficiency.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    let fractions: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(fractions, ["0.6", "0.6", "0.8", "0.8", "1", "1"]);
    let variants: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(
        variants,
        ["sasrec", "samrec", "sasrec", "samrec", "sasrec", "samrec"]
    );
    assert!(rows.iter().all(|r| r[4] == rows[0][4]));
}
