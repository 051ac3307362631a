use std::path::Path;
use std::process::{Command, Output};

fn hhgcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hhgcn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_LP: &str = r#"{
  "task": "lp",
  "dim": 4,
  "epochs": 10,
  "seed": 3,
  "dataset": {"source": {"kind": "tree", "depth": 3, "branching": 3, "noise_edges": 0.05}, "seed": 1}
}"#;

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = hhgcn(&["train", "--config", "no/such/config.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no/such/config.json"), "{}", stderr(&out));
}

#[test]
fn malformed_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"task": "lp", "dimm": 3}"#).unwrap();
    let out = hhgcn(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.json"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hhgcn(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(hhgcn(&["generate"], dir.path()).status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = hhgcn(&["selftest"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("7 of 7 suites passed"));
}

#[test]
fn generate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["tree", "classification"] {
        let mut trees = Vec::new();
        for run in ["a", "b"] {
            let out_dir = format!("{kind}_{run}");
            let out = hhgcn(
                &[
                    "generate", "--kind", kind, "--seed", "4", "--depth", "3", "--count", "5", "--out", &out_dir,
                ],
                dir.path(),
            );
            assert!(out.status.success(), "{}", stderr(&out));
            let mut files: Vec<_> = std::fs::read_dir(dir.path().join(&out_dir))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            let contents: Vec<_> = files
                .iter()
                .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
                .collect();
            trees.push(contents);
        }
        assert!(!trees[0].is_empty());
        assert_eq!(trees[0], trees[1], "{kind}");
    }
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("lp.json"), SMALL_LP).unwrap();
    let out = hhgcn(
        &[
            "train",
            "--config",
            "lp.json",
            "--out",
            "run",
            "--verbose",
            "--epochs",
            "6",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[5]["epoch"], 5);

    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/result.json")).unwrap()).unwrap();
    assert_eq!(result["config"]["epochs"], 6);
    assert_eq!(result["metric"], "auc");

    let out = hhgcn(&["eval", "--checkpoint", "run/checkpoint"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics, result["test"]);

    let out = hhgcn(
        &[
            "export-embeddings",
            "--checkpoint",
            "run/checkpoint",
            "--out",
            "emb.tsv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = std::fs::read_to_string(dir.path().join("emb.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.split('\t').count() == 1 + 5));
    for row in rows {
        let x: Vec<f64> = row.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
        let residual = -x[0] * x[0] + x[1..].iter().map(|v| v * v).sum::<f64>() + 1.0;
        assert!(residual.abs() < 1e-9 && x[0] > 0.0);
    }
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["lp_tree.json", "nc_tree.json", "gc_synthetic.json"] {
        let text = std::fs::read_to_string(configs.join(name)).unwrap();
        let cfg: hhgcn::runner::TrainConfig = serde_json::from_str(&text).unwrap();
        cfg.validate().unwrap();
    }
}
