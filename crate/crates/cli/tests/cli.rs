use std::path::Path;
use std::process::{Command, Output};

use segkit::config::RunConfig;
use segkit::experiment::AblationConfig;

fn segkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segkit"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn printed_configs_parse_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let printed = stdout(&segkit(&["train", "--print-config"]));
    assert_eq!(
        RunConfig::from_json(&printed).unwrap(),
        RunConfig::default()
    );

    let file = dir.path().join("c.json");
    std::fs::write(
        &file,
        r#"{"arch": {"variant": "ifcn-b"}, "train": {"epochs": 3, "decay_epochs": [2]}}"#,
    )
    .unwrap();
    let printed = stdout(&segkit(&[
        "train",
        "--config",
        path(&file),
        "--print-config",
    ]));
    let cfg = RunConfig::from_json(&printed).unwrap();
    assert_eq!(cfg.train.epochs, 3);
    std::fs::write(&file, &printed).unwrap();
    assert_eq!(
        stdout(&segkit(&[
            "train",
            "--config",
            path(&file),
            "--print-config"
        ])),
        printed
    );

    let ablation = stdout(&segkit(&["ablate", "--print-config"]));
    assert_eq!(
        serde_json::from_str::<AblationConfig>(&ablation).unwrap(),
        AblationConfig::default()
    );
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"arhc": {}}"#).unwrap();
    let data = dir.path().join("data");
    let cases: Vec<Vec<&str>> = vec![
        vec!["analyze", "--spec", path(&empty)],
        vec!["analyze", "--spec", "builtin:vgg16", "--context", "4,2"],
        vec!["train", "--config", path(&empty)],
        vec!["train", "--config", path(&unknown)],
        vec!["gen-data", "--out", path(&data), "--count", "0"],
        vec!["count-params", "--convention", "biases"],
        vec![
            "eval",
            "--checkpoint",
            "/nonexistent/model.ckpt",
            "--data",
            path(&data),
        ],
    ];
    for args in cases {
        let out = segkit(&args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn all_convention_counts_at_least_the_context_weights() {
    let count = |conv: &str| -> u64 {
        let csv = stdout(&segkit(&["count-params", "--convention", conv]));
        csv.lines()
            .nth(1)
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(count("all") >= count("context-conv-weights"));
}

#[test]
fn oracle_logits_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"data": {"scene": {"canvas": 16}}}"#).unwrap();
    let data = dir.path().join("data");
    stdout(&segkit(&[
        "gen-data",
        "--config",
        path(&file),
        "--out",
        path(&data),
        "--count",
        "6",
    ]));
    let csv = stdout(&segkit(&["eval", "--data", path(&data), "--oracle-logits"]));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[2..5], ["1", "1", "1"]);
}

#[test]
fn gen_data_is_reproducible_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"data": {"scene": {"canvas": 16, "seed": 42}}}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        stdout(&segkit(&[
            "gen-data",
            "--config",
            path(&file),
            "--out",
            path(out),
            "--count",
            "4",
        ]));
    }
    for rel in ["meta.json", "images/000003.ppm", "labels/000002.pgm"] {
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["scene"]["seed"], 42);
    assert_eq!(meta["scene"]["canvas"], 16);
    assert_eq!(meta["count"], 4);
}

#[test]
fn train_outputs_load_back_for_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = serde_json::json!({
        "data": { "train_count": 6, "val_count": 4, "scene": { "canvas": 32 } },
        "train": { "epochs": 1, "decay_epochs": [], "canvas": 32 },
        "output_dir": out,
    });
    let file = dir.path().join("c.json");
    std::fs::write(&file, cfg.to_string()).unwrap();
    stdout(&segkit(&["train", "--config", path(&file)]));
    for f in ["train_log.csv", "metrics.csv", "model.ckpt", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let saved = RunConfig::from_file(&out.join("config.json")).unwrap();
    assert_eq!(saved.train.epochs, 1);

    let data = dir.path().join("data");
    stdout(&segkit(&[
        "gen-data",
        "--config",
        path(&file),
        "--out",
        path(&data),
    ]));
    let eval = stdout(&segkit(&[
        "eval",
        "--checkpoint",
        path(&out.join("model.ckpt")),
        "--data",
        path(&data),
    ]));
    assert!(eval.starts_with("epoch,split,pixel_acc,mean_acc,mean_iou,iou_0"));
}
