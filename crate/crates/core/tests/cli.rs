use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentiformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small eight-class feature file and a checkpoint trained on it for one
/// epoch with a narrow model.
fn fixture(dir: &Path) -> (String, String) {
    let data = dir.join("d.jsonl");
    let o = run(&[
        "gen-synthetic",
        "--out",
        p(&data),
        "--per-class",
        "3",
        "--d-e",
        "16",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("small.cfg");
    std::fs::write(
        &cfg,
        "# narrow model\nd_h=16\nd_k=4\nd_s=8\nheads_self=4\nheads_cross=2\ndepth-n=1\ndepth_m=1\n",
    )
    .unwrap();
    let out = dir.join("run");
    let o = run(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (p(&data).to_string(), p(&out.join("model.ckpt")).to_string())
}

#[test]
fn help_lists_defaults() {
    let o = run(&["train", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for needle in [
        "[default: 0.0001]",
        "[default: 32]",
        "[default: 200]",
        "[default: 4]",
        "[default: 6]",
    ] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn unknown_flag_is_usage_error_with_suggestion() {
    let o = run(&["train", "--epoch", "3", "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--epochs"), "{}", stderr(&o));
}

#[test]
fn missing_data_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--data",
        p(&dir.path().join("nope.jsonl")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate=fast\n").unwrap();
    let o = run(&[
        "train",
        "--data",
        &data,
        "--out",
        p(&dir.path().join("o")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn flags_beat_file_and_file_beats_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "d_h=16\nd_k=4\nd_s=8\nheads_self=4\nheads_cross=2\ndepth_n=1\ndepth_m=1\nepochs=2\nbatch_size=7\n").unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "train",
        "--data",
        &data,
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("epochs=1\n"));
    assert!(text.contains("batch_size=7\n"));
    assert!(text.contains("learning_rate=0.0001\n"));
    assert!(text.contains("d_e=16\n"));
    let saved = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.contains(&saved));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn eval_predict_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let o = run(&["eval", "--model", &model, "--data", &data]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["confusion"].as_array().unwrap().len(), 8);

    let preds = dir.path().join("p.jsonl");
    let o = run(&[
        "predict",
        "--model",
        &model,
        "--data",
        &data,
        "--out",
        p(&preds),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 24);
    for r in &rows {
        let s: f64 = r["probabilities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    for (stage, width) in [("pre", 48), ("post", 16)] {
        let emb = dir.path().join(format!("{stage}.jsonl"));
        let o = run(&[
            "export-embeddings",
            "--model",
            &model,
            "--data",
            &data,
            "--stage",
            stage,
            "--out",
            p(&emb),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(&emb).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["vector"].as_array().unwrap().len(), width);
        assert_eq!(first["id"], "syn-00000");
        assert_eq!(text.lines().count(), 24);
    }
}

#[test]
fn class_count_mismatch_names_both_values() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let wide = dir.path().join("wide.jsonl");
    let o = run(&[
        "gen-synthetic",
        "--out",
        p(&wide),
        "--classes",
        "10",
        "--per-class",
        "1",
        "--d-e",
        "16",
    ]);
    assert!(o.status.success());
    let o = run(&["eval", "--model", &model, "--data", p(&wide)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("L >= 10") && err.contains("L = 8"), "{err}");
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let mut bytes = std::fs::read(&model).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&model, bytes).unwrap();
    let o = run(&["eval", "--model", &model, "--data", &data]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prompt_prints_template() {
    let o = run(&["prompt", "--scene", "beach", "--objects", "person,dog"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "the scene or background of the image is beach, and the image contains the following objects: person, dog\n"
    );
    let eleven: Vec<String> = (0..11).map(|i| format!("o{i}")).collect();
    let o = run(&["prompt", "--scene", "x", "--objects", &eleven.join(",")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_synthetic_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let o = run(&[
        "gen-synthetic",
        "--out",
        p(&a),
        "--test-out",
        p(&b),
        "--per-class",
        "10",
        "--classes",
        "10",
        "--d-e",
        "4",
        "--informative",
        "c,p",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let count = |x: &Path| std::fs::read_to_string(x).unwrap().lines().count();
    assert_eq!((count(&a), count(&b)), (80, 20));
    let o = run(&["gen-synthetic", "--out", p(&a), "--informative", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_negative_control() {
    let o = run(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["gradcheck", "--ablation", "no-caption"]);
    assert!(o.status.success(), "{}", stdout(&o));
}
