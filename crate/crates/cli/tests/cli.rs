use std::path::Path;
use std::process::{Command, Output};

use gradprune::harness::ExperimentConfig;
use gradprune::{checkpoint, Model};

fn gradprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradprune"))
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

/// A small config next to an untrained checkpoint.
fn setup(dir: &Path) -> String {
    let cfg = ExperimentConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_seq: 40,
        visual_count: 24,
        planted_count: 2,
        lure_count: 2,
        text_len: 3,
        kpos: 2,
        samples: 12,
        train_samples: 24,
        heldout_samples: 8,
        epochs: 1,
        budget: Some(6),
        ..ExperimentConfig::default()
    };
    checkpoint::save(dir.join("toy.gpck"), &Model::init(cfg.model_config()).unwrap()).unwrap();
    let path = dir.join("run.toml");
    // the default relative checkpoint path resolves next to the config file
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn cost_reproduces_the_reference_total() {
    let o = gradprune(&[
        "cost", "--hidden", "4096", "--ffn", "11008", "--layers", "32", "--schedule", "1,10,15", "--tokens",
        "576,576,576,576", "--bytes-per-element", "2", "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["f_base"].as_u64(), Some(2_986_076_012_544));
    assert_eq!(v["f_inf"].as_u64(), Some(2_986_076_012_544));

    let table = gradprune(&["cost", "--hidden", "4096", "--ffn", "11008", "--layers", "32", "--schedule", "1", "--tokens", "576,144"]);
    assert!(table.status.success());
    assert!(stdout(&table).contains("F_total"));
}

#[test]
fn cost_needs_schedule_and_tokens_together() {
    let o = gradprune(&["cost", "--schedule", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("together"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "kpos = 2\nbudgget = 4\n").unwrap();
    let o = gradprune(&["--config", path.to_str().unwrap(), "cost"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("budgget"), "{}", stderr(&o));
}

#[test]
fn prune_eval_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let mut reports = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = dir.path().join(name);
        let o = gradprune(&["--config", &config, "--out", out.to_str().unwrap(), "prune-eval"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("pio-nms"));
        reports.push(std::fs::read(out).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(String::from_utf8_lossy(&reports[0]).lines().count(), 5);
}

#[test]
fn sweep_and_stats_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = dir.path().join("sweep.jsonl");
    let o = gradprune(&[
        "--config", &config, "--out", out.to_str().unwrap(), "sweep", "--axis", "tau", "--values", "0.5,1.01",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("no-nms"));

    let o = gradprune(&["--config", &config, "stats", "--layers", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);

    let o = gradprune(&["--config", &config, "sweep", "--axis", "depth", "--values", "1"]);
    assert!(!o.status.success());
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let ckpt = dir.path().join("trained.gpck");
    let o = gradprune(&["--config", &config, "--out", ckpt.to_str().unwrap(), "--seed", "5", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("held-out accuracy"));
    let model = checkpoint::load(&ckpt).unwrap();
    assert_eq!(model.config.hidden, 16);
}
