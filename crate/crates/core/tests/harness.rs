//! Harness behaviour that does not depend on a trained model.

use gradprune::harness::experiment::{
    count_above_mean, rows_to_jsonl, run_experiment_with_traces, saliency_stats, write_jsonl,
};
use gradprune::harness::train::{accuracy, sample_gradient};
use gradprune::harness::{
    generate_task, run_experiment, sweep, train_toy, ExperimentConfig, Split, SweepAxis, TaskSpec, TrainConfig,
};
use gradprune::model::{Model, ModelWeights};
use gradprune::pipeline::Selector;
use gradprune::proxy::HeadNorm;
use gradprune::tensor::l2_norm_rows;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_seq: 40,
        visual_count: 24,
        planted_count: 2,
        lure_count: 2,
        text_len: 3,
        samples: 30,
        train_samples: 40,
        heldout_samples: 20,
        epochs: 2,
        budget: Some(6),
        kpos: 2,
        ..ExperimentConfig::default()
    }
}

fn untrained(cfg: &ExperimentConfig) -> Model {
    Model::init(cfg.model_config()).unwrap()
}

#[test]
fn planted_norms_follow_the_construction_scale() {
    let mut previous = 0.0;
    for scale in [1.0, 1.5, 2.0, 3.0] {
        let data = generate_task(&TaskSpec {
            planted_scale: scale,
            samples: 60,
            ..TaskSpec::default()
        })
        .unwrap();
        // histogram of row norms in bins of 0.25, planted and other rows apart
        let bins = 24;
        let (mut planted, mut other) = (vec![0usize; bins], vec![0usize; bins]);
        let (mut psum, mut pcount) = (0.0, 0usize);
        let mut other_max: f64 = 0.0;
        for s in &data.samples {
            let norms = l2_norm_rows(s.seq.embeddings());
            for (r, &nrm) in norms[..s.seq.visual_len()].iter().enumerate() {
                let bin = ((nrm / 0.25) as usize).min(bins - 1);
                if s.planted.contains(&r) {
                    planted[bin] += 1;
                    psum += nrm;
                    pcount += 1;
                } else {
                    other[bin] += 1;
                    other_max = other_max.max(nrm);
                }
            }
        }
        assert_eq!(pcount, 60 * 4);
        let mean = psum / pcount as f64;
        let unit = (1.0f64 + 0.7 * 0.7 + 0.1 * 0.1).sqrt();
        assert!((mean / unit - scale).abs() < 0.05 * scale, "scale {scale}: mean planted norm {mean}");
        assert!(mean > previous);
        previous = mean;
        let mode = |h: &[usize]| (0..bins).max_by_key(|&b| h[b]).unwrap();
        if scale >= 2.0 {
            assert!(mode(&planted) > mode(&other));
            let lowest_planted = planted.iter().position(|&c| c > 0).unwrap();
            assert!(lowest_planted as f64 * 0.25 >= other_max - 0.25);
        }
    }
}

#[test]
fn splits_share_the_world_but_not_samples() {
    let cfg = ExperimentConfig::default();
    let train = generate_task(&cfg.task_spec(Split::Train)).unwrap();
    let eval = generate_task(&cfg.task_spec(Split::Eval)).unwrap();
    assert_eq!(train.len(), cfg.train_samples);
    assert_eq!(eval.len(), cfg.samples);
    let text = |d: &gradprune::harness::Dataset| d.samples[0].seq.embeddings().row(cfg.visual_count).to_vec();
    assert_eq!(text(&train), text(&eval));
    assert_ne!(train.samples[0].seq, eval.samples[0].seq);
    assert_eq!(eval, generate_task(&cfg.task_spec(Split::Eval)).unwrap());
}

#[test]
fn config_files_are_flat_and_strict() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_toml();
    assert!(!text.lines().any(|l| l.trim_start().starts_with('[')), "nested table in\n{text}");
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("budgett = 3").is_err());
    assert!(ExperimentConfig::from_toml("tau = \"high\"").is_err());
    let partial = ExperimentConfig::from_toml("kpos = 2\nselectors = [\"random\"]").unwrap();
    assert_eq!(partial.kpos, 2);
    assert_eq!(partial.selectors, vec![Selector::Random]);
    assert_eq!(partial.layers, cfg.layers);
}

#[test]
fn random_recall_is_the_budget_fraction() {
    let cfg = ExperimentConfig {
        selectors: vec![Selector::Random],
        samples: 100,
        trials: 5,
        ..ExperimentConfig::default()
    };
    let model = untrained(&cfg);
    let data = generate_task(&cfg.task_spec(Split::Eval)).unwrap();
    let rows = run_experiment(&cfg, &model, &data).unwrap();
    let draws = (rows[0].samples * rows[0].trials) as f64;
    assert!(draws >= 500.0);
    // hypergeometric variance of the planted count among 16 of 64, scaled to recall
    let (n, k, total) = (16.0, 4.0, 64.0);
    let var = n * (k / total) * (1.0 - k / total) * (total - n) / (total - 1.0) / (k * k);
    let sigma = (var / draws).sqrt();
    let expected = 16.0 / 64.0;
    assert!(
        (rows[0].planted_recall - expected).abs() <= 3.0 * sigma,
        "recall {} vs {expected} (sigma {sigma})",
        rows[0].planted_recall
    );
}

#[test]
fn full_budget_keeps_outputs_exact() {
    let cfg = ExperimentConfig {
        budget: Some(24),
        prune_layers: vec![1],
        ..small_config()
    };
    let model = untrained(&cfg);
    let data = generate_task(&cfg.task_spec(Split::Eval)).unwrap();
    for row in run_experiment(&cfg, &model, &data).unwrap() {
        assert_eq!(row.agreement_rate, 1.0, "{:?}", row.selector);
        assert_eq!(row.mean_kl, 0.0);
        assert_eq!(row.planted_recall, 1.0);
    }
}

#[test]
fn report_rows_carry_every_field() {
    let cfg = small_config();
    let model = untrained(&cfg);
    let data = generate_task(&cfg.task_spec(Split::Eval)).unwrap();
    let rows = run_experiment(&cfg, &model, &data).unwrap();
    assert_eq!(rows.len(), Selector::ALL.len());
    let expected = [
        "agreement_rate",
        "budget",
        "budget_fraction",
        "flops_baseline",
        "flops_saved",
        "flops_total",
        "kpos",
        "kv_bytes",
        "kv_bytes_baseline",
        "mean_kl",
        "planted_recall",
        "samples",
        "seed",
        "selector",
        "stage_keeps",
        "stage_layers",
        "tau",
        "trials",
    ];
    for line in rows_to_jsonl(&rows).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, expected);
        assert!(v.as_object().unwrap().values().all(|x| !x.is_null()));
    }
}

#[test]
fn parallel_and_serial_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        traces: Some(dir.path().join("t.jsonl")),
        ..small_config()
    };
    let model = untrained(&cfg);
    let data = generate_task(&cfg.task_spec(Split::Eval)).unwrap();
    let mut outputs = Vec::new();
    for parallel in [true, false, true] {
        cfg.parallel = parallel;
        let (rows, traces) = run_experiment_with_traces(&cfg, &model, &data).unwrap();
        assert_eq!(traces.len(), data.len() * Selector::ALL.len());
        let path = dir.path().join(format!("traces-{}.jsonl", outputs.len()));
        write_jsonl(&path, &traces).unwrap();
        outputs.push((rows_to_jsonl(&rows), std::fs::read(&path).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn sweep_identities() {
    let cfg = small_config();
    let model = untrained(&cfg);
    let data = generate_task(&cfg.task_spec(Split::Eval)).unwrap();

    let single = sweep(&cfg, &model, &data, SweepAxis::Budget, &[6.0]).unwrap();
    let direct = run_experiment(&cfg, &model, &data).unwrap();
    assert_eq!(single.iter().map(|e| e.row.clone()).collect::<Vec<_>>(), direct);

    let tau = sweep(&cfg, &model, &data, SweepAxis::Tau, &[0.8, 1.01]).unwrap();
    assert_eq!(tau.len(), 3);
    let (vague, none) = (&tau[1].row, &tau[2].row);
    assert_eq!(tau[2].value, "no-nms");
    assert_eq!(vague.agreement_rate.to_bits(), none.agreement_rate.to_bits());
    assert_eq!(vague.mean_kl.to_bits(), none.mean_kl.to_bits());
    assert_eq!(vague.planted_recall.to_bits(), none.planted_recall.to_bits());

    assert!(sweep(&cfg, &model, &data, SweepAxis::Kpos, &[1.5]).is_err());
    assert!(sweep(&cfg, &model, &data, SweepAxis::Kpos, &[]).is_err());
}

#[test]
fn saliency_statistics() {
    assert_eq!(count_above_mean(&[1.0, 1.0, 1.0, 5.0]), 1);
    assert_eq!(count_above_mean(&[0.5; 4]), 0);
    let cfg = small_config();
    let model = untrained(&cfg);
    let data = generate_task(&cfg.task_spec(Split::Eval)).unwrap();
    let stats = saliency_stats(&model, &data, &[1, 2], 2, HeadNorm::Final).unwrap();
    assert_eq!(stats.len(), 2);
    for s in &stats {
        assert!(s.mean_above_mean > 0.0 && s.mean_above_mean < 24.0);
        assert!((0.0..=1.0).contains(&s.planted_share));
    }
    assert!(saliency_stats(&model, &data, &[0], 2, HeadNorm::Final).is_err());
    assert!(saliency_stats(&model, &data, &[3], 2, HeadNorm::Final).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let cfg = small_config();
    let train = generate_task(&cfg.task_spec(Split::Train)).unwrap();
    let heldout = generate_task(&cfg.task_spec(Split::Heldout)).unwrap();
    let out = train_toy(
        cfg.model_config(),
        &train,
        &heldout,
        &TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..cfg.train_config()
        },
    )
    .unwrap();
    assert_eq!(out.model.weights, untrained(&cfg).weights);
    assert_eq!(out.heldout_accuracy, accuracy(&untrained(&cfg), &heldout).unwrap());
}

#[test]
fn training_reduces_the_loss() {
    let cfg = small_config();
    let train = generate_task(&cfg.task_spec(Split::Train)).unwrap();
    let heldout = generate_task(&cfg.task_spec(Split::Heldout)).unwrap();
    let loss = |m: &Model| {
        let mut g = ModelWeights::zeros(&m.config);
        train
            .samples
            .iter()
            .map(|s| sample_gradient(m, s, cfg.class_count, 1.0, &mut g).unwrap())
            .sum::<f64>()
            / train.len() as f64
    };
    let before = loss(&untrained(&cfg));
    let out = train_toy(
        cfg.model_config(),
        &train,
        &heldout,
        &TrainConfig {
            epochs: 6,
            ..cfg.train_config()
        },
    )
    .unwrap();
    let after = loss(&out.model);
    assert!(after < 0.8 * before, "loss {before} -> {after}");
    assert!(out.epoch_losses.first() > out.epoch_losses.last());
    // same seed, same weights
    let again = train_toy(
        cfg.model_config(),
        &train,
        &heldout,
        &TrainConfig {
            epochs: 6,
            ..cfg.train_config()
        },
    )
    .unwrap();
    assert_eq!(again.model.weights, out.model.weights);
}

#[test]
fn training_rejects_mismatched_tasks() {
    let cfg = small_config();
    let train = generate_task(&cfg.task_spec(Split::Train)).unwrap();
    let wide = gradprune::model::ModelConfig {
        hidden: 32,
        ..cfg.model_config()
    };
    assert!(train_toy(wide, &train, &train, &cfg.train_config()).is_err());
    let narrow_vocab = gradprune::model::ModelConfig {
        vocab: 6,
        ..cfg.model_config()
    };
    assert!(train_toy(narrow_vocab, &train, &train, &cfg.train_config()).is_err());
}
