//! Staged pruning on random decoders.

use gradprune::model::{AttentionBackend, Model, ModelConfig, TokenSequence};
use gradprune::pipeline::{prefill_pruned, PipelineOptions, PruneSchedule, Selector};
use gradprune::tensor::{Matrix, NormKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    Model::init(ModelConfig {
        layers: rng.random_range(2..=5),
        hidden: heads * rng.random_range(2..=6),
        heads,
        ffn: rng.random_range(4..=24),
        vocab: rng.random_range(2..=9),
        max_seq: 40,
        norm_kind: if rng.random_bool(0.5) { NormKind::LayerNorm } else { NormKind::RmsNorm },
        seed: rng.random(),
    })
    .unwrap()
}

fn random_sequence(model: &Model, rng: &mut ChaCha8Rng) -> TokenSequence {
    let visual = rng.random_range(4..=28);
    let text = rng.random_range(1..=6);
    let e = Matrix::from_fn(visual + text, model.config.hidden, |_, _| rng.random_range(-1.5..1.5));
    TokenSequence::with_layout(e, visual).unwrap()
}

fn opts(selector: Selector, seed: u64) -> PipelineOptions {
    PipelineOptions {
        selector,
        seed,
        ..PipelineOptions::default()
    }
}

#[test]
fn keeping_everything_is_bitwise_the_plain_prefill() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..50 {
        let model = random_model(&mut rng);
        let seq = random_sequence(&model, &mut rng);
        let v = seq.visual_len();
        let layers: Vec<usize> = (1..model.config.layers).collect();
        let schedule = PruneSchedule::new(&layers, &vec![v; layers.len()], 1, 0.8).unwrap();
        let reference = model.prefill(&seq).unwrap();
        for selector in Selector::ALL {
            let out = prefill_pruned(&model, &seq, &schedule, &PipelineOptions {
                with_reference: true,
                ..opts(selector, 1)
            })
            .unwrap();
            let bits = |z: &[f64]| z.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&out.trace.final_logits), bits(&reference.logits), "{selector:?}");
            assert_eq!(out.trace.agreement, Some(true));
            assert_eq!(out.trace.kl_divergence, Some(0.0));
            assert_eq!(out.cache, reference.cache);
        }
    }
}

#[test]
fn empty_schedule_is_the_plain_prefill() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = random_model(&mut rng);
    let seq = random_sequence(&model, &mut rng);
    let schedule = PruneSchedule {
        kpos: 1,
        ..PruneSchedule::default()
    };
    let out = prefill_pruned(&model, &seq, &schedule, &opts(Selector::PioNms, 0)).unwrap();
    assert_eq!(out.trace.final_logits, model.prefill(&seq).unwrap().logits);
    assert!(out.trace.stages.is_empty());
    assert_eq!(out.trace.final_visual(), None);
}

#[test]
fn stages_shrink_to_the_schedule_and_keep_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..40 {
        let model = random_model(&mut rng);
        let seq = random_sequence(&model, &mut rng);
        let (v, n) = (seq.visual_len(), seq.len());
        let first = rng.random_range(1..model.config.layers);
        let layers: Vec<usize> = (first..model.config.layers).take(2).collect();
        let mut keeps = vec![rng.random_range(1..v)];
        if layers.len() == 2 {
            keeps.push(rng.random_range(0..keeps[0]));
        }
        let schedule = PruneSchedule::new(&layers, &keeps, 1, rng.random_range(0.0..1.0)).unwrap();
        for selector in Selector::ALL {
            let out = prefill_pruned(&model, &seq, &schedule, &opts(selector, 5)).unwrap();
            let after: Vec<usize> = out.trace.stages.iter().map(|s| s.visual_count_after).collect();
            assert_eq!(after, keeps);
            assert!(after.windows(2).all(|w| w[0] > w[1]));
            let last = model.config.layers - 1;
            let positions = out.cache.layer(last).positions();
            assert!((v..n).all(|t| positions.contains(&t)), "text dropped by {selector:?}");
            assert!(positions.iter().filter(|&&p| p < v).count() == *keeps.last().unwrap());
            for (s, stage) in out.trace.stages.iter().enumerate() {
                let entering = if s == 0 { v } else { keeps[s - 1] };
                assert_eq!(stage.scores.len(), entering);
                assert_eq!(stage.kept_absolute.len(), keeps[s]);
            }
        }
    }
}

#[test]
fn traces_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let model = random_model(&mut rng);
    let seq = random_sequence(&model, &mut rng);
    let schedule = PruneSchedule::new(&[1], &[seq.visual_len() / 2], 1, 0.8).unwrap();
    for selector in Selector::ALL {
        let run = |seed| {
            prefill_pruned(&model, &seq, &schedule, &PipelineOptions {
                with_reference: true,
                ..opts(selector, seed)
            })
            .unwrap()
            .trace
            .to_record()
        };
        assert_eq!(run(3), run(3));
        if selector == Selector::Random {
            let kept = |seed| {
                prefill_pruned(&model, &seq, &schedule, &opts(selector, seed))
                    .unwrap()
                    .trace
                    .final_visual()
            };
            assert!((4..20).any(|s| kept(s) != kept(3)), "random selector ignores its seed");
        }
    }
}

#[test]
fn streaming_attention_selects_the_same_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..20 {
        let dense = random_model(&mut rng);
        let streaming = dense.clone().with_backend(AttentionBackend::Streaming);
        let seq = random_sequence(&dense, &mut rng);
        let schedule = PruneSchedule::new(&[1], &[seq.visual_len() / 2], 1, 0.8).unwrap();
        for selector in [Selector::PioNms, Selector::Topk, Selector::HiddenNorm, Selector::AttnTail] {
            let a = prefill_pruned(&dense, &seq, &schedule, &opts(selector, 0)).unwrap().trace;
            let b = prefill_pruned(&streaming, &seq, &schedule, &opts(selector, 0)).unwrap().trace;
            assert_eq!(a.stages[0].kept_absolute, b.stages[0].kept_absolute, "{selector:?}");
            let diff = a
                .final_logits
                .iter()
                .zip(&b.final_logits)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10);
        }
    }
}

#[test]
fn bad_schedules_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let model = random_model(&mut rng);
    let seq = random_sequence(&model, &mut rng);
    let v = seq.visual_len();
    let o = opts(Selector::PioNms, 0);
    let too_deep = PruneSchedule::new(&[model.config.layers], &[1], 1, 0.8).unwrap();
    assert!(prefill_pruned(&model, &seq, &too_deep, &o).is_err());
    let too_many = PruneSchedule::new(&[1], &[v + 1], 1, 0.8).unwrap();
    assert!(prefill_pruned(&model, &seq, &too_many, &o).is_err());
    let wide_window = PruneSchedule::new(&[1], &[1], seq.text_len() + 1, 0.8).unwrap();
    assert!(prefill_pruned(&model, &seq, &wide_window, &o).is_err());
    assert!(PruneSchedule::new(&[0], &[1], 1, 0.8).is_err());
    assert!(PruneSchedule::new(&[2, 1], &[2, 1], 1, 0.8).is_err());
    assert!(PruneSchedule::new(&[1, 2], &[1, 2], 1, 0.8).is_err());
}
