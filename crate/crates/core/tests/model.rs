//! Decoder behaviour seen from outside: causality, key masking versus row
//! removal, incremental decoding, cache bookkeeping and MAC accounting.

use gradprune::cost::{block_flops, CostConfig};
use gradprune::model::{AttentionBackend, Model, ModelConfig, Segment, TokenSequence};
use gradprune::pipeline::{prefill_pruned, PipelineOptions, PruneSchedule, Selector};
use gradprune::tensor::{mac_counter, Matrix, NormKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, norm_kind: NormKind) -> Model {
    Model::init(ModelConfig {
        layers: 3,
        hidden: 16,
        heads: 4,
        ffn: 24,
        vocab: 6,
        max_seq: 32,
        norm_kind,
        seed,
    })
    .unwrap()
}

fn embeddings(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn later_tokens_do_not_change_earlier_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(3, NormKind::LayerNorm);
    let e = embeddings(12, 16, &mut rng);
    let mut changed = e.clone();
    for c in 0..16 {
        changed.set(9, c, rng.random_range(-3.0..3.0));
    }
    let a = m.prefill(&TokenSequence::with_layout(e, 8).unwrap()).unwrap();
    let b = m.prefill(&TokenSequence::with_layout(changed, 8).unwrap()).unwrap();
    for (ha, hb) in a.hidden.iter().zip(&b.hidden) {
        for r in 0..9 {
            assert_eq!(ha.values.row(r), hb.values.row(r), "row {r} layer {}", ha.layer);
        }
        assert_ne!(ha.values.row(9), hb.values.row(9));
    }
}

#[test]
fn masking_keys_equals_removing_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (trial, kind) in [NormKind::LayerNorm, NormKind::RmsNorm].into_iter().enumerate() {
        let m = model(10 + trial as u64, kind);
        let n = 14;
        let e = embeddings(n, 16, &mut rng);
        let seq = TokenSequence::with_layout(e.clone(), 10).unwrap();
        let excluded: Vec<bool> = (0..n).map(|i| i < 10 && rng.random_bool(0.4)).collect();
        let masked = m.prefill_with_key_mask(&seq, &excluded).unwrap();

        let kept: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
        let visual = kept.iter().filter(|&&i| i < 10).count();
        let segments = (0..kept.len())
            .map(|i| if i < visual { Segment::Visual } else { Segment::Text })
            .collect();
        let compact = TokenSequence::new(e.select_rows(&kept), segments, kept.clone()).unwrap();
        let removed = m.prefill(&compact).unwrap();

        assert!(max_diff(&masked.logits, &removed.logits) < 1e-12);
        for (hm, hr) in masked.hidden.iter().zip(&removed.hidden) {
            for (row, &orig) in kept.iter().enumerate() {
                assert!(max_diff(hm.values.row(orig), hr.values.row(row)) < 1e-12);
            }
        }
    }
}

#[test]
fn decode_step_matches_a_longer_prefill() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for backend in [AttentionBackend::Dense, AttentionBackend::Streaming] {
        let m = model(4, NormKind::LayerNorm).with_backend(backend);
        let e = embeddings(11, 16, &mut rng);
        let full = m.prefill(&TokenSequence::with_layout(e.clone(), 6).unwrap()).unwrap();

        let prefix: Vec<usize> = (0..9).collect();
        let seq = TokenSequence::with_layout(e.select_rows(&prefix), 6).unwrap();
        let mut cache = m.prefill(&seq).unwrap().cache;
        m.decode_step(&mut cache, e.row(9), 9).unwrap();
        let logits = m.decode_step(&mut cache, e.row(10), 10).unwrap();
        assert!(max_diff(&logits, &full.logits) < 1e-10, "{backend:?}");
        assert_eq!(cache.lengths(), vec![11; 3]);
        assert!(m.decode_step(&mut cache, e.row(10), 10).is_err());
    }
}

#[test]
fn pruned_cache_holds_only_surviving_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Model::init(ModelConfig {
        layers: 5,
        ..model(6, NormKind::RmsNorm).config
    })
    .unwrap();
    let seq = TokenSequence::with_layout(embeddings(20, 16, &mut rng), 16).unwrap();
    let schedule = PruneSchedule::new(&[1, 3], &[10, 4], 2, 0.8).unwrap();
    for selector in Selector::ALL {
        let opts = PipelineOptions {
            selector,
            seed: 9,
            ..PipelineOptions::default()
        };
        let out = prefill_pruned(&m, &seq, &schedule, &opts).unwrap();
        assert_eq!(out.cache.lengths(), vec![20, 14, 14, 8, 8], "{selector:?}");
        let last = out.trace.final_visual().unwrap();
        let mut expect = last.clone();
        expect.extend(16..20);
        assert_eq!(out.cache.layer(4).positions(), &expect[..]);
        // the second stage picks from the survivors of the first
        let first: Vec<usize> = out.trace.stages[0].kept_absolute.clone();
        assert!(last.iter().all(|p| first.contains(p)));

        // decoding continues after the pruned prefix
        let mut cache = out.cache;
        m.decode_step(&mut cache, &[0.1; 16], 20).unwrap();
        assert_eq!(cache.lengths(), vec![21, 15, 15, 9, 9]);
    }
}

#[test]
fn block_macs_match_the_closed_form() {
    let m = Model::init(ModelConfig::default()).unwrap();
    let cc = CostConfig::new(64, 128, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1usize, 4, 16, 37] {
        let seq = TokenSequence::with_layout(embeddings(n, 64, &mut rng), 0).unwrap();
        let h = m.embed(&seq).unwrap();
        mac_counter::reset();
        let (out, macs) = mac_counter::measure(|| m.block_forward(&h).unwrap());
        assert_eq!(out.len(), n);
        assert_eq!(macs as u128, block_flops(n as u64, &cc), "n = {n}");
    }
}
