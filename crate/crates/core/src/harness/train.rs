//! Supervised training of the toy decoder on a [`Dataset`].
//!
//! Two cross-entropy terms share one mean. Each prompt position predicts
//! the following prompt token (ids from `class_count` up) and the last one
//! predicts the sample's class; every planted row also predicts the class,
//! which teaches the early blocks to gather the label onto those rows. The
//! loss is backpropagated through every block into all weights and
//! optimized with Adam over shuffled mini-batches under a cosine learning
//! rate. Everything runs sequentially so a given seed always produces the
//! same weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::task::{Dataset, Sample};
use crate::model::{KeyMask, Model, ModelConfig, ModelWeights};
use crate::tensor::{argmax, matmul_nt, matmul_tn, norm_rows_backward, softmax_in_place, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Share one set of block weights across all layers.
    pub tie_blocks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 11,
            tie_blocks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(weights: &ModelWeights) -> Adam {
        let zeros: Vec<Vec<f64>> = weights.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((w, g), m), v) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..w.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Cosine decay from `base` down to a tenth of it.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()))
}

const TENSORS_PER_BLOCK: usize = 10;

/// Makes every block equal to block 0, or to the sum over blocks when
/// `sum` is set.
fn tie(w: &mut ModelWeights, sum: bool) {
    let layers = w.blocks.len();
    let mut t = w.tensors_mut();
    for k in 0..TENSORS_PER_BLOCK {
        let first = 2 + k;
        let mut acc = t[first].to_vec();
        if sum {
            for b in 1..layers {
                for (a, v) in acc.iter_mut().zip(t[first + b * TENSORS_PER_BLOCK].iter()) {
                    *a += v;
                }
            }
        }
        for b in 0..layers {
            t[first + b * TENSORS_PER_BLOCK].copy_from_slice(&acc);
        }
    }
}

/// Token ids the prompt positions are trained to emit.
pub fn prompt_targets(text_len: usize, class_count: usize, label: usize) -> Vec<usize> {
    (1..text_len).map(|t| class_count + t - 1).chain([label]).collect()
}

/// Mean loss over the prompt positions of one sample; accumulates
/// `scale * dLoss/dW` into `grads`.
pub fn sample_gradient(
    model: &Model,
    sample: &Sample,
    class_count: usize,
    scale: f64,
    grads: &mut ModelWeights,
) -> Result<f64> {
    let mut h = model.embed(&sample.seq)?;
    let mut tapes = Vec::with_capacity(model.config.layers);
    for _ in 0..model.config.layers {
        let (next, tape) = model.block_forward_taped(&h, KeyMask::default())?;
        tapes.push(tape);
        h = next;
    }
    let text = sample.seq.text_len();
    let mut rows: Vec<usize> = sample.planted.clone();
    rows.extend(h.len() - text..h.len());
    let mut targets = vec![sample.label; sample.planted.len()];
    targets.extend(prompt_targets(text, class_count, sample.label));
    let supervised = rows.len();
    let (z, cache) = model.project(&h, &rows, &model.weights.final_norm)?;
    let vocab = z.cols();
    if let Some(&y) = targets.iter().find(|&&y| y >= vocab) {
        return Err(Error::input(format!("target {y} outside vocabulary of {vocab}")));
    }
    let mut dz = Matrix::zeros(supervised, vocab);
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let mut p = z.row(i).to_vec();
        softmax_in_place(&mut p);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        p[y] -= 1.0;
        for (d, v) in dz.row_mut(i).iter_mut().zip(&p) {
            *d = v * scale / supervised as f64;
        }
    }

    let mut affine = cache.normalized.clone();
    for r in 0..supervised {
        let row = affine.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v * model.weights.final_norm.gain[c] + model.weights.final_norm.bias[c];
        }
    }
    grads.head.add_assign(&matmul_tn(&affine, &dz)?)?;
    let dnormed = matmul_nt(&dz, &model.weights.head)?;
    let drows = norm_rows_backward(
        &cache,
        &model.weights.final_norm.gain,
        &dnormed,
        Some(&mut grads.final_norm.gain),
        Some(&mut grads.final_norm.bias),
    );
    let mut dh = Matrix::zeros(h.len(), model.config.hidden);
    for (i, &r) in rows.iter().enumerate() {
        dh.row_mut(r).copy_from_slice(drows.row(i));
    }
    for b in (0..model.config.layers).rev() {
        dh = model.block_backward(b, &tapes[b], &dh, Some(&mut grads.blocks[b]))?;
    }
    for (r, &pos) in sample.seq.position_ids().iter().enumerate() {
        for (g, d) in grads.positions.row_mut(pos).iter_mut().zip(dh.row(r)) {
            *g += d;
        }
    }
    Ok(loss / supervised as f64)
}

/// Class prediction: argmax of the last-position logits restricted to the
/// first `classes` vocabulary entries.
pub fn predict(model: &Model, sample: &Sample, classes: usize) -> Result<usize> {
    let logits = model.prefill(&sample.seq)?.logits;
    Ok(argmax(&logits[..classes.min(logits.len())]).unwrap_or(0))
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in &data.samples {
        if predict(model, s, data.spec.class_count)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn train_toy(config: ModelConfig, train: &Dataset, heldout: &Dataset, opts: &TrainConfig) -> Result<TrainOutcome> {
    train.spec.validate(Some(config.vocab))?;
    let needed = train.spec.class_count + train.spec.text_len - 1;
    if needed > config.vocab {
        return Err(Error::config(format!(
            "{} classes and a {}-token prompt need a vocabulary of {needed}, model has {}",
            train.spec.class_count, train.spec.text_len, config.vocab
        )));
    }
    if train.spec.hidden != config.hidden {
        return Err(Error::config(format!(
            "task hidden size {} differs from model hidden size {}",
            train.spec.hidden, config.hidden
        )));
    }
    if opts.batch_size == 0 || train.is_empty() {
        return Err(Error::config("training needs a positive batch size and at least one sample"));
    }
    if !(opts.learning_rate.is_finite() && opts.learning_rate >= 0.0) {
        return Err(Error::config("learning rate must be finite and non-negative"));
    }
    let mut model = Model::init(config)?;
    if opts.tie_blocks {
        tie(&mut model.weights, false);
    }
    let mut adam = Adam::new(&model.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    let total_steps = opts.epochs * train.len().div_ceil(opts.batch_size);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut grads = ModelWeights::zeros(&model.config);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += sample_gradient(&model, &train.samples[i], train.spec.class_count, scale, &mut grads)?;
            }
            if opts.tie_blocks {
                tie(&mut grads, true);
            }
            adam.step(&mut model.weights, &grads, cosine_lr(opts.learning_rate, step, total_steps));
            step += 1;
            if model.weights.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training {
                    step,
                    detail: "weights became non-finite".into(),
                });
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let heldout_accuracy = accuracy(&model, heldout)?;
    Ok(TrainOutcome {
        model,
        epoch_losses,
        heldout_accuracy,
    })
}
