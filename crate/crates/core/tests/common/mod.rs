//! Helpers shared by the integration tests.

#![allow(dead_code)]

use gradprune::model::{HiddenStates, Model, ModelConfig, TokenSequence};
use gradprune::proxy::{ProxyObjective, TailWindow};
use gradprune::tensor::{Matrix, NormKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub struct Case {
    pub model: Model,
    pub h: HiddenStates,
    pub window: TailWindow,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let hidden = heads * rng.random_range(1..=16 / heads);
    let hidden = hidden.max(2);
    let heads = if hidden % heads == 0 { heads } else { 1 };
    let n = rng.random_range(1..=8);
    let k_pos = rng.random_range(1..=3.min(n));
    let text = rng.random_range(k_pos..=n);
    let layers = rng.random_range(1..=3);
    let cfg = ModelConfig {
        layers,
        hidden,
        heads,
        ffn: rng.random_range(1..=12),
        vocab: rng.random_range(2..=7),
        max_seq: 8,
        norm_kind: if rng.random_bool(0.5) { NormKind::LayerNorm } else { NormKind::RmsNorm },
        seed: rng.random(),
    };
    let mut model = Model::init(cfg).unwrap();
    // move norms off their identity init so gain/bias paths are exercised
    for t in model.weights.tensors_mut() {
        if t.len() == hidden {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let e = Matrix::from_fn(n, hidden, |_, _| rng.random_range(-1.5..1.5));
    let seq = TokenSequence::with_layout(e, n - text).unwrap();
    let mut h = model.embed(&seq).unwrap();
    let depth = rng.random_range(0..layers);
    for _ in 0..depth {
        h = model.block_forward(&h).unwrap();
    }
    let window = TailWindow::for_states(k_pos, &h).unwrap();
    Case { model, h, window }
}

/// Central differences of the loss with the hard labels frozen at the
/// unperturbed point (the labels are constants of the objective).
pub fn finite_difference(obj: &ProxyObjective<'_>, h: &HiddenStates, window: &TailWindow, labels: &[usize]) -> Matrix {
    let mut g = Matrix::zeros(h.len(), h.values.cols());
    for i in 0..h.values.data().len() {
        let mut plus = h.clone();
        plus.values.data_mut()[i] += STEP;
        let mut minus = h.clone();
        minus.values.data_mut()[i] -= STEP;
        let lp = obj.loss_with_labels(&plus, window, labels).unwrap();
        let lm = obj.loss_with_labels(&minus, window, labels).unwrap();
        g.data_mut()[i] = (lp - lm) / (2.0 * STEP);
    }
    g
}

pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = numeric.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
    analytic.max_abs_diff(numeric) / scale
}
