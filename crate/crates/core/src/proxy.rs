//! Layer-local proxy loss and gradient saliency.
//!
//! At a pruning layer the block is run once more on its input `H^{l-1}`, the
//! model's own head reads the last `k_pos` rows, and the loss is the mean
//! cross-entropy of those soft logits against their own argmax. Hard labels
//! are constants (no derivative flows through the argmax). One backward pass
//! through that single block gives `dL/dH^{l-1}`; the saliency of token `i` is
//! the Euclidean norm of row `i`.
//!
//! Nothing here exposes attention probabilities, so the scores are the same
//! whichever [`AttentionBackend`](crate::model::AttentionBackend) the model uses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenStates, KeyMask, Model, NormParams};
use crate::tensor::{argmax, l2_norm_rows, matmul_nt, norm_rows_backward, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowRole {
    /// Earlier tail positions; they tie the loss to the current input.
    CaseBound,
    /// The last position, which produces the first answer token.
    Prediction,
}

/// The last `k_pos` positions of the current sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TailWindow {
    positions: Vec<usize>,
}

impl TailWindow {
    pub fn new(k_pos: usize, seq_len: usize, text_len: usize) -> Result<Self> {
        if k_pos == 0 {
            return Err(Error::config("tail window needs k_pos >= 1"));
        }
        if k_pos > text_len || text_len > seq_len {
            return Err(Error::config(format!(
                "tail window of {k_pos} would reach into the visual span ({text_len} text tokens)"
            )));
        }
        Ok(TailWindow {
            positions: (seq_len - k_pos..seq_len).collect(),
        })
    }

    pub fn for_states(k_pos: usize, h: &HiddenStates) -> Result<Self> {
        TailWindow::new(k_pos, h.len(), h.text_len())
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn k_pos(&self) -> usize {
        self.positions.len()
    }

    pub fn roles(&self) -> Vec<WindowRole> {
        let k = self.positions.len();
        (0..k)
            .map(|i| if i + 1 == k { WindowRole::Prediction } else { WindowRole::CaseBound })
            .collect()
    }

    fn check(&self, h: &HiddenStates) -> Result<()> {
        let n = h.len();
        let k = self.positions.len();
        if self.positions.first() != Some(&(n.saturating_sub(k))) || n < k {
            return Err(Error::config("tail window does not end at the sequence end"));
        }
        if k > h.text_len() {
            return Err(Error::config("tail window overlaps the visual span"));
        }
        Ok(())
    }
}

/// Which normalization the intermediate head applies before projecting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadNorm {
    /// The model's final pre-head norm.
    #[default]
    Final,
    /// The pruning block's own input norm.
    Layer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// The hidden-state index the loss reads (`H^layer`); gradients are taken
    /// at `H^{layer-1}`.
    pub layer: usize,
    pub loss_value: f64,
    pub scores: Vec<f64>,
    pub hard_labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct InputGradient {
    pub loss: f64,
    pub gradient: Matrix,
    pub hard_labels: Vec<usize>,
}

/// Row-wise argmax, ties to the lowest index.
pub fn hard_labels(logits: &Matrix) -> Result<Vec<usize>> {
    if logits.cols() == 0 {
        return Err(Error::input("cannot take the argmax of an empty row"));
    }
    (0..logits.rows())
        .map(|r| argmax(logits.row(r)).ok_or_else(|| Error::input(format!("row {r} has no finite logit"))))
        .collect()
}

/// Per-row cross-entropy `-log softmax(z)[label]` and the softmax itself.
fn cross_entropy_rows(logits: &Matrix, labels: &[usize]) -> (Vec<f64>, Matrix) {
    let mut probs = logits.clone();
    let mut losses = Vec::with_capacity(labels.len());
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        losses.push(lse - row[y]);
        softmax_in_place(probs.row_mut(r));
    }
    (losses, probs)
}

pub struct ProxyObjective<'m> {
    model: &'m Model,
    head_norm: HeadNorm,
}

impl<'m> ProxyObjective<'m> {
    pub fn new(model: &'m Model) -> Self {
        ProxyObjective {
            model,
            head_norm: HeadNorm::Final,
        }
    }

    pub fn with_head_norm(mut self, head_norm: HeadNorm) -> Self {
        self.head_norm = head_norm;
        self
    }

    fn norm(&self, h_prev: &HiddenStates) -> &NormParams {
        match self.head_norm {
            HeadNorm::Final => &self.model.weights.final_norm,
            HeadNorm::Layer => &self.model.weights.blocks[h_prev.layer].norm1,
        }
    }

    fn check(&self, h_prev: &HiddenStates, window: &TailWindow) -> Result<()> {
        if h_prev.layer >= self.model.config.layers {
            return Err(Error::shape(format!(
                "no block after H^{} in a {}-layer model",
                h_prev.layer, self.model.config.layers
            )));
        }
        window.check(h_prev)
    }

    /// Soft logits at the window rows of `block(h_prev)`.
    pub fn window_logits(&self, h_prev: &HiddenStates, window: &TailWindow) -> Result<Matrix> {
        self.check(h_prev, window)?;
        let out = self.model.block_forward(h_prev)?;
        Ok(self.model.project(&out, window.positions(), self.norm(h_prev))?.0)
    }

    /// Cross-entropy of each window position against its own hard label.
    pub fn per_position_losses(&self, h_prev: &HiddenStates, window: &TailWindow) -> Result<Vec<f64>> {
        let z = self.window_logits(h_prev, window)?;
        let labels = hard_labels(&z)?;
        Ok(cross_entropy_rows(&z, &labels).0)
    }

    pub fn loss(&self, h_prev: &HiddenStates, window: &TailWindow) -> Result<f64> {
        let losses = self.per_position_losses(h_prev, window)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Loss against fixed labels (no argmax).
    pub fn loss_with_labels(&self, h_prev: &HiddenStates, window: &TailWindow, labels: &[usize]) -> Result<f64> {
        let z = self.window_logits(h_prev, window)?;
        check_labels(labels, &z)?;
        let losses = cross_entropy_rows(&z, labels).0;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn input_gradient(&self, h_prev: &HiddenStates, window: &TailWindow) -> Result<InputGradient> {
        self.gradient_inner(h_prev, window, None)
    }

    /// Gradient with the labels supplied instead of re-derived.
    pub fn input_gradient_with_labels(
        &self,
        h_prev: &HiddenStates,
        window: &TailWindow,
        labels: &[usize],
    ) -> Result<InputGradient> {
        self.gradient_inner(h_prev, window, Some(labels))
    }

    fn gradient_inner(
        &self,
        h_prev: &HiddenStates,
        window: &TailWindow,
        labels: Option<&[usize]>,
    ) -> Result<InputGradient> {
        self.check(h_prev, window)?;
        let model = self.model;
        let norm = self.norm(h_prev);
        let (out, tape) = model.block_forward_taped(h_prev, KeyMask::default())?;
        let (z, norm_cache) = model.project(&out, window.positions(), norm)?;
        let labels = match labels {
            Some(l) => {
                check_labels(l, &z)?;
                l.to_vec()
            }
            None => hard_labels(&z)?,
        };
        let (losses, mut dz) = cross_entropy_rows(&z, &labels);
        let k = labels.len() as f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = dz.row_mut(r);
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v /= k;
            }
        }
        let dnormed = matmul_nt(&dz, &model.weights.head)?;
        let dwindow = norm_rows_backward(&norm_cache, &norm.gain, &dnormed, None, None);
        let mut dout = Matrix::zeros(out.len(), model.config.hidden);
        for (i, &p) in window.positions().iter().enumerate() {
            dout.row_mut(p).copy_from_slice(dwindow.row(i));
        }
        let gradient = model.block_backward(h_prev.layer, &tape, &dout, None)?;
        Ok(InputGradient {
            loss: losses.iter().sum::<f64>() / k,
            gradient,
            hard_labels: labels,
        })
    }

    pub fn saliency(&self, h_prev: &HiddenStates, window: &TailWindow) -> Result<SaliencyReport> {
        let g = self.input_gradient(h_prev, window)?;
        Ok(SaliencyReport {
            layer: h_prev.layer + 1,
            loss_value: g.loss,
            scores: l2_norm_rows(&g.gradient),
            hard_labels: g.hard_labels,
        })
    }
}

fn check_labels(labels: &[usize], z: &Matrix) -> Result<()> {
    if labels.len() != z.rows() || labels.iter().any(|&y| y >= z.cols()) {
        return Err(Error::input("labels do not match the window logits"));
    }
    Ok(())
}
