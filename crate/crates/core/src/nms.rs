//! Two-stage token selection: strict feature-space NMS over saliency-ranked
//! candidates, then gradient completion to fill the budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argsort_desc, dot, Matrix};

/// Rows with a smaller norm than this are treated as the zero vector.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Paper default suppression threshold.
pub const DEFAULT_TAU: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct SelectionInput<'a> {
    pub scores: &'a [f64],
    pub features: &'a Matrix,
    pub budget: usize,
    pub tau: f64,
    /// Absolute sequence index of candidate 0.
    pub interval_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Absolute indices in selection order.
    pub kept: Vec<usize>,
    pub strict_count: usize,
    pub completed_count: usize,
    /// Candidates marked as neighbours of a strict pick.
    pub suppressed: usize,
}

/// Scales every row to unit length; near-zero rows become zero rows.
pub fn normalize_features(features: &Matrix) -> Matrix {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm < DEGENERATE_NORM {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Inner product of two unit rows, clamped into `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v).clamp(-1.0, 1.0)
}

fn validate(input: &SelectionInput<'_>) -> Result<()> {
    let n = input.scores.len();
    if input.features.rows() != n {
        return Err(Error::shape(format!(
            "{n} scores but {} feature rows",
            input.features.rows()
        )));
    }
    if input.budget > n {
        return Err(Error::Budget {
            requested: input.budget,
            available: n,
        });
    }
    if input.tau.is_nan() {
        return Err(Error::input("tau is NaN"));
    }
    Ok(())
}

pub fn nms_select(input: &SelectionInput<'_>) -> Result<SelectionResult> {
    validate(input)?;
    let order = argsort_desc(input.scores)?;
    let n = order.len();
    let k = input.budget;
    let unit = normalize_features(input.features);

    let mut suppressed = vec![false; n];
    let mut selected = vec![false; n];
    let mut kept = Vec::with_capacity(k);
    let mut suppressed_count = 0;

    // Stage I. Similarities are computed only from a pick to the candidates
    // after it in `order` that are still live; everything before it is
    // already decided.
    for (rank, &i) in order.iter().enumerate() {
        if kept.len() >= k {
            break;
        }
        if suppressed[i] {
            continue;
        }
        selected[i] = true;
        kept.push(i);
        let ui = unit.row(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && cosine_similarity(ui, unit.row(j)) >= input.tau {
                suppressed[j] = true;
                suppressed_count += 1;
            }
        }
    }
    let strict_count = kept.len();

    // Stage II.
    for &i in &order {
        if kept.len() >= k {
            break;
        }
        if !selected[i] {
            selected[i] = true;
            kept.push(i);
        }
    }

    Ok(SelectionResult {
        completed_count: kept.len() - strict_count,
        kept: kept.into_iter().map(|i| i + input.interval_offset).collect(),
        strict_count,
        suppressed: suppressed_count,
    })
}

/// The first `k` indices of [`argsort_desc`].
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Budget {
            requested: k,
            available: scores.len(),
        });
    }
    let mut order = argsort_desc(scores)?;
    order.truncate(k);
    Ok(order)
}
