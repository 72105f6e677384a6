//! Closed-form FLOPs and KV-cache accounting for staged pruning.
//!
//! Only the dominant matrix products of a block are counted, one unit per
//! multiply-accumulate: `f(n) = 4nd² + 2n²d + 2ndm`. A pruning stage at layer
//! index `l` (0-based) takes effect from block `l` onward, so a schedule
//! splits the decoder into `stages + 1` contiguous segments. Each stage also
//! pays `γ·f(V)` for the extra block forward plus the backward pass, where `V`
//! is the token count in force when it fires.
//!
//! Everything is exact integer arithmetic except the final ratio. `γ` is held
//! in thousandths so the overhead stays an integer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub hidden: u64,
    pub ffn: u64,
    pub layers: u64,
    pub gamma: f64,
    pub bytes_per_element: u64,
    pub kv_multiplier: u64,
}

impl CostConfig {
    pub fn new(hidden: u64, ffn: u64, layers: u64) -> Self {
        CostConfig {
            hidden,
            ffn,
            layers,
            gamma: DEFAULT_GAMMA,
            bytes_per_element: 2,
            kv_multiplier: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.ffn == 0 || self.layers == 0 || self.bytes_per_element == 0 {
            return Err(Error::config("cost model dimensions must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    fn gamma_milli(&self) -> u128 {
        (self.gamma * 1000.0).round() as u128
    }
}

/// MACs of one block over `n` tokens.
pub fn block_flops(n: u64, cfg: &CostConfig) -> u128 {
    let (n, d, m) = (n as u128, cfg.hidden as u128, cfg.ffn as u128);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * m
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    /// Index into the token-count list (`0` is the unpruned count).
    pub slot: usize,
    /// First block (0-based) of the span.
    pub first_layer: u64,
    pub span: u64,
}

/// Splits `layers` blocks at the schedule's effective layers.
pub fn segment_lengths(layers: u64, schedule: &[u64]) -> Result<Vec<SegmentSpan>> {
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Schedule("pruning layers must be strictly increasing".into()));
    }
    if let Some(&l) = schedule.iter().find(|&&l| l == 0 || l >= layers) {
        return Err(Error::Schedule(format!("pruning layer {l} outside 1..{layers}")));
    }
    let mut bounds = vec![0];
    bounds.extend_from_slice(schedule);
    bounds.push(layers);
    Ok(bounds
        .windows(2)
        .enumerate()
        .map(|(slot, w)| SegmentSpan {
            slot,
            first_layer: w[0],
            span: w[1] - w[0],
        })
        .collect())
}

pub fn inference_flops(tokens: &[u64], spans: &[SegmentSpan], cfg: &CostConfig) -> Result<u128> {
    if tokens.len() != spans.len() {
        return Err(Error::shape(format!(
            "{} token counts for {} segments",
            tokens.len(),
            spans.len()
        )));
    }
    Ok(tokens
        .iter()
        .zip(spans)
        .map(|(&v, s)| s.span as u128 * block_flops(v, cfg))
        .sum())
}

/// `γ · Σ f(V_stage)`, rounded to the nearest integer when γ has a fractional
/// part that does not divide evenly.
pub fn overhead_flops(stage_tokens: &[u64], cfg: &CostConfig) -> u128 {
    let sum: u128 = stage_tokens.iter().map(|&v| block_flops(v, cfg)).sum();
    (sum * cfg.gamma_milli() + 500) / 1000
}

pub fn saved_ratio(f_inf: u128, f_grad: u128, f_base: u128) -> f64 {
    1.0 - (f_inf + f_grad) as f64 / f_base as f64
}

pub fn kv_cache_bytes(tokens_per_layer: &[u64], cfg: &CostConfig) -> u128 {
    tokens_per_layer
        .iter()
        .map(|&n| n as u128 * cfg.kv_multiplier as u128 * cfg.hidden as u128 * cfg.bytes_per_element as u128)
        .sum()
}

pub const MIB: f64 = 1024.0 * 1024.0;
pub const MB: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub first_layer: u64,
    pub last_layer: u64,
    pub span: u64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub hidden: u64,
    pub ffn: u64,
    pub layers: u64,
    pub gamma: f64,
    pub f_base: u128,
    pub f_inf: u128,
    pub f_grad: u128,
    pub f_total: u128,
    pub saved: f64,
    /// Overhead exceeds what pruning saves.
    pub saved_negative: bool,
    pub kv_bytes_baseline: u128,
    pub kv_bytes_pruned: u128,
    pub segments: Vec<SegmentRow>,
    /// Similarity-scan MACs of the selector, itemized only; not part of
    /// `f_total` or `saved`.
    pub nms_scan_macs: Option<u128>,
    pub notes: Vec<String>,
}

/// Inputs for a full report: per-segment token counts for FLOPs, plus extra
/// tokens (e.g. text) that occupy the KV cache at every layer.
#[derive(Clone, Debug)]
pub struct CostQuery<'a> {
    pub schedule: &'a [u64],
    pub tokens: &'a [u64],
    pub kv_extra_tokens: u64,
    pub nms_scan_macs: Option<u128>,
}

pub fn cost_report(cfg: &CostConfig, query: &CostQuery<'_>) -> Result<CostReport> {
    cfg.validate()?;
    let spans = segment_lengths(cfg.layers, query.schedule)?;
    let tokens = query.tokens;
    let f_inf = inference_flops(tokens, &spans, cfg)?;
    let f_base = cfg.layers as u128 * block_flops(tokens[0], cfg);
    if f_base == 0 {
        return Err(Error::input("baseline token count must be positive"));
    }
    let f_grad = overhead_flops(&tokens[..tokens.len() - 1], cfg);
    let f_total = f_inf + f_grad;
    let saved = saved_ratio(f_inf, f_grad, f_base);

    let per_layer = |counts: &dyn Fn(&SegmentSpan) -> u64| -> Vec<u64> {
        spans
            .iter()
            .flat_map(|s| std::iter::repeat_n(counts(s) + query.kv_extra_tokens, s.span as usize))
            .collect()
    };
    let kv_bytes_baseline = kv_cache_bytes(&per_layer(&|_| tokens[0]), cfg);
    let kv_bytes_pruned = kv_cache_bytes(&per_layer(&|s| tokens[s.slot]), cfg);

    Ok(CostReport {
        hidden: cfg.hidden,
        ffn: cfg.ffn,
        layers: cfg.layers,
        gamma: cfg.gamma,
        f_base,
        f_inf,
        f_grad,
        f_total,
        saved,
        saved_negative: saved < 0.0,
        kv_bytes_baseline,
        kv_bytes_pruned,
        segments: spans
            .iter()
            .map(|s| SegmentRow {
                first_layer: s.first_layer,
                last_layer: s.first_layer + s.span - 1,
                span: s.span,
                tokens: tokens[s.slot],
            })
            .collect(),
        nms_scan_macs: query.nms_scan_macs,
        notes: vec![
            "FLOPs count one unit per multiply-accumulate of the dominant block products".into(),
            "selection and proxy-head costs are folded into gamma".into(),
        ],
    })
}

impl CostReport {
    /// Aligned human-readable rendering.
    pub fn to_table(&self) -> String {
        let t = |v: u128| format!("{:.4e}", v as f64);
        let mut s = String::new();
        s.push_str(&format!(
            "model            d={} m={} L={} gamma={}\n",
            self.hidden, self.ffn, self.layers, self.gamma
        ));
        s.push_str("segments         layers        span  tokens\n");
        for seg in &self.segments {
            s.push_str(&format!(
                "                 {:>3}..={:<3}  {:>6}  {:>6}\n",
                seg.first_layer, seg.last_layer, seg.span, seg.tokens
            ));
        }
        s.push_str(&format!("F_base           {:>24}  ({})\n", self.f_base, t(self.f_base)));
        s.push_str(&format!("F_inf            {:>24}  ({})\n", self.f_inf, t(self.f_inf)));
        s.push_str(&format!("F_grad           {:>24}  ({})\n", self.f_grad, t(self.f_grad)));
        s.push_str(&format!("F_total          {:>24}  ({})\n", self.f_total, t(self.f_total)));
        s.push_str(&format!(
            "saved            {:>24.6}{}\n",
            self.saved,
            if self.saved_negative { "  (overhead exceeds savings)" } else { "" }
        ));
        for (name, b) in [("kv baseline", self.kv_bytes_baseline), ("kv pruned", self.kv_bytes_pruned)] {
            s.push_str(&format!(
                "{name:<16} {b:>24}  ({:.1} MiB, {:.1} MB)\n",
                b as f64 / MIB,
                b as f64 / MB
            ));
        }
        if let Some(m) = self.nms_scan_macs {
            s.push_str(&format!("nms scan (info)  {m:>24}\n"));
        }
        s
    }
}
