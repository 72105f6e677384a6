//! Staged visual-token pruning during prefill.
//!
//! A stage at layer `l` (0-based, `l >= 1`) scores the visual rows of
//! `H^{l-1}`, keeps `keep` of them and drops the rest before block `l` runs,
//! so dropped tokens never enter the KV cache of blocks `l..L`. Text tokens,
//! including the tail window, always survive. Kept rows retain their original
//! position ids; row storage is compacted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::segment_lengths;
use crate::error::{Error, Result};
use crate::model::{HiddenStates, KeyMask, KvCache, Model, TokenSequence};
use crate::nms::{nms_select, top_k_select, SelectionInput, SelectionResult, DEFAULT_TAU};
use crate::proxy::{HeadNorm, ProxyObjective, SaliencyReport, TailWindow};
use crate::tensor::{argmax, l2_norm_rows, softmax_in_place};

pub const DEFAULT_KPOS: usize = 4;

/// How visual tokens are ranked and chosen at each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    /// Gradient saliency with feature-space NMS and completion.
    #[default]
    PioNms,
    /// Gradient saliency, plain top-K.
    Topk,
    /// Uniformly random subset.
    Random,
    /// Largest `H^{l-1}` row norms.
    HiddenNorm,
    /// Most attention received from the tail window (materializes the
    /// attention matrix).
    AttnTail,
}

impl Selector {
    pub const ALL: [Selector; 5] = [
        Selector::PioNms,
        Selector::Topk,
        Selector::Random,
        Selector::HiddenNorm,
        Selector::AttnTail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Selector::PioNms => "pio-nms",
            Selector::Topk => "topk",
            Selector::Random => "random",
            Selector::HiddenNorm => "hidden-norm",
            Selector::AttnTail => "attn-tail",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|sel| sel.name() == s)
            .ok_or_else(|| Error::config(format!("unknown selector {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneStage {
    pub layer: usize,
    pub keep: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub stages: Vec<PruneStage>,
    pub kpos: usize,
    pub tau: f64,
}

impl PruneSchedule {
    pub fn new(layers: &[usize], keeps: &[usize], kpos: usize, tau: f64) -> Result<Self> {
        if layers.len() != keeps.len() {
            return Err(Error::Schedule(format!(
                "{} pruning layers but {} keep counts",
                layers.len(),
                keeps.len()
            )));
        }
        let s = PruneSchedule {
            stages: layers
                .iter()
                .zip(keeps)
                .map(|(&layer, &keep)| PruneStage { layer, keep })
                .collect(),
            kpos,
            tau,
        };
        s.validate_shape()?;
        Ok(s)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.stages.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return Err(Error::Schedule("pruning layers must be strictly increasing".into()));
        }
        // Equal consecutive counts are allowed so that a keep-everything
        // schedule stays expressible.
        if self.stages.windows(2).any(|w| w[0].keep < w[1].keep) {
            return Err(Error::Schedule("keep counts must not increase".into()));
        }
        if self.stages.iter().any(|s| s.layer == 0) {
            return Err(Error::Schedule("pruning layer 0 has no preceding block to score with".into()));
        }
        if self.kpos == 0 {
            return Err(Error::Schedule("kpos must be at least 1".into()));
        }
        if self.tau.is_nan() {
            return Err(Error::Schedule("tau is NaN".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, layers: usize, visual: usize, text: usize) -> Result<()> {
        self.validate_shape()?;
        if let Some(s) = self.stages.iter().find(|s| s.layer >= layers) {
            return Err(Error::Schedule(format!("pruning layer {} beyond {layers} layers", s.layer)));
        }
        if let Some(first) = self.stages.first() {
            if first.keep > visual {
                return Err(Error::Budget {
                    requested: first.keep,
                    available: visual,
                });
            }
        }
        if self.kpos > text {
            return Err(Error::config(format!(
                "kpos {} exceeds the {text} text tokens",
                self.kpos
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.layer).collect()
    }

    pub fn keeps(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.keep).collect()
    }
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            stages: Vec::new(),
            kpos: DEFAULT_KPOS,
            tau: DEFAULT_TAU,
        }
    }
}

/// Layer-weighted average visual count of a schedule over `layers` blocks.
pub fn average_visual(total_visual: usize, layers: usize, schedule_layers: &[usize], keeps: &[usize]) -> Result<f64> {
    let l: Vec<u64> = schedule_layers.iter().map(|&v| v as u64).collect();
    let spans = segment_lengths(layers as u64, &l)?;
    let mut sum = spans[0].span as f64 * total_visual as f64;
    for (s, &k) in spans[1..].iter().zip(keeps) {
        sum += s.span as f64 * k as f64;
    }
    Ok(sum / layers as f64)
}

/// Per-stage keep counts whose layer-weighted average visual count is
/// `target_avg` (to within one token). Earlier stages follow a geometric
/// decay; the last stage absorbs the remainder.
pub fn derive_budgets(
    total_visual: usize,
    target_avg: usize,
    schedule_layers: &[usize],
    layers: usize,
) -> Result<Vec<usize>> {
    if target_avg == 0 || target_avg > total_visual {
        return Err(Error::Schedule(format!(
            "target average {target_avg} must be in 1..={total_visual}"
        )));
    }
    let l: Vec<u64> = schedule_layers.iter().map(|&v| v as u64).collect();
    let spans: Vec<f64> = segment_lengths(layers as u64, &l)?.iter().map(|s| s.span as f64).collect();
    let s = schedule_layers.len();
    if target_avg == total_visual {
        return Ok(vec![total_visual; s]);
    }
    if s == 0 {
        return Err(Error::Schedule("no pruning stages to reach a smaller average".into()));
    }
    let v0 = total_visual as f64;
    let remainder = target_avg as f64 * layers as f64 - spans[0] * v0;
    let geometric = |r: f64| (1..=s).map(|i| spans[i] * v0 * r.powi(i as i32)).sum::<f64>();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geometric(mid) < remainder {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);

    let mut keeps = Vec::with_capacity(s);
    let mut upper = total_visual;
    for i in 1..s {
        let min_here = s - i + 1;
        let k = ((v0 * r.powi(i as i32)).round() as usize).clamp(min_here, upper.max(min_here));
        keeps.push(k);
        upper = k - 1;
    }
    let used: f64 = keeps.iter().zip(&spans[1..]).map(|(&k, sp)| k as f64 * sp).sum();
    let last = ((remainder - used) / spans[s]).round();
    if last < 1.0 || last as usize > upper {
        return Err(Error::Schedule(format!(
            "average {target_avg} is not reachable with strictly decreasing counts"
        )));
    }
    keeps.push(last as usize);
    let avg = average_visual(total_visual, layers, schedule_layers, &keeps)?;
    if (avg - target_avg as f64).abs() > 1.0 {
        return Err(Error::Schedule(format!("average {target_avg} is not reachable (got {avg:.2})")));
    }
    Ok(keeps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub layer: usize,
    /// Kept visual tokens as original sequence indices, in selection order.
    pub kept_absolute: Vec<usize>,
    /// Selector scores over the visual candidates present at stage entry.
    pub scores: Vec<f64>,
    pub saliency: Option<SaliencyReport>,
    pub selection: SelectionResult,
    pub visual_count_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub selector: Selector,
    pub stages: Vec<StageResult>,
    pub final_logits: Vec<f64>,
    pub reference_logits: Option<Vec<f64>>,
    pub agreement: Option<bool>,
    pub kl_divergence: Option<f64>,
}

impl PipelineTrace {
    /// One JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("trace is always serializable")
    }

    /// Visual tokens (original indices, ascending) that survive every stage.
    pub fn final_visual(&self) -> Option<Vec<usize>> {
        self.stages.last().map(|s| {
            let mut v = s.kept_absolute.clone();
            v.sort_unstable();
            v
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub selector: Selector,
    pub head_norm: HeadNorm,
    /// Seeds the random selector.
    pub seed: u64,
    pub with_reference: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            selector: Selector::PioNms,
            head_norm: HeadNorm::Final,
            seed: 0,
            with_reference: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrunedPrefill {
    pub trace: PipelineTrace,
    pub cache: KvCache,
}

pub fn reference_prefill(model: &Model, seq: &TokenSequence) -> Result<(Vec<f64>, KvCache)> {
    let p = model.prefill(seq)?;
    Ok((p.logits, p.cache))
}

/// Argmax agreement and `KL(softmax(reference) || softmax(pruned))`.
pub fn output_agreement(pruned: &[f64], reference: &[f64]) -> Result<(bool, f64)> {
    if pruned.len() != reference.len() || pruned.is_empty() {
        return Err(Error::shape("logit vectors differ in length"));
    }
    let agree = argmax(pruned) == argmax(reference);
    let log_softmax = |z: &[f64]| {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect::<Vec<_>>()
    };
    let (lr, lp) = (log_softmax(reference), log_softmax(pruned));
    let mut pr = reference.to_vec();
    softmax_in_place(&mut pr);
    let kl: f64 = pr.iter().zip(lr.iter().zip(&lp)).map(|(p, (a, b))| p * (a - b)).sum();
    Ok((agree, kl.max(0.0)))
}

fn rank_select(scores: &[f64], budget: usize) -> Result<SelectionResult> {
    let kept = top_k_select(scores, budget)?;
    Ok(SelectionResult {
        strict_count: kept.len(),
        completed_count: 0,
        suppressed: 0,
        kept,
    })
}

struct StageChoice {
    scores: Vec<f64>,
    saliency: Option<SaliencyReport>,
    selection: SelectionResult,
}

fn choose(
    model: &Model,
    h_prev: &HiddenStates,
    schedule: &PruneSchedule,
    budget: usize,
    opts: &PipelineOptions,
    stage_index: usize,
) -> Result<StageChoice> {
    let visual = h_prev.visual_len();
    if budget > visual {
        return Err(Error::Budget {
            requested: budget,
            available: visual,
        });
    }
    let window = TailWindow::for_states(schedule.kpos, h_prev)?;
    let candidates: Vec<usize> = (0..visual).collect();
    match opts.selector {
        Selector::PioNms | Selector::Topk => {
            let report = ProxyObjective::new(model)
                .with_head_norm(opts.head_norm)
                .saliency(h_prev, &window)?;
            let scores = report.scores[..visual].to_vec();
            let selection = if opts.selector == Selector::PioNms {
                let features = h_prev.values.select_rows(&candidates);
                nms_select(&SelectionInput {
                    scores: &scores,
                    features: &features,
                    budget,
                    tau: schedule.tau,
                    interval_offset: 0,
                })?
            } else {
                rank_select(&scores, budget)?
            };
            Ok(StageChoice {
                scores,
                saliency: Some(report),
                selection,
            })
        }
        Selector::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(stage_index as u64);
            let scores: Vec<f64> = (0..visual).map(|_| rng.random::<f64>()).collect();
            let selection = rank_select(&scores, budget)?;
            Ok(StageChoice {
                scores,
                saliency: None,
                selection,
            })
        }
        Selector::HiddenNorm => {
            let scores = l2_norm_rows(&h_prev.values.select_rows(&candidates));
            let selection = rank_select(&scores, budget)?;
            Ok(StageChoice {
                scores,
                saliency: None,
                selection,
            })
        }
        Selector::AttnTail => {
            let probs = model.attention_probabilities(h_prev)?;
            let mut scores = vec![0.0; visual];
            for p in &probs {
                for &t in window.positions() {
                    for (s, v) in scores.iter_mut().zip(&p.row(t)[..visual]) {
                        *s += v;
                    }
                }
            }
            let denom = (probs.len() * window.k_pos()) as f64;
            scores.iter_mut().for_each(|s| *s /= denom);
            let selection = rank_select(&scores, budget)?;
            Ok(StageChoice {
                scores,
                saliency: None,
                selection,
            })
        }
    }
}

pub fn prefill_pruned(
    model: &Model,
    seq: &TokenSequence,
    schedule: &PruneSchedule,
    opts: &PipelineOptions,
) -> Result<PrunedPrefill> {
    schedule.validate_for(model.config.layers, seq.visual_len(), seq.text_len())?;
    let mut h = model.embed(seq)?;
    let mut origin: Vec<usize> = (0..seq.len()).collect();
    let mut cache = KvCache::new(&model.config);
    let mut prev: Option<HiddenStates> = None;
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut pending = schedule.stages.iter().enumerate().peekable();

    for b in 0..model.config.layers {
        if let Some((si, stage)) = pending.next_if(|(_, s)| s.layer == b) {
            let h_prev = prev.as_ref().expect("stage layers are >= 1");
            let choice = choose(model, h_prev, schedule, stage.keep, opts, si)?;
            let visual = h.visual_len();
            let mut rows: Vec<usize> = choice.selection.kept.clone();
            rows.sort_unstable();
            rows.extend(visual..h.len());
            let kept_absolute = choice.selection.kept.iter().map(|&r| origin[r]).collect();
            h = h.select_rows(&rows);
            origin = rows.iter().map(|&r| origin[r]).collect();
            stages.push(StageResult {
                layer: stage.layer,
                kept_absolute,
                scores: choice.scores,
                saliency: choice.saliency,
                selection: choice.selection,
                visual_count_after: h.visual_len(),
            });
        }
        let (next, tape) = model.block_forward_taped(&h, KeyMask::default())?;
        cache.record(b, &tape.k, &tape.v, &h.positions);
        prev = Some(h);
        h = next;
    }

    let final_logits = model.head_logits(&h, &[h.len() - 1])?.into_data();
    let (reference_logits, agreement, kl_divergence) = if opts.with_reference {
        let (reference, _) = reference_prefill(model, seq)?;
        let (agree, kl) = output_agreement(&final_logits, &reference)?;
        (Some(reference), Some(agree), Some(kl))
    } else {
        (None, None, None)
    };
    Ok(PrunedPrefill {
        trace: PipelineTrace {
            selector: opts.selector,
            stages,
            final_logits,
            reference_logits,
            agreement,
            kl_divergence,
        },
        cache,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_cases() {
        let z = [1.0, 2.0, 0.5];
        assert_eq!(output_agreement(&z, &z).unwrap(), (true, 0.0));
        let l3 = 3f64.ln();
        let (agree, kl) = output_agreement(&[0.0, l3], &[l3, 0.0]).unwrap();
        assert!(!agree);
        assert!((kl - 0.5 * l3).abs() < 1e-12);
        assert!(output_agreement(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn derive_budget_cases() {
        assert_eq!(derive_budgets(576, 576, &[1, 10, 15], 32).unwrap(), vec![576; 3]);
        assert_eq!(derive_budgets(576, 82, &[1], 32).unwrap(), vec![66]);
        assert!(derive_budgets(576, 0, &[1], 32).is_err());
        assert!(derive_budgets(576, 600, &[1], 32).is_err());
        // even keeping one token from layer 31 onward averages far above 5
        assert!(derive_budgets(576, 5, &[31], 32).is_err());
    }

    #[test]
    fn derived_schedules_hit_the_average() {
        for &(v0, target, ref layers, l) in &[
            (576usize, 192usize, vec![1usize, 10, 15], 32usize),
            (576, 128, vec![1, 10, 15], 32),
            (576, 64, vec![1, 10, 15], 32),
            (576, 64, vec![1, 8, 14], 28),
            (64, 32, vec![1, 2], 4),
        ] {
            let keeps = derive_budgets(v0, target, layers, l).unwrap();
            assert!(keeps.windows(2).all(|w| w[0] > w[1]), "{keeps:?}");
            let avg = average_visual(v0, l, layers, &keeps).unwrap();
            assert!((avg - target as f64).abs() <= 1.0, "{keeps:?} -> {avg}");
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(PruneSchedule::new(&[2, 1], &[4, 2], 1, 0.8).is_err());
        assert!(PruneSchedule::new(&[1, 2], &[2, 4], 1, 0.8).is_err());
        assert!(PruneSchedule::new(&[0], &[2], 1, 0.8).is_err());
        assert!(PruneSchedule::new(&[1], &[2, 1], 1, 0.8).is_err());
        let s = PruneSchedule::new(&[1, 3], &[4, 2], 2, 0.8).unwrap();
        assert!(s.validate_for(3, 8, 2).is_err());
        assert!(s.validate_for(4, 3, 2).is_err());
        assert!(s.validate_for(4, 8, 1).is_err());
        assert!(s.validate_for(4, 8, 2).is_ok());
    }

    #[test]
    fn selector_names_round_trip() {
        for s in Selector::ALL {
            assert_eq!(Selector::parse(s.name()).unwrap(), s);
        }
        assert!(Selector::parse("fastv").is_err());
    }
}
