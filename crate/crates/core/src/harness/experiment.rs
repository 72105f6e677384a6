//! Pruning experiments, sweeps and layer-wise saliency statistics.
//!
//! Samples are independent: each derives its own seed from the config seed
//! and its index, so running them on a thread pool gives exactly the rows a
//! serial run gives. Aggregation always walks samples in index order.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cost::{cost_report, CostQuery};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Split};
use crate::harness::task::{generate_task, mix_seed, Dataset, Sample};
use crate::harness::train::{train_toy, TrainOutcome};
use crate::model::Model;
use crate::pipeline::{output_agreement, prefill_pruned, PipelineOptions, PipelineTrace, Selector};
use crate::proxy::{HeadNorm, ProxyObjective, TailWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub selector: Selector,
    /// Visual tokens kept after the last stage.
    pub budget: usize,
    pub budget_fraction: f64,
    pub kpos: usize,
    pub tau: f64,
    pub samples: usize,
    pub trials: usize,
    pub agreement_rate: f64,
    pub mean_kl: f64,
    pub planted_recall: f64,
    pub flops_saved: f64,
    pub flops_total: u128,
    pub flops_baseline: u128,
    pub kv_bytes: u128,
    pub kv_bytes_baseline: u128,
    pub stage_layers: Vec<usize>,
    pub stage_keeps: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct SampleOutcome {
    agree: Vec<bool>,
    kl: Vec<f64>,
    recall: Vec<f64>,
    traces: Vec<PipelineTrace>,
}

/// Fraction of `planted` found in `kept`; 1 when nothing was planted.
pub fn planted_recall(planted: &[usize], kept: &[usize]) -> f64 {
    if planted.is_empty() {
        return 1.0;
    }
    planted.iter().filter(|p| kept.contains(p)).count() as f64 / planted.len() as f64
}

pub fn train_from_config(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = generate_task(&cfg.task_spec(Split::Train))?;
    let heldout = generate_task(&cfg.task_spec(Split::Heldout))?;
    train_toy(cfg.model_config(), &train, &heldout, &cfg.train_config())
}

pub fn eval_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate_task(&cfg.task_spec(Split::Eval))
}

/// Loads the configured checkpoint and checks it against the config.
pub fn load_model(cfg: &ExperimentConfig) -> Result<Model> {
    let model = checkpoint::load(&cfg.checkpoint)?;
    let want = cfg.model_config();
    let got = &model.config;
    if (got.layers, got.hidden, got.heads, got.ffn, got.vocab, got.max_seq, got.norm_kind)
        != (want.layers, want.hidden, want.heads, want.ffn, want.vocab, want.max_seq, want.norm_kind)
    {
        return Err(Error::config(format!(
            "checkpoint {} does not match the configured model",
            cfg.checkpoint.display()
        )));
    }
    Ok(model.with_backend(cfg.backend))
}

fn run_sample(
    cfg: &ExperimentConfig,
    model: &Model,
    index: usize,
    sample: &Sample,
    keep_traces: bool,
) -> Result<SampleOutcome> {
    let schedule = cfg.schedule()?;
    let reference = model.prefill(&sample.seq)?.logits;
    let mut out = SampleOutcome {
        agree: Vec::new(),
        kl: Vec::new(),
        recall: Vec::new(),
        traces: Vec::new(),
    };
    for &selector in &cfg.selectors {
        for trial in 0..cfg.trials {
            let opts = PipelineOptions {
                selector,
                head_norm: cfg.head_norm,
                seed: mix_seed(mix_seed(cfg.seed, trial as u64), index as u64),
                with_reference: false,
            };
            let mut trace = prefill_pruned(model, &sample.seq, &schedule, &opts)?.trace;
            let (agree, kl) = output_agreement(&trace.final_logits, &reference)?;
            let kept = trace.final_visual().unwrap_or_else(|| (0..sample.seq.visual_len()).collect());
            out.agree.push(agree);
            out.kl.push(kl);
            out.recall.push(planted_recall(&sample.planted, &kept));
            if keep_traces {
                trace.reference_logits = Some(reference.clone());
                trace.agreement = Some(agree);
                trace.kl_divergence = Some(kl);
                out.traces.push(trace);
            }
        }
    }
    Ok(out)
}

/// Rows per selector, plus traces when `cfg.traces` is set.
pub fn run_experiment_with_traces(
    cfg: &ExperimentConfig,
    model: &Model,
    data: &Dataset,
) -> Result<(Vec<ReportRow>, Vec<PipelineTrace>)> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    if model.config.layers != cfg.layers || model.config.hidden != cfg.hidden {
        return Err(Error::config("model does not match the configured dimensions"));
    }
    let keep_traces = cfg.traces.is_some();
    let work = |(i, s): (usize, &Sample)| run_sample(cfg, model, i, s, keep_traces);
    let outcomes: Vec<SampleOutcome> = if cfg.parallel {
        data.samples.par_iter().enumerate().map(work).collect::<Result<_>>()?
    } else {
        data.samples.iter().enumerate().map(work).collect::<Result<_>>()?
    };

    let text = cfg.text_len as u64;
    let mut tokens = vec![cfg.visual_count as u64 + text];
    tokens.extend(schedule.keeps().iter().map(|&k| k as u64 + text));
    let layers: Vec<u64> = schedule.layers().iter().map(|&l| l as u64).collect();
    let cost = cost_report(
        &cfg.cost_config(),
        &CostQuery {
            schedule: &layers,
            tokens: &tokens,
            kv_extra_tokens: 0,
            nms_scan_macs: None,
        },
    )?;

    let budget = schedule.keeps().last().copied().unwrap_or(cfg.visual_count);
    let n = data.len() * cfg.trials;
    let mut rows = Vec::with_capacity(cfg.selectors.len());
    for (si, &selector) in cfg.selectors.iter().enumerate() {
        let range = si * cfg.trials..(si + 1) * cfg.trials;
        let (mut agree, mut kl, mut recall) = (0usize, 0.0, 0.0);
        for o in &outcomes {
            agree += o.agree[range.clone()].iter().filter(|&&a| a).count();
            kl += o.kl[range.clone()].iter().sum::<f64>();
            recall += o.recall[range.clone()].iter().sum::<f64>();
        }
        let denom = n.max(1) as f64;
        rows.push(ReportRow {
            selector,
            budget,
            budget_fraction: budget as f64 / cfg.visual_count as f64,
            kpos: cfg.kpos,
            tau: cfg.tau,
            samples: data.len(),
            trials: cfg.trials,
            agreement_rate: agree as f64 / denom,
            mean_kl: kl / denom,
            planted_recall: recall / denom,
            flops_saved: cost.saved,
            flops_total: cost.f_total,
            flops_baseline: cost.f_base,
            kv_bytes: cost.kv_bytes_pruned,
            kv_bytes_baseline: cost.kv_bytes_baseline,
            stage_layers: schedule.layers(),
            stage_keeps: schedule.keeps(),
            seed: cfg.seed,
        });
    }
    let traces = outcomes.into_iter().flat_map(|o| o.traces).collect();
    Ok((rows, traces))
}

pub fn run_experiment(cfg: &ExperimentConfig, model: &Model, data: &Dataset) -> Result<Vec<ReportRow>> {
    run_experiment_with_traces(cfg, model, data).map(|(rows, _)| rows)
}

/// JSON-lines rendering, one row per line.
pub fn rows_to_jsonl(rows: &[ReportRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("rows are always serializable") + "\n")
        .collect()
}

pub fn rows_to_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<12} {:>6} {:>6} {:>4} {:>5} {:>9} {:>9} {:>8} {:>8} {:>12}  {}\n",
        "selector", "budget", "frac", "kpos", "tau", "agree", "mean_kl", "recall", "saved", "kv_bytes", "keeps"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6.3} {:>4} {:>5.2} {:>9.4} {:>9.5} {:>8.4} {:>8.4} {:>12}  {:?}@{:?}",
            r.selector.name(),
            r.budget,
            r.budget_fraction,
            r.kpos,
            r.tau,
            r.agreement_rate,
            r.mean_kl,
            r.planted_recall,
            r.flops_saved,
            r.kv_bytes,
            r.stage_keeps,
            r.stage_layers
        );
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Kpos,
    Tau,
    Budget,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kpos" => Ok(SweepAxis::Kpos),
            "tau" => Ok(SweepAxis::Tau),
            "budget" => Ok(SweepAxis::Budget),
            _ => Err(Error::config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub axis: SweepAxis,
    /// The swept value, or `"no-nms"` for the plain top-K column of a tau
    /// sweep.
    pub value: String,
    pub row: ReportRow,
}

fn config_for(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let as_count = |v: f64| {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::config(format!("{v} is not a count")))
        }
    };
    match axis {
        SweepAxis::Kpos => c.kpos = as_count(value)?,
        SweepAxis::Tau => c.tau = value,
        SweepAxis::Budget => {
            c.budget = Some(as_count(value)?);
            c.keeps = None;
            c.target_avg = None;
        }
    }
    c.validate()?;
    Ok(c)
}

/// Runs the experiment once per value. A tau sweep runs only the NMS
/// selector per value and appends one plain top-K column.
pub fn sweep(
    cfg: &ExperimentConfig,
    model: &Model,
    data: &Dataset,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut entries = Vec::new();
    for &v in values {
        let mut c = config_for(cfg, axis, v)?;
        if axis == SweepAxis::Tau {
            c.selectors = vec![Selector::PioNms];
        }
        for row in run_experiment(&c, model, data)? {
            entries.push(SweepEntry {
                axis,
                value: v.to_string(),
                row,
            });
        }
    }
    if axis == SweepAxis::Tau {
        let c = ExperimentConfig {
            selectors: vec![Selector::Topk],
            ..cfg.clone()
        };
        for row in run_experiment(&c, model, data)? {
            entries.push(SweepEntry {
                axis,
                value: "no-nms".into(),
                row,
            });
        }
    }
    Ok(entries)
}

pub fn sweep_to_table(entries: &[SweepEntry]) -> String {
    let mut s = format!(
        "{:<8} {:<8} {:<12} {:>9} {:>9} {:>8} {:>8}\n",
        "axis", "value", "selector", "agree", "mean_kl", "recall", "saved"
    );
    for e in entries {
        let _ = writeln!(
            s,
            "{:<8} {:<8} {:<12} {:>9.4} {:>9.5} {:>8.4} {:>8.4}",
            format!("{:?}", e.axis).to_lowercase(),
            e.value,
            e.row.selector.name(),
            e.row.agreement_rate,
            e.row.mean_kl,
            e.row.planted_recall,
            e.row.flops_saved
        );
    }
    s
}

/// Tokens whose score is strictly above the mean of `scores`.
pub fn count_above_mean(scores: &[f64]) -> usize {
    if scores.is_empty() {
        return 0;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    scores.iter().filter(|&&s| s > mean).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSaliency {
    pub layer: usize,
    /// Mean over samples of the visual tokens scoring above that sample's
    /// mean visual score.
    pub mean_above_mean: f64,
    /// Mean share of visual saliency mass on planted rows.
    pub planted_share: f64,
}

/// Saliency of the unpruned visual span at each requested layer (`>= 1`).
pub fn saliency_stats(
    model: &Model,
    data: &Dataset,
    layers: &[usize],
    kpos: usize,
    head_norm: HeadNorm,
) -> Result<Vec<LayerSaliency>> {
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > model.config.layers) {
        return Err(Error::config(format!(
            "saliency layer {l} outside 1..={}",
            model.config.layers
        )));
    }
    let obj = ProxyObjective::new(model).with_head_norm(head_norm);
    let mut counts = vec![0.0; layers.len()];
    let mut shares = vec![0.0; layers.len()];
    let deepest = layers.iter().copied().max().unwrap_or(0);
    for s in &data.samples {
        let mut states = vec![model.embed(&s.seq)?];
        while states.len() < deepest {
            let next = model.block_forward(states.last().expect("non-empty"))?;
            states.push(next);
        }
        for (i, &l) in layers.iter().enumerate() {
            let h = &states[l - 1];
            let window = TailWindow::for_states(kpos, h)?;
            let scores = obj.saliency(h, &window)?.scores;
            let visual = &scores[..s.seq.visual_len()];
            counts[i] += count_above_mean(visual) as f64;
            let total: f64 = visual.iter().sum();
            let planted: f64 = s.planted.iter().map(|&p| visual[p]).sum();
            shares[i] += if total > 0.0 { planted / total } else { 0.0 };
        }
    }
    let n = data.len().max(1) as f64;
    Ok(layers
        .iter()
        .zip(counts.iter().zip(&shares))
        .map(|(&layer, (&c, &p))| LayerSaliency {
            layer,
            mean_above_mean: c / n,
            planted_share: p / n,
        })
        .collect())
}

pub fn stats_to_table(stats: &[LayerSaliency]) -> String {
    let mut s = format!("{:>5} {:>16} {:>14}\n", "layer", "above_mean", "planted_share");
    for st in stats {
        let _ = writeln!(s, "{:>5} {:>16.3} {:>14.4}", st.layer, st.mean_above_mean, st.planted_share);
    }
    s
}
