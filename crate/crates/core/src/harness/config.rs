//! Flat TOML experiment configuration.
//!
//! Every key is optional and falls back to the default recipe; unknown keys
//! are rejected. Exactly one of `budget`, `keeps` or `target_avg` describes
//! the per-stage keep counts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::error::{Error, Result};
use crate::harness::task::{mix_seed, TaskSpec};
use crate::harness::train::TrainConfig;
use crate::model::{AttentionBackend, ModelConfig};
use crate::nms::DEFAULT_TAU;
use crate::pipeline::{derive_budgets, PruneSchedule, Selector, DEFAULT_KPOS};
use crate::proxy::HeadNorm;
use crate::tensor::NormKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Checkpoint written by `train` and read by the evaluation commands.
    pub checkpoint: PathBuf,
    /// Report file (JSON lines).
    pub out: PathBuf,
    /// Optional per-sample pipeline traces (JSON lines).
    pub traces: Option<PathBuf>,

    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub norm: NormKind,
    pub model_seed: u64,

    pub train_samples: usize,
    pub heldout_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_seed: u64,
    pub tie_blocks: bool,

    pub visual_count: usize,
    pub planted_count: usize,
    pub class_count: usize,
    pub text_len: usize,
    pub distractor_scale: f64,
    pub planted_scale: f64,
    pub echo: f64,
    pub lure_count: usize,
    pub world_seed: u64,
    pub task_seed: u64,
    /// Evaluation samples.
    pub samples: usize,

    pub prune_layers: Vec<usize>,
    /// Visual tokens kept after the last stage; earlier stages decay
    /// geometrically towards it.
    pub budget: Option<usize>,
    /// Explicit keep count per stage.
    pub keeps: Option<Vec<usize>>,
    /// Layer-weighted average visual count to solve for.
    pub target_avg: Option<usize>,
    pub kpos: usize,
    pub tau: f64,
    pub selectors: Vec<Selector>,
    pub head_norm: HeadNorm,
    pub backend: AttentionBackend,
    pub trials: usize,
    pub seed: u64,
    pub parallel: bool,

    pub gamma: f64,
    pub bytes_per_element: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let task = TaskSpec::default();
        ExperimentConfig {
            checkpoint: PathBuf::from("toy.gpck"),
            out: PathBuf::from("report.jsonl"),
            traces: None,
            layers: model.layers,
            hidden: model.hidden,
            heads: model.heads,
            ffn: model.ffn,
            vocab: model.vocab,
            max_seq: model.max_seq,
            norm: model.norm_kind,
            model_seed: model.seed,
            train_samples: 1000,
            heldout_samples: 200,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            train_seed: train.seed,
            tie_blocks: train.tie_blocks,
            visual_count: task.visual_count,
            planted_count: task.planted_count,
            class_count: task.class_count,
            text_len: task.text_len,
            distractor_scale: task.distractor_scale,
            planted_scale: task.planted_scale,
            echo: task.echo,
            lure_count: task.lure_count,
            world_seed: task.world_seed,
            task_seed: task.seed,
            samples: task.samples,
            prune_layers: vec![1],
            budget: Some(16),
            keeps: None,
            target_avg: None,
            kpos: DEFAULT_KPOS,
            tau: DEFAULT_TAU,
            selectors: Selector::ALL.to_vec(),
            head_norm: HeadNorm::Final,
            backend: AttentionBackend::Dense,
            trials: 1,
            seed: 1,
            parallel: true,
            gamma: crate::cost::DEFAULT_GAMMA,
            bytes_per_element: 8,
        }
    }
}

/// Which split of the task a dataset is drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    Eval,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`; relative `checkpoint`, `out` and `traces` paths are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            resolve(&mut cfg.checkpoint);
            resolve(&mut cfg.out);
            if let Some(t) = cfg.traces.as_mut() {
                resolve(t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.task_spec(Split::Eval).validate(Some(self.vocab))?;
        if self.seq_len() > self.max_seq {
            return Err(Error::config(format!(
                "sequence of {} tokens exceeds max_seq {}",
                self.seq_len(),
                self.max_seq
            )));
        }
        if self.selectors.is_empty() {
            return Err(Error::config("at least one selector is required"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        let specified = [self.budget.is_some(), self.keeps.is_some(), self.target_avg.is_some()];
        if specified.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::config("give at most one of budget, keeps, target_avg"));
        }
        self.cost_config().validate()?;
        let schedule = self.schedule()?;
        schedule.validate_for(self.layers, self.visual_count, self.text_len)
    }

    pub fn seq_len(&self) -> usize {
        self.visual_count + self.text_len
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            vocab: self.vocab,
            max_seq: self.max_seq,
            norm_kind: self.norm,
            seed: self.model_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.train_seed,
            tie_blocks: self.tie_blocks,
        }
    }

    /// Task spec for one split; splits share the world but not the samples.
    pub fn task_spec(&self, split: Split) -> TaskSpec {
        let (samples, seed) = match split {
            Split::Train => (self.train_samples, mix_seed(self.task_seed, 1 << 32)),
            Split::Heldout => (self.heldout_samples, mix_seed(self.task_seed, 2 << 32)),
            Split::Eval => (self.samples, self.task_seed),
        };
        TaskSpec {
            hidden: self.hidden,
            visual_count: self.visual_count,
            planted_count: self.planted_count,
            class_count: self.class_count,
            text_len: self.text_len,
            samples,
            distractor_scale: self.distractor_scale,
            planted_scale: self.planted_scale,
            echo: self.echo,
            lure_count: self.lure_count,
            world_seed: self.world_seed,
            seed,
        }
    }

    pub fn cost_config(&self) -> CostConfig {
        CostConfig {
            gamma: self.gamma,
            bytes_per_element: self.bytes_per_element,
            ..CostConfig::new(self.hidden as u64, self.ffn as u64, self.layers as u64)
        }
    }

    /// Keep count per stage.
    pub fn keep_counts(&self) -> Result<Vec<usize>> {
        let v = self.visual_count;
        let s = self.prune_layers.len();
        if let Some(k) = &self.keeps {
            return Ok(k.clone());
        }
        if let Some(avg) = self.target_avg {
            return derive_budgets(v, avg, &self.prune_layers, self.layers);
        }
        let budget = self.budget.unwrap_or(v);
        if budget > v {
            return Err(Error::Budget {
                requested: budget,
                available: v,
            });
        }
        let ratio = budget as f64 / v as f64;
        Ok((1..=s)
            .map(|i| {
                if i == s {
                    budget
                } else {
                    ((v as f64 * ratio.powf(i as f64 / s as f64)).round() as usize).clamp(budget, v)
                }
            })
            .collect())
    }

    pub fn schedule(&self) -> Result<PruneSchedule> {
        PruneSchedule::new(&self.prune_layers, &self.keep_counts()?, self.kpos, self.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("tau = 0.7\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = ExperimentConfig::from_toml("tau = 0.7\nselectors = [\"topk\"]\n").unwrap();
        assert_eq!(cfg.tau, 0.7);
        assert_eq!(cfg.selectors, vec![Selector::Topk]);
        assert_eq!(cfg.kpos, DEFAULT_KPOS);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("selectors = [\"fastv\"]").is_err());
        assert!(ExperimentConfig::from_toml("budget = 65").is_err());
        assert!(ExperimentConfig::from_toml("keeps = [8]\ntarget_avg = 30").is_err());
        assert!(ExperimentConfig::from_toml("prune_layers = [0]").is_err());
        assert!(ExperimentConfig::from_toml("prune_layers = [4]").is_err());
        assert!(ExperimentConfig::from_toml("class_count = 9").is_err());
        assert!(ExperimentConfig::from_toml("trials = 0").is_err());
    }

    #[test]
    fn budget_spreads_geometrically() {
        let mut cfg = ExperimentConfig {
            prune_layers: vec![1, 2],
            budget: Some(16),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.keep_counts().unwrap(), vec![32, 16]);
        cfg.budget = Some(64);
        assert_eq!(cfg.keep_counts().unwrap(), vec![64, 64]);
        cfg.budget = None;
        cfg.target_avg = Some(32);
        let keeps = cfg.keep_counts().unwrap();
        assert_eq!(keeps.len(), 2);
        cfg.target_avg = None;
        cfg.keeps = Some(vec![20, 10]);
        assert_eq!(cfg.schedule().unwrap().keeps(), vec![20, 10]);
    }

    #[test]
    fn splits_differ() {
        let cfg = ExperimentConfig::default();
        let a = cfg.task_spec(Split::Train);
        let b = cfg.task_spec(Split::Heldout);
        let c = cfg.task_spec(Split::Eval);
        assert!(a.seed != b.seed && b.seed != c.seed && a.seed != c.seed);
        assert_eq!(a.world_seed, c.world_seed);
    }
}
