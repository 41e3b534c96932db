//! Experiment configuration: one JSON document naming the task, model,
//! per-stage training, decoding and sweep settings.

use crate::error::{LabError, Result};
use reina_core::decoder::DecodeConfig;
use reina_core::model::ArchConfig;
use reina_core::synth::{Split, TaskParams};
use reina_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Threshold grid shared by every learned-policy sweep. Trained scores are
/// close to bimodal, so the grid reaches far into both tails.
pub const DEFAULT_ALPHAS: [f64; 17] = [
    0.0, 0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999, 1.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskParams,
    pub arch: ArchSection,
    pub data: DataConfig,
    pub train: StageConfigs,
    pub decode: DecodeConfig,
    pub sweep: SweepConfig,
    /// Training seeds; commands that train once use the first.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskParams::default(),
            arch: ArchSection::default(),
            data: DataConfig::default(),
            train: StageConfigs::default(),
            decode: DecodeConfig::default(),
            sweep: SweepConfig::default(),
            seeds: vec![0],
            out_dir: None,
        }
    }
}

/// Model-shape overrides; vocabularies and lengths always follow the task.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub policy_layers: Option<usize>,
    pub policy_heads: Option<usize>,
    pub ff_mult: Option<usize>,
    pub dropout: Option<f64>,
    pub causal_encoder: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
}

impl Default for StageConfigs {
    /// Desk-scale schedules: micro models need a far larger step size than
    /// the full-size recipe to converge in a few thousand steps.
    fn default() -> Self {
        let base = TrainConfig {
            lr: 3e-3,
            ..TrainConfig::default()
        };
        Self {
            stage1: TrainConfig { stage: 1, steps: 2000, ..base },
            stage2: TrainConfig { stage: 2, steps: 1000, ..base },
            stage3: TrainConfig {
                stage: 3,
                steps: 600,
                warmup_steps: 100,
                eval_every: 100,
                keep_best: true,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    /// Wait-k lags in chunks; empty means every lag from 1 to the chunk count.
    pub waitk: Vec<usize>,
    /// NoSE bounds; absent means the shared AL range of the compared curves.
    pub bounds: Option<[f64; 2]>,
    pub split: Split,
    /// Cap on evaluated utterances (0 = all), taken in dataset order.
    pub max_utterances: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
            waitk: Vec::new(),
            bounds: None,
            split: Split::Test,
            max_utterances: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| LabError::format(path, e))?;
        cfg.resolved()
    }

    /// Fills derived fields (architecture, stage numbers) and validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let a = self.arch();
        c.arch = ArchSection {
            d_model: Some(a.d_model),
            heads: Some(a.heads),
            enc_layers: Some(a.enc_layers),
            dec_layers: Some(a.dec_layers),
            policy_layers: Some(a.policy_layers),
            policy_heads: Some(a.policy_heads),
            ff_mult: Some(a.ff_mult),
            dropout: Some(a.dropout),
            causal_encoder: Some(a.causal_encoder),
        };
        c.train.stage1.stage = 1;
        c.train.stage2.stage = 2;
        c.train.stage3.stage = 3;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.arch().validate()?;
        for s in [1, 2, 3] {
            self.stage(s, self.seed())?.validate()?;
        }
        self.decode.validate()?;
        if self.data.count == 0 {
            return Err(LabError::Config("data.count must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        if self.sweep.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(LabError::Config("sweep alphas must lie in [0, 1]".into()));
        }
        if self.sweep.waitk.contains(&0) {
            return Err(LabError::Config("wait-k lags must be at least 1".into()));
        }
        if let Some([x, y]) = self.sweep.bounds {
            if !(x < y) {
                return Err(LabError::Config(format!("bounds [{x}, {y}] are empty")));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    pub fn arch(&self) -> ArchConfig {
        let b = ArchConfig::for_task(&self.task);
        let o = &self.arch;
        ArchConfig {
            d_model: o.d_model.unwrap_or(b.d_model),
            heads: o.heads.unwrap_or(b.heads),
            enc_layers: o.enc_layers.unwrap_or(b.enc_layers),
            dec_layers: o.dec_layers.unwrap_or(b.dec_layers),
            policy_layers: o.policy_layers.unwrap_or(b.policy_layers),
            policy_heads: o.policy_heads.unwrap_or(b.policy_heads),
            ff_mult: o.ff_mult.unwrap_or(b.ff_mult),
            dropout: o.dropout.unwrap_or(b.dropout),
            causal_encoder: o.causal_encoder.unwrap_or(b.causal_encoder),
            ..b
        }
    }

    /// Training settings for `stage` under an experiment seed; the seed
    /// replaces whatever the stage section carries.
    pub fn stage(&self, stage: u8, seed: u64) -> Result<TrainConfig> {
        let c = match stage {
            1 => self.train.stage1,
            2 => self.train.stage2,
            3 => self.train.stage3,
            _ => return Err(LabError::Config(format!("no stage {stage}"))),
        };
        Ok(TrainConfig { stage, seed, ..c })
    }

    /// Wait-k lags to sweep for this task.
    pub fn waitk_lags(&self) -> Result<Vec<usize>> {
        if !self.sweep.waitk.is_empty() {
            return Ok(self.sweep.waitk.clone());
        }
        let fpc = reina_core::decoder::frames_per_chunk(self.task.frame_dur_s, &self.decode)?;
        Ok((1..=self.task.total_frames().div_ceil(fpc)).collect())
    }
}
