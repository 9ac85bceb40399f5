//! Run configuration: TOML file with CLI-flag overrides. The seed fixes
//! every stochastic component of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sfdnet::{ModelConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown task template \"{0}\"")]
    UnknownTask(String),
    #[error("config validation: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub allocator: AllocatorSection,
    pub sim: SimSection,
    pub vlm: VlmSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: "packing".into(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/model.sfdc"),
            model: ModelSection::default(),
            data: DataSection::default(),
            allocator: AllocatorSection::default(),
            sim: SimSection::default(),
            vlm: VlmSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub d_text: usize,
    pub t_diff: usize,
    pub g: usize,
    pub hidden: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub lr: f32,
    pub wd: f32,
    pub lora_rank: usize,
    pub epochs: usize,
    pub vae_epochs: usize,
    pub vae_batch: usize,
    pub beta_kl: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        ModelSection {
            d: m.latent_dim,
            d_text: m.text_dim,
            t_diff: m.t_diff,
            g: m.grid,
            hidden: m.hidden,
            width: m.width,
            heads: m.heads,
            blocks: m.blocks,
            lr: t.lr,
            wd: t.weight_decay,
            lora_rank: m.lora_rank,
            epochs: t.epochs,
            vae_epochs: t.vae_epochs,
            vae_batch: t.vae_batch,
            beta_kl: t.beta_kl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train_count: 10, eval_count: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorSection {
    pub d_safe: f64,
    pub m_max: usize,
}

impl Default for AllocatorSection {
    fn default() -> Self {
        AllocatorSection { d_safe: 0.10, m_max: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub v_max: f64,
    pub reach: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { dt: 0.02, v_max: 0.5, reach: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VlmSection {
    pub endpoint: Option<String>,
    pub timeout_s: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    /// `SFD_VLM_ENDPOINT` overrides `vlm.endpoint`.
    pub fn apply_env(&mut self) {
        if let Ok(ep) = std::env::var("SFD_VLM_ENDPOINT") {
            if ep.is_empty() {
                self.vlm.endpoint = None;
            } else {
                self.vlm.endpoint = Some(ep);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.template()?;
        if self.model.lr <= 0.0 {
            return Err(ConfigError::Invalid("model.lr must be positive".into()));
        }
        if self.model.g < 2 {
            return Err(ConfigError::Invalid("model.g must be at least 2".into()));
        }
        if self.sim.dt <= 0.0 || self.sim.v_max <= 0.0 {
            return Err(ConfigError::Invalid("sim.dt and sim.v_max must be positive".into()));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<crate::scene::TaskTemplate, ConfigError> {
        crate::scene::TaskTemplate::parse(&self.task)
            .ok_or_else(|| ConfigError::UnknownTask(self.task.clone()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid: self.model.g,
            frames: crate::scene::NUM_FRAMES,
            latent_dim: self.model.d,
            text_dim: self.model.d_text,
            hidden: self.model.hidden,
            width: self.model.width,
            heads: self.model.heads,
            blocks: self.model.blocks,
            t_diff: self.model.t_diff,
            beta_min: 1e-3,
            beta_max: 0.12,
            lora_rank: self.model.lora_rank,
        }
    }

    pub fn train_config(&self, siamese: bool) -> TrainConfig {
        TrainConfig {
            vae_epochs: self.model.vae_epochs,
            epochs: self.model.epochs,
            lr: self.model.lr,
            weight_decay: self.model.wd,
            vae_batch: self.model.vae_batch,
            beta_kl: self.model.beta_kl,
            seed: self.seed,
            siamese,
        }
    }

    pub fn vlm_timeout(&self) -> f64 {
        self.vlm.timeout_s.unwrap_or(30.0)
    }

    /// Dataset file for a split.
    pub fn episodes_path(&self, task: crate::scene::TaskTemplate, split: &str) -> PathBuf {
        self.data_dir.join(format!("{}_{split}.jsonl", task.name()))
    }

    pub fn checkpoint_path(&self, siamese: bool) -> PathBuf {
        if siamese {
            self.checkpoint.clone()
        } else {
            let mut p = self.checkpoint.clone();
            let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            p.set_file_name(format!("{stem}_nosiamese.sfdc"));
            p
        }
    }
}
