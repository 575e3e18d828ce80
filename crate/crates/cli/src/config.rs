//! Pipeline configuration file (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use midilm_core::align::{AlignConfig, TrainConfig};
use midilm_core::annotate::HttpConfig;
use midilm_core::QuantConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("data/midi"),
            output_dir: PathBuf::from("out"),
            cache_dir: PathBuf::from("cache/llm"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    /// Cached responses only; a cache miss is an error.
    Replay,
    /// Live HTTP calls, cached by request digest.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub mode: LlmMode,
    pub http: HttpConfig,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    /// Upper bound on concurrent requests; `--jobs` lowers it further.
    pub concurrency: usize,
    /// Rewrite template questions through the LLM in `gen-qa`.
    pub paraphrase: bool,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            mode: LlmMode::Replay,
            http: HttpConfig::default(),
            max_attempts: 3,
            base_delay_ms: 500,
            concurrency: 4,
            paraphrase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub quant: QuantConfig,
    pub align: AlignConfig,
    pub train: TrainConfig,
    /// Decoder pretraining settings used by `pretrain`.
    pub pretrain: TrainConfig,
    pub split_seed: u64,
    pub clip_seconds: f64,
    pub clips_per_piece: usize,
    pub llm: LlmSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            quant: QuantConfig::default(),
            align: AlignConfig::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                max_lr: 2e-3,
                epochs: 6,
                ..TrainConfig::default()
            },
            split_seed: 0,
            clip_seconds: midilm_core::segment::DEFAULT_CLIP_SECONDS,
            clips_per_piece: midilm_core::segment::DEFAULT_CLIP_COUNT,
            llm: LlmSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let p = &self.paths;
        if p.input_dir == p.output_dir || p.input_dir == p.cache_dir || p.output_dir == p.cache_dir
        {
            bail!("paths.input_dir, paths.output_dir and paths.cache_dir must be distinct");
        }
        self.align.validate().context("invalid [align] section")?;
        self.train.validate().context("invalid [train] section")?;
        if self.clip_seconds.is_nan() || self.clip_seconds <= 0.0 || self.clips_per_piece == 0 {
            bail!("clip_seconds and clips_per_piece must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = PipelineConfig::default();
        cfg.train.max_lr = 3.3e-4;
        cfg.llm.mode = LlmMode::Http;
        cfg.split_seed = 17;
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg: PipelineConfig =
            toml::from_str("split_seed = 5\n[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.split_seed, 5);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.align, AlignConfig::default());
    }

    #[test]
    fn rejects_shared_paths() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.cache_dir = cfg.paths.output_dir.clone();
        assert!(cfg.validate().is_err());
    }
}
