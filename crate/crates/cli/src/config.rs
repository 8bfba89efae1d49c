//! Sectioned configuration file. Every key is optional; command-line flags
//! take precedence over the file, and the file over built-in defaults.

use std::path::{Path, PathBuf};

use adcofe::classify::{ShuffleUnit, TrainConfig};
use adcofe::encoder::EncoderConfig;
use adcofe::optim::{LrSchedule, OptimizerKind};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub kg: KgSection,
    #[serde(default)]
    pub sentiment: SentimentSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    pub format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgSection {
    pub mode: Option<String>,
    pub base_url: Option<String>,
    pub fixture: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub variants: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentimentSection {
    pub lexicon: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub enabled: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub vocab_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub groups: Option<usize>,
    pub ff_dim: Option<usize>,
    pub max_positions: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub max_len: Option<usize>,
    pub shuffle: Option<ShuffleUnit>,
    pub sop_epochs: Option<usize>,
    pub clip_norm: Option<f64>,
    pub warmup: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Relative paths in the file are taken relative to the file itself.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.corpus.path);
        fix(&mut self.kg.fixture);
        fix(&mut self.kg.cache_dir);
        fix(&mut self.sentiment.lexicon);
        fix(&mut self.output.dir);
    }

    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        let d = EncoderConfig::default();
        let e = &self.encoder;
        EncoderConfig {
            vocab_size: e.vocab_size.unwrap_or(d.vocab_size),
            embed_dim: e.embed_dim.unwrap_or(d.embed_dim),
            hidden_dim: e.hidden_dim.unwrap_or(d.hidden_dim),
            layers: e.layers.unwrap_or(d.layers),
            heads: e.heads.unwrap_or(d.heads),
            groups: e.groups.unwrap_or(d.groups),
            ff_dim: e.ff_dim.unwrap_or(d.ff_dim),
            max_positions: e.max_positions.unwrap_or(d.max_positions),
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            optimizer: t.optimizer.unwrap_or(d.optimizer),
            seed,
            max_len: t.max_len.unwrap_or(d.max_len),
            shuffle: t.shuffle.unwrap_or(d.shuffle),
            clip_norm: t.clip_norm.or(d.clip_norm),
            schedule: match t.warmup {
                Some(warmup) => LrSchedule::WarmupLinear { warmup },
                None => d.schedule,
            },
        }
    }
}
