//! Experiment configuration: a flat key-value JSON document.
//!
//! Unknown keys are rejected so typos fail loudly instead of silently
//! running defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dadsim_core::simnet::WireDtype;
use dadsim_core::spi::SpiConfig;
use dadsim_core::strategies::ExchangeStrategy;

pub const DATA_DIR_ENV: &str = "DADSIM_DATA_DIR";

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_folds() -> usize {
    5
}
fn default_rank() -> usize {
    10
}
fn default_k_columns() -> usize {
    3
}
fn default_workers() -> usize {
    1
}
fn default_spi_iters() -> usize {
    30
}
fn default_wire() -> String {
    "f64".into()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_synth_n() -> usize {
    2000
}
fn default_synth_m() -> usize {
    16
}
fn default_synth_classes() -> usize {
    4
}
fn default_synth_rank() -> usize {
    4
}
fn default_synth_noise() -> f64 {
    0.1
}
fn default_seq_len() -> usize {
    32
}
fn default_rnn_hidden() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "mnist", "synth_lowrank" or "synth_sequences".
    pub dataset: String,
    /// Directory holding the MNIST IDX files; falls back to $DADSIM_DATA_DIR.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Hidden layer widths of the feed-forward classifier.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Hidden width of the recurrent cell (sequence datasets).
    #[serde(default = "default_rnn_hidden")]
    pub rnn_hidden: usize,
    /// "dsgd", "dad", "rank_dad", "power_sgd" or "topk_columns".
    pub strategy: String,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_k_columns")]
    pub k_columns: usize,
    #[serde(default = "default_spi_iters")]
    pub spi_iters: usize,
    pub sites: usize,
    #[serde(default = "default_batch")]
    pub batch_per_site: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Cross-validation fold count (k).
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// How many of the k folds to execute (defaults to all).
    #[serde(default)]
    pub run_folds: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// "f64" or "f32".
    #[serde(default = "default_wire")]
    pub wire_dtype: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    // Synthetic dataset knobs.
    #[serde(default = "default_synth_n")]
    pub synth_n: usize,
    #[serde(default = "default_synth_m")]
    pub synth_m: usize,
    #[serde(default = "default_synth_classes")]
    pub synth_classes: usize,
    #[serde(default = "default_synth_rank")]
    pub synth_rank: usize,
    #[serde(default = "default_synth_noise")]
    pub synth_noise: f64,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("io: cannot read {}: {e}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| format!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.dataset.as_str() {
            "mnist" | "synth_lowrank" | "synth_sequences" => {}
            other => return Err(format!("config: unknown dataset \"{other}\"")),
        }
        match self.strategy.as_str() {
            "dsgd" | "dad" | "rank_dad" | "power_sgd" | "topk_columns" => {}
            other => return Err(format!("config: unknown strategy \"{other}\"")),
        }
        match self.wire_dtype.as_str() {
            "f64" | "f32" => {}
            other => return Err(format!("config: unknown wire_dtype \"{other}\"")),
        }
        if self.sites == 0 {
            return Err("config: sites must be >= 1".into());
        }
        if self.batch_per_site == 0 {
            return Err("config: batch_per_site must be >= 1".into());
        }
        if self.rank == 0 {
            return Err("config: rank must be >= 1".into());
        }
        if self.k_columns == 0 {
            return Err("config: k_columns must be >= 1".into());
        }
        if self.k_columns > self.batch_per_site && self.strategy == "topk_columns" {
            return Err("config: k_columns cannot exceed batch_per_site".into());
        }
        if self.folds < 2 {
            return Err("config: folds must be >= 2".into());
        }
        if let Some(rf) = self.run_folds {
            if rf == 0 || rf > self.folds {
                return Err("config: run_folds must be in 1..=folds".into());
            }
        }
        if self.dataset == "mnist" && self.hidden.is_empty() {
            return Err("config: hidden layer list required for mnist".into());
        }
        if self.workers == 0 {
            return Err("config: workers must be >= 1".into());
        }
        Ok(())
    }

    pub fn strategy_enum(&self) -> ExchangeStrategy {
        match self.strategy.as_str() {
            "dsgd" => ExchangeStrategy::Dsgd,
            "dad" => ExchangeStrategy::Dad,
            "rank_dad" => ExchangeStrategy::RankDad {
                spi: SpiConfig::new(self.rank).with_iters(self.spi_iters),
            },
            "power_sgd" => ExchangeStrategy::PowerSgd { rank: self.rank },
            "topk_columns" => ExchangeStrategy::TopkColumns { k: self.k_columns },
            _ => unreachable!("validated"),
        }
    }

    pub fn wire_enum(&self) -> WireDtype {
        match self.wire_dtype.as_str() {
            "f32" => WireDtype::F32,
            _ => WireDtype::F64,
        }
    }

    /// MNIST directory: explicit config value, else $DADSIM_DATA_DIR.
    pub fn resolved_data_dir(&self) -> Result<PathBuf, String> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        if let Ok(env) = std::env::var(DATA_DIR_ENV) {
            return Ok(PathBuf::from(env));
        }
        Err(format!(
            "config: dataset \"mnist\" needs data_dir or ${DATA_DIR_ENV}"
        ))
    }
}
