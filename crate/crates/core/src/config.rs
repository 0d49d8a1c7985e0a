//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::lm::{CharCorpus, Method, ModelConfig, PruneConfig, SplitFractions, SymbolMode, TrainConfig};
use crate::tensor::Precision;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub mode: SymbolMode,
    pub split: SplitFractions,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: Option<PathBuf>,
    /// Storage precision of checkpoints.
    pub precision: Precision,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gate.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.corpus.split.validate()?;
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", t.warmup_fraction)));
        }
        let [lo, hi] = t.gate_logit_range;
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::Config(format!("gate_logit_range [{lo}, {hi}] is empty")));
        }
        if t.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prune.target_compression) {
            return Err(Error::Config(format!(
                "target compression {} outside [0, 1]",
                self.prune.target_compression
            )));
        }
        if !(self.prune.anneal_fraction > 0.0 && self.prune.anneal_fraction <= 1.0) {
            return Err(Error::Config("prune.anneal_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<CharCorpus> {
        let path = self
            .corpus
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("corpus.path is not set".into()))?;
        CharCorpus::ingest(path, self.corpus.mode, self.corpus.split)
    }
}
