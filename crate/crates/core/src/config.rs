//! Run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bm25::Bm25Params;
use crate::data::SyntheticConfig;
use crate::encoder::{EncoderConfig, RoutingKind};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Encoder shape; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub routing: RoutingKind,
    /// Defaults to 1 for shared and 2 otherwise.
    pub num_experts: Option<usize>,
    pub d_model: usize,
    pub ffn_inner: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub interleave_period: usize,
    pub max_positions: usize,
    pub include_pooler: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let toy = EncoderConfig::toy(4, RoutingKind::Det);
        Self {
            routing: toy.routing,
            num_experts: None,
            d_model: toy.d_model,
            ffn_inner: toy.ffn_inner,
            num_heads: toy.num_heads,
            num_blocks: toy.num_blocks,
            interleave_period: toy.interleave_period,
            max_positions: toy.max_positions,
            include_pooler: toy.include_pooler,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let base = EncoderConfig::toy(vocab_size, self.routing);
        let experts = self.num_experts.unwrap_or(base.num_experts);
        let config = EncoderConfig {
            d_model: self.d_model,
            ffn_inner: self.ffn_inner,
            num_heads: self.num_heads,
            num_blocks: self.num_blocks,
            interleave_period: self.interleave_period,
            max_positions: self.max_positions,
            include_pooler: self.include_pooler,
            ..base
        }
        .with_routing(self.routing, experts);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Passages written per query.
    pub k: usize,
    /// Candidates taken from each arm before fusion.
    pub candidates: usize,
    /// Fixed fusion weight; `None` means dense only unless tuned.
    pub alpha: Option<f64>,
    pub bm25: Bm25Params,
    /// Cutoffs reported by `eval`.
    pub recall_ks: Vec<usize>,
    pub ndcg_k: usize,
    /// Threads for corpus embedding.
    pub workers: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 100,
            candidates: 100,
            alpha: None,
            bm25: Bm25Params::default(),
            recall_ks: vec![1, 5, 20, 100],
            ndcg_k: 10,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Directory receiving every artifact.
    pub workspace: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Parameter("a seed is required (set `seed` or pass --seed)".into())
        })
    }

    /// Returns the path or an error naming the missing field.
    pub fn require_path<'a>(field: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        let p = path
            .as_deref()
            .ok_or_else(|| Error::Parameter(format!("missing path: {field}")))?;
        if !p.exists() {
            return Err(Error::Input(format!("{field} not found: {}", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig {
            seed: Some(3),
            ..Default::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig =
            serde_json::from_str(r#"{"model": {"routing": "shared"}}"#).unwrap();
        assert_eq!(partial.model.routing, RoutingKind::Shared);
        assert_eq!(partial.train, TrainConfig::default());
        assert!(partial.require_seed().is_err());
    }

    #[test]
    fn encoder_config_defaults_experts() {
        let m = ModelConfig::default();
        assert_eq!(m.encoder_config(50).unwrap().num_experts, 2);
        let s = ModelConfig {
            routing: RoutingKind::Shared,
            ..m
        };
        assert_eq!(s.encoder_config(50).unwrap().num_experts, 1);
    }
}
