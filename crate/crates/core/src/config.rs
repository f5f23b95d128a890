//! Run configuration: one TOML file with a section per component. Every key
//! is optional and defaults as documented on each section type; unknown keys
//! are rejected.
//!
//! ```toml
//! [data]      # scene generation (gen-data)
//! [force]     # theta_bins, levels
//! [graph]     # near_prune, near_fraction, path_cap
//! [encoder]   # embed_dim, gnn_layers, f_hidden, projection_dim, temperature, ...
//! [train]     # epochs, batch_size, lr, label_smoothing, k_set, path_budget, seed, ...
//! [train.weights]
//! [eval]      # top_k, probe_seeds, ...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, ModelSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::force::ForceConfig;
use crate::graph::GraphConfig;
use crate::scene::SceneGenConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SceneGenConfig,
    pub force: ForceConfig,
    pub graph: GraphConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.force.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if !(self.graph.near_fraction > 0.0) || self.graph.path_cap == 0 {
            return Err(Error::Config("graph.near_fraction must be > 0 and graph.path_cap >= 1".into()));
        }
        Ok(())
    }

    /// Canonical TOML rendering with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// 16 hex characters of SHA-256 over [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        short_hash(&self.to_toml())
    }

    /// Shape-determining model settings for a corpus vocabulary.
    pub fn model_spec(&self, n_labels: usize, n_attributes: usize) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            force: self.force.clone(),
            n_labels,
            n_attributes,
        }
    }
}

/// Hash of everything that determines parameter shapes and forward
/// semantics; stored in checkpoints.
pub fn model_hash(spec: &ModelSpec) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        encoder: &'a EncoderConfig,
        force: &'a ForceConfig,
        n_labels: usize,
        n_attributes: usize,
    }
    let key = Key {
        encoder: &spec.encoder,
        force: &spec.force,
        n_labels: spec.n_labels,
        n_attributes: spec.n_attributes,
    };
    short_hash(&toml::to_string(&key).expect("model key serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.force.theta_bins, 64);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::parse("[train]\nlearning_rate = 0.001\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(RunConfig::parse("[trian]\n").unwrap_err().to_string().contains("trian"));
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let b = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        assert_eq!(model_hash(&a.model_spec(3, 3)), model_hash(&b.model_spec(3, 3)));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[train]\nlr = 0.5\n").is_err());
        assert!(RunConfig::parse("[force]\ntheta_bins = 7\n").is_err());
    }
}
