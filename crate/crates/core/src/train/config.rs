use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SyntheticTaskSpec, TrainConfig};
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Everything a CLI run needs, read from a TOML file with the sections
/// `[model]`, `[train]`, `[beam]` and `[synthetic]`. Chunk geometry lives in
/// `[model]` as `chunk_len`, `overlap` and `left_context`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic training and held-out set sizes.
    pub train_samples: usize,
    pub eval_samples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub synthetic: SyntheticTaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            synthetic: SyntheticTaskSpec::default(),
            train_samples: 2000,
            eval_samples: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.beam.validate()?;
        self.synthetic.validate()?;
        if self.synthetic.vocab_size != self.model.vocab_size || self.synthetic.d_in != self.model.d_in {
            return Err(Error::Config("[synthetic] vocab_size and d_in must match [model]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("[model]\nchunk_len = 10\noverlap = 3\n[beam]\nwidth = 3\n").unwrap();
        assert_eq!(cfg.model.chunk_len, 10);
        assert_eq!(cfg.beam.width, 3);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn round_trip_and_rejections() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[synthetic]\nvocab_size = 9\n").is_err());
    }
}
