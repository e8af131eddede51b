use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::NUM_SPECIALS;
use crate::error::{Error, Result};

pub const MAX_STREAMS: usize = 4;

fn yes() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.1
}

fn default_streams() -> usize {
    2
}

/// Architecture of the encoder-decoder. Encoder and decoder share `layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_streams")]
    pub streams: usize,
    pub max_positions: usize,
    #[serde(default = "yes")]
    pub share_stream_params: bool,
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
    /// Dropout on attention weights during training.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    /// Small configuration used throughout the tests.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 16,
            ffn: 32,
            heads: 2,
            vocab_size: 20,
            streams: 2,
            max_positions: 16,
            share_stream_params: true,
            tie_embeddings: true,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 {
            return bad("layers, hidden and ffn must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide hidden size {}",
                self.heads, self.hidden
            ));
        }
        if self.streams == 0 || self.streams > MAX_STREAMS {
            return bad(format!(
                "streams must be in 1..={MAX_STREAMS}, got {}",
                self.streams
            ));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return bad(format!(
                "vocab_size {} leaves no room beyond the {NUM_SPECIALS} special tokens",
                self.vocab_size
            ));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Index of the parameter group used by stream `s` (0 = main stream).
    pub fn group(&self, s: usize) -> usize {
        if self.share_stream_params {
            0
        } else {
            s
        }
    }

    pub fn groups(&self) -> usize {
        if self.share_stream_params {
            1
        } else {
            self.streams + 1
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
}

pub fn write_manifest(path: &Path, cfg: &ModelConfig) -> Result<()> {
    let text = toml::to_string(&Manifest { model: cfg.clone() })
        .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
    crate::numerics::checkpoint::write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    m.model.validate()?;
    Ok(m.model)
}
