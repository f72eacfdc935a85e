use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::{BYTE_VOCAB, N_SPECIAL};
use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, DEFAULT_RMS_EPS};

/// Architecture of the decoder. Serialized as the JSON sidecar next to a
/// weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Hidden width of the FFN.
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub activation_kind: ActivationKind,
    pub max_seq_len: usize,
    /// Adds sinusoidal position encodings to the embeddings. Off by
    /// default: positions are implicit through the causal mask.
    #[serde(default)]
    pub sinusoidal_positions: bool,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
    /// Marks a trained checkpoint. Random-init models leave this false and
    /// the inertia ordinal checks are reported as not applicable.
    #[serde(default)]
    pub pretrained: bool,
}

fn default_rms_eps() -> f32 {
    DEFAULT_RMS_EPS
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            d_ff: 1024,
            n_heads: 4,
            vocab_size: BYTE_VOCAB + N_SPECIAL,
            activation_kind: ActivationKind::Silu,
            max_seq_len: 512,
            sinusoidal_positions: false,
            rms_eps: DEFAULT_RMS_EPS,
            pretrained: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < BYTE_VOCAB + N_SPECIAL {
            return Err(Error::Config(format!(
                "vocab_size {} is below the byte vocabulary plus specials ({})",
                self.vocab_size,
                BYTE_VOCAB + N_SPECIAL
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Sidecar location for a weight file: same stem, `.json` extension.
    pub fn sidecar_path(weights: &Path) -> std::path::PathBuf {
        weights.with_extension("json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_small_vocab() {
        let cfg = ModelConfig {
            vocab_size: 256,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_fills_optional_fields() {
        let text = r#"{"n_layers":2,"d_model":8,"d_ff":16,"n_heads":2,
            "vocab_size":257,"activation_kind":"relu","max_seq_len":32}"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.rms_eps, DEFAULT_RMS_EPS);
        assert!(!cfg.sinusoidal_positions && !cfg.pretrained);
    }
}
