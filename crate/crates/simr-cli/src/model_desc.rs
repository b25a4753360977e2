//! Sidecar describing the model a checkpoint belongs to. Checkpoints store
//! only named tensors, so `train` writes `model.json` next to them and the
//! scoring commands read it back instead of trusting loose flags to match.

use serde::{Deserialize, Serialize};
use simr::alignment::{KvChoice, SimrVariant};
use simr::data::Dataset;
use simr::model::ModelConfig;
use simr::{Error, Result};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDesc {
    pub d: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub d_ff: usize,
    pub head_kind: String,
    pub kv_choice: String,
    pub p_raw: usize,
    pub l_patches: usize,
    pub m_len: usize,
    pub vocab_size: usize,
    pub config_echo: serde_json::Value,
}

impl ModelDesc {
    pub fn describe(cfg: &ModelConfig, config_echo: serde_json::Value) -> ModelDesc {
        ModelDesc {
            d: cfg.d,
            heads: cfg.heads,
            n_enc: cfg.n_enc,
            d_ff: cfg.d_ff(),
            head_kind: cfg.variant.as_str().into(),
            kv_choice: cfg.kv.as_str().into(),
            p_raw: cfg.p_raw,
            l_patches: cfg.l_patches,
            m_len: cfg.m_len,
            vocab_size: cfg.vocab_size,
            config_echo,
        }
    }

    pub fn to_model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d: self.d,
            heads: self.heads,
            n_enc: self.n_enc,
            p_raw: self.p_raw,
            l_patches: self.l_patches,
            m_len: self.m_len,
            vocab_size: self.vocab_size,
            variant: SimrVariant::parse(&self.head_kind)?,
            kv: KvChoice::parse(&self.kv_choice)?,
            ffn_width: Some(self.d_ff),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Contract(format!("model description serializes: {e}")))?;
        text.push('\n');
        Ok(std::fs::write(path, text)?)
    }

    /// Reads the `model.json` next to a checkpoint.
    pub fn load_for(checkpoint: &Path) -> Result<ModelDesc> {
        let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Input(format!(
                "cannot read model description {} (written by `train` next to its checkpoints): {e}",
                path.display()
            ))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("bad model description {}: {e}", path.display())))
    }

    /// The dataset a model is scored on must look like the one it was
    /// trained on; dimension drift would otherwise surface as opaque
    /// shape errors deep in the forward pass.
    pub fn check_dataset(&self, ds: &Dataset, vocab_len: usize) -> Result<()> {
        if self.p_raw != ds.config.p || self.l_patches != ds.config.l {
            return Err(Error::Input(format!(
                "checkpoint expects {}x{} patches but dataset has {}x{}",
                self.l_patches, self.p_raw, ds.config.l, ds.config.p
            )));
        }
        if self.vocab_size != vocab_len {
            return Err(Error::Input(format!(
                "checkpoint vocabulary size {} does not match dataset vocabulary {}",
                self.vocab_size, vocab_len
            )));
        }
        Ok(())
    }
}
