//! Run configuration: compiled-in defaults, an optional JSON file, and
//! command-line flags, resolved in that order (flags win).

use serde::{Deserialize, Serialize};
use simr::alignment::{KvChoice, SimrVariant};
use simr::data::Rewriter;
use simr::eval::Direction;
use simr::model::ModelConfig;
use simr::optim::OptKind;
use simr::train::TrainConfig;
use simr::{Error, Result};
use std::path::{Path, PathBuf};

/// Environment variable consulted for the rewrite service when neither the
/// config file nor a flag names one.
pub const REWRITER_ENV: &str = "SIMR_REWRITER_ENDPOINT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// shared feature width
    pub d: usize,
    pub heads: usize,
    /// transformer blocks per encoder
    pub n_enc: usize,
    /// feed-forward width; null picks 2*d
    pub d_ff: Option<usize>,
    /// similarity head: cos_proj_proj, cos_proj_orig, linear or mlp
    pub head_kind: String,
    /// cross-attention keys/values: global, local or both
    pub kv_choice: String,
    pub prompt_align: bool,
    /// zero-shot scoring direction: t2i, i2t or avg
    pub direction: String,
    pub opt: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rewriter_endpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            d: 32,
            heads: 2,
            n_enc: 2,
            d_ff: None,
            head_kind: "linear".into(),
            kv_choice: "both".into(),
            prompt_align: true,
            direction: "avg".into(),
            opt: "adam".into(),
            lr: 5e-4,
            epochs: 20,
            batch_size: 32,
            seed: 42,
            rewriter_endpoint: None,
        }
    }
}

/// Partial config: what a JSON file or the command line actually set.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub n_enc: Option<usize>,
    pub d_ff: Option<usize>,
    pub head_kind: Option<String>,
    pub kv_choice: Option<String>,
    pub prompt_align: Option<bool>,
    pub direction: Option<String>,
    pub opt: Option<String>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub rewriter_endpoint: Option<String>,
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        take!(dataset, out_dir, d, heads, n_enc, head_kind, kv_choice, prompt_align,
              direction, opt, lr, epochs, batch_size, seed);
        if let Some(v) = self.d_ff {
            c.d_ff = Some(v);
        }
        if let Some(v) = self.rewriter_endpoint {
            c.rewriter_endpoint = Some(v);
        }
    }
}

fn load_file(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config file {}: {e}", path.display())))
}

/// Defaults, then the environment endpoint, then the file, then flags.
pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(ep) = std::env::var(REWRITER_ENV) {
        if !ep.is_empty() {
            cfg.rewriter_endpoint = Some(ep);
        }
    }
    if let Some(path) = file {
        load_file(path)?.apply(&mut cfg);
    }
    flags.apply(&mut cfg);
    Ok(cfg)
}

impl RunConfig {
    /// Dataset-dependent dims come from the loaded data, not the config.
    pub fn model_config(
        &self,
        p_raw: usize,
        l_patches: usize,
        m_len: usize,
        vocab_size: usize,
    ) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d: self.d,
            heads: self.heads,
            n_enc: self.n_enc,
            p_raw,
            l_patches,
            m_len,
            vocab_size,
            variant: SimrVariant::parse(&self.head_kind)?,
            kv: KvChoice::parse(&self.kv_choice)?,
            ffn_width: self.d_ff,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            opt: OptKind::parse(&self.opt)?,
            lr: self.lr,
            seed: self.seed,
            prompt_align: self.prompt_align,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn direction(&self) -> Result<Direction> {
        Direction::parse(&self.direction)
    }

    pub fn rewriter(&self) -> Rewriter {
        match &self.rewriter_endpoint {
            Some(ep) => Rewriter::remote(ep.clone()),
            None => Rewriter::rule_based(),
        }
    }

    /// The effective config as JSON, embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"lr": 0.01, "epochs": 7}"#).unwrap();
        let flags = Overrides { epochs: Some(3), ..Default::default() };
        let cfg = resolve(Some(&path), flags).unwrap();
        assert_eq!(cfg.lr, 0.01); // file
        assert_eq!(cfg.epochs, 3); // flag
        assert_eq!(cfg.batch_size, 32); // default
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"learning_rate": 0.01}"#).unwrap();
        match resolve(Some(&path), Overrides::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_head_kind_is_a_config_error() {
        let cfg = RunConfig { head_kind: "bilinear".into(), ..Default::default() };
        match cfg.model_config(4, 4, 8, 10) {
            Err(Error::Config(msg)) => assert!(msg.contains("bilinear"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }
}
