//! Pretraining config file.
//!
//! ```toml
//! [data]
//! vocab = "vocab.txt"          # relative to this file
//! corpus = ["corpus.txt"]
//!
//! [model]
//! preset = "toy"               # or "bert-base" (default)
//! max_positions = 64           # any model field overrides the preset
//!
//! [pretrain]
//! learning_rate = 1e-3
//! max_steps = 200
//! ```
//!
//! Without `[model]`, a run started from `--init` keeps that checkpoint's
//! dimensions.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use guwen_core::model::ModelConfig;
use guwen_core::pretrain::PretrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub(crate) struct PretrainFile {
    pub data: DataSection,
    pub model: Option<toml::Table>,
    pub pretrain: Option<toml::Table>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub(crate) struct DataSection {
    pub vocab: Option<PathBuf>,
    pub corpus: Vec<PathBuf>,
}

impl PretrainFile {
    /// Reads `path`, resolving data paths against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut f: PretrainFile =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        f.data.vocab = f.data.vocab.map(|v| dir.join(v));
        f.data.corpus = f.data.corpus.iter().map(|c| dir.join(c)).collect();
        Ok(f)
    }
}

/// `base` with the keys of `over` replaced; unknown keys are an error.
pub(crate) fn overlay<C: Serialize + DeserializeOwned>(
    base: &C,
    over: &toml::Table,
    what: &str,
) -> anyhow::Result<C> {
    let mut table = toml::Table::try_from(base)?;
    for (k, v) in over {
        match (table.get_mut(k), v) {
            (None, _) => bail!(guwen_core::Error::Config(format!(
                "unknown {what} key {k:?}"
            ))),
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => {
                for (sk, sv) in src {
                    if !dst.contains_key(sk) {
                        bail!(guwen_core::Error::Config(format!(
                            "unknown {what} key {k}.{sk}"
                        )));
                    }
                    dst.insert(sk.clone(), sv.clone());
                }
            }
            (Some(slot), v) => *slot = v.clone(),
        }
    }
    Ok(table.try_into()?)
}

/// Model config from the `[model]` table, or from `init` when absent.
pub(crate) fn resolve_model(
    section: Option<&toml::Table>,
    vocab_size: usize,
    init: Option<&ModelConfig>,
) -> anyhow::Result<ModelConfig> {
    let Some(section) = section else {
        return Ok(match init {
            Some(c) => ModelConfig {
                decoder_layers: 0,
                num_classes: 0,
                ..c.clone()
            },
            None => ModelConfig::bert_base(vocab_size),
        });
    };
    let mut section = section.clone();
    let preset = match section.remove("preset") {
        None => "bert-base".to_string(),
        Some(toml::Value::String(s)) => s,
        Some(other) => bail!(guwen_core::Error::Config(format!(
            "model preset must be a string, got {other}"
        ))),
    };
    let base = match preset.as_str() {
        "bert-base" => ModelConfig::bert_base(vocab_size),
        "toy" => ModelConfig::toy(vocab_size, 64),
        other => bail!(guwen_core::Error::Config(format!(
            "unknown model preset {other:?} (toy, bert-base)"
        ))),
    };
    let cfg: ModelConfig = overlay(&base, &section, "model")?;
    if cfg.vocab_size != vocab_size {
        bail!(guwen_core::Error::Config(format!(
            "model vocab_size {} differs from the vocabulary ({vocab_size})",
            cfg.vocab_size
        )));
    }
    Ok(cfg)
}

pub(crate) fn resolve_pretrain(section: Option<&toml::Table>) -> anyhow::Result<PretrainConfig> {
    match section {
        Some(s) => overlay(&PretrainConfig::default(), s, "pretrain"),
        None => Ok(PretrainConfig::default()),
    }
}
