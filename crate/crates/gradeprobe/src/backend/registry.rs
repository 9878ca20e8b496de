//! Backend registry keyed by name in the run config.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::http::{HttpBackend, HttpBackendConfig};
use super::stub::ScriptedBackend;
use super::toy::{ToyConfig, ToyTransformer};
use super::{BackendError, BlackBoxBackend};
use crate::token::ToyTokenizer;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendEntry {
    Toy {
        #[serde(default)]
        config: ToyConfig,
        /// Byte-level tokenizer size; `128` means full ASCII.
        #[serde(default = "default_byte_vocab")]
        byte_vocab: usize,
        #[serde(default)]
        specials: Vec<String>,
        /// Optional weight file produced by `ToyTransformer::save_weights`.
        #[serde(default)]
        weights: Option<PathBuf>,
    },
    Stub {
        script: Vec<String>,
    },
    Http {
        url_env: String,
        #[serde(default)]
        credential_env: Option<String>,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_interval_ms")]
        min_interval_ms: u64,
    },
}

fn default_byte_vocab() -> usize {
    128
}
fn default_retries() -> u32 {
    2
}
fn default_interval_ms() -> u64 {
    0
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown backend name: {0}")]
    UnknownBackend(String),
    #[error("backend {0} is not white-box")]
    NotWhiteBox(String),
    #[error("backend {name}: {source}")]
    Build {
        name: String,
        source: BackendError,
    },
    #[error("backend {0}: weight file error: {1}")]
    Weights(String, std::io::Error),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendRegistry {
    pub entries: BTreeMap<String, BackendEntry>,
}

impl BackendRegistry {
    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|s| s.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn build_black_box(&self, name: &str) -> Result<Box<dyn BlackBoxBackend>, RegistryError> {
        match self
            .entries
            .get(name)
            .ok_or_else(|| RegistryError::UnknownBackend(name.to_string()))?
        {
            BackendEntry::Toy { .. } => Ok(Box::new(self.build_toy(name)?)),
            BackendEntry::Stub { script } => {
                Ok(Box::new(ScriptedBackend::new(name, script.clone())))
            }
            BackendEntry::Http {
                url_env,
                credential_env,
                max_retries,
                min_interval_ms,
            } => {
                let backend = HttpBackend::from_env(HttpBackendConfig {
                    name: name.to_string(),
                    url_env: url_env.clone(),
                    credential_env: credential_env.clone(),
                    max_retries: *max_retries,
                    timeout: Duration::from_secs(60),
                    min_interval: Duration::from_millis(*min_interval_ms),
                })
                .map_err(|source| RegistryError::Build {
                    name: name.to_string(),
                    source,
                })?;
                Ok(Box::new(backend))
            }
        }
    }

    pub fn build_toy(&self, name: &str) -> Result<ToyTransformer, RegistryError> {
        match self
            .entries
            .get(name)
            .ok_or_else(|| RegistryError::UnknownBackend(name.to_string()))?
        {
            BackendEntry::Toy {
                config,
                byte_vocab,
                specials,
                weights,
            } => {
                let mut tok = if *byte_vocab >= 128 {
                    ToyTokenizer::ascii()
                } else {
                    ToyTokenizer::printable(*byte_vocab)
                };
                for s in specials {
                    tok.register_special(s);
                }
                let mut model = ToyTransformer::new(name, config.clone(), tok);
                if let Some(path) = weights {
                    let file = std::fs::File::open(path)
                        .map_err(|e| RegistryError::Weights(name.to_string(), e))?;
                    model
                        .load_weights(std::io::BufReader::new(file))
                        .map_err(|e| RegistryError::Weights(name.to_string(), e))?;
                }
                Ok(model)
            }
            _ => Err(RegistryError::NotWhiteBox(name.to_string())),
        }
    }
}
