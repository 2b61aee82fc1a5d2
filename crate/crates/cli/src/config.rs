//! Optional JSON config file mirroring the CLI flags. Flags always win;
//! config values fill in whatever was not passed; built-in defaults come
//! last.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use crate::{BackendArg, ModeArg, StrategyArg, StyleArg};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub vocab: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub strategy: Option<String>,
    pub mode: Option<String>,
    pub style: Option<String>,
    pub backend: Option<String>,
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub matrix: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub from_file: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub token_env: Option<String>,
    pub max_in_flight: Option<usize>,
    pub max_retries: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub backoff_multiplier: Option<f64>,
    pub timeout_ms: Option<u64>,
    pub max_tokens: Option<u32>,
    pub temperature: Option<f64>,
    pub sim_profile: Option<PathBuf>,
    pub sim_seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub fail_fast: Option<bool>,
    pub log_queries: Option<bool>,
    pub no_cad: Option<bool>,
    pub min_positives: Option<u64>,
    pub top_k: Option<usize>,
    pub compat_ap: Option<bool>,
    pub per_class_csv: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: FileConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        for (field, value, allowed) in [
            ("strategy", &config.strategy, &["randp", "coop", "discp"][..]),
            ("mode", &config.mode, &["tagllm", "bp", "mop", "open"][..]),
            ("style", &config.style, &["simple", "careful"][..]),
            ("backend", &config.backend, &["sim", "http"][..]),
        ] {
            if let Some(value) = value {
                if !allowed.contains(&value.as_str()) {
                    anyhow::bail!(
                        "config {}: {field} must be one of {allowed:?}, got {value:?}",
                        path.display()
                    );
                }
            }
        }
        Ok(config)
    }

    pub fn strategy_arg(&self) -> Option<StrategyArg> {
        match self.strategy.as_deref()? {
            "randp" => Some(StrategyArg::Randp),
            "coop" => Some(StrategyArg::Coop),
            "discp" => Some(StrategyArg::Discp),
            _ => None,
        }
    }

    pub fn backend_arg(&self) -> Option<BackendArg> {
        match self.backend.as_deref()? {
            "sim" => Some(BackendArg::Sim),
            "http" => Some(BackendArg::Http),
            _ => None,
        }
    }

    pub fn mode_arg(&self) -> Option<ModeArg> {
        match self.mode.as_deref()? {
            "tagllm" => Some(ModeArg::Tagllm),
            "bp" => Some(ModeArg::Bp),
            "mop" => Some(ModeArg::Mop),
            "open" => Some(ModeArg::Open),
            _ => None,
        }
    }

    pub fn style_arg(&self) -> Option<StyleArg> {
        match self.style.as_deref()? {
            "simple" => Some(StyleArg::Simple),
            "careful" => Some(StyleArg::Careful),
            _ => None,
        }
    }
}
