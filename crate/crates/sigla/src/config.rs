//! Run configuration files, TOML or JSON by extension.

use std::fs;
use std::path::Path;

use sigla_core::orchestrator::RunConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn of(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

pub fn parse(text: &str, format: Format) -> Result<RunConfig> {
    let cfg: RunConfig = match format {
        Format::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        Format::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse(&text, Format::of(path)).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn render(cfg: &RunConfig, format: Format) -> Result<String> {
    match format {
        Format::Toml => toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string())),
        Format::Json => Ok(serde_json::to_string_pretty(cfg)?),
    }
}

pub fn save(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = render(cfg, Format::of(path))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
