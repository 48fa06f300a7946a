//! Loading, overriding and hashing experiment configurations.

use std::fmt;
use std::path::Path;

use lazydyn::experiments::ExperimentConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// A configuration that failed to parse or validate.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`, creating intermediate tables.
pub fn apply_override(table: &mut Table, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| err(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(err(format!("override {spec:?} has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| err(format!("override {spec:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut table: Table = toml::from_str(text).map_err(|e| err(format!("invalid config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| err(format!("invalid config: {}", e.message())))?;
    cfg.validate().map_err(|e| err(format!("invalid config: {e}")))?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn to_toml(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    Ok(toml::to_string(cfg)?)
}

/// Hash of everything except the seed list, so all seeds of one
/// configuration share a directory.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.seeds.clear();
    let canonical = serde_json::to_string(&c).expect("configs serialise");
    hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
}
