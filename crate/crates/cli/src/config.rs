//! Configuration resolution: defaults, then the TOML file, then
//! `PHMM_SECTION__KEY` environment variables, then command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use phmm::corpus::CorpusConfig;
use phmm::system::PipelineConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

pub const ENV_PREFIX: &str = "PHMM_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub corpus: CorpusConfig,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Config {
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Config> {
        let mut tree = match file {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            if path.iter().any(String::is_empty) {
                bail!("malformed config variable {key}");
            }
            set_path(&mut tree, &path, parse_scalar(&raw))
                .with_context(|| format!("applying {key}"))?;
        }
        let cfg: Config = Value::Table(tree.clone())
            .try_into()
            .context("invalid configuration")?;
        let known = Value::try_from(&cfg).context("serializing configuration")?;
        let mut unknown = Vec::new();
        unknown_keys(&Value::Table(tree), &known, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }
        Ok(cfg)
    }
}

/// TOML literal if it parses as one, else a bare string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = tree;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!("{p} is not a section"),
        };
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Table(g), Value::Table(k)) = (given, known) else {
        return;
    };
    for (key, v) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            Some(kv) => unknown_keys(v, kv, &path, out),
            None => out.push(path),
        }
    }
}
