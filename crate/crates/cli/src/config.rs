//! Run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use ecl_core::trainer::TrainConfig;
use ecl_core::Error;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub bounds_instances: usize,
    pub gradient_instances: usize,
    pub duplication_instances: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            bounds_instances: 1000,
            gradient_instances: 50,
            duplication_instances: 100,
            seed: 0,
        }
    }
}

/// Everything a command needs: training, data, loss and network settings,
/// verification sizes and the output directory.
///
/// On disk the training settings sit at the top level next to `out_dir` and
/// the `[verify]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub verify: VerifyConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            verify: VerifyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Keys that may be absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &["dataset_dir"];

fn leaf_paths(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => leaf_paths(t, &path, out),
            _ => out.push(path),
        }
    }
}

fn known_keys() -> Vec<String> {
    let defaults = RunConfig::default().to_table().expect("defaults serialize");
    let mut keys = Vec::new();
    leaf_paths(&defaults, "", &mut keys);
    keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
    keys
}

/// Resolves a dotted path, or a bare key that names exactly one setting.
fn resolve_key(key: &str) -> Result<String, Error> {
    let keys = known_keys();
    if keys.iter().any(|k| k == key) {
        return Ok(key.to_string());
    }
    let matches: Vec<&String> = keys
        .iter()
        .filter(|k| k.rsplit('.').next() == Some(key))
        .collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Config(format!("unknown key `{key}`"))),
        many => Err(Error::Config(format!(
            "ambiguous key `{key}`, use one of: {}",
            many.iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), Error> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{path}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides to a raw TOML table.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), Error> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let path = resolve_key(key.trim())?;
        set_path(table, &path, parse_value(raw.trim()))?;
    }
    Ok(())
}

fn section<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T, Error> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = match (prefix, e.path().to_string()) {
            (p, inner) if inner == "." => p.to_string(),
            ("", inner) => inner,
            (p, inner) => format!("{p}.{inner}"),
        };
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

/// Deserializes with the offending key path in the error.
pub fn from_table(mut table: Table) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(v) = table.remove("out_dir") {
        cfg.out_dir = section(v, "out_dir")?;
    }
    if let Some(v) = table.remove("verify") {
        cfg.verify = section(v, "verify")?;
    }
    cfg.train = section(Value::Table(table), "")?;
    Ok(cfg)
}

/// Reads the file (if any), applies overrides and validates the result.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    let cfg = from_table(table)?;
    cfg.train.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Seeds data generation, initialization and the training stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.set_seed(seed);
        self.verify.seed = seed;
    }

    fn to_table(&self) -> Result<Table, Error> {
        let err = |e: toml::ser::Error| Error::Config(format!("cannot serialize config: {e}"));
        let mut table = Table::try_from(&self.train).map_err(err)?;
        table.insert(
            "out_dir".into(),
            Value::try_from(&self.out_dir).map_err(err)?,
        );
        table.insert("verify".into(), Value::try_from(&self.verify).map_err(err)?);
        Ok(table)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(&self.to_table()?)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = from_table(toml::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let cfg = load(None, &["lambda_cc_ge=0".into(), "data.rho=50".into()]).unwrap();
        assert_eq!(cfg.train.loss.lambda_cc_ge, 0.0);
        assert_eq!(cfg.train.data.rho, 50.0);
        let cfg = load(None, &["prototype_source=nonlinear-mlp".into()]).unwrap();
        assert_eq!(
            cfg.train.loss.prototype_source,
            ecl_core::losses::PrototypeSource::NonlinearMlp
        );
    }

    #[test]
    fn ambiguous_and_unknown_keys() {
        let err = load(None, &["num_classes=3".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("ambiguous"), "{err}");
        let err = load(None, &["nope=3".into()]).unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn bad_type_names_the_path() {
        let table: Table = toml::from_str("[loss]\ntau = \"hot\"\n").unwrap();
        let err = from_table(table).unwrap_err().to_string();
        assert!(err.contains("loss.tau"), "{err}");
    }

    #[test]
    fn unknown_section_key_rejected() {
        let table: Table = toml::from_str("[net]\nwidth = 3\n").unwrap();
        let err = from_table(table).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }
}
