//! Layered parameter resolution: defaults < config-file section < `--set` < flags.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files or parameter values; exit code 2.
    Config(String),
    /// Failures while running or writing results; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime_err(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Reads section `name` of a TOML file, or of a JSON file such as a previously
/// written resolved-config.json. A missing section is empty.
pub fn load_section(path: &Path, name: &str) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let root: Table = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    };
    match root.get(name) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t.clone()),
        Some(_) => Err(config_err(format!("`{name}` in {} is not a section", path.display()))),
    }
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to a
/// plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| config_err(format!("expected KEY=VALUE, got `{s}`")))?;
    let key = k.trim().replace('-', "_");
    if key.is_empty() {
        return Err(config_err(format!("empty key in `{s}`")));
    }
    let value = toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.trim().to_string()));
    Ok((key, value))
}

/// Integers given where the default is a float become floats.
fn coerce(default: &Value, v: Value) -> Value {
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Array(d), Value::Array(items)) if d.first().is_some_and(Value::is_float) => {
            Value::Array(items.into_iter().map(|x| coerce(&Value::Float(0.0), x)).collect())
        }
        (_, v) => v,
    }
}

fn to_value<T: Serialize>(x: &T) -> Result<Value, CliError> {
    Value::try_from(x).map_err(runtime_err)
}

/// Pending overrides of one subcommand plus the values resolved so far.
pub struct Section {
    name: &'static str,
    pending: Table,
    resolved: Table,
}

impl Section {
    pub fn new(name: &'static str, pending: Table) -> Self {
        Self { name, pending, resolved: Table::new() }
    }

    /// Later overrides replace earlier ones.
    pub fn apply(&mut self, overrides: impl IntoIterator<Item = (String, Value)>) {
        self.pending.extend(overrides);
    }

    /// Removes and resolves a parameter that is not part of a library config.
    pub fn take<T: Serialize + DeserializeOwned>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        let value = match self.pending.remove(key) {
            None => default,
            Some(v) => coerce(&to_value(&default)?, v)
                .try_into()
                .map_err(|e| config_err(format!("[{}] {key}: {e}", self.name)))?,
        };
        self.resolved.insert(key.to_string(), to_value(&value)?);
        Ok(value)
    }

    /// Overlays every remaining override onto `default`; keys the config does
    /// not have are rejected.
    pub fn finish<T: Serialize + DeserializeOwned>(&mut self, default: T) -> Result<T, CliError> {
        let mut table = match to_value(&default)? {
            Value::Table(t) => t,
            _ => return Err(runtime_err("config does not serialize to a table")),
        };
        for (k, v) in std::mem::take(&mut self.pending) {
            let slot = table.get(&k).ok_or_else(|| config_err(format!("unknown key `{k}` for {}", self.name)))?;
            let v = coerce(slot, v);
            table.insert(k, v);
        }
        let cfg: T = Value::Table(table).try_into().map_err(|e| config_err(format!("[{}] {e}", self.name)))?;
        if let Value::Table(t) = to_value(&cfg)? {
            self.resolved.extend(t);
        }
        Ok(cfg)
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn resolved(&self) -> &Table {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        rate: f64,
        count: usize,
        name: String,
    }

    fn demo() -> Demo {
        Demo { rate: 0.5, count: 3, name: "a".into() }
    }

    #[test]
    fn assignments() {
        assert_eq!(parse_assignment("rate=2").unwrap(), ("rate".into(), Value::Integer(2)));
        assert_eq!(parse_assignment("algorithm=te-q:0.1").unwrap().1, Value::String("te-q:0.1".into()));
        assert_eq!(parse_assignment("sample-sizes=[1, 2]").unwrap().0, "sample_sizes");
        assert!(parse_assignment("novalue").is_err());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut s = Section::new("demo", Table::new());
        s.apply([("rate".to_string(), Value::Integer(2)), ("count".to_string(), Value::Integer(7))]);
        s.apply([("count".to_string(), Value::Integer(9))]);
        let d: Demo = s.finish(demo()).unwrap();
        assert_eq!(d, Demo { rate: 2.0, count: 9, name: "a".into() });
        assert_eq!(s.resolved()["rate"], Value::Float(2.0));

        let mut s = Section::new("demo", Table::new());
        s.apply([("bogus".to_string(), Value::Integer(1))]);
        assert!(matches!(s.finish(demo()), Err(CliError::Config(_))));

        let mut s = Section::new("demo", Table::new());
        s.apply([("count".to_string(), Value::String("x".into()))]);
        assert!(matches!(s.finish(demo()), Err(CliError::Config(_))));
    }

    #[test]
    fn take_records_defaults() {
        let mut s = Section::new("demo", Table::new());
        assert_eq!(s.take("runs", 10usize).unwrap(), 10);
        assert_eq!(s.resolved()["runs"], Value::Integer(10));
    }
}
