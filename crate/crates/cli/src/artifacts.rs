//! JSON artifacts with provenance, plus CSV mirrors of their tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: String,
    pub config_hash: String,
    pub root_seed: u64,
    pub data: T,
}

/// Where a run writes, and what it stamps on every file.
#[derive(Clone, Debug)]
pub struct Sink {
    pub dir: PathBuf,
    pub config_hash: String,
    pub root_seed: u64,
}

impl Sink {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn ensure_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::Io { path: self.dir.clone(), source: e })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, stage: &str, data: &T) -> Result<PathBuf, CliError> {
        self.ensure_dir()?;
        let env = Envelope { stage: stage.to_string(), config_hash: self.config_hash.clone(), root_seed: self.root_seed, data };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Schema(e.to_string()))?;
        text.push('\n');
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
        Ok(path)
    }

    /// Writes rows of flat records; columns are `config_hash`, `root_seed`,
    /// then the union of row keys in sorted order.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        self.ensure_dir()?;
        let rows: Vec<serde_json::Map<String, Value>> = rows
            .iter()
            .map(|r| match serde_json::to_value(r) {
                Ok(Value::Object(m)) => Ok(m),
                Ok(other) => Err(CliError::Schema(format!("csv row is not a record: {other}"))),
                Err(e) => Err(CliError::Schema(e.to_string())),
            })
            .collect::<Result<_, _>>()?;
        let mut columns: Vec<String> = rows.iter().flat_map(|r| r.keys().cloned()).collect();
        columns.sort();
        columns.dedup();

        let path = self.path(name);
        let io = |e: csv::Error| CliError::Io { path: path.clone(), source: e.into() };
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        let mut header = vec!["config_hash".to_string(), "root_seed".to_string()];
        header.extend(columns.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for r in &rows {
            let mut rec = vec![self.config_hash.clone(), self.root_seed.to_string()];
            rec.extend(columns.iter().map(|c| cell(r.get(c))));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io { path: path.clone(), source: e })?;
        Ok(path)
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// Reads an artifact's payload. Bare files (no envelope) are accepted too.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from_read(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let payload = match value {
        Value::Object(mut m) if m.contains_key("config_hash") && m.contains_key("data") => m.remove("data").unwrap_or(Value::Null),
        other => other,
    };
    serde_json::from_value(payload).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// Config hash stamped on an artifact, if it carries one.
pub fn stamped_hash(path: &Path) -> Result<Option<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from_read(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Ok(value.get("config_hash").and_then(Value::as_str).map(str::to_string))
}
