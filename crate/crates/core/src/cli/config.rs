//! Run configuration: a TOML file overlaid with `key=value` overrides.
//!
//! Override keys are dotted paths (`train.lr=3e-4`, `model.hidden=32`).
//! Values are read as TOML scalars or arrays when they parse as such and as
//! plain strings otherwise, so `out_dir=runs/a` needs no quoting.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {k} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads the optional config file and applies overrides in order.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(table)
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> Result<T> {
    T::deserialize(Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

/// Removes and returns a sub-table, empty when absent.
pub fn take_table(table: &mut Table, key: &str) -> Result<Table> {
    match table.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::Config(format!("{key} must be a table"))),
    }
}

/// `base` with every key of `over` replaced.
pub fn overlay(mut base: Table, over: Table) -> Table {
    for (k, v) in over {
        base.insert(k, v);
    }
    base
}

pub fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    Table::try_from(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_resolved<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
