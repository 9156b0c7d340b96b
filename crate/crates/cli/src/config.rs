use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_SCHEMA: &str = "knn-attn/manifest/v1";

pub fn schema_for(kind: &str) -> String {
    format!("knn-attn/{kind}/v1")
}

/// Reads a config of `kind`, or the config snapshot of a manifest written
/// by `subcommand`. Returns the parsed value; `None` yields the default.
pub fn load_config<T>(path: Option<&Path>, kind: &str, subcommand: &str) -> Result<T, CliError>
where
    T: DeserializeOwned + Default,
{
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: not valid JSON: {e}", path.display())))?;
    parse_value(value, kind, subcommand)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn parse_value<T: DeserializeOwned>(value: Value, kind: &str, subcommand: &str) -> Result<T, String> {
    let Value::Object(mut map) = value else {
        return Err("config must be a JSON object".into());
    };
    let schema = match map.remove("schema") {
        Some(Value::String(s)) => s,
        Some(_) => return Err("\"schema\" must be a string".into()),
        None => return Err(format!("missing \"schema\" (expected \"{}\")", schema_for(kind))),
    };
    if schema == MANIFEST_SCHEMA {
        let manifest: RunManifest =
            serde_json::from_value(Value::Object(map)).map_err(|e| format!("manifest: {e}"))?;
        if manifest.subcommand != subcommand {
            return Err(format!(
                "manifest was written by `{}`, not `{subcommand}`",
                manifest.subcommand
            ));
        }
        return parse_value(manifest.config, kind, subcommand);
    }
    if schema != schema_for(kind) {
        return Err(format!("schema \"{schema}\" does not match \"{}\"", schema_for(kind)));
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| format!("schema error: {e}"))
}

/// `value` serialised with its schema tag first.
pub fn snapshot<T: Serialize>(value: &T, kind: &str) -> Value {
    let mut out = serde_json::Map::new();
    out.insert("schema".into(), Value::String(schema_for(kind)));
    if let Value::Object(m) = serde_json::to_value(value).expect("config serialises") {
        out.extend(m);
    }
    Value::Object(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration, loadable again through `--config`.
    pub config: Value,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub exit_code: Option<i32>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn path(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }

    pub fn write(&self) -> Result<(), CliError> {
        let mut v = serde_json::Map::new();
        v.insert("schema".into(), Value::String(MANIFEST_SCHEMA.into()));
        if let Value::Object(m) = serde_json::to_value(self).expect("manifest serialises") {
            v.extend(m);
        }
        let text = serde_json::to_string_pretty(&Value::Object(v)).expect("json");
        std::fs::write(self.path(), text + "\n")
            .map_err(|e| CliError::Invalid(format!("cannot write {}: {e}", self.path().display())))
    }
}
