use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::CliError;

/// Builds a command config from its defaults, an optional JSON file and
/// `key.path=value` overrides, in that order of precedence, then parses it
/// strictly. Returns the config and its effective JSON form.
pub fn load<C>(path: Option<&Path>, overrides: &[String]) -> Result<(C, Value), CliError>
where
    C: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(C::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut value, file);
    }
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    let config: C = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    let effective = serde_json::to_value(&config).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((config, effective))
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value`. The value is read as JSON when it parses and
/// as a bare string otherwise, so `--set task.task=kv_recall` works unquoted.
pub fn apply_override(value: &mut Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{item}`")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for part in &parts {
        if !slot.is_object() {
            return Err(CliError::Config(format!("`{key}` does not name an object field")));
        }
        slot = slot
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    *slot = parsed;
    Ok(())
}
