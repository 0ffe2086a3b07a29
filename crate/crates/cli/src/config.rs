//! Layered settings: built-in defaults, then `RAF_SEED`, then the `--config`
//! file, then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const SEED_ENV: &str = "RAF_SEED";

/// Recursive object merge; non-object values in `top` replace those in `base`.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

pub fn load_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::usage(format!("config {}: top level must be an object", path.display())));
    }
    Ok(v)
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV} must be a nonnegative integer, got {s:?}"))),
        _ => Ok(None),
    }
}

/// Resolves a command's settings. `flags` should skip unset options so they
/// do not shadow lower layers.
pub fn resolve<T>(flags: &impl Serialize, config: Option<&Value>) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut v = serde_json::to_value(T::default()).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        if obj.contains_key("seed") {
            if let Some(s) = env_seed()? {
                obj.insert("seed".into(), s.into());
            }
        }
    }
    if let Some(c) = config {
        merge(&mut v, c);
    }
    merge(&mut v, &serde_json::to_value(flags).map_err(|e| CliError::usage(e.to_string()))?);
    serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid settings: {e}")))
}

pub fn require<'a>(v: &'a Option<String>, flag: &str) -> Result<&'a str, CliError> {
    v.as_deref().ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields, default)]
    struct S {
        a: u32,
        seed: u64,
        nested: N,
    }

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields, default)]
    struct N {
        x: f64,
        y: f64,
    }

    #[test]
    fn layering() {
        let cfg = json!({"a": 3, "seed": 9, "nested": {"y": 2.0}});
        let flags = json!({"seed": 4});
        let s: S = resolve(&flags, Some(&cfg)).unwrap();
        assert_eq!(s, S { a: 3, seed: 4, nested: N { x: 0.0, y: 2.0 } });
        let s: S = resolve(&json!({}), Some(&cfg)).unwrap();
        assert_eq!(s.seed, 9);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let err = resolve::<S>(&json!({}), Some(&json!({"bogus": 1}))).unwrap_err();
        assert_eq!(err.category, crate::error::Category::Usage);
    }
}
