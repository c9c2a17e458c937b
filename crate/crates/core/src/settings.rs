//! Flat `key = value` configuration text.
//!
//! Any serde struct maps to dotted keys (`model.dim = 32`). Lists are
//! comma-separated and strings are written bare. Parsing starts from a
//! default value so every key keeps its type; unknown keys are errors.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SettingsError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot read {value:?} as {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("{0}")]
    Invalid(String),
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, SettingsError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(SettingsError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(SettingsError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), scalar_text(other))),
    }
}

/// Every field of `value` as `key = value` lines.
pub fn to_text<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("settings serialise");
    let mut pairs = Vec::new();
    flatten("", &json, &mut pairs);
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn coerce(key: &str, text: &str, template: &Value) -> Result<Value, SettingsError> {
    let bad = |expected| SettingsError::BadValue {
        key: key.to_string(),
        value: text.to_string(),
        expected,
    };
    Ok(match template {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad("a boolean"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = text.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::Number(_) => {
            if let Ok(i) = text.parse::<u64>() {
                Value::from(i)
            } else if let Ok(i) = text.parse::<i64>() {
                Value::from(i)
            } else {
                let x: f64 = text.parse().map_err(|_| bad("a number"))?;
                serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
            }
        }
        Value::Array(items) => {
            let item_template = items.first().cloned().unwrap_or(Value::String(String::new()));
            let parts = text.split(',').map(str::trim).filter(|p| !p.is_empty());
            Value::Array(parts.map(|p| coerce(key, p, &item_template)).collect::<Result<_, _>>()?)
        }
        Value::Null => Value::String(text.to_string()),
        _ => Value::String(text.to_string()),
    })
}

fn set_path(root: &mut Value, key: &str, text: &str) -> Result<(), SettingsError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| SettingsError::UnknownKey(key.to_string()))?;
        let child = map.get_mut(*part).ok_or_else(|| SettingsError::UnknownKey(key.to_string()))?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(SettingsError::UnknownKey(key.to_string()));
            }
            *child = coerce(key, text, child)?;
            return Ok(());
        }
        node = child;
    }
    Ok(())
}

/// Applies `pairs` on top of `base`.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T, SettingsError> {
    let mut json = serde_json::to_value(base).expect("settings serialise");
    for (k, v) in pairs {
        set_path(&mut json, k, v)?;
    }
    serde_json::from_value(json).map_err(|e| SettingsError::Invalid(e.to_string()))
}

/// Parses `text` on top of `base`.
pub fn from_text<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T, SettingsError> {
    apply(base, &parse_pairs(text)?)
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        dim: usize,
        rate: f64,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        name: String,
        flag: bool,
        tags: Vec<String>,
        inner: Inner,
        maybe: Option<String>,
    }

    fn base() -> Outer {
        Outer {
            name: "x".into(),
            flag: false,
            tags: vec![],
            inner: Inner { dim: 4, rate: 0.5 },
            maybe: None,
        }
    }

    #[test]
    fn text_round_trip() {
        let v = Outer {
            name: "run".into(),
            flag: true,
            tags: vec!["c_sum".into(), "r".into()],
            inner: Inner { dim: 32, rate: 50.0 },
            maybe: Some("p".into()),
        };
        let text = to_text(&v);
        assert!(text.contains("inner.dim = 32\n"));
        assert!(text.contains("tags = c_sum,r\n"));
        assert_eq!(from_text(&base(), &text).unwrap(), v);
    }

    #[test]
    fn errors() {
        assert_eq!(
            from_text(&base(), "nope = 1"),
            Err(SettingsError::UnknownKey("nope".into()))
        );
        assert_eq!(from_text(&base(), "\n# c\ninner.dim"), Err(SettingsError::Syntax { line: 3 }));
        assert!(matches!(from_text(&base(), "inner.dim = many"), Err(SettingsError::BadValue { .. })));
        assert!(matches!(from_text(&base(), "inner = 3"), Err(SettingsError::UnknownKey(_))));
    }

    #[test]
    fn integer_written_float_fields_accept_fractions() {
        let v = from_text(&base(), "inner.rate = 2\ninner.dim = 8").unwrap();
        assert_eq!(v.inner, Inner { dim: 8, rate: 2.0 });
    }
}
