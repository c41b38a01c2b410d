use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Default config of `T` overlaid with the JSON file and then the
/// `key=value` overrides, in that order.
pub fn resolve<T>(file: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, patch);
    }
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
        set_path(&mut value, key, parse_scalar(raw))?;
    }
    serde_json::from_value(value).context("resolved config does not match the command's schema")
}

/// Objects merge key by key; every other value replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// JSON when the text parses as JSON, otherwise a string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted path such as `train.epochs`; array elements are addressed
/// by index.
pub fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    if key.is_empty() {
        bail!("empty override key");
    }
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = part.parse().with_context(|| format!("`{part}` in `{key}` is not an index"))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| anyhow!("index {i} in `{key}` is out of range for length {len}"))?
            }
            Value::Null => {
                *slot = Value::Object(Default::default());
                match slot {
                    Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
                    _ => unreachable!(),
                }
            }
            _ => bail!("`{key}` descends into a scalar"),
        };
    }
    *slot = new;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        a: u32,
        b: Vec<f64>,
    }

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        name: String,
        inner: Inner,
    }

    #[test]
    fn overrides_apply_after_defaults() {
        let cfg: Outer = resolve(None, &["inner.a=7".into(), "name=abc".into(), "inner.b=[1,2]".into()]).unwrap();
        assert_eq!(
            cfg,
            Outer {
                name: "abc".into(),
                inner: Inner { a: 7, b: vec![1.0, 2.0] }
            }
        );
    }

    #[test]
    fn array_index_and_errors() {
        let mut v = serde_json::json!({"xs": [1, 2, 3]});
        set_path(&mut v, "xs.1", Value::from(9)).unwrap();
        assert_eq!(v["xs"][1], 9);
        assert!(set_path(&mut v, "xs.5", Value::from(0)).is_err());
        assert!(resolve::<Outer>(None, &["nokey".into()]).is_err());
        assert!(resolve::<Outer>(None, &["unknown=1".into()]).is_err());
    }

    #[test]
    fn file_merges_nested_objects() {
        let mut base = serde_json::json!({"a": {"x": 1, "y": 2}});
        merge(&mut base, serde_json::json!({"a": {"y": 3}}));
        assert_eq!(base, serde_json::json!({"a": {"x": 1, "y": 3}}));
    }
}
