//! Config file sections overlaid on defaults; flags are applied afterwards.

use std::path::Path;

use artlab::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Reads the `[section]` table of a TOML file as JSON (empty when absent).
pub fn read_section(path: Option<&Path>, section: &str) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v = match doc.get(section) {
        Some(t) => serde_json::to_value(t)?,
        None => Value::Object(Default::default()),
    };
    Ok(v)
}

fn merge(base: &mut Value, over: &Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// `default` with the file section applied; unknown keys are rejected.
pub fn resolve<T: Serialize + DeserializeOwned>(default: &T, path: Option<&Path>, section: &str) -> Result<T> {
    let mut v = serde_json::to_value(default)?;
    let over = read_section(path, section)?;
    merge(&mut v, &over, section)?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u32,
        b: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Outer {
        lr: f64,
        inner: Inner,
        opt: Option<u32>,
    }

    fn default() -> Outer {
        Outer {
            lr: 0.1,
            inner: Inner { a: 1, b: "x".into() },
            opt: None,
        }
    }

    #[test]
    fn section_overrides_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[run]\nlr = 0.5\n[run.inner]\nb = \"y\"\n[other]\nlr = 9.0\n").unwrap();
        let r = resolve(&default(), Some(&p), "run").unwrap();
        assert_eq!(r.lr, 0.5);
        assert_eq!(r.inner, Inner { a: 1, b: "y".into() });
        assert_eq!(resolve(&default(), None, "run").unwrap(), default());
    }

    #[test]
    fn unknown_keys_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[run]\nlearning_rate = 0.5\n").unwrap();
        let e = resolve(&default(), Some(&p), "run").unwrap_err();
        assert!(e.is_validation());
        std::fs::write(&p, "[run]\nlr = \"fast\"\n").unwrap();
        assert!(resolve(&default(), Some(&p), "run").unwrap_err().is_validation());
    }
}
