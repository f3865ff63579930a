//! JSON configs with command-line overrides.
//!
//! A config file is either a flat object of keys or an object
//! `{"command": …, "config": {…}}` (the shape of a run manifest), whose
//! `config` object is used when the command matches. Unknown keys are
//! rejected. Flags win over file keys.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::Failure;

pub fn resolve<C>(file: Option<&Path>, command: &str, overrides: &impl Serialize) -> Result<C, Failure>
where
    C: Serialize + DeserializeOwned + Default,
{
    let mut merged = match serde_json::to_value(C::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("configs serialise to objects"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let obj = match value {
            Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
                if m["command"] != command {
                    return Err(Failure::Config(format!(
                        "{} is a {} config, not {command}",
                        path.display(),
                        m["command"]
                    )));
                }
                match m.remove("config") {
                    Some(Value::Object(c)) => c,
                    _ => return Err(Failure::Config(format!("{}: config is not an object", path.display()))),
                }
            }
            Value::Object(m) => m,
            _ => return Err(Failure::Config(format!("{}: expected a JSON object", path.display()))),
        };
        overlay(&mut merged, obj, true)?;
    }
    if let Ok(Value::Object(flags)) = serde_json::to_value(overrides) {
        overlay(&mut merged, flags, false)?;
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::Config(e.to_string()))
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>, strict: bool) -> Result<(), Failure> {
    for (k, v) in top {
        if v.is_null() {
            continue;
        }
        if strict && !base.contains_key(&k) {
            let mut known: Vec<&String> = base.keys().collect();
            known.sort();
            return Err(Failure::Config(format!("unknown config key `{k}` (known: {known:?})")));
        }
        base.insert(k, v);
    }
    Ok(())
}

/// Ensemble output format of `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Ndjson,
    Binary,
    Both,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Demo {
        a: f64,
        b: u64,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { a: 1.0, b: 2 }
        }
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        b: Option<u64>,
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn layering() {
        let f = write(r#"{"a": 3.5, "b": 7}"#);
        let c: Demo = resolve(Some(f.path()), "x", &Flags { b: None }).unwrap();
        assert_eq!(c, Demo { a: 3.5, b: 7 });
        let c: Demo = resolve(Some(f.path()), "x", &Flags { b: Some(9) }).unwrap();
        assert_eq!(c, Demo { a: 3.5, b: 9 });
        let c: Demo = resolve(None, "x", &Flags { b: None }).unwrap();
        assert_eq!(c, Demo::default());
    }

    #[test]
    fn manifest_config_is_used() {
        let f = write(r#"{"command": "x", "config": {"a": 0.5}, "outputs": []}"#);
        let c: Demo = resolve(Some(f.path()), "x", &Flags { b: None }).unwrap();
        assert_eq!(c.a, 0.5);
        assert!(matches!(resolve::<Demo>(Some(f.path()), "y", &Flags { b: None }), Err(Failure::Config(_))));
    }

    #[test]
    fn unknown_key_rejected() {
        let f = write(r#"{"c": 1}"#);
        assert!(matches!(resolve::<Demo>(Some(f.path()), "x", &Flags { b: None }), Err(Failure::Config(_))));
        let f = write("[1]");
        assert!(resolve::<Demo>(Some(f.path()), "x", &Flags { b: None }).is_err());
    }
}
