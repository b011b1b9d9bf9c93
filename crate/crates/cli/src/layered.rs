//! Configuration layering: typed defaults, then a TOML file, then dotted
//! `key=value` overrides, deserialized with unknown keys rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

/// A dotted path and the value to place there.
pub type Override = (String, Value);

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(root: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Usage(format!("empty key in {path:?}")))?;
    let mut node = root;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{path:?}: {p:?} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as a TOML literal, or as a bare string.
pub fn parse_assignment(s: &str) -> Result<Override, String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let value = format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn value_of<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("configuration types serialize to TOML")
}

pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<Table>,
    overrides: Vec<Override>,
) -> Result<T, CliError> {
    let Value::Table(mut table) = value_of(defaults) else {
        unreachable!("configurations are structs");
    };
    if let Some(f) = file {
        merge(&mut table, f);
    }
    for (k, v) in overrides {
        set_path(&mut table, &k, v)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("configuration: {}", e.message())))
}

pub fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string_pretty(v).expect("configuration types serialize to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq, Default)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        a: f64,
        b: String,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq, Default)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        n: usize,
        inner: Inner,
    }

    #[test]
    fn layers_and_rejects_unknown() {
        let file: Table = "n = 3\n[inner]\nb = \"x\"".parse().unwrap();
        let got: Outer = resolve(
            &Outer::default(),
            Some(file),
            vec![parse_assignment("inner.a=0.5").unwrap()],
        )
        .unwrap();
        assert_eq!(
            got,
            Outer {
                n: 3,
                inner: Inner {
                    a: 0.5,
                    b: "x".into()
                }
            }
        );
        let bad = resolve(
            &Outer::default(),
            None,
            vec![parse_assignment("inner.c=1").unwrap()],
        );
        assert!(matches!(bad, Err(CliError::Usage(_))));
    }

    #[test]
    fn bare_strings() {
        assert_eq!(
            parse_assignment("k=hello").unwrap().1,
            Value::String("hello".into())
        );
        assert_eq!(parse_assignment("k=1e-3").unwrap().1, Value::Float(1e-3));
    }
}
