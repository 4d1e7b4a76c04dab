//! TOML documents with every float written to 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// `x` with 17 significant digits, which round-trips any `f64`.
pub fn float17(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn is_table_like(v: &Value) -> bool {
    match v {
        Value::Table(_) => true,
        Value::Array(a) => !a.is_empty() && a.iter().all(|x| matches!(x, Value::Table(_))),
        _ => false,
    }
}

fn inline(v: &Value, out: &mut String) {
    match v {
        Value::Float(x) => out.push_str(&float17(*x)),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                inline(x, out);
            }
            out.push(']');
        }
        Value::Table(t) => {
            out.push('{');
            for (i, (k, x)) in t.iter().enumerate() {
                out.push_str(if i > 0 { ", " } else { " " });
                let _ = write!(out, "{} = ", key(k));
                inline(x, out);
            }
            out.push_str(if t.is_empty() { "}" } else { " }" });
        }
        other => {
            let _ = write!(out, "{other}");
        }
    }
}

fn key(k: &str) -> String {
    if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        k.to_string()
    } else {
        Value::String(k.to_string()).to_string()
    }
}

fn table(path: &[String], t: &Table, out: &mut String) {
    for (k, v) in t {
        if !is_table_like(v) {
            let _ = write!(out, "{} = ", key(k));
            inline(v, out);
            out.push('\n');
        }
    }
    for (k, v) in t {
        let mut p = path.to_vec();
        p.push(key(k));
        match v {
            Value::Table(sub) => {
                let _ = writeln!(out, "\n[{}]", p.join("."));
                table(&p, sub, out);
            }
            Value::Array(items) if is_table_like(v) => {
                for item in items {
                    let _ = writeln!(out, "\n[[{}]]", p.join("."));
                    if let Value::Table(sub) = item {
                        table(&p, sub, out);
                    }
                }
            }
            _ => {}
        }
    }
}

pub fn to_string<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let Value::Table(t) = Value::try_from(value)? else {
        anyhow::bail!("record must serialize to a table");
    };
    let mut out = String::new();
    table(&[], &t, &mut out);
    Ok(out)
}

pub fn from_str<T: DeserializeOwned>(text: &str) -> anyhow::Result<T> {
    Ok(toml::from_str(text)?)
}

pub fn write<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_string(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        x: f64,
        tags: Vec<String>,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Doc {
        name: String,
        values: Vec<f64>,
        empty: Vec<f64>,
        grid: Vec<Vec<usize>>,
        inner: Inner,
        items: Vec<Inner>,
        maybe: Option<f64>,
    }

    #[test]
    fn floats_carry_17_digits_and_round_trip() {
        assert_eq!(float17(0.1), "1.0000000000000001e-1");
        assert_eq!(float17(-2.5), "-2.5000000000000000e0");
        let doc = Doc {
            name: "a \"b\"".into(),
            values: vec![0.1 + 0.2, 1e-300, -7.0, f64::MAX],
            empty: vec![],
            grid: vec![vec![1, 2], vec![3, 4]],
            inner: Inner { x: 1.0 / 3.0, tags: vec!["t".into()] },
            items: vec![Inner { x: 2.0, tags: vec![] }, Inner { x: f64::MIN_POSITIVE, tags: vec!["u".into()] }],
            maybe: None,
        };
        let text = to_string(&doc).unwrap();
        assert!(text.contains("x = 3.3333333333333331e-1"), "{text}");
        assert_eq!(from_str::<Doc>(&text).unwrap(), doc);
        let first = text.find("name").unwrap();
        assert!(first < text.find("[inner]").unwrap());
    }
}
