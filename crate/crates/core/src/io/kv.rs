use crate::{Error, Result};
use std::str::FromStr;

/// One `key = value` line with its 1-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Lines grouped under `[name]` headers; entries before the first header
/// belong to a section with no name.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: Option<String>,
    pub entries: Vec<Entry>,
}

fn strip(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Parse flat `key = value` text. Blank lines and `#` comments are skipped;
/// duplicate keys and section headers are errors.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let sections = parse_sections(text)?;
    match sections.as_slice() {
        [] => Ok(Vec::new()),
        [s] if s.name.is_none() => Ok(s.entries.clone()),
        _ => Err(Error::config(
            "section headers are not allowed in this file",
        )),
    }
}

pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() || out.iter().any(|s| s.name.as_deref() == Some(name)) {
                return Err(Error::config(format!(
                    "line {}: empty or repeated section [{name}]",
                    i + 1
                )));
            }
            out.push(Section {
                name: Some(name.to_string()),
                entries: Vec::new(),
            });
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected key = value",
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if out.is_empty() {
            out.push(Section {
                name: None,
                entries: Vec::new(),
            });
        }
        let sec = out.last_mut().expect("pushed above");
        if sec.entries.iter().any(|e| e.key == k) {
            return Err(Error::config(format!(
                "line {}: duplicate key {k:?}",
                i + 1
            )));
        }
        sec.entries.push(Entry {
            key: k.to_string(),
            value: v.to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn unknown_key(e: &Entry) -> Error {
    Error::config(format!("line {}: unknown key {:?}", e.line, e.key))
}
