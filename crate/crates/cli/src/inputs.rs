// SPDX-License-Identifier: MIT OR Apache-2.0

//! Argument and small-file parsing shared by the subcommands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sts_core::activation_io::write_atomic;
use sts_core::{Error, Result, ShiftReport};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn parse_usize_list(s: &str) -> Option<BTreeSet<usize>> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DimsFile {
    List(Vec<usize>),
    Object { dims: Vec<usize> },
}

/// A dimension set given as a comma-separated list, a shift report, a JSON
/// array, or a JSON object with a `dims` array.
pub fn parse_dims(arg: &str) -> Result<BTreeSet<usize>> {
    let dims = if let Some(set) = parse_usize_list(arg) {
        set
    } else {
        let path = Path::new(arg);
        let text = read_text(path)?;
        if let Ok(report) = ShiftReport::from_json(&text) {
            report.selected
        } else {
            match serde_json::from_str::<DimsFile>(&text) {
                Ok(DimsFile::List(v)) | Ok(DimsFile::Object { dims: v }) => v.into_iter().collect(),
                Err(_) => {
                    return Err(invalid(format!(
                        "{arg}: not a shift report or dimension list"
                    )))
                }
            }
        }
    };
    if dims.is_empty() {
        return Err(invalid(format!("dimension set `{arg}` is empty")));
    }
    Ok(dims)
}

pub fn split_kv(arg: &str) -> Result<(&str, &str)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k, v)),
        _ => Err(invalid(format!("expected ID=VALUE, got `{arg}`"))),
    }
}

/// `ID=PATH`.
pub fn parse_feature_arg(arg: &str) -> Result<(String, PathBuf)> {
    let (id, path) = split_kv(arg)?;
    Ok((id.to_string(), PathBuf::from(path)))
}

/// `ID=PLAIN,CTX`.
pub fn parse_pair_arg(arg: &str) -> Result<(String, PathBuf, PathBuf)> {
    let (id, rest) = split_kv(arg)?;
    match rest.split_once(',') {
        Some((p, c)) if !p.is_empty() && !c.is_empty() => {
            Ok((id.to_string(), PathBuf::from(p), PathBuf::from(c)))
        }
        _ => Err(invalid(format!("expected ID=PLAIN,CTX, got `{arg}`"))),
    }
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("`{t}` is not a number")))
        })
        .collect()
}

/// `ID=VALUE` entries, each argument possibly holding several separated by
/// commas.
pub fn parse_named_values(args: &[String]) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for arg in args {
        for item in arg.split(',').filter(|s| !s.is_empty()) {
            let (id, v) = split_kv(item)?;
            let v: f64 = v
                .parse()
                .map_err(|_| invalid(format!("`{v}` is not a number")))?;
            out.push((id.to_string(), v));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PerfRecord {
    domain_id: String,
    shift: f64,
}

/// Performance shifts from a CSV file with `domain_id,shift` columns.
pub fn read_perf(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = read_text(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.deserialize::<PerfRecord>() {
        let rec = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        out.push((rec.domain_id, rec.shift));
    }
    Ok(out)
}
