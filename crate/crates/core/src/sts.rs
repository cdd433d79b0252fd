// SPDX-License-Identifier: MIT OR Apache-2.0

//! Transferability scores over a selected set of shifted dimensions.
//!
//! - `act`: mean over query tokens of `Σ_{j∈D} h_j`
//! - `icl`: mean over query tokens of `Σ_{j∈D} (h_j(ctx) − h_j(plain))²`
//!
//! Neither is normalised by `|D|`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation_io::{write_atomic, ActivationDump, PairedStream};
use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::shift::column_sq_diff_sums;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StsMode {
    Act,
    Icl,
}

impl std::str::FromStr for StsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "act" => Ok(StsMode::Act),
            "icl" => Ok(StsMode::Icl),
            other => Err(Error::validation(format!("unknown STS mode `{other}` (act|icl)"))),
        }
    }
}

fn check_dims(dims: &BTreeSet<usize>, width: usize) -> Result<Vec<usize>> {
    ensure!(!dims.is_empty(), "dimension set is empty");
    let max = *dims.last().unwrap();
    ensure!(max < width, "dimension {max} out of range for {width} features");
    Ok(dims.iter().copied().collect())
}

/// Activation-based score over the query rows of a feature dump.
pub fn sts_act(features: &ActivationDump, dims: &BTreeSet<usize>) -> Result<f64> {
    sts_act_rows(&features.query_rows(), dims)
}

/// Activation-based score over every row of `features`.
pub fn sts_act_rows(features: &Matrix, dims: &BTreeSet<usize>) -> Result<f64> {
    ensure!(!features.is_empty(), "feature stream has no query tokens");
    let dims = check_dims(dims, features.cols())?;
    let mut sums = vec![0.0f64; dims.len()];
    for row in features.iter_rows() {
        for (s, &j) in sums.iter_mut().zip(&dims) {
            *s += f64::from(row[j]);
        }
    }
    let n = features.rows() as f64;
    Ok(sums.into_iter().map(|s| s / n).sum())
}

/// Context-difference score. Equals the sum of [`crate::shift::shift_scores`]
/// over `dims` exactly: both are built from the same per-column sums.
pub fn sts_icl(pair: &PairedStream, dims: &BTreeSet<usize>) -> Result<f64> {
    ensure!(!pair.is_empty(), "paired stream is empty");
    let dims = check_dims(dims, pair.dim())?;
    let n = pair.len() as f64;
    Ok(column_sq_diff_sums(pair, &dims).into_iter().map(|s| s / n).sum())
}

/// One downstream domain's inputs. Supply `features` for the `act` score,
/// `pair` for the `icl` score, or both.
#[derive(Debug, Clone, Copy)]
pub struct DomainInput<'a> {
    pub id: &'a str,
    pub features: Option<&'a ActivationDump>,
    pub pair: Option<&'a PairedStream>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsRow {
    pub domain_id: String,
    pub sts_act: Option<f64>,
    pub sts_icl: Option<f64>,
    /// Absolute performance shift, when a performance table was joined.
    pub perf_shift_abs: Option<f64>,
}

impl StsRow {
    pub fn score(&self, mode: StsMode) -> Option<f64> {
        match mode {
            StsMode::Act => self.sts_act,
            StsMode::Icl => self.sts_icl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsTable {
    pub rows: Vec<StsRow>,
    pub dims_used: BTreeSet<usize>,
    /// Where the dimension set came from, e.g. a report path or "explicit".
    #[serde(default)]
    pub dims_source: String,
}

impl StsTable {
    /// `(score, |shift|)` for rows that have both.
    pub fn scatter(&self, mode: StsMode) -> (Vec<f64>, Vec<f64>) {
        self.rows
            .iter()
            .filter_map(|r| Some((r.score(mode)?, r.perf_shift_abs?)))
            .unzip()
    }

    /// `(domain_id, score)` for rows carrying a `mode` score.
    pub fn scores(&self, mode: StsMode) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter_map(|r| Some((r.domain_id.clone(), r.score(mode)?)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("bad STS table: {e}")))?;
        ensure!(!table.dims_used.is_empty(), "STS table has an empty dimension set");
        for r in &table.rows {
            ensure!(
                r.sts_act.is_some() || r.sts_icl.is_some(),
                "STS table row `{}` has no score",
                r.domain_id
            );
        }
        Ok(table)
    }

    /// Comma-separated `domain_id,sts_act,sts_icl,perf_shift_abs`; absent
    /// values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("domain_id,sts_act,sts_icl,perf_shift_abs\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.domain_id,
                opt(r.sts_act),
                opt(r.sts_icl),
                opt(r.perf_shift_abs)
            );
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_json();
        write_atomic(path.as_ref(), |w| w.write_all(text.as_bytes()))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Scores every domain over `dims` and joins absolute performance shifts.
pub fn score_domains(
    domains: &[DomainInput<'_>],
    dims: &BTreeSet<usize>,
    perf: Option<&[(String, f64)]>,
) -> Result<StsTable> {
    ensure!(!dims.is_empty(), "dimension set is empty");
    let mut seen = HashSet::new();
    for d in domains {
        ensure!(seen.insert(d.id), "duplicate domain id `{}`", d.id);
        ensure!(
            d.features.is_some() || d.pair.is_some(),
            "domain `{}` has neither features nor a paired stream",
            d.id
        );
    }
    let mut perf_map = HashMap::new();
    for (id, shift) in perf.unwrap_or(&[]) {
        ensure!(
            seen.contains(id.as_str()),
            "performance table names unknown domain `{id}`"
        );
        ensure!(shift.is_finite(), "performance shift for `{id}` is not finite");
        ensure!(
            perf_map.insert(id.as_str(), shift.abs()).is_none(),
            "performance table lists `{id}` twice"
        );
    }
    let rows = domains
        .iter()
        .map(|d| {
            Ok(StsRow {
                domain_id: d.id.to_string(),
                sts_act: d.features.map(|f| sts_act(f, dims)).transpose()?,
                sts_icl: d.pair.map(|p| sts_icl(p, dims)).transpose()?,
                perf_shift_abs: perf_map.get(d.id).copied(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StsTable {
        rows,
        dims_used: dims.clone(),
        dims_source: String::new(),
    })
}

/// Normalises non-negative scores into mixture weights summing to one.
pub fn mixture_ratios(values: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    ensure!(!values.is_empty(), "no values to mix");
    for (id, v) in values {
        ensure!(v.is_finite(), "value for `{id}` is not finite");
        ensure!(*v >= 0.0, "value for `{id}` is negative ({v})");
    }
    let total: f64 = values.iter().map(|(_, v)| v).sum();
    ensure!(total > 0.0, "all mixture values are zero");
    Ok(values
        .iter()
        .map(|(id, v)| (id.clone(), v / total))
        .collect())
}
