// SPDX-License-Identifier: MIT OR Apache-2.0

//! Which dimensions move when context is prepended, and by how much.
//!
//! Everything here works identically on raw activations and on SAE features;
//! the [`Space`] is carried along for reporting only.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation_io::{write_atomic, ActivationDump, PairedStream, Space};
use crate::error::{ensure, Error, Result};

/// Per-column sums of squared `ctx − plain` differences, accumulated row by
/// row in `f64`, for the columns in `dims` (ascending).
pub(crate) fn column_sq_diff_sums(pair: &PairedStream, dims: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0f64; dims.len()];
    for (p, c) in pair.plain().iter_rows().zip(pair.ctx().iter_rows()) {
        for (a, &j) in acc.iter_mut().zip(dims) {
            let diff = f64::from(c[j]) - f64::from(p[j]);
            *a += diff * diff;
        }
    }
    acc
}

/// `score_j = mean_i (ctx[i,j] − plain[i,j])²` for every column.
pub fn shift_scores(pair: &PairedStream) -> Result<Vec<f64>> {
    ensure!(!pair.is_empty(), "cannot score an empty pair");
    let all: Vec<usize> = (0..pair.dim()).collect();
    let n = pair.len() as f64;
    Ok(column_sq_diff_sums(pair, &all).into_iter().map(|s| s / n).collect())
}

/// Scores, their descending ranking, and the selected top-N set.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub space: Space,
    pub scores: Vec<f64>,
    /// Dimension indices by descending score, ties to the lower index.
    pub ranking: Vec<usize>,
    pub n_selected: usize,
    pub selected: BTreeSet<usize>,
}

/// Ranks `scores` and selects the `n` largest.
pub fn top_n(scores: &[f64], n: usize, space: Space) -> Result<ShiftReport> {
    ensure!(
        n >= 1 && n <= scores.len(),
        "N = {n} out of range for {} dimensions",
        scores.len()
    );
    ensure!(
        scores.iter().all(|s| s.is_finite() && *s >= 0.0),
        "shift scores must be finite and non-negative"
    );
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let selected = ranking[..n].iter().copied().collect();
    Ok(ShiftReport {
        space,
        scores: scores.to_vec(),
        ranking,
        n_selected: n,
        selected,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreSummary {
    total: f64,
    max: f64,
    mean: f64,
    selected_mass_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ShiftReportFile {
    space: Space,
    n_selected: usize,
    selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranking: Option<Vec<usize>>,
    scores: Vec<f64>,
    summary: ScoreSummary,
}

impl ShiftReport {
    /// JSON report: `{space, n_selected, selected, ranking?, scores, summary}`.
    pub fn to_json(&self, include_ranking: bool) -> String {
        let total: f64 = self.scores.iter().sum();
        let sel: f64 = self.selected.iter().map(|&j| self.scores[j]).sum();
        let file = ShiftReportFile {
            space: self.space,
            n_selected: self.n_selected,
            selected: self.selected.iter().copied().collect(),
            ranking: include_ranking.then(|| self.ranking.clone()),
            scores: self.scores.clone(),
            summary: ScoreSummary {
                total,
                max: self.scores.iter().copied().fold(0.0, f64::max),
                mean: total / self.scores.len() as f64,
                selected_mass_fraction: if total > 0.0 { sel / total } else { 0.0 },
            },
        };
        serde_json::to_string_pretty(&file).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ShiftReportFile = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("bad shift report: {e}")))?;
        let report = top_n(&file.scores, file.n_selected, file.space)?;
        let listed: BTreeSet<usize> = file.selected.iter().copied().collect();
        ensure!(
            listed == report.selected,
            "shift report's selected set does not match its scores"
        );
        Ok(report)
    }

    pub fn write(&self, path: impl AsRef<Path>, include_ranking: bool) -> Result<()> {
        let text = self.to_json(include_ranking);
        write_atomic(path.as_ref(), |w| w.write_all(text.as_bytes()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn overlap(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> usize {
    a.intersection(b).count()
}

/// `|estimated ∩ truth| / |truth|`.
pub fn planted_recall(estimated: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> Result<f64> {
    ensure!(!truth.is_empty(), "recall against an empty truth set");
    Ok(overlap(estimated, truth) as f64 / truth.len() as f64)
}

/// Cumulative share of total shift mass held by the top-r dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationCurve {
    /// `fractions[r - 1]` is the share of the top `r` dimensions.
    pub fractions: Vec<f64>,
}

impl ConcentrationCurve {
    /// Share of the top `r` dimensions (`r` ≥ 1).
    pub fn at(&self, r: usize) -> f64 {
        self.fractions[r.clamp(1, self.fractions.len()) - 1]
    }

    /// Share of the top `ceil(frac · s)` dimensions, at least one.
    pub fn top_fraction(&self, frac: f64) -> f64 {
        let r = (frac * self.fractions.len() as f64).ceil() as usize;
        self.at(r.max(1))
    }
}

pub fn concentration(scores: &[f64]) -> Result<ConcentrationCurve> {
    ensure!(
        scores.iter().all(|s| s.is_finite() && *s >= 0.0),
        "shift scores must be finite and non-negative"
    );
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = Vec::with_capacity(sorted.len());
    let mut acc = 0.0;
    for s in &sorted {
        acc += s;
        cum.push(acc);
    }
    let total = acc;
    ensure!(total > 0.0, "all shift scores are zero");
    Ok(ConcentrationCurve {
        fractions: cum.into_iter().map(|c| (c / total).min(1.0)).collect(),
    })
}

/// Copy of `features` with the columns in `dims` set to zero.
pub fn zero_dims(features: &ActivationDump, dims: &BTreeSet<usize>) -> Result<ActivationDump> {
    if let Some(&max) = dims.last() {
        ensure!(
            max < features.dim(),
            "dimension {max} out of range for {} columns",
            features.dim()
        );
    }
    let mut data = features.data().clone();
    for i in 0..data.rows() {
        let row = data.row_mut(i);
        for &j in dims {
            row[j] = 0.0;
        }
    }
    features.with_data(features.space(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    fn pair(plain: &[&[f32]], ctx: &[&[f32]]) -> PairedStream {
        let p = Matrix::from_rows(plain).unwrap();
        let c = Matrix::from_rows(ctx).unwrap();
        let ids = vec!["d".to_string(); p.rows()];
        PairedStream::new(p, c, ids, Space::SaeFeatures).unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn shift_scores_examples() {
        let same = pair(&[&[1.0, 2.0], &[3.0, 4.0]], &[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(shift_scores(&same).unwrap(), vec![0.0, 0.0]);
        assert_eq!(shift_scores(&pair(&[&[0.0, 0.0]], &[&[1.0, 3.0]])).unwrap(), vec![1.0, 9.0]);
        let two = pair(&[&[0.0, 7.0], &[0.0, 1.0]], &[&[1.0, 7.0], &[3.0, 1.0]]);
        assert_eq!(shift_scores(&two).unwrap()[0], 5.0);
    }

    #[test]
    fn top_n_examples() {
        let r = top_n(&[0.1, 5.0, 3.0], 2, Space::Raw).unwrap();
        assert_eq!(r.selected, set(&[1, 2]));
        assert_eq!(r.ranking, vec![1, 2, 0]);
        assert_eq!(top_n(&[1.0; 4], 2, Space::Raw).unwrap().selected, set(&[0, 1]));
        assert_eq!(top_n(&[2.0, 1.0, 3.0], 3, Space::Raw).unwrap().selected, set(&[0, 1, 2]));
        assert!(top_n(&[1.0], 0, Space::Raw).is_err());
        assert!(top_n(&[1.0], 2, Space::Raw).is_err());
    }

    #[test]
    fn overlap_and_recall_examples() {
        let hundred: BTreeSet<usize> = (0..100).collect();
        assert_eq!(overlap(&hundred, &hundred), 100);
        assert_eq!(overlap(&set(&[1, 2]), &set(&[3, 4])), 0);
        assert_eq!(overlap(&set(&[1, 2, 3]), &set(&[3, 4])), 1);

        assert_eq!(planted_recall(&set(&[1, 2, 3, 9]), &set(&[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(planted_recall(&set(&[5]), &set(&[1, 2, 3])).unwrap(), 0.0);
        let est: BTreeSet<usize> = (0..63).chain(1000..1037).collect();
        assert_eq!(planted_recall(&est, &hundred).unwrap(), 0.63);
        assert!(planted_recall(&est, &BTreeSet::new()).is_err());
    }

    #[test]
    fn concentration_examples() {
        let c = concentration(&[4.0, 3.0, 2.0, 1.0]).unwrap();
        let want = [0.4, 0.7, 0.9, 1.0];
        for (a, b) in c.fractions.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let u = concentration(&[2.5; 8]).unwrap();
        for r in 1..=8 {
            assert!((u.at(r) - r as f64 / 8.0).abs() < 1e-15);
        }
        assert_eq!(concentration(&[0.0, 0.0, 7.0]).unwrap().at(1), 1.0);
        assert!(concentration(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_dims_examples() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let dump = ActivationDump::single_query("t", "d", Space::SaeFeatures, m.clone()).unwrap();
        assert_eq!(zero_dims(&dump, &BTreeSet::new()).unwrap(), dump);
        let all = zero_dims(&dump, &set(&[0, 1, 2])).unwrap();
        assert!(all.data().as_slice().iter().all(|v| *v == 0.0));
        let one = zero_dims(&dump, &set(&[1])).unwrap();
        assert_eq!(one.data().as_slice(), &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
        assert_eq!(zero_dims(&one, &set(&[1])).unwrap(), one);
        assert!(zero_dims(&dump, &set(&[3])).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let r = top_n(&[0.5, 0.25, 2.0, 0.0], 2, Space::SaeFeatures).unwrap();
        for ranking in [false, true] {
            assert_eq!(ShiftReport::from_json(&r.to_json(ranking)).unwrap(), r);
        }
    }

    fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-4.0f32..4.0, d), n)
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_covariant(p in rows(5, 4), c in rows(5, 4), k in 1u8..4) {
            let fwd = pair(&p.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
                           &c.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
            let rev = PairedStream::new(fwd.ctx().clone(), fwd.plain().clone(),
                                        fwd.doc_ids().to_vec(), fwd.space()).unwrap();
            let a = shift_scores(&fwd).unwrap();
            prop_assert_eq!(&a, &shift_scores(&rev).unwrap());

            // power-of-two scale keeps the arithmetic exact
            let scale = f32::from(1u8 << k);
            let mut ps = fwd.plain().clone();
            let mut cs = fwd.ctx().clone();
            ps.scale(scale);
            cs.scale(scale);
            let scaled = PairedStream::new(ps, cs, fwd.doc_ids().to_vec(), fwd.space()).unwrap();
            let b = shift_scores(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x * f64::from(scale * scale), *y);
            }
            prop_assert_eq!(top_n(&a, 2, Space::Raw).unwrap().selected,
                            top_n(&b, 2, Space::Raw).unwrap().selected);
        }

        #[test]
        fn concentration_monotone_ending_at_one(s in prop::collection::vec(0.0f64..10.0, 1..50)) {
            prop_assume!(s.iter().sum::<f64>() > 0.0);
            let c = concentration(&s).unwrap();
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((c.fractions.last().unwrap() - 1.0).abs() <= 1e-12);
        }
    }
}
