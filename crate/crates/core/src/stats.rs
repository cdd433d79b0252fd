// SPDX-License-Identifier: MIT OR Apache-2.0

//! Correlation and regression statistics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    ensure!(x.len() == y.len(), "length mismatch: {} vs {}", x.len(), y.len());
    ensure!(x.len() >= 2, "need at least two points, got {}", x.len());
    ensure!(
        x.iter().chain(y).all(|v| v.is_finite()),
        "inputs contain non-finite values"
    );
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Centered sums `(Sxx, Syy, Sxy, mean_x, mean_y)`.
fn moments(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64, f64)> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    ensure!(sxx > 0.0, "x has zero variance");
    ensure!(syy > 0.0, "y has zero variance");
    Ok((sxx, syy, sxy, mx, my))
}

/// Sample Pearson correlation coefficient, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (sxx, syy, sxy, _, _) = moments(x, y)?;
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Least-squares `(slope, intercept)` of `y` on `x`.
pub fn linfit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let (sxx, _, sxy, mx, my) = moments(x, y)?;
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn r_squared(x: &[f64], y: &[f64]) -> Result<f64> {
    let r = pearson(x, y)?;
    Ok(r * r)
}

/// Arithmetic mean and Bessel-corrected standard deviation. The deviation
/// is `None` for a single value.
pub fn mean_std(values: &[f64]) -> Result<(f64, Option<f64>)> {
    ensure!(!values.is_empty(), "no values");
    let m = mean(values);
    if values.len() < 2 {
        return Ok((m, None));
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Ok((m, Some((ss / (values.len() - 1) as f64).sqrt())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

impl CorrelationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }
}

pub fn correlate(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    let rho = pearson(x, y)?;
    let (slope, intercept) = linfit(x, y)?;
    Ok(CorrelationResult {
        rho,
        r_squared: rho * rho,
        slope,
        intercept,
        n: x.len(),
    })
}

/// Mean and sample deviation of ρ and R² across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub rho_mean: f64,
    pub rho_std: Option<f64>,
    pub r_squared_mean: f64,
    pub r_squared_std: Option<f64>,
}

impl SeedSummary {
    pub fn new(results: &[CorrelationResult]) -> Result<Self> {
        let rho: Vec<f64> = results.iter().map(|r| r.rho).collect();
        let r2: Vec<f64> = results.iter().map(|r| r.r_squared).collect();
        let (rho_mean, rho_std) = mean_std(&rho)?;
        let (r_squared_mean, r_squared_std) = mean_std(&r2)?;
        Ok(Self {
            runs: results.len(),
            rho_mean,
            rho_std,
            r_squared_mean,
            r_squared_std,
        })
    }
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pm = |m: f64, s: Option<f64>| match s {
            Some(s) => format!("{m:.4} ± {s:.4}"),
            None => format!("{m:.4}"),
        };
        write!(
            f,
            "rho = {}, R² = {} (n = {})",
            pm(self.rho_mean, self.rho_std),
            pm(self.r_squared_mean, self.r_squared_std),
            self.runs
        )
    }
}

/// Scatter points with the fitted value at each `x`, as `x,y,fitted` CSV.
pub fn scatter_with_fit(x: &[f64], y: &[f64], fit: &CorrelationResult) -> String {
    let mut out = String::from("x,y,fitted\n");
    for (&a, &b) in x.iter().zip(y) {
        out.push_str(&format!("{a},{b},{}\n", fit.slope * a + fit.intercept));
    }
    out
}
