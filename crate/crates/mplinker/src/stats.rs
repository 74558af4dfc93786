//! Nonparametric comparison of paired method results: the Wilcoxon
//! signed-rank test (exact by enumeration for small n) and Cliff's Delta
//! effect size.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Exact sign-enumeration is used up to this many non-zero differences;
/// beyond it the normal approximation with continuity correction takes over.
pub const EXACT_LIMIT: usize = 25;

/// Effect sizes at or above this magnitude are labeled notable.
pub const NOTABLE_DELTA: f64 = 0.33;

/// Significance level used for starring p-values in reports.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Two equal-length vectors of per-project metric values for two methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<PairedSample> {
        if a.len() != b.len() {
            return Err(Error::Shape {
                expected: (a.len(), 1),
                got: (b.len(), 1),
            });
        }
        if a.is_empty() {
            return Err(Error::Size { min: 1, got: 0 });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("paired sample contains non-finite values".into()));
        }
        Ok(PairedSample { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Outcome of the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-) over the non-zero differences.
    pub statistic: f64,
    /// Two-sided p-value in (0, 1].
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    /// Whether the exact distribution was enumerated.
    pub exact: bool,
}

impl WilcoxonResult {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// Midranks of the absolute values, 1-based; ties share the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let midrank = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = midrank;
        }
        start = end + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped; tied
/// absolute differences take midranks. With every difference zero the result
/// is degenerate: p = 1.
pub fn wilcoxon_signed_rank(sample: &PairedSample) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = sample
        .a
        .iter()
        .zip(&sample.b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n_used: 0,
            exact: true,
        });
    }

    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum(); // n(n+1)/2
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let p_value = if n <= EXACT_LIMIT {
        exact_two_sided_p(&ranks, w_plus)
    } else {
        normal_approx_p(&ranks, w_plus)
    };
    Ok(WilcoxonResult {
        statistic,
        p_value: p_value.clamp(f64::MIN_POSITIVE, 1.0),
        n_used: n,
        exact: n <= EXACT_LIMIT,
    })
}

/// Exact null distribution of W+ over all 2^n sign assignments, counted with
/// a subset-sum table over doubled ranks (midranks are half-integers).
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let observed = (2.0 * w_plus).round() as usize;
    let lo = observed.min(total - observed);
    let hi = observed.max(total - observed);
    let low_tail: u64 = ways[..=lo].iter().sum();
    let high_tail: u64 = ways[hi..].iter().sum();
    let denom = 2f64.powi(ranks.len() as i32);
    ((low_tail + high_tail) as f64 / denom).min(1.0)
}

/// Normal approximation with continuity correction and the tie-corrected
/// variance.
fn normal_approx_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;

    // Tie correction: sum of (t^3 - t) over groups of tied ranks.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        while end + 1 < sorted.len() && sorted[end + 1] == sorted[start] {
            end += 1;
        }
        let t = (end - start + 1) as f64;
        tie_term += t * t * t - t;
        start = end + 1;
    }
    let variance = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let sd = variance.sqrt();
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    2.0 * (1.0 - normal.cdf(z))
}

/// Cliff's Delta magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CliffsDelta {
    pub delta: f64,
    /// |delta| >= 0.33.
    pub notable: bool,
}

/// Cliff's Delta between two groups: the normalized excess of dominating
/// pairs, in [-1, 1].
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<CliffsDelta> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Size { min: 1, got: 0 });
    }
    let mut score = 0i64;
    for &x in a {
        for &y in b {
            score += match x.partial_cmp(&y).ok_or_else(|| {
                Error::Numeric("Cliff's Delta inputs must be comparable".into())
            })? {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    let delta = score as f64 / (a.len() * b.len()) as f64;
    Ok(CliffsDelta {
        delta,
        notable: delta.abs() >= NOTABLE_DELTA,
    })
}

/// One row of a method comparison: the shape of the per-metric statistics
/// tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub p_value: f64,
    pub significant: bool,
    pub cliffs_delta: f64,
    pub notable: bool,
}

impl ComparisonRow {
    pub const CSV_HEADER: &'static str = "metric,p_value,significant,cliffs_delta,notable";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.metric,
            round4(self.p_value),
            self.significant,
            round4(self.cliffs_delta),
            self.notable
        )
    }
}

/// Four decimals, half away from zero, so 0.03125 prints as 0.0313 like the
/// published tables.
fn round4(v: f64) -> String {
    format!("{:.4}", (v * 10000.0).round() / 10000.0)
}

/// Compare one metric across two methods' per-project values.
pub fn compare_metric(metric: &str, a: &[f64], b: &[f64]) -> Result<ComparisonRow> {
    let sample = PairedSample::new(a.to_vec(), b.to_vec())?;
    let wilcoxon = wilcoxon_signed_rank(&sample)?;
    let delta = cliffs_delta(a, b)?;
    Ok(ComparisonRow {
        metric: metric.to_string(),
        p_value: wilcoxon.p_value,
        significant: wilcoxon.significant(),
        cliffs_delta: delta.delta,
        notable: delta.notable,
    })
}
