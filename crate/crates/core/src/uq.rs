//! Euclidean-error statistics, the p95 trust gate, and cross-run agreement.
//!
//! Quantiles use the nearest-rank rule: the p95 of `n` values is the
//! element at 1-based rank `ceil(0.95 n)` of the ascending sort. The
//! standard deviation is the population form (divide by `n`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::peaks::PeakPosition;

/// Default trust gate in pixels.
pub const DEFAULT_TRUST_THRESHOLD_PX: f64 = 0.688;
/// Default cross-profile agreement tolerance in pixels.
pub const DEFAULT_CONSISTENCY_TOLERANCE_PX: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UqError {
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("at least one sample is required")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Trusted,
    Untrusted,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Trusted => "trusted",
            Verdict::Untrusted => "untrusted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub n: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub p95_error: f64,
    pub max_error: f64,
    pub trust_threshold: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub max_abs_deviation: f64,
    pub mean_abs_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Per-sample Euclidean distance in pixel units.
pub fn euclidean_errors(predictions: &[PeakPosition], truths: &[PeakPosition]) -> Result<Vec<f64>, UqError> {
    if predictions.len() != truths.len() {
        return Err(UqError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(UqError::Empty);
    }
    Ok(predictions.iter().zip(truths).map(|(p, t)| (p.x - t.x).hypot(p.y - t.y)).collect())
}

/// 1-based nearest rank of the 95th percentile among `n` samples.
pub fn p95_rank(n: usize) -> usize {
    (95 * n).div_ceil(100)
}

pub fn error_stats(distances: &[f64], trust_threshold: f64) -> Result<UqReport, UqError> {
    if distances.is_empty() {
        return Err(UqError::Empty);
    }
    if let Some(i) = distances.iter().position(|d| !d.is_finite()) {
        return Err(UqError::NonFinite(i));
    }
    // Statistics are computed over the sorted copy so the result does not
    // depend on input order, not even in the last bit.
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    let p95 = sorted[p95_rank(n) - 1];
    let max = sorted[n - 1];
    let verdict = if p95 <= trust_threshold { Verdict::Trusted } else { Verdict::Untrusted };
    Ok(UqReport { n, mean_error: mean, std_error: var.sqrt(), p95_error: p95, max_error: max, trust_threshold, verdict })
}

/// Per-coordinate absolute deviations between two runs over the same inputs.
pub fn consistency_check(
    results_a: &[PeakPosition],
    results_b: &[PeakPosition],
    tolerance: f64,
) -> Result<ConsistencyReport, UqError> {
    if results_a.len() != results_b.len() {
        return Err(UqError::LengthMismatch(results_a.len(), results_b.len()));
    }
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for (a, b) in results_a.iter().zip(results_b) {
        for d in [(a.x - b.x).abs(), (a.y - b.y).abs()] {
            // NaN compares false and must not pass silently.
            max = if d.is_nan() { f64::INFINITY } else { max.max(d) };
            sum += d;
        }
    }
    let count = 2 * results_a.len();
    let mean = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(ConsistencyReport { max_abs_deviation: max, mean_abs_deviation: mean, tolerance, pass: max <= tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustDecision {
    pub verdict: Verdict,
    pub justification: String,
}

pub fn trust_gate(report: &UqReport) -> TrustDecision {
    let verdict = if report.p95_error <= report.trust_threshold { Verdict::Trusted } else { Verdict::Untrusted };
    let op = if verdict == Verdict::Trusted { "≤" } else { ">" };
    TrustDecision {
        verdict,
        justification: format!(
            "p95 {:.3} {op} {:.3} → {verdict} (n={}, mean {:.3}, std {:.3}, max {:.3} px)",
            report.p95_error, report.trust_threshold, report.n, report.mean_error, report.std_error, report.max_error
        ),
    }
}
