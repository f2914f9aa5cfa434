//! Fit scores and summary statistics.

use crate::error::{KrilcError, Result};

fn normalized_fit(truth: &[f64], estimate: &[f64], what: &'static str) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(KrilcError::Dimension(format!("{what}: length mismatch")));
    }
    if truth.is_empty() {
        return Err(KrilcError::UndefinedFit(what));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let spread: f64 = truth.iter().map(|v| (v - mean).powi(2)).sum();
    if spread == 0.0 {
        return Err(KrilcError::UndefinedFit(what));
    }
    let err: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(100.0 * (1.0 - (err / spread).sqrt()))
}

/// `100·(1 − ‖y_d − y‖ / ‖y_d − ȳ_d‖)` over the given samples.
pub fn tracking_fit(y_d: &[f64], y: &[f64]) -> Result<f64> {
    normalized_fit(y_d, y, "tracking fit: constant reference")
}

/// Same normalized score over the coefficients of one time instant.
pub fn model_fit(theta_true: &[f64], theta_hat: &[f64]) -> Result<f64> {
    normalized_fit(theta_true, theta_hat, "model fit: constant coefficients")
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Linear-interpolation quantile of already sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(q1, median, q3)` with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some((
        quantile_sorted(&v, 0.25),
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75),
    ))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quartiles(values).map(|q| q.1)
}
