//! Convergence diagnostics and goodness-of-fit helpers.

use crate::error::{Error, Result};
use crate::numerics;
use serde::{Deserialize, Serialize};

/// Result of the early/late mean-equality convergence test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GewekeResult {
    pub z: f64,
    pub p_value: f64,
    pub early_mean: f64,
    pub late_mean: f64,
}

/// Mean-equality z-test between the first `early_frac` and the last
/// `late_frac` of a series, with batch-means estimates of the long-run
/// variance in each segment.
pub fn geweke_diagnostic(series: &[f64], early_frac: f64, late_frac: f64) -> Result<GewekeResult> {
    if series.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "Geweke diagnostic needs >= 100 points, got {}",
            series.len()
        )));
    }
    if !(0.0 < early_frac && 0.0 < late_frac && early_frac + late_frac <= 1.0) {
        return Err(Error::Domain(
            "Geweke fractions must be positive and sum to at most 1".into(),
        ));
    }
    let n = series.len();
    let n_early = ((early_frac * n as f64).round() as usize).max(10);
    let n_late = ((late_frac * n as f64).round() as usize).max(10);
    let early = &series[..n_early];
    let late = &series[n - n_late..];

    let (m1, v1) = batch_means_variance(early);
    let (m2, v2) = batch_means_variance(late);
    let denom = (v1 + v2).sqrt();
    let z = if denom > 0.0 {
        (m1 - m2) / denom
    } else if m1 == m2 {
        0.0
    } else {
        f64::INFINITY
    };
    let p_value = 2.0 * (1.0 - numerics::normal_cdf(z.abs()));
    Ok(GewekeResult {
        z,
        p_value,
        early_mean: m1,
        late_mean: m2,
    })
}

/// Returns `(mean, estimated variance of the mean)` using batch means,
/// which approximates the spectral density at zero for correlated series.
fn batch_means_variance(segment: &[f64]) -> (f64, f64) {
    let n = segment.len();
    let mean = segment.iter().sum::<f64>() / n as f64;
    let n_batches = ((n as f64).sqrt().floor() as usize).clamp(2, n);
    let batch_len = n / n_batches;
    let batch_means: Vec<f64> = (0..n_batches)
        .map(|b| {
            let chunk = &segment[b * batch_len..(b + 1) * batch_len];
            chunk.iter().sum::<f64>() / batch_len as f64
        })
        .collect();
    let bm_mean = batch_means.iter().sum::<f64>() / n_batches as f64;
    let bm_var = batch_means
        .iter()
        .map(|m| (m - bm_mean) * (m - bm_mean))
        .sum::<f64>()
        / (n_batches as f64 - 1.0);
    // Var(segment mean) ~= var(batch means) / n_batches.
    (mean, bm_var / n_batches as f64)
}

/// One-sample Kolmogorov-Smirnov test of a sorted sample against a CDF.
///
/// Returns the statistic and the asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> (f64, f64) {
    let n = sorted.len();
    assert!(n > 0, "KS test needs data");
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d
            .max((f - i as f64 / nf).abs())
            .max((f - (i as f64 + 1.0) / nf).abs());
    }
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_tail(lambda))
}

/// Tail probability of the Kolmogorov distribution,
/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let contrib = sign * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += contrib;
        sign = -sign;
        if contrib.abs() < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Chi-square goodness-of-fit test of observed counts against cell
/// probabilities. Returns the statistic and p-value with `k - 1` degrees of
/// freedom.
pub fn chi_square_gof(observed: &[f64], probs: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != probs.len() {
        return Err(Error::DimensionMismatch {
            context: "chi-square GOF cells",
            expected: probs.len(),
            got: observed.len(),
        });
    }
    if observed.len() < 2 {
        return Err(Error::InsufficientData("GOF needs >= 2 cells".into()));
    }
    let total: f64 = observed.iter().sum();
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(probs) {
        let e = total * p;
        if e <= 0.0 {
            if o > 0.0 {
                return Ok((f64::INFINITY, 0.0));
            }
            continue;
        }
        stat += (o - e) * (o - e) / e;
    }
    let dof = (observed.len() - 1) as u32;
    let p_value = 1.0 - numerics::chi_square_cdf(stat, dof)?;
    Ok((stat, p_value))
}
