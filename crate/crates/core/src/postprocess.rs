//! Renormalization of draws to the reporting scale, posterior summaries,
//! credible sets for identified-set functionals, and counterfactuals.

use crate::error::{Error, Result};
use crate::mcmc::{diagnostics, DrawStore};
use crate::mixture::GumbelMixture;
use crate::model::{GilleskieModel, GilleskieParams};
use crate::numerics::{self, Interval};
use crate::solver::CcpMatrix;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Ties a utility parameter to the shock coordinate whose mean is absorbed
/// into it during renormalization. `sign` is `+1` when the shock rides on
/// the same alternative as the intercept and `-1` when it enters through
/// the baseline alternative's utility difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterceptMap {
    pub theta_idx: usize,
    pub shock_coord: usize,
    pub sign: f64,
}

/// Renormalized parameter draw: the scale factor `s` and
/// `s * (theta + sign * mixture_mean)` applied at the intercept positions,
/// `s * theta` elsewhere.
pub fn renormalize_draw(
    mix: &GumbelMixture,
    ref_theta: &[f64],
    intercepts: &[InterceptMap],
) -> Result<(f64, Vec<f64>)> {
    let s = mix.scale_factor()?;
    let mean = mix.mean();
    let mut theta: Vec<f64> = ref_theta.iter().map(|t| s * t).collect();
    for im in intercepts {
        if im.theta_idx >= theta.len() || im.shock_coord >= mean.len() {
            return Err(Error::InvalidParameter("intercept map out of range".into()));
        }
        theta[im.theta_idx] += s * im.sign * mean[im.shock_coord];
    }
    Ok((s, theta))
}

/// Ellipsoidal credible set for the stacked CCP vector.
#[derive(Debug, Clone)]
pub struct CcpCredibleSet {
    pub center: DVector<f64>,
    /// Covariance of the draws (possibly ridge-regularized).
    pub covariance: DMatrix<f64>,
    /// `chi^2_{1-alpha}` quantile with `dim` degrees of freedom.
    pub threshold: f64,
    /// Ridge added to the covariance diagonal, 0 when none was needed.
    pub ridge: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl CcpCredibleSet {
    /// Squared Mahalanobis distance of `p` from the center.
    pub fn distance_sq(&self, p: &[f64]) -> f64 {
        let diff = DVector::from_row_slice(p) - &self.center;
        let solved = self.chol.solve(&diff);
        diff.dot(&solved)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.distance_sq(p) <= self.threshold
    }
}

/// Builds the `1 - alpha` credible set
/// `{P : (P - Pbar)' Sigma^{-1} (P - Pbar) <= chi^2_{1-alpha}(dim)}` from
/// posterior CCP-vector draws. A singular covariance is regularized by a
/// ridge of `1e-10 * trace / dim` (doubling until the Cholesky succeeds),
/// with the ridge reported.
pub fn ccp_credible_set(draws: &[Vec<f64>], alpha: f64) -> Result<CcpCredibleSet> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    let l = draws.len();
    if l == 0 {
        return Err(Error::InsufficientData("no CCP draws".into()));
    }
    let dim = draws[0].len();
    if draws.iter().any(|d| d.len() != dim) {
        return Err(Error::InvalidParameter("ragged CCP draws".into()));
    }
    if l <= dim {
        return Err(Error::InsufficientData(format!(
            "need more draws ({l}) than CCP dimensions ({dim})"
        )));
    }
    let mut center = DVector::zeros(dim);
    for d in draws {
        center += DVector::from_row_slice(d);
    }
    center /= l as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for d in draws {
        let diff = DVector::from_row_slice(d) - &center;
        cov += &diff * diff.transpose();
    }
    cov /= l as f64;

    let mut ridge = 0.0;
    let base_ridge = 1e-10 * cov.trace().max(1e-300) / dim as f64;
    let chol = loop {
        let mut c = cov.clone();
        for i in 0..dim {
            c[(i, i)] += ridge;
        }
        if let Some(ch) = nalgebra::Cholesky::new(c) {
            break ch;
        }
        ridge = if ridge == 0.0 { base_ridge } else { ridge * 10.0 };
        if ridge > 1e6 * cov.trace().max(1.0) {
            return Err(Error::NonConvergence {
                context: "CCP covariance regularization",
                residual: ridge,
                iterations: 0,
            });
        }
    };
    if ridge > 0.0 {
        for i in 0..dim {
            cov[(i, i)] += ridge;
        }
    }
    let threshold = numerics::chi_square_quantile(1.0 - alpha, dim as u32)?;
    Ok(CcpCredibleSet {
        center,
        covariance: cov,
        threshold,
        ridge,
        chol,
    })
}

/// `[min, max]` of the functional over draws whose CCP vector lies in the
/// credible set.
pub fn identified_set_interval(
    functional_values: &[f64],
    ccp_draws: &[Vec<f64>],
    set: &CcpCredibleSet,
) -> Result<Interval> {
    if functional_values.len() != ccp_draws.len() {
        return Err(Error::DimensionMismatch {
            context: "functional values vs CCP draws",
            expected: ccp_draws.len(),
            got: functional_values.len(),
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut members = 0usize;
    for (eta, p) in functional_values.iter().zip(ccp_draws) {
        if set.contains(p) {
            members += 1;
            lo = lo.min(*eta);
            hi = hi.max(*eta);
        }
    }
    if members == 0 {
        return Err(Error::InsufficientData("no draws inside the credible set".into()));
    }
    Interval::new(lo, hi)
}

/// Expected doctor visits per illness episode by exact forward induction:
/// one episode starts at `(1,0,0)`, mass propagates through choices and
/// transitions, and visit probability accumulates until the well state
/// absorbs everything.
pub fn expected_visits(gm: &GilleskieModel, ccp: &CcpMatrix) -> Result<f64> {
    let k = gm.model.n_states;
    if ccp.n_states() != k || ccp.n_choices() != gm.model.n_actions + 1 {
        return Err(Error::DimensionMismatch {
            context: "CCP shape for episode induction",
            expected: k * (gm.model.n_actions + 1),
            got: ccp.n_states() * ccp.n_choices(),
        });
    }
    let mut mass = vec![0.0; k];
    mass[gm.onset] = 1.0;
    let mut visits = 0.0;
    // An episode lasts at most t_max decision periods.
    for _ in 0..gm.params.t_max {
        let mut next = vec![0.0; k];
        let mut live = 0.0;
        for x in 0..k {
            let q = mass[x];
            if q == 0.0 || x == gm.well {
                continue;
            }
            live += q;
            visits += q * (ccp.probs[(x, 1)] + ccp.probs[(x, 3)]);
            for d in 0..=gm.model.n_actions {
                let pd = ccp.probs[(x, d)];
                if pd == 0.0 {
                    continue;
                }
                let g = &gm.model.transitions[d];
                for y in 0..k {
                    let p = g[(x, y)];
                    if p > 0.0 && y != gm.well {
                        next[y] += q * pd * p;
                    }
                }
            }
        }
        if live == 0.0 {
            break;
        }
        mass = next;
    }
    Ok(visits)
}

/// Consumption-technology overrides for counterfactual experiments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GilleskieOverrides {
    pub pc: Option<f64>,
    pub l: Option<f64>,
    pub y: Option<f64>,
}

impl GilleskieOverrides {
    pub fn is_empty(&self) -> bool {
        self.pc.is_none() && self.l.is_none() && self.y.is_none()
    }
}

/// Rebuilds the illness-episode model with overridden consumption
/// technology; transitions and preference parameters are unchanged.
pub fn counterfactual_model(gm: &GilleskieModel, overrides: &GilleskieOverrides) -> Result<GilleskieModel> {
    if overrides.is_empty() {
        return Ok(gm.clone());
    }
    let params = GilleskieParams {
        pc: overrides.pc.unwrap_or(gm.params.pc),
        l: overrides.l.unwrap_or(gm.params.l),
        y: overrides.y.unwrap_or(gm.params.y),
        ..gm.params.clone()
    };
    crate::model::build_gilleskie_model(params, gm.model.beta)
}

/// Posterior summary of one stored functional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalSummary {
    pub mean: f64,
    pub hpd: Interval,
    pub geweke_z: f64,
    pub geweke_p: f64,
}

/// Posterior report assembled from a draw store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub n_draws_used: usize,
    pub burn_in_drawn: usize,
    pub thin: usize,
    /// pmf of the number of mixture components.
    pub m_pmf: BTreeMap<usize, f64>,
    /// Summaries keyed by column name (renormalized parameters, scale
    /// factor, mixture means, stored functionals).
    pub functionals: BTreeMap<String, FunctionalSummary>,
    /// Geweke p-value of the permutation-invariant mixture mean, one entry
    /// per shock coordinate.
    pub mix_mean_geweke_p: Vec<f64>,
}

fn summarize_series(name: &str, series: &[f64], mass: f64) -> Result<(String, FunctionalSummary)> {
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let hpd = if sorted.first() == sorted.last() {
        Interval::new(sorted[0], sorted[0])?
    } else {
        numerics::hpd_interval(&sorted, mass)?
    };
    let geweke = if series.len() >= 100 {
        diagnostics::geweke_diagnostic(series, 0.1, 0.5)?
    } else {
        diagnostics::GewekeResult {
            z: 0.0,
            p_value: f64::NAN,
            early_mean: mean,
            late_mean: mean,
        }
    };
    Ok((
        name.to_string(),
        FunctionalSummary {
            mean,
            hpd,
            geweke_z: geweke.z,
            geweke_p: geweke.p_value,
        },
    ))
}

/// Summarizes a draw store: posterior means, 95% HPD intervals, the pmf of
/// `m`, and early/late mean-equality diagnostics on permutation-invariant
/// series. `extra_burn_in` and `extra_thin` apply on top of whatever the
/// chain already discarded.
pub fn summarize(store: &DrawStore, extra_burn_in: usize, extra_thin: usize) -> Result<PosteriorReport> {
    if store.draws.is_empty() {
        return Err(Error::InsufficientData("empty draw store".into()));
    }
    let thin = extra_thin.max(1);
    let draws: Vec<_> = store
        .draws
        .iter()
        .skip(extra_burn_in)
        .step_by(thin)
        .collect();
    if draws.is_empty() {
        return Err(Error::InsufficientData(
            "no draws left after burn-in/thinning".into(),
        ));
    }

    let mut m_pmf = BTreeMap::new();
    for d in &draws {
        *m_pmf.entry(d.m).or_insert(0.0) += 1.0 / draws.len() as f64;
    }

    let mut functionals = BTreeMap::new();
    let p_dim = draws[0].theta_renorm.len();
    for i in 0..p_dim {
        let series: Vec<f64> = draws.iter().map(|d| d.theta_renorm[i]).collect();
        let (k, v) = summarize_series(&format!("theta_renorm_{}", i + 1), &series, 0.95)?;
        functionals.insert(k, v);
    }
    let s_series: Vec<f64> = draws.iter().map(|d| d.s).collect();
    let (k, v) = summarize_series("s", &s_series, 0.95)?;
    functionals.insert(k, v);

    let j_dim = draws[0].mix_mean.len();
    let mut mix_mean_geweke_p = Vec::new();
    for j in 0..j_dim {
        let series: Vec<f64> = draws.iter().map(|d| d.mix_mean[j]).collect();
        let (k, v) = summarize_series(&format!("mix_mean_{}", j + 1), &series, 0.95)?;
        mix_mean_geweke_p.push(v.geweke_p);
        functionals.insert(k, v);
    }
    for (fi, name) in store.meta.functional_names.iter().enumerate() {
        let series: Vec<f64> = draws.iter().map(|d| d.functionals[fi]).collect();
        let (k, v) = summarize_series(&format!("functional_{name}"), &series, 0.95)?;
        functionals.insert(k, v);
    }

    Ok(PosteriorReport {
        n_draws_used: draws.len(),
        burn_in_drawn: extra_burn_in,
        thin,
        m_pmf,
        functionals,
        mix_mean_geweke_p,
    })
}
