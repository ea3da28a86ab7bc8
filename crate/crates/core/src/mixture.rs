//! Location-scale mixtures of Gumbel distributions.
//!
//! The kernel is the centered Gumbel density
//! `phi(t) = exp(-t - gamma - e^{-t - gamma})`, which has mean zero and
//! variance `pi^2/6`; a component with location `mu` and scale `sigma`
//! therefore has mean `mu`. Components are independent across the `J`
//! coordinates. The effective scale of component `k` is `sigma * sigma_tilde_k`,
//! with `sigma` common across components.

use crate::error::{Error, Result};
use crate::numerics::{self, e1_exp_neg, EULER_MASCHERONI};
use rand::Rng;
use serde::{Deserialize, Serialize};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A `J`-dimensional finite mixture of Gumbel distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GumbelMixture {
    /// Mixing weights, strictly positive, summing to one.
    weights: Vec<f64>,
    /// Per-component location vectors, each of length `J`.
    locations: Vec<Vec<f64>>,
    /// Per-component scale multipliers.
    sigma_tildes: Vec<f64>,
    /// Common scale factor.
    sigma: f64,
}

impl GumbelMixture {
    pub fn new(
        weights: Vec<f64>,
        locations: Vec<Vec<f64>>,
        sigma_tildes: Vec<f64>,
        sigma: f64,
    ) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::InvalidParameter("mixture needs >= 1 component".into()));
        }
        if locations.len() != m {
            return Err(Error::DimensionMismatch {
                context: "mixture locations",
                expected: m,
                got: locations.len(),
            });
        }
        if sigma_tildes.len() != m {
            return Err(Error::DimensionMismatch {
                context: "mixture scales",
                expected: m,
                got: sigma_tildes.len(),
            });
        }
        let dim = locations[0].len();
        if dim == 0 || locations.iter().any(|mu| mu.len() != dim) {
            return Err(Error::InvalidParameter(
                "mixture locations must share a positive dimension".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "mixture weights must sum to 1, got {sum}"
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidParameter("mixture weights must be > 0".into()));
        }
        if !(sigma > 0.0) || sigma_tildes.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("mixture scales must be > 0".into()));
        }
        Ok(Self {
            weights,
            locations,
            sigma_tildes,
            sigma,
        })
    }

    /// Single standard component: `m = 1`, zero location, unit scale.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![1.0], 1.0).expect("valid")
    }

    /// Quantile-discretized Gumbel-mixture approximation of the standard
    /// logistic distribution, built from the representation of a logistic
    /// variable as the difference of two independent standard Gumbels.
    pub fn logistic_approx(n_components: usize) -> Self {
        assert!(n_components >= 2);
        let m = n_components;
        let w = 1.0 / m as f64;
        // Quantiles of the centered Gumbel: F(x) = exp(-e^{-x-gamma}),
        // F^{-1}(p) = -gamma - ln(-ln p).
        let locations: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                let p = (k as f64 + 0.5) / m as f64;
                vec![EULER_MASCHERONI + (-p.ln()).ln()] // -quantile
            })
            .collect();
        Self::new(vec![w; m], locations, vec![1.0; m], 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.locations[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> &[Vec<f64>] {
        &self.locations
    }

    pub fn sigma_tildes(&self) -> &[f64] {
        &self.sigma_tildes
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Effective scale of component `k`.
    pub fn eff_scale(&self, k: usize) -> f64 {
        self.sigma * self.sigma_tildes[k]
    }

    /// Log of the standardized Gumbel kernel.
    fn log_phi(t: f64) -> f64 {
        let shifted = t + EULER_MASCHERONI;
        -shifted - (-shifted).exp()
    }

    /// Joint log density at `z` (length `J`).
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "mixture density argument",
                expected: self.dim(),
                got: z.len(),
            });
        }
        let logs: Vec<f64> = (0..self.n_components())
            .map(|k| {
                let s = self.eff_scale(k);
                let mut lp = self.weights[k].ln();
                for (j, &zj) in z.iter().enumerate() {
                    lp += Self::log_phi((zj - self.locations[k][j]) / s) - s.ln();
                }
                lp
            })
            .collect();
        Ok(numerics::log_sum_exp(&logs))
    }

    pub fn density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density(z)?.exp())
    }

    /// Log density of coordinate `j`'s marginal.
    pub fn marginal_log_density(&self, j: usize, x: f64) -> f64 {
        let logs: Vec<f64> = (0..self.n_components())
            .map(|k| {
                let s = self.eff_scale(k);
                self.weights[k].ln() + Self::log_phi((x - self.locations[k][j]) / s) - s.ln()
            })
            .collect();
        numerics::log_sum_exp(&logs)
    }

    /// CDF of coordinate `j`'s marginal:
    /// `sum_k w_k exp(-e^{-(x - mu_jk)/sigma_k - gamma})`.
    pub fn marginal_cdf(&self, j: usize, x: f64) -> f64 {
        (0..self.n_components())
            .map(|k| {
                let t = (x - self.locations[k][j]) / self.eff_scale(k) + EULER_MASCHERONI;
                self.weights[k] * (-(-t).exp()).exp()
            })
            .sum()
    }

    /// Draws one `J`-vector using pre-drawn uniforms: one for the component
    /// index and one per coordinate.
    fn sample_with(&self, u_comp: f64, u_coords: &[f64]) -> Vec<f64> {
        let mut acc = 0.0;
        let mut k = self.n_components() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u_comp < acc {
                k = i;
                break;
            }
        }
        let s = self.eff_scale(k);
        u_coords
            .iter()
            .zip(&self.locations[k])
            .map(|(&u, &mu)| mu - s * (EULER_MASCHERONI + (-u.ln()).ln()))
            .collect()
    }

    /// Draws one `J`-vector from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u_comp: f64 = rng.gen();
        let u_coords: Vec<f64> = (0..self.dim()).map(|_| rng.gen()).collect();
        self.sample_with(u_comp, &u_coords)
    }

    /// Mean vector `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.locations) {
            for (o, &m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// Median of coordinate `j`'s marginal.
    ///
    /// Closed form for a single component; otherwise the root of
    /// `cdf - 1/2` with a doubling bracket around the mean.
    pub fn marginal_median(&self, j: usize) -> Result<f64> {
        if self.n_components() == 1 {
            let s = self.eff_scale(0);
            return Ok(self.locations[0][j]
                - s * 2.0_f64.ln().ln()
                - s * EULER_MASCHERONI);
        }
        let mean_j = self.mean()[j];
        let mut radius = (0..self.n_components())
            .map(|k| self.eff_scale(k) + (self.locations[k][j] - mean_j).abs())
            .fold(0.0_f64, f64::max)
            * 10.0;
        for _ in 0..200 {
            let (lo, hi) = (mean_j - radius, mean_j + radius);
            if self.marginal_cdf(j, lo) < 0.5 && self.marginal_cdf(j, hi) > 0.5 {
                let bracket = numerics::Interval::new(lo, hi)?;
                return numerics::find_root(|x| self.marginal_cdf(j, x) - 0.5, bracket, 1e-12);
            }
            radius *= 2.0;
        }
        Err(Error::Bracketing("mixture median bracket never closed".into()))
    }

    /// `E[X 1(X >= M)]` for coordinate `j`'s marginal:
    /// `sum_k w_k { mu_jk - M exp(-e^{-b_k}) + sigma_k E1(e^{-b_k}) }` with
    /// `b_k = (M - mu_jk)/sigma_k + gamma`.
    pub fn truncated_mean_above(&self, j: usize, m_threshold: f64) -> f64 {
        (0..self.n_components())
            .map(|k| {
                let s = self.eff_scale(k);
                let mu = self.locations[k][j];
                let b = (m_threshold - mu) / s + EULER_MASCHERONI;
                let surv_at = (-(-b).exp()).exp(); // exp(-e^{-b}) = F(M) for this component
                let m_term = if surv_at == 0.0 { 0.0 } else { m_threshold * surv_at };
                self.weights[k] * (mu - m_term + s * e1_exp_neg(b))
            })
            .sum()
    }

    /// Scale-normalization factor `s = log 2 / E[X~ 1(X~ >= median(X~))]`,
    /// where `X~` is the demeaned first coordinate. The factor matches the
    /// location-scale convention of the standard logistic, for which `s = 1`.
    pub fn scale_factor(&self) -> Result<f64> {
        let mean_1 = self.mean()[0];
        let demeaned = Self::new(
            self.weights.clone(),
            self.locations.iter().map(|mu| vec![mu[0] - mean_1]).collect(),
            self.sigma_tildes.clone(),
            self.sigma,
        )?;
        let median = demeaned.marginal_median(0)?;
        let trunc = demeaned.truncated_mean_above(0, median);
        Ok(2.0_f64.ln() / trunc)
    }
}

/// Monte Carlo estimate of a distance between two shock distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Estimates `rho(F1, F2) = integral (1 + sum_j |e_j|) |f1(e) - f2(e)| de`
/// by importance sampling from the equal-weight average density
/// `(f1 + f2)/2`. Common random numbers across the two strata make the
/// estimate exactly symmetric in its arguments.
pub fn rho_distance<R: Rng + ?Sized>(
    f1: &GumbelMixture,
    f2: &GumbelMixture,
    n_mc: usize,
    rng: &mut R,
) -> Result<RhoEstimate> {
    if f1.dim() != f2.dim() {
        return Err(Error::DimensionMismatch {
            context: "rho distance dimensions",
            expected: f1.dim(),
            got: f2.dim(),
        });
    }
    if n_mc < 100 {
        return Err(Error::InsufficientData(format!(
            "rho distance needs n_mc >= 100, got {n_mc}"
        )));
    }
    let integrand = |x: &[f64]| -> f64 {
        let l1 = f1.log_density(x).expect("dims checked");
        let l2 = f2.log_density(x).expect("dims checked");
        let m = l1.max(l2);
        if m == f64::NEG_INFINITY {
            return 0.0;
        }
        let (e1v, e2v) = ((l1 - m).exp(), (l2 - m).exp());
        let ratio = (e1v - e2v).abs() / (0.5 * (e1v + e2v));
        let weight = 1.0 + x.iter().map(|v| v.abs()).sum::<f64>();
        weight * ratio
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let dim = f1.dim();
    for _ in 0..n_mc {
        let u_comp: f64 = rng.gen();
        let u_coords: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
        let x1 = f1.sample_with(u_comp, &u_coords);
        let x2 = f2.sample_with(u_comp, &u_coords);
        let v = 0.5 * (integrand(&x1) + integrand(&x2));
        sum += v;
        sum_sq += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) / n;
    Ok(RhoEstimate {
        estimate: mean,
        std_error: var.sqrt(),
    })
}
