//! Partial log-likelihood, the unbounded parameter transformation, priors,
//! analytic gradients of the log posterior, and the dynamic-logit MLE.
//!
//! The sampler works on transformed parameters
//! `chi = (theta_free, log sigma, alpha_1..alpha_{m-1}, mu_k, log sigma~_k)`
//! with mixing weights `w_k = e^{alpha_k} / (1 + sum_{l<m} e^{alpha_l})` and
//! `alpha_m = 0`, so every coordinate is unbounded. Likelihood derivatives
//! use the closed-form CCP/Emax expressions; the Emax sensitivity enters
//! through one adjoint solve with `[I - T'(Q)]^T`.

use crate::error::{Error, Result};
use crate::mixture::GumbelMixture;
use crate::model::{DDCModel, PanelCounts};
use crate::numerics::{self, EULER_MASCHERONI};
use crate::solver::{self, CcpMatrix, EmaxSolution, ShockSpec, SolveConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

/// Partial log-likelihood `sum_{d,x} n_{dx} log p(d|x)`.
///
/// Returns `-inf` when a positive count sits on a zero probability; zero
/// counts contribute nothing regardless of the probability.
pub fn log_likelihood(counts: &PanelCounts, ccp: &CcpMatrix) -> Result<f64> {
    if counts.n_states() != ccp.n_states() || counts.n_choices() != ccp.n_choices() {
        return Err(Error::DimensionMismatch {
            context: "counts vs CCP shape",
            expected: ccp.n_states() * ccp.n_choices(),
            got: counts.n_states() * counts.n_choices(),
        });
    }
    let mut ll = 0.0;
    for x in 0..counts.n_states() {
        for d in 0..counts.n_choices() {
            let n = counts.counts[(x, d)];
            if n == 0.0 {
                continue;
            }
            let p = ccp.probs[(x, d)];
            if p <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            ll += n * p.ln();
        }
    }
    Ok(ll)
}

/// Untransformed parameter block: free utility parameters plus the mixture
/// in its natural parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    pub theta_free: Vec<f64>,
    pub sigma: f64,
    pub weights: Vec<f64>,
    pub locations: Vec<Vec<f64>>,
    pub sigma_tildes: Vec<f64>,
}

impl Psi {
    pub fn m(&self) -> usize {
        self.weights.len()
    }

    pub fn mixture(&self) -> Result<GumbelMixture> {
        GumbelMixture::new(
            self.weights.clone(),
            self.locations.clone(),
            self.sigma_tildes.clone(),
            self.sigma,
        )
    }
}

/// Transformed (unbounded) chain state at a fixed component count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta_free: Vec<f64>,
    pub log_sigma: f64,
    /// `alpha_k` for components `1..m-1`; the last component is pinned at 0.
    pub alphas: Vec<f64>,
    /// `m x J` location parameters.
    pub locations: Vec<Vec<f64>>,
    /// `log sigma~_k`, length `m`.
    pub log_sigma_tildes: Vec<f64>,
}

impl ChainState {
    pub fn m(&self) -> usize {
        self.log_sigma_tildes.len()
    }

    pub fn dim_j(&self) -> usize {
        self.locations[0].len()
    }

    /// `|theta_free| + 1 + m (J + 2) - 1`.
    pub fn n_params(&self) -> usize {
        self.theta_free.len() + 1 + self.m() * (self.dim_j() + 2) - 1
    }

    /// Mixing weights from the softmax over `(alpha_1..alpha_{m-1}, 0)`.
    pub fn weights(&self) -> Vec<f64> {
        let mut logits = self.alphas.clone();
        logits.push(0.0);
        let lse = numerics::log_sum_exp(&logits);
        logits.iter().map(|a| (a - lse).exp()).collect()
    }

    /// Back-transformation to the natural parametrization.
    pub fn psi(&self) -> Psi {
        Psi {
            theta_free: self.theta_free.clone(),
            sigma: self.log_sigma.exp(),
            weights: self.weights(),
            locations: self.locations.clone(),
            sigma_tildes: self.log_sigma_tildes.iter().map(|s| s.exp()).collect(),
        }
    }

    pub fn mixture(&self) -> Result<GumbelMixture> {
        self.psi().mixture()
    }

    /// Flat coordinate vector:
    /// `[theta_free, log sigma, alphas, locations (k-major), log sigma~]`.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.theta_free);
        out.push(self.log_sigma);
        out.extend_from_slice(&self.alphas);
        for mu in &self.locations {
            out.extend_from_slice(mu);
        }
        out.extend_from_slice(&self.log_sigma_tildes);
        DVector::from_vec(out)
    }

    pub fn from_flat(flat: &DVector<f64>, n_free: usize, m: usize, dim_j: usize) -> Result<Self> {
        let expected = n_free + 1 + m * (dim_j + 2) - 1;
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "flat chain state length",
                expected,
                got: flat.len(),
            });
        }
        let mut idx = 0;
        let mut take = |n: usize| {
            let s: Vec<f64> = (idx..idx + n).map(|i| flat[i]).collect();
            idx += n;
            s
        };
        let theta_free = take(n_free);
        let log_sigma = take(1)[0];
        let alphas = take(m - 1);
        let locations: Vec<Vec<f64>> = (0..m).map(|_| take(dim_j)).collect();
        let log_sigma_tildes = take(m);
        Ok(Self {
            theta_free,
            log_sigma,
            alphas,
            locations,
            log_sigma_tildes,
        })
    }
}

/// Forward transformation psi -> chi. Weights map to
/// `alpha_k = log(w_k / w_m)`.
pub fn transform(psi: &Psi) -> Result<ChainState> {
    let m = psi.m();
    if m == 0 || psi.locations.len() != m || psi.sigma_tildes.len() != m {
        return Err(Error::InvalidParameter("inconsistent psi block".into()));
    }
    if psi.sigma <= 0.0 || psi.sigma_tildes.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    if psi.weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidParameter("weights must be positive".into()));
    }
    let w_last = psi.weights[m - 1];
    Ok(ChainState {
        theta_free: psi.theta_free.clone(),
        log_sigma: psi.sigma.ln(),
        alphas: psi.weights[..m - 1].iter().map(|w| (w / w_last).ln()).collect(),
        locations: psi.locations.clone(),
        log_sigma_tildes: psi.sigma_tildes.iter().map(|s| s.ln()).collect(),
    })
}

/// Back-transformation chi -> psi (spelled out for symmetry with
/// [`transform`]).
pub fn untransform(state: &ChainState) -> Psi {
    state.psi()
}

/// One normal component of a mixture-of-normals prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Mixture-of-normals prior for one scalar coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMixturePrior {
    pub components: Vec<PriorComponent>,
}

impl NormalMixturePrior {
    pub fn normal(mean: f64, sd: f64) -> Self {
        Self {
            components: vec![PriorComponent { weight: 1.0, mean, sd }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidParameter("prior needs >= 1 component".into()));
        }
        let s: f64 = self.components.iter().map(|c| c.weight).sum();
        if (s - 1.0).abs() > 1e-9 || self.components.iter().any(|c| c.sd <= 0.0 || c.weight <= 0.0)
        {
            return Err(Error::InvalidParameter("invalid prior mixture spec".into()));
        }
        Ok(())
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.sd;
                c.weight.ln()
                    - 0.5 * z * z
                    - c.sd.ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        numerics::log_sum_exp(&logs)
    }

    pub fn dlog_pdf(&self, x: f64) -> f64 {
        // Responsibility-weighted sum of component scores.
        let lp = self.log_pdf(x);
        self.components
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.sd;
                let log_resp = c.weight.ln()
                    - 0.5 * z * z
                    - c.sd.ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - lp;
                log_resp.exp() * (-(x - c.mean) / (c.sd * c.sd))
            })
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * numerics::normal_cdf((x - c.mean) / c.sd))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean: f64 = self.components.iter().map(|c| c.weight * c.mean).sum();
        self.components
            .iter()
            .map(|c| c.weight * (c.sd * c.sd + c.mean * c.mean))
            .sum::<f64>()
            - mean * mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                return c.mean + c.sd * z;
            }
        }
        let last = self.components.last().unwrap();
        let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        last.mean + last.sd * z
    }
}

/// Prior configuration for the full transformed parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Dirichlet concentration `a`; weights get `Dirichlet(a/m, ..., a/m)`.
    pub dirichlet_a: f64,
    /// Component-count penalty `Pi(m) ~ exp(-A m (log m)^tau)`.
    pub m_penalty_a: f64,
    pub m_penalty_tau: f64,
    pub m_max: usize,
    /// Applied i.i.d. to every location coordinate `mu_{jk}`.
    pub location: NormalMixturePrior,
    /// Applied i.i.d. to every `log sigma~_k`.
    pub log_sigma_tilde: NormalMixturePrior,
    pub log_sigma: NormalMixturePrior,
    /// One prior per free utility parameter.
    pub theta_free: Vec<NormalMixturePrior>,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dirichlet_a <= 0.0 || self.m_penalty_a <= 0.0 || self.m_penalty_tau < 0.0 {
            return Err(Error::InvalidParameter("invalid prior hyperparameters".into()));
        }
        if self.m_max == 0 {
            return Err(Error::InvalidParameter("m_max must be >= 1".into()));
        }
        self.location.validate()?;
        self.log_sigma_tilde.validate()?;
        self.log_sigma.validate()?;
        for t in &self.theta_free {
            t.validate()?;
        }
        Ok(())
    }

    /// Unnormalized `log Pi(m) = -A m (log m)^tau`; `-inf` beyond `m_max`.
    pub fn log_m_penalty(&self, m: usize) -> f64 {
        if m == 0 || m > self.m_max {
            return f64::NEG_INFINITY;
        }
        let mf = m as f64;
        -self.m_penalty_a * mf * mf.ln().powf(self.m_penalty_tau)
    }

    /// Normalized pmf of `m` over `1..=m_max`.
    pub fn m_pmf(&self) -> Vec<f64> {
        let logs: Vec<f64> = (1..=self.m_max).map(|m| self.log_m_penalty(m)).collect();
        let lse = numerics::log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Draws a full psi block from the prior at a given component count.
    pub fn sample_psi<R: Rng + ?Sized>(&self, m: usize, dim_j: usize, rng: &mut R) -> Psi {
        let gamma = Gamma::new(self.dirichlet_a / m as f64, 1.0).expect("valid shape");
        let mut raw: Vec<f64> = (0..m).map(|_| gamma.sample(rng).max(1e-300)) .collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|g| *g /= total);
        Psi {
            theta_free: self.theta_free.iter().map(|p| p.sample(rng)).collect(),
            sigma: self.log_sigma.sample(rng).exp(),
            weights: raw,
            locations: (0..m)
                .map(|_| (0..dim_j).map(|_| self.location.sample(rng)).collect())
                .collect(),
            sigma_tildes: (0..m).map(|_| self.log_sigma_tilde.sample(rng).exp()).collect(),
        }
    }
}

/// Jacobian `d omega_k / d alpha_j` of the softmax map, all `m` rows by
/// `m - 1` free columns.
fn omega_jacobian(weights: &[f64]) -> DMatrix<f64> {
    let m = weights.len();
    DMatrix::from_fn(m, m - 1, |k, j| {
        weights[k] * (if k == j { 1.0 } else { 0.0 } - weights[j])
    })
}

/// Log prior of a chain state in transformed coordinates, including the
/// weight-transform Jacobian and the component-count penalty. Fully
/// normalized within each `m` so that cross-`m` ratios are meaningful.
pub fn log_prior(prior: &PriorConfig, state: &ChainState) -> f64 {
    let m = state.m();
    if m > prior.m_max {
        return f64::NEG_INFINITY;
    }
    let mut lp = prior.log_m_penalty(m);
    for (i, t) in state.theta_free.iter().enumerate() {
        lp += prior.theta_free[i].log_pdf(*t);
    }
    lp += prior.log_sigma.log_pdf(state.log_sigma);
    for mu in &state.locations {
        for &v in mu {
            lp += prior.location.log_pdf(v);
        }
    }
    for &s in &state.log_sigma_tildes {
        lp += prior.log_sigma_tilde.log_pdf(s);
    }
    // Dirichlet density at omega(alpha), with normalization, plus
    // log |det d omega / d alpha|.
    let w = state.weights();
    let a = prior.dirichlet_a / m as f64;
    lp += numerics::ln_gamma(prior.dirichlet_a) - m as f64 * numerics::ln_gamma(a);
    for &wk in &w {
        lp += (a - 1.0) * wk.ln();
    }
    if m > 1 {
        let jac = omega_jacobian(&w);
        let square = jac.rows(0, m - 1).into_owned();
        let det = square.lu().determinant();
        lp += det.abs().ln();
    }
    lp
}

/// Gradient of [`log_prior`] with respect to the flat chain-state vector.
pub fn grad_log_prior(prior: &PriorConfig, state: &ChainState) -> DVector<f64> {
    let m = state.m();
    let dim_j = state.dim_j();
    let n_free = state.theta_free.len();
    let mut g = DVector::zeros(state.n_params());
    for (i, t) in state.theta_free.iter().enumerate() {
        g[i] += prior.theta_free[i].dlog_pdf(*t);
    }
    g[n_free] += prior.log_sigma.dlog_pdf(state.log_sigma);
    let mu_base = n_free + 1 + (m - 1);
    for (k, mu) in state.locations.iter().enumerate() {
        for (j, &v) in mu.iter().enumerate() {
            g[mu_base + k * dim_j + j] += prior.location.dlog_pdf(v);
        }
    }
    let st_base = mu_base + m * dim_j;
    for (k, &s) in state.log_sigma_tildes.iter().enumerate() {
        g[st_base + k] += prior.log_sigma_tilde.dlog_pdf(s);
    }
    if m > 1 {
        let w = state.weights();
        let a = prior.dirichlet_a / m as f64;
        let jac = omega_jacobian(&w);
        // Dirichlet part: sum_k (a-1)/w_k * dw_k/dalpha_j.
        for j in 0..m - 1 {
            let mut acc = 0.0;
            for k in 0..m {
                acc += (a - 1.0) / w[k] * jac[(k, j)];
            }
            g[n_free + 1 + j] += acc;
        }
        // d/d alpha_j log |det A| = tr(A^{-1} dA/dalpha_j) with
        // A = d omega_{1..m-1} / d alpha (LU-based, per the change of
        // variable formula).
        let square = jac.rows(0, m - 1).into_owned();
        let lu = square.lu();
        for j in 0..m - 1 {
            // dA[(l,k)]/dalpha_j with A[(l,k)] = w_l (1(l=k) - w_k).
            let da = DMatrix::from_fn(m - 1, m - 1, |l, k| {
                let dl = jac[(l, j)];
                let dk = jac[(k, j)];
                dl * (if l == k { 1.0 } else { 0.0 } - w[k]) - w[l] * dk
            });
            if let Some(solved) = lu.solve(&da) {
                g[n_free + 1 + j] += solved.trace();
            }
        }
    }
    g
}

/// Everything the samplers need from one posterior evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEval {
    pub log_post: f64,
    pub log_lik: f64,
    pub log_prior: f64,
    /// Gradient with respect to the flat chain state.
    pub grad: DVector<f64>,
    pub emax: EmaxSolution,
    pub ccp: CcpMatrix,
    pub mixture: GumbelMixture,
    /// Full utility parameter vector with free entries substituted.
    pub theta_full: Vec<f64>,
}

/// A posterior target: model, data, prior, and which utility parameters are
/// sampled. `likelihood_weight = 0` turns the likelihood off (prior-only
/// runs used by kernel-validity checks).
#[derive(Debug, Clone)]
pub struct EstimationTarget<'a> {
    pub model: &'a DDCModel,
    pub counts: &'a PanelCounts,
    pub prior: &'a PriorConfig,
    pub free_theta_idx: &'a [usize],
    pub solve: SolveConfig,
    pub likelihood_weight: f64,
}

impl<'a> EstimationTarget<'a> {
    pub fn new(
        model: &'a DDCModel,
        counts: &'a PanelCounts,
        prior: &'a PriorConfig,
        free_theta_idx: &'a [usize],
        solve: SolveConfig,
    ) -> Result<Self> {
        prior.validate()?;
        if prior.theta_free.len() != free_theta_idx.len() {
            return Err(Error::DimensionMismatch {
                context: "free-theta priors",
                expected: free_theta_idx.len(),
                got: prior.theta_free.len(),
            });
        }
        if free_theta_idx
            .iter()
            .any(|&i| i >= model.utility.theta.len())
        {
            return Err(Error::InvalidParameter("free theta index out of range".into()));
        }
        Ok(Self {
            model,
            counts,
            prior,
            free_theta_idx,
            solve,
            likelihood_weight: 1.0,
        })
    }

    pub fn theta_full(&self, theta_free: &[f64]) -> Vec<f64> {
        let mut theta = self.model.utility.theta.clone();
        for (i, &idx) in self.free_theta_idx.iter().enumerate() {
            theta[idx] = theta_free[i];
        }
        theta
    }

    /// Log posterior and gradient at `state`. The Emax solve warm-starts
    /// from `warm` when given. Non-converged Emax is an error.
    pub fn eval(&self, state: &ChainState, warm: Option<&DVector<f64>>) -> Result<PosteriorEval> {
        let mixture = state.mixture()?;
        let theta_full = self.theta_full(&state.theta_free);
        let lp = log_prior(self.prior, state);
        let mut grad = grad_log_prior(self.prior, state);

        if self.likelihood_weight == 0.0 {
            // Prior-only target: skip the dynamic program entirely.
            let k = self.model.n_states;
            let n_choices = self.model.n_actions + 1;
            let mut probs = DMatrix::zeros(k, n_choices);
            for x in 0..k {
                probs[(x, 0)] = 1.0;
            }
            return Ok(PosteriorEval {
                log_post: lp,
                log_lik: 0.0,
                log_prior: lp,
                grad,
                emax: EmaxSolution {
                    q: DVector::zeros(k),
                    residual: 0.0,
                    sa_iterations: 0,
                    newton_iterations: 0,
                    converged: true,
                },
                ccp: CcpMatrix::new(probs)?,
                mixture,
                theta_full,
            });
        }

        let u = self.model.utility.utilities_with(&theta_full);
        let (sol, cache) =
            solver::solve_emax_mixture_cached(self.model, &u, &mixture, &self.solve, warm)?;
        if !sol.converged {
            return Err(Error::NonConvergence {
                context: "Emax solve in posterior evaluation",
                residual: sol.residual,
                iterations: sol.sa_iterations + sol.newton_iterations,
            });
        }
        let ccp = solver::ccps_from_cache(self.model, &mixture, &cache)?;
        let ll = log_likelihood(self.counts, &ccp)? * self.likelihood_weight;
        if !ll.is_finite() {
            return Ok(PosteriorEval {
                log_post: f64::NEG_INFINITY,
                log_lik: ll,
                log_prior: lp,
                grad,
                emax: sol,
                ccp,
                mixture,
                theta_full,
            });
        }

        let grad_lik = self.likelihood_gradient(state, &mixture, &u, &sol, &cache, &ccp)?;
        grad += &grad_lik * self.likelihood_weight;
        Ok(PosteriorEval {
            log_post: ll + lp,
            log_lik: ll,
            log_prior: lp,
            grad,
            emax: sol,
            ccp,
            mixture,
            theta_full,
        })
    }

    /// Analytic gradient of the log-likelihood with respect to the flat
    /// chain state, combining the direct CCP derivatives with the Emax
    /// feedback `dQ/dxi = [I - T'(Q)]^{-1} dT/dxi` via one adjoint solve.
    fn likelihood_gradient(
        &self,
        state: &ChainState,
        mixture: &GumbelMixture,
        u: &DMatrix<f64>,
        sol: &EmaxSolution,
        cache: &solver::MixtureCache,
        ccp: &CcpMatrix,
    ) -> Result<DVector<f64>> {
        let model = self.model;
        let k_states = model.n_states;
        let j_dim = model.n_actions;
        let m = mixture.n_components();
        let n_free = state.theta_free.len();
        let weights = mixture.weights();
        let _ = (u, sol);

        // Likelihood weights n_{dx} / p(d|x); rows with zero occupancy stay 0.
        let mut w = DMatrix::zeros(k_states, j_dim + 1);
        for x in 0..k_states {
            for d in 0..=j_dim {
                let n = self.counts.counts[(x, d)];
                if n > 0.0 {
                    w[(x, d)] = n / ccp.probs[(x, d)];
                }
            }
        }

        // Direct derivative accumulators.
        let mut grad_mu = vec![vec![0.0; j_dim]; m];
        let mut grad_sigma_k = vec![0.0; m]; // with respect to effective sigma_k
        let mut grad_alpha = vec![0.0; m.saturating_sub(1)];
        // M[x, j'] = sum_d w_dx dp(d|x)/dv_{j'}(x).
        let mut m_mat = DMatrix::zeros(k_states, j_dim + 1);

        // Per-component sums reused below.
        for ki in 0..m {
            let sigma = mixture.eff_scale(ki);
            let om = weights[ki];
            let soft = &cache.softmax[ki];
            let tmat = &cache.t_values[ki];
            for x in 0..k_states {
                let c = cache.c[(x, ki)];
                let b = 1.0 - c;
                let cap_e = cache.cap_e[(x, ki)];
                let ce = if cap_e.is_infinite() { 0.0 } else { c * cap_e };
                let a = cache.a[(x, ki)];
                let big_a = cache.big_a[(x, ki)];
                let tbar = cache.tbar[(x, ki)];
                let w0 = w[(x, 0)];

                // Sw = sum_d w_d s_dk, St = sum_d w_d s_dk t_dk.
                let mut sw = 0.0;
                let mut st = 0.0;
                for d in 1..=j_dim {
                    let wd = w[(x, d)];
                    if wd != 0.0 {
                        let s = soft[(x, d - 1)];
                        sw += wd * s;
                        st += wd * s * tmat[(x, d - 1)];
                    }
                }

                // Direct mu/value derivatives share the same kernel.
                for j in 0..j_dim {
                    let s_j = soft[(x, j)];
                    if s_j == 0.0 && ce == 0.0 {
                        continue;
                    }
                    let wj = w[(x, j + 1)];
                    let base = s_j / sigma * (b * (wj - sw) + ce * (sw - w0));
                    grad_mu[ki][j] += om * base;
                    m_mat[(x, j + 1)] += om * base;
                }
                m_mat[(x, 0)] += om * ce / sigma * (w0 - sw);

                // Direct effective-scale derivative.
                let dadsig = (tbar - a + EULER_MASCHERONI - big_a) / sigma;
                grad_sigma_k[ki] += om * (b / sigma * (tbar * sw - st) + ce * dadsig * (w0 - sw));
            }
        }

        // Direct alpha derivatives: dp(d|x)/dalpha_j = w_j (p_j(d) - p(d)).
        if m > 1 {
            for x in 0..k_states {
                let w0 = w[(x, 0)];
                for j in 0..m - 1 {
                    let om_j = weights[j];
                    let mut acc = 0.0;
                    if w0 != 0.0 {
                        acc += w0 * om_j * (cache.c[(x, j)] - ccp.probs[(x, 0)]);
                    }
                    for d in 1..=j_dim {
                        let wd = w[(x, d)];
                        if wd != 0.0 {
                            let p_jd = cache.softmax[j][(x, d - 1)] * (1.0 - cache.c[(x, j)]);
                            acc += wd * om_j * (p_jd - ccp.probs[(x, d)]);
                        }
                    }
                    grad_alpha[j] += acc;
                }
            }
        }

        // Adjoint solve: lambda = [I - T'(Q)]^{-T} r with
        // r_y = beta sum_{j'} sum_x M[x.j'] G^{j'}[x, y].
        let mut r = DVector::zeros(k_states);
        for d in 0..=j_dim {
            let col = m_mat.column(d);
            let gt = model.transitions[d].transpose();
            r += model.beta * gt * col;
        }
        let system_t = solver::identity_minus_jacobian_transposed(model, ccp);
        let lambda = system_t.lu().solve(&r).ok_or(Error::NonConvergence {
            context: "adjoint solve for likelihood gradient",
            residual: sol.residual,
            iterations: 0,
        })?;

        // Emax feedback: add lambda' dT/dxi for every parameter.
        for ki in 0..m {
            let om = weights[ki];
            let soft = &cache.softmax[ki];
            for x in 0..k_states {
                let lam = lambda[x];
                if lam == 0.0 {
                    continue;
                }
                let c = cache.c[(x, ki)];
                let b = 1.0 - c;
                let a = cache.a[(x, ki)];
                let big_a = cache.big_a[(x, ki)];
                let tbar = cache.tbar[(x, ki)];
                let e1v = cache.e1[(x, ki)];
                for j in 0..j_dim {
                    grad_mu[ki][j] += lam * om * soft[(x, j)] * b;
                }
                grad_sigma_k[ki] += lam
                    * om
                    * (big_a + e1v - tbar + c * (tbar - a + EULER_MASCHERONI - big_a));
            }
        }
        if m > 1 {
            for x in 0..k_states {
                let lam = lambda[x];
                if lam == 0.0 {
                    continue;
                }
                let t_x = cache.t_q[x];
                for j in 0..m - 1 {
                    grad_alpha[j] += lam * weights[j] * (cache.comp_q[(x, j)] - t_x);
                }
            }
        }

        // Free utility parameters: direct part through M, feedback through
        // the envelope dT(x)/dtheta_i = sum_d p(d|x) Z_i[x, d].
        let mut grad_theta = vec![0.0; n_free];
        for (i, &theta_idx) in self.free_theta_idx.iter().enumerate() {
            let z = &model.utility.covariates[theta_idx];
            let mut acc = 0.0;
            for x in 0..k_states {
                for d in 0..=j_dim {
                    let zv = z[(x, d)];
                    if zv != 0.0 {
                        acc += m_mat[(x, d)] * zv + lambda[x] * ccp.probs[(x, d)] * zv;
                    }
                }
            }
            grad_theta[i] = acc;
        }

        // Assemble in flat layout.
        let mut g = DVector::zeros(state.n_params());
        for (i, v) in grad_theta.iter().enumerate() {
            g[i] = *v;
        }
        // log sigma and log sigma~_k by the chain rule through sigma_k.
        let n_alpha = m - 1;
        let mu_base = n_free + 1 + n_alpha;
        let st_base = mu_base + m * j_dim;
        let mut dlogsigma = 0.0;
        for ki in 0..m {
            let sigma = mixture.eff_scale(ki);
            dlogsigma += sigma * grad_sigma_k[ki];
            g[st_base + ki] = sigma * grad_sigma_k[ki];
            for j in 0..j_dim {
                g[mu_base + ki * j_dim + j] = grad_mu[ki][j];
            }
        }
        g[n_free] = dlogsigma;
        for j in 0..n_alpha {
            g[n_free + 1 + j] = grad_alpha[j];
        }
        Ok(g)
    }
}

/// Maximum-likelihood fit of the dynamic-logit model.
#[derive(Debug, Clone)]
pub struct MleFit {
    /// Full utility parameter vector at the optimum.
    pub theta: Vec<f64>,
    pub free_idx: Vec<usize>,
    pub log_lik: f64,
    /// Covariance of the free parameters (inverse negative Hessian).
    pub cov: DMatrix<f64>,
    pub iterations: usize,
}

/// Options for the quasi-Newton maximizer.
#[derive(Debug, Clone, Copy)]
pub struct MleConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub n_starts: usize,
    pub jitter_sd: f64,
    pub seed: u64,
    pub solve: SolveConfig,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            grad_tol: 1e-8,
            n_starts: 5,
            jitter_sd: 0.5,
            seed: 1,
            solve: SolveConfig::default(),
        }
    }
}

/// Log-likelihood and gradient of the dynamic-logit model at free
/// parameter values `theta_free`, with the Emax feedback handled by the
/// same adjoint construction as the mixture case.
pub fn logit_loglik_grad(
    model: &DDCModel,
    counts: &PanelCounts,
    free_idx: &[usize],
    theta_free: &[f64],
    solve: &SolveConfig,
    warm: Option<&DVector<f64>>,
) -> Result<(f64, DVector<f64>, EmaxSolution)> {
    let mut theta = model.utility.theta.clone();
    for (i, &idx) in free_idx.iter().enumerate() {
        theta[idx] = theta_free[i];
    }
    let u = model.utility.utilities_with(&theta);
    let sol = solver::solve_emax_with(model, &u, ShockSpec::Logit, solve, warm)?;
    if !sol.converged {
        return Err(Error::NonConvergence {
            context: "dynamic logit Emax",
            residual: sol.residual,
            iterations: sol.sa_iterations + sol.newton_iterations,
        });
    }
    let ccp = solver::ccps_with(model, &u, ShockSpec::Logit, &sol.q)?;
    let ll = log_likelihood(counts, &ccp)?;

    let k_states = model.n_states;
    let n_choices = model.n_actions + 1;
    // M[x, j] = sum_d w_d p_d (1(d=j) - p_j) = p_j (w_j - sum_d w_d p_d).
    let mut m_mat = DMatrix::zeros(k_states, n_choices);
    for x in 0..k_states {
        let mut wbar = 0.0;
        for d in 0..n_choices {
            let n = counts.counts[(x, d)];
            if n > 0.0 {
                wbar += n; // w_d p_d = n_d when w_d = n_d / p_d
            }
        }
        for j in 0..n_choices {
            let n_j = counts.counts[(x, j)];
            let w_j = if n_j > 0.0 { n_j / ccp.probs[(x, j)] } else { 0.0 };
            m_mat[(x, j)] = ccp.probs[(x, j)] * (w_j - wbar);
        }
    }
    let mut r = DVector::zeros(k_states);
    for d in 0..n_choices {
        r += model.beta * model.transitions[d].transpose() * m_mat.column(d);
    }
    let system_t = solver::identity_minus_jacobian_transposed(model, &ccp);
    let lambda = system_t.lu().solve(&r).ok_or(Error::NonConvergence {
        context: "adjoint solve for logit gradient",
        residual: sol.residual,
        iterations: 0,
    })?;
    let mut grad = DVector::zeros(free_idx.len());
    for (i, &idx) in free_idx.iter().enumerate() {
        let z = &model.utility.covariates[idx];
        let mut acc = 0.0;
        for x in 0..k_states {
            for d in 0..n_choices {
                let zv = z[(x, d)];
                if zv != 0.0 {
                    acc += m_mat[(x, d)] * zv + lambda[x] * ccp.probs[(x, d)] * zv;
                }
            }
        }
        grad[i] = acc;
    }
    Ok((ll, grad, sol))
}

/// Maximizes the dynamic-logit partial likelihood by BFGS with backtracking
/// line search and multistart; the covariance is the inverse negative
/// finite-difference Hessian of the log-likelihood.
pub fn logit_mle(
    model: &DDCModel,
    counts: &PanelCounts,
    free_idx: &[usize],
    cfg: &MleConfig,
) -> Result<MleFit> {
    use rand::SeedableRng;
    if free_idx.is_empty() || free_idx.iter().any(|&i| i >= model.utility.theta.len()) {
        return Err(Error::InvalidParameter("invalid free parameter indices".into()));
    }
    let start: Vec<f64> = free_idx.iter().map(|&i| model.utility.theta[i]).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for s in 0..cfg.n_starts.max(1) {
        let mut x0 = start.clone();
        if s > 0 {
            for v in x0.iter_mut() {
                let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += cfg.jitter_sd * z;
            }
        }
        match bfgs_maximize(model, counts, free_idx, &x0, cfg) {
            Ok((ll, x, iters)) => {
                if best.as_ref().map_or(true, |(b, _, _)| ll > *b) {
                    best = Some((ll, x, iters));
                }
            }
            Err(_) if s > 0 => continue,
            Err(e) => return Err(e),
        }
    }
    let (log_lik, x_hat, iterations) =
        best.ok_or(Error::NonConvergence {
            context: "logit MLE: all starts failed",
            residual: f64::NAN,
            iterations: 0,
        })?;

    // Finite-difference Hessian of the log-likelihood from the analytic
    // gradient, then covariance = inverse negative Hessian.
    let n = free_idx.len();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let h = 1e-5 * (1.0 + x_hat[i].abs());
        let mut xp = x_hat.clone();
        xp[i] += h;
        let (_, gp, _) = logit_loglik_grad(model, counts, free_idx, &xp, &cfg.solve, None)?;
        let mut xm = x_hat.clone();
        xm[i] -= h;
        let (_, gm, _) = logit_loglik_grad(model, counts, free_idx, &xm, &cfg.solve, None)?;
        for j in 0..n {
            hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    // Symmetrize and invert -H.
    let neg_h = -(hess.clone() + hess.transpose()) * 0.5;
    let cov = neg_h.clone().try_inverse().ok_or(Error::NonConvergence {
        context: "MLE information matrix singular",
        residual: f64::NAN,
        iterations,
    })?;

    let mut theta = model.utility.theta.clone();
    for (i, &idx) in free_idx.iter().enumerate() {
        theta[idx] = x_hat[i];
    }
    Ok(MleFit {
        theta,
        free_idx: free_idx.to_vec(),
        log_lik,
        cov,
        iterations,
    })
}

/// BFGS on the negative log-likelihood with backtracking Armijo search.
fn bfgs_maximize(
    model: &DDCModel,
    counts: &PanelCounts,
    free_idx: &[usize],
    x0: &[f64],
    cfg: &MleConfig,
) -> Result<(f64, Vec<f64>, usize)> {
    let n = x0.len();
    let mut x = DVector::from_row_slice(x0);
    let eval = |x: &DVector<f64>, warm: Option<&DVector<f64>>| {
        logit_loglik_grad(model, counts, free_idx, x.as_slice(), &cfg.solve, warm)
            .map(|(ll, g, sol)| (-ll, -g, sol))
    };
    let (mut f, mut g, sol) = eval(&x, None)?;
    let mut warm = Some(sol.q);
    let mut h_inv = DMatrix::identity(n, n);
    for it in 0..cfg.max_iter {
        if g.amax() < cfg.grad_tol * (1.0 + f.abs()) {
            return Ok((-f, x.as_slice().to_vec(), it));
        }
        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            // Reset to steepest descent if curvature information went stale.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let x_new = &x + &dir * step;
            if let Ok((f_new, g_new, sol_new)) = eval(&x_new, warm.as_ref()) {
                if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                    let s = &x_new - &x;
                    let y = &g_new - &g;
                    let sy = y.dot(&s);
                    if sy > 1e-14 {
                        let rho = 1.0 / sy;
                        let i_mat = DMatrix::identity(n, n);
                        let left = &i_mat - &(&s * y.transpose()) * rho;
                        let right = &i_mat - &(&y * s.transpose()) * rho;
                        h_inv = &left * &h_inv * &right + (&s * s.transpose()) * rho;
                    }
                    x = x_new;
                    f = f_new;
                    g = g_new;
                    warm = Some(sol_new.q);
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok((-f, x.as_slice().to_vec(), it));
        }
    }
    Ok((-f, x.as_slice().to_vec(), cfg.max_iter))
}

/// Delta-method confidence interval for a scalar functional of the MLE.
pub fn delta_method_ci<F: Fn(&[f64]) -> Result<f64>>(
    fit: &MleFit,
    functional: F,
    level: f64,
) -> Result<(f64, crate::numerics::Interval)> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Domain(format!("CI level must be in (0,1), got {level}")));
    }
    let eta = functional(&fit.theta)?;
    let n = fit.free_idx.len();
    let mut grad = DVector::zeros(n);
    for (i, &idx) in fit.free_idx.iter().enumerate() {
        let h = 1e-5 * (1.0 + fit.theta[idx].abs());
        let mut tp = fit.theta.clone();
        tp[idx] += h;
        let mut tm = fit.theta.clone();
        tm[idx] -= h;
        grad[i] = (functional(&tp)? - functional(&tm)?) / (2.0 * h);
    }
    let var = (grad.transpose() * &fit.cov * &grad)[(0, 0)];
    let se = var.max(0.0).sqrt();
    let z = numerics::normal_quantile(0.5 * (1.0 + level))?;
    Ok((eta, numerics::Interval::new(eta - z * se, eta + z * se)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ccps_to_counts;
    use crate::testkit;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_likelihood_uniform_ccps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts = testkit::random_counts(&mut rng, 4, 3);
        let probs = DMatrix::from_element(4, 3, 1.0 / 3.0);
        let ccp = CcpMatrix::new(probs).unwrap();
        let ll = log_likelihood(&counts, &ccp).unwrap();
        assert_relative_eq!(ll, counts.total() * (1.0_f64 / 3.0).ln(), max_relative = 1e-12);
    }

    #[test]
    fn log_likelihood_maximized_at_generating_ccps() {
        // Gibbs inequality: counts built from p maximize sum n log q at q = p.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, mix) = testkit::random_instance(&mut rng, 4, 2, 2, 0.8);
        let sol = solver::solve_emax(&model, &mix, &SolveConfig::default(), None).unwrap();
        let p = solver::ccps(&model, &mix, &sol.q).unwrap();
        let counts = ccps_to_counts(&p, 7.0).unwrap();
        let at_truth = log_likelihood(&counts, &p).unwrap();
        for _ in 0..5 {
            let (m2, x2) = testkit::random_instance(&mut rng, 4, 2, 2, 0.8);
            let s2 = solver::solve_emax(&m2, &x2, &SolveConfig::default(), None).unwrap();
            let q2 = solver::ccps(&m2, &x2, &s2.q).unwrap();
            assert!(log_likelihood(&counts, &q2).unwrap() <= at_truth + 1e-10);
        }
    }

    #[test]
    fn log_likelihood_rust_design_regression_pin() {
        // Fractional N = 10 design evaluated at the unit-mixture reference
        // point; value frozen after the first correct build.
        let model = crate::model::build_rust_model(5.0727, -0.002293, 0.3919, 0.5953, 0.999, 90)
            .unwrap();
        let (_, ccp) = solver::logit_emax_and_ccps(&model, &SolveConfig::default()).unwrap();
        let counts = ccps_to_counts(&ccp, 10.0).unwrap();
        let mix = GumbelMixture::standard(1);
        let sol = solver::solve_emax(&model, &mix, &SolveConfig::default(), None).unwrap();
        let ccp_mix = solver::ccps(&model, &mix, &sol.q).unwrap();
        let ll = log_likelihood(&counts, &ccp_mix).unwrap();
        assert!(ll.is_finite());
        assert_relative_eq!(ll, -211.544_895_465_530_3, max_relative = 1e-12);
        // Counts generated from the logit CCPs dominate (Gibbs inequality).
        assert!(log_likelihood(&counts, &ccp).unwrap() > ll);
    }

    #[test]
    fn log_likelihood_zero_probability_with_mass() {
        let counts = PanelCounts::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        let ccp = CcpMatrix::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(log_likelihood(&counts, &ccp).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn transform_round_trip() {
        let psi = Psi {
            theta_free: vec![0.3],
            sigma: 1.7,
            weights: vec![0.2, 0.5, 0.3],
            locations: vec![vec![0.1, -0.4], vec![1.0, 2.0], vec![-3.0, 0.0]],
            sigma_tildes: vec![0.5, 1.0, 2.0],
        };
        let chi = transform(&psi).unwrap();
        let back = untransform(&chi);
        assert_relative_eq!(back.sigma, psi.sigma, epsilon = 1e-12);
        for (a, b) in back.weights.iter().zip(&psi.weights) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in back.sigma_tildes.iter().zip(&psi.sigma_tildes) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(back.locations, psi.locations);

        // m = 2 with alpha_1 = 0 gives equal weights.
        let chi2 = ChainState {
            theta_free: vec![],
            log_sigma: 0.0,
            alphas: vec![0.0],
            locations: vec![vec![0.0], vec![1.0]],
            log_sigma_tildes: vec![0.0, 0.0],
        };
        let w = chi2.weights();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-15);
        // m = 1: no alpha coordinates, weight 1.
        let chi1 = ChainState {
            theta_free: vec![],
            log_sigma: 0.0,
            alphas: vec![],
            locations: vec![vec![0.0]],
            log_sigma_tildes: vec![0.0],
        };
        assert_eq!(chi1.weights(), vec![1.0]);
        assert_eq!(chi1.n_params(), 0 + 1 + 1 * 3 - 1);
    }

    #[test]
    fn flat_round_trip_and_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, j, n_free) in [(1, 1, 0), (2, 1, 0), (3, 2, 2), (4, 3, 1)] {
            let state = testkit::random_chain_state(&mut rng, m, j, n_free);
            let flat = state.to_flat();
            assert_eq!(flat.len(), n_free + 1 + m * (j + 2) - 1);
            let back = ChainState::from_flat(&flat, n_free, m, j).unwrap();
            assert_eq!(back, state);
        }
    }

    #[test]
    fn transform_round_trip_random_psi() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rng.gen_range(1..=4);
            let j = rng.gen_range(1..=3);
            let mut weights: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 0.05).collect();
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
            let psi = Psi {
                theta_free: vec![rng.gen()],
                sigma: rng.gen::<f64>() + 0.3,
                weights,
                locations: (0..m)
                    .map(|_| (0..j).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect())
                    .collect(),
                sigma_tildes: (0..m).map(|_| rng.gen::<f64>() + 0.2).collect(),
            };
            let back = untransform(&transform(&psi).unwrap());
            for (a, b) in back.weights.iter().zip(&psi.weights) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in back.sigma_tildes.iter().zip(&psi.sigma_tildes) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((back.sigma - psi.sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn m_penalty_ratio() {
        let prior = testkit::default_prior(0, 10);
        // Pi(1)/Pi(2) = exp(0.05 * 2 * (ln 2)^5) for A = 0.05, tau = 5.
        let ratio = (prior.log_m_penalty(1) - prior.log_m_penalty(2)).exp();
        let expected = (0.05 * 2.0 * 2.0_f64.ln().powi(5)).exp();
        assert_relative_eq!(ratio, expected, max_relative = 1e-12);
        assert_eq!(prior.log_m_penalty(11), f64::NEG_INFINITY);
        let pmf = prior.m_pmf();
        assert_relative_eq!(pmf.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_prior_permutation_invariant_and_finite() {
        let prior = testkit::default_prior(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = testkit::random_chain_state(&mut rng, 3, 2, 1);
        let lp = log_prior(&prior, &state);
        assert!(lp.is_finite());

        // Permute components 0 and 2 via psi and re-transform.
        let psi = state.psi();
        let perm = Psi {
            theta_free: psi.theta_free.clone(),
            sigma: psi.sigma,
            weights: vec![psi.weights[2], psi.weights[1], psi.weights[0]],
            locations: vec![
                psi.locations[2].clone(),
                psi.locations[1].clone(),
                psi.locations[0].clone(),
            ],
            sigma_tildes: vec![psi.sigma_tildes[2], psi.sigma_tildes[1], psi.sigma_tildes[0]],
        };
        let state_perm = transform(&perm).unwrap();
        assert_relative_eq!(log_prior(&prior, &state_perm), lp, max_relative = 1e-10);

        // Beyond m_max the prior vanishes.
        let state_big = testkit::random_chain_state(&mut rng, 11, 2, 1);
        assert_eq!(log_prior(&prior, &state_big), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_weight_jacobian() {
        // m = 2: d omega_1 / d alpha_1 = omega_1 (1 - omega_1).
        let state = ChainState {
            theta_free: vec![],
            log_sigma: 0.0,
            alphas: vec![0.7],
            locations: vec![vec![0.0], vec![0.0]],
            log_sigma_tildes: vec![0.0, 0.0],
        };
        let w = state.weights();
        let jac = omega_jacobian(&w);
        assert_relative_eq!(jac[(0, 0)], w[0] * (1.0 - w[0]), epsilon = 1e-14);
        assert_relative_eq!(jac[(1, 0)], -w[1] * w[0], epsilon = 1e-14);

        // The LU log-determinant matches the closed form sum_k ln w_k.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = testkit::random_chain_state(&mut rng, 4, 1, 0);
        let w = state.weights();
        let jac = omega_jacobian(&w);
        let det = jac.rows(0, 3).into_owned().lu().determinant();
        let closed: f64 = w.iter().map(|v| v.ln()).sum();
        assert_relative_eq!(det.abs().ln(), closed, max_relative = 1e-10);
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let prior = testkit::default_prior(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in [1usize, 2, 4] {
            let state = testkit::random_chain_state(&mut rng, m, 2, 2);
            let g = grad_log_prior(&prior, &state);
            let flat = state.to_flat();
            for i in 0..flat.len() {
                let h = 1e-6 * (1.0 + flat[i].abs());
                let mut fp = flat.clone();
                fp[i] += h;
                let mut fm = flat.clone();
                fm[i] -= h;
                let lp_p = log_prior(&prior, &ChainState::from_flat(&fp, 2, m, 2).unwrap());
                let lp_m = log_prior(&prior, &ChainState::from_flat(&fm, 2, m, 2).unwrap());
                let fd = (lp_p - lp_m) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-6, "m={m} coord {i}: {} vs fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn prior_weight_marginal_is_beta() {
        // omega_1 under Dirichlet(a/m, ..., a/m) is Beta(a/m, a (m-1)/m).
        let prior = testkit::default_prior(0, 10);
        let m = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut draws: Vec<f64> = (0..40_000)
            .map(|_| prior.sample_psi(m, 1, &mut rng).weights[0])
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let a = prior.dirichlet_a / m as f64;
        let b = prior.dirichlet_a * (m as f64 - 1.0) / m as f64;
        let (_stat, p) = crate::mcmc::diagnostics::ks_test(&draws, |x| {
            numerics::reg_inc_beta(a, b, x.clamp(0.0, 1.0)).unwrap()
        });
        assert!(p > 0.001, "KS p-value {p}");
    }

    #[test]
    fn likelihood_invariant_to_component_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = testkit::random_model(&mut rng, 5, 2, 0.85, 1);
        let counts = testkit::random_counts(&mut rng, 5, 3);
        let prior = testkit::default_prior(1, 10);
        let target =
            EstimationTarget::new(&model, &counts, &prior, &[0], SolveConfig::default()).unwrap();
        let state = testkit::random_chain_state(&mut rng, 3, 2, 1);
        let ll = target.eval(&state, None).unwrap().log_lik;

        let psi = state.psi();
        let perm = Psi {
            theta_free: psi.theta_free.clone(),
            sigma: psi.sigma,
            weights: vec![psi.weights[1], psi.weights[2], psi.weights[0]],
            locations: vec![
                psi.locations[1].clone(),
                psi.locations[2].clone(),
                psi.locations[0].clone(),
            ],
            sigma_tildes: vec![psi.sigma_tildes[1], psi.sigma_tildes[2], psi.sigma_tildes[0]],
        };
        let ll_perm = target
            .eval(&transform(&perm).unwrap(), None)
            .unwrap()
            .log_lik;
        assert_relative_eq!(ll, ll_perm, max_relative = 1e-9);
    }

    /// Central-difference check of the full posterior gradient. The Emax
    /// solves inside the finite differences run at a 1e-13 tolerance so the
    /// solver leaves no visible noise at h = 1e-5.
    fn check_gradient(seed: u64, k: usize, j: usize, m: usize, n_free: usize, beta: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = testkit::random_model(&mut rng, k, j, beta, n_free.max(1));
        let counts = testkit::random_counts(&mut rng, k, j + 1);
        let prior = testkit::default_prior(n_free, 10);
        let free_idx: Vec<usize> = (0..n_free).collect();
        let solve = SolveConfig {
            tol: 1e-13,
            ..SolveConfig::default()
        };
        let target = EstimationTarget::new(&model, &counts, &prior, &free_idx, solve).unwrap();
        let state = testkit::random_chain_state(&mut rng, m, j, n_free);
        let eval = target.eval(&state, None).unwrap();
        let flat = state.to_flat();
        for i in 0..flat.len() {
            let h = 1e-5 * (1.0 + flat[i].abs());
            let mut fp = flat.clone();
            fp[i] += h;
            let mut fm = flat.clone();
            fm[i] -= h;
            let lp = target
                .eval(&ChainState::from_flat(&fp, n_free, m, j).unwrap(), None)
                .unwrap()
                .log_post;
            let lm = target
                .eval(&ChainState::from_flat(&fm, n_free, m, j).unwrap(), None)
                .unwrap()
                .log_post;
            let fd = (lp - lm) / (2.0 * h);
            let g = eval.grad[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
            assert!(
                rel < 1e-5,
                "seed {seed} (k={k} j={j} m={m} nf={n_free}) coord {i}: analytic {g} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_binary() {
        check_gradient(11, 5, 1, 1, 0, 0.9);
        check_gradient(12, 5, 1, 2, 0, 0.8);
        check_gradient(13, 6, 1, 3, 1, 0.95);
    }

    #[test]
    fn gradient_matches_finite_differences_multinomial() {
        check_gradient(21, 5, 2, 2, 1, 0.85);
        check_gradient(22, 4, 3, 2, 2, 0.9);
        check_gradient(23, 5, 3, 3, 1, 0.6);
    }

    #[test]
    fn gradient_beta_zero_closed_form() {
        // With beta = 0 there is no Emax feedback; J = 1, m = 1:
        // d log p(0|x) / d mu_1 = exp(-e^{-a} - a) (-1/sigma) / p(0|x).
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = testkit::random_model(&mut rng, 3, 1, 0.0, 1);
        // One observation of action 0 at state 1 only.
        let mut c = DMatrix::zeros(3, 2);
        c[(1, 0)] = 1.0;
        let counts = PanelCounts::new(c).unwrap();
        let prior = testkit::default_prior(0, 5);
        let target =
            EstimationTarget::new(&model, &counts, &prior, &[], SolveConfig::default()).unwrap();
        let state = ChainState {
            theta_free: vec![],
            log_sigma: 0.2_f64,
            alphas: vec![],
            locations: vec![vec![0.4]],
            log_sigma_tildes: vec![-0.1],
        };
        let eval = target.eval(&state, None).unwrap();
        // Symbolic derivative at beta = 0: a = (v0 - v1 - mu)/sigma + gamma.
        let sigma = (0.2_f64).exp() * (-0.1_f64).exp();
        let u = model.utilities();
        let a = (u[(1, 0)] - u[(1, 1)] - 0.4) / sigma + EULER_MASCHERONI;
        let p0 = (-(-a).exp()).exp();
        let dp0_dmu = (-(-a).exp() - a).exp() * (-1.0 / sigma);
        let expected = dp0_dmu / p0;
        // mu coordinate sits after (log sigma) in the flat layout, plus the
        // location prior score.
        let mu_idx = 1;
        let prior_score = grad_log_prior(&prior, &state)[mu_idx];
        assert_relative_eq!(eval.grad[mu_idx] - prior_score, expected, max_relative = 1e-9);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = testkit::random_model(&mut rng, 6, 2, 0.9, 3);
        let counts = testkit::random_counts(&mut rng, 6, 3);
        let free_idx = [0, 2];
        let theta_free: Vec<f64> = free_idx.iter().map(|&i| model.utility.theta[i]).collect();
        let solve = SolveConfig {
            tol: 1e-13,
            ..SolveConfig::default()
        };
        let (_, g, _) =
            logit_loglik_grad(&model, &counts, &free_idx, &theta_free, &solve, None).unwrap();
        for i in 0..free_idx.len() {
            let h = 1e-5;
            let mut tp = theta_free.clone();
            tp[i] += h;
            let mut tm = theta_free.clone();
            tm[i] -= h;
            let (lp, _, _) =
                logit_loglik_grad(&model, &counts, &free_idx, &tp, &solve, None).unwrap();
            let (lm, _, _) =
                logit_loglik_grad(&model, &counts, &free_idx, &tm, &solve, None).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-6, "coord {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn logit_mle_recovers_exact_count_truth() {
        // Counts built from the model's own logit CCPs: the likelihood is
        // maximized exactly at the generating parameters.
        let model = crate::model::build_rust_model(5.0727, -0.002293, 0.3919, 0.5953, 0.999, 90)
            .unwrap();
        let (_, ccp) = solver::logit_emax_and_ccps(&model, &SolveConfig::default()).unwrap();
        let counts = ccps_to_counts(&ccp, 10.0).unwrap();
        let mut start_model = model.clone();
        start_model.utility.theta = vec![4.0, -0.01];
        let cfg = MleConfig {
            n_starts: 1,
            ..MleConfig::default()
        };
        let fit = logit_mle(&start_model, &counts, &[0, 1], &cfg).unwrap();
        assert!(
            (fit.theta[0] - 5.0727).abs() < 1e-3,
            "theta0 {}",
            fit.theta[0]
        );
        assert!(
            (fit.theta[1] + 0.002293).abs() < 1e-5,
            "theta1 {}",
            fit.theta[1]
        );
    }

    #[test]
    fn logit_mle_consistency_with_sampling_noise() {
        // Binomial counts at N = 1e5 per state: estimates within 2 SE.
        let model = crate::model::build_rust_model(5.0727, -0.002293, 0.3919, 0.5953, 0.999, 90)
            .unwrap();
        let (_, ccp) = solver::logit_emax_and_ccps(&model, &SolveConfig::default()).unwrap();
        let n = 100_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut counts = DMatrix::zeros(90, 2);
        for x in 0..90 {
            let p = ccp.probs[(x, 0)];
            let mut k = 0u64;
            for _ in 0..n {
                if rng.gen::<f64>() < p {
                    k += 1;
                }
            }
            counts[(x, 0)] = k as f64;
            counts[(x, 1)] = (n - k) as f64;
        }
        let counts = PanelCounts::new(counts).unwrap();
        let cfg = MleConfig {
            n_starts: 1,
            ..MleConfig::default()
        };
        let fit = logit_mle(&model, &counts, &[0, 1], &cfg).unwrap();
        for (i, truth) in [(0usize, 5.0727), (1usize, -0.002293)] {
            let se = fit.cov[(i, i)].sqrt();
            assert!(
                (fit.theta[i] - truth).abs() < 2.0 * se,
                "theta{i}: {} vs {truth} (2se {})",
                fit.theta[i],
                2.0 * se
            );
        }
    }

    #[test]
    fn delta_method_linear_functional_is_exact() {
        // For a linear functional the delta CI is theta_hat +- 1.96 se.
        let fit = MleFit {
            theta: vec![2.0, -1.0],
            free_idx: vec![0, 1],
            log_lik: 0.0,
            cov: DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 1.0]),
            iterations: 0,
        };
        let (eta, iv) = delta_method_ci(&fit, |t| Ok(t[0]), 0.95).unwrap();
        assert_relative_eq!(eta, 2.0);
        assert!((iv.lo - (2.0 - 1.959_963_985 * 0.5)).abs() < 1e-6);
        assert!((iv.hi - (2.0 + 1.959_963_985 * 0.5)).abs() < 1e-6);
    }
}
