//! Posterior simulation: an HMC block over the transformed parameters at a
//! fixed number of mixture components, a reversible-jump block over the
//! component count with a Laplace-approximated optimal proposal, chain
//! orchestration, and draw storage.
//!
//! A sweep is one jump proposal followed by `hmc_per_jump` HMC updates.
//! The birth move appends a component drawn from a Gaussian approximation
//! to its conditional posterior in `(mu, log sigma~, log gamma)`
//! coordinates, where `gamma` is the unnormalized weight; the death move
//! removes the last component and evaluates the same proposal density at
//! the reconstructed innovation, which makes the pair exactly reversible.

pub mod diagnostics;

use crate::error::{Error, Result};
use crate::likelihood::{ChainState, EstimationTarget, PosteriorEval, Psi};
use crate::postprocess::{renormalize_draw, InterceptMap};
use crate::solver::CcpMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// HMC kernel settings. With `step_size = None` the step size is tuned by
/// dual averaging to `target_accept` during burn-in (separately per `m`)
/// and frozen afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub step_size: Option<f64>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 15,
            target_accept: 0.7,
            step_size: None,
        }
    }
}

/// Momentum metric: either a diagonal mass vector or a dense position
/// covariance (momenta are drawn from its inverse).
#[derive(Debug, Clone)]
pub enum Metric {
    Diagonal(DVector<f64>),
    /// `sigma` approximates the posterior covariance; `chol_l` is its lower
    /// Cholesky factor.
    Dense {
        sigma: DMatrix<f64>,
        chol_l: DMatrix<f64>,
    },
}

impl Metric {
    pub fn dim(&self) -> usize {
        match self {
            Metric::Diagonal(m) => m.len(),
            Metric::Dense { sigma, .. } => sigma.nrows(),
        }
    }

    /// Draws `p ~ N(0, Sigma^{-1})`.
    fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| {
            let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        match self {
            Metric::Diagonal(mass) => {
                DVector::from_fn(n, |i, _| mass[i].sqrt() * z[i])
            }
            Metric::Dense { chol_l, .. } => {
                // Momentum covariance Sigma^{-1} = L^{-T} L^{-1}.
                chol_l
                    .transpose()
                    .solve_upper_triangular(&z)
                    .expect("triangular solve")
            }
        }
    }

    /// Kinetic energy `p' Sigma p / 2`.
    fn kinetic(&self, p: &DVector<f64>) -> f64 {
        match self {
            Metric::Diagonal(mass) => {
                0.5 * p.iter().zip(mass.iter()).map(|(pi, mi)| pi * pi / mi).sum::<f64>()
            }
            Metric::Dense { sigma, .. } => 0.5 * p.dot(&(sigma * p)),
        }
    }

    /// Position velocity `Sigma p`.
    fn velocity(&self, p: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(mass) => DVector::from_fn(p.len(), |i, _| p[i] / mass[i]),
            Metric::Dense { sigma, .. } => sigma * p,
        }
    }
}

/// Outcome of one HMC proposal.
#[derive(Debug, Clone)]
pub struct HmcStep {
    pub position: DVector<f64>,
    pub log_density: f64,
    pub gradient: DVector<f64>,
    pub accepted: bool,
    /// Metropolis acceptance probability (0 when the trajectory failed).
    pub accept_prob: f64,
    /// Hamiltonian error of the trajectory, `H(end) - H(start)`.
    pub delta_h: f64,
}

/// One leapfrog-proposal HMC update of a differentiable log density.
///
/// `target` returns `None` on a non-finite evaluation, which auto-rejects
/// the proposal. `mass` is the diagonal of the momentum covariance.
pub fn hmc_step<R: Rng + ?Sized>(
    target: &mut dyn FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    position: &DVector<f64>,
    log_density: f64,
    gradient: &DVector<f64>,
    metric: &Metric,
    step_size: f64,
    leapfrog_steps: usize,
    rng: &mut R,
) -> HmcStep {
    let momentum = metric.sample_momentum(rng);
    let h0 = -log_density + metric.kinetic(&momentum);

    let mut x = position.clone();
    let mut p = momentum;
    let mut g = gradient.clone();
    let mut logp = log_density;
    let mut ok = true;
    p += 0.5 * step_size * &g;
    for step in 0..leapfrog_steps {
        x += step_size * metric.velocity(&p);
        match target(&x) {
            Some((lp, grad)) if lp.is_finite() && grad.iter().all(|v| v.is_finite()) => {
                logp = lp;
                g = grad;
            }
            _ => {
                ok = false;
                break;
            }
        }
        let scale = if step + 1 == leapfrog_steps { 0.5 } else { 1.0 };
        p += scale * step_size * &g;
    }
    if !ok {
        return HmcStep {
            position: position.clone(),
            log_density,
            gradient: gradient.clone(),
            accepted: false,
            accept_prob: 0.0,
            delta_h: f64::INFINITY,
        };
    }
    let h1 = -logp + metric.kinetic(&p);
    let accept_prob = (h0 - h1).exp().min(1.0);
    let u: f64 = rng.gen();
    if u < accept_prob {
        HmcStep {
            position: x,
            log_density: logp,
            gradient: g,
            accepted: true,
            accept_prob,
            delta_h: h1 - h0,
        }
    } else {
        HmcStep {
            position: position.clone(),
            log_density,
            gradient: gradient.clone(),
            accepted: false,
            accept_prob,
            delta_h: h1 - h0,
        }
    }
}

/// Dual-averaging step-size adaptation toward a target acceptance rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Feeds one acceptance probability; returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let frac = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.current()
    }

    /// The averaged step size used after burn-in.
    pub fn finalized(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Doubles/halves the step size until the one-step acceptance probability
/// crosses 1/2.
fn find_reasonable_epsilon<R: Rng + ?Sized>(
    target: &mut dyn FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    position: &DVector<f64>,
    log_density: f64,
    gradient: &DVector<f64>,
    metric: &Metric,
    rng: &mut R,
) -> f64 {
    let mut eps = 0.1;
    let probe = |eps: f64, target: &mut dyn FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
                 rng: &mut R| {
        hmc_step(target, position, log_density, gradient, metric, eps, 1, rng).accept_prob
    };
    let p0 = probe(eps, target, rng);
    let go_up = p0 > 0.5;
    for _ in 0..40 {
        let p = probe(eps, target, rng);
        if go_up {
            if p < 0.5 {
                break;
            }
            eps *= 2.0;
        } else {
            if p > 0.5 {
                break;
            }
            eps *= 0.5;
        }
        if !(1e-8..=1e2).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-8, 1e2)
}

/// Settings for the reversible-jump block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RjConfig {
    /// Ascent iterations allowed in the Laplace mode search.
    pub max_mode_iters: usize,
    pub mode_grad_tol: f64,
    /// Budget of conditional-posterior evaluations per mode search.
    pub max_mode_evals: usize,
    /// Scale of the fallback proposal for `log gamma` when the Hessian is
    /// not usable.
    pub fallback_log_gamma_sd: f64,
}

impl Default for RjConfig {
    fn default() -> Self {
        Self {
            max_mode_iters: 50,
            mode_grad_tol: 1e-6,
            max_mode_evals: 60,
            fallback_log_gamma_sd: 2.0,
        }
    }
}

/// Proposed move direction of the jump block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RjMove {
    Birth,
    Death,
}

/// Appends a new component drawn as `u = (mu, log sigma~, log gamma)`:
/// existing unnormalized weights `e^{alpha_k}` are rescaled by
/// `1 / gamma` so the new component carries the pinned `alpha = 0` slot.
pub(crate) fn birth_map(state: &ChainState, u: &[f64]) -> ChainState {
    let j = state.dim_j();
    debug_assert_eq!(u.len(), j + 2);
    let log_gamma = u[j + 1];
    let mut alphas: Vec<f64> = state.alphas.iter().map(|a| a - log_gamma).collect();
    alphas.push(-log_gamma);
    let mut locations = state.locations.clone();
    locations.push(u[..j].to_vec());
    let mut log_sigma_tildes = state.log_sigma_tildes.clone();
    log_sigma_tildes.push(u[j]);
    ChainState {
        theta_free: state.theta_free.clone(),
        log_sigma: state.log_sigma,
        alphas,
        locations,
        log_sigma_tildes,
    }
}

/// Inverse of [`birth_map`]: removes the last component and returns the
/// reduced state plus the reconstructed innovation.
pub(crate) fn death_map(state: &ChainState) -> (ChainState, Vec<f64>) {
    let m = state.m();
    debug_assert!(m >= 2);
    let j = state.dim_j();
    let log_gamma = -state.alphas[m - 2];
    let alphas: Vec<f64> = state.alphas[..m - 2]
        .iter()
        .map(|a| a + log_gamma)
        .collect();
    let mut u = state.locations[m - 1].clone();
    u.push(state.log_sigma_tildes[m - 1]);
    u.push(log_gamma);
    let reduced = ChainState {
        theta_free: state.theta_free.clone(),
        log_sigma: state.log_sigma,
        alphas,
        locations: state.locations[..m - 1].to_vec(),
        log_sigma_tildes: state.log_sigma_tildes[..m - 1].to_vec(),
    };
    let _ = j;
    (reduced, u)
}

/// Gaussian (or fallback) proposal for a new component's innovation.
#[derive(Debug, Clone)]
pub(crate) struct BirthProposal {
    mean: DVector<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    log_norm: f64,
    /// Set when the Laplace construction failed and the prior-style
    /// fallback density is in use.
    pub fallback: bool,
    fallback_sd: f64,
}

impl BirthProposal {
    fn sample<R: Rng + ?Sized>(&self, target: &EstimationTarget, rng: &mut R) -> Vec<f64> {
        let n = self.mean.len();
        let j = n - 2;
        if let Some(chol) = &self.chol {
            let z = DVector::from_fn(n, |_, _| {
                let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            });
            (&self.mean + chol.l() * z).as_slice().to_vec()
        } else {
            let mut u = Vec::with_capacity(n);
            for _ in 0..j {
                u.push(target.prior.location.sample(rng));
            }
            u.push(target.prior.log_sigma_tilde.sample(rng));
            let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            u.push(self.fallback_sd * z);
            u
        }
    }

    fn log_density(&self, target: &EstimationTarget, u: &[f64]) -> f64 {
        let n = self.mean.len();
        let j = n - 2;
        if let Some(chol) = &self.chol {
            let diff = DVector::from_row_slice(u) - &self.mean;
            let solved = chol.solve(&diff);
            self.log_norm - 0.5 * diff.dot(&solved)
        } else {
            let mut lp = 0.0;
            for v in &u[..j] {
                lp += target.prior.location.log_pdf(*v);
            }
            lp += target.prior.log_sigma_tilde.log_pdf(u[j]);
            let z = u[j + 1] / self.fallback_sd;
            lp += -0.5 * z * z
                - self.fallback_sd.ln()
                - 0.5 * (2.0 * std::f64::consts::PI).ln();
            lp
        }
    }
}

/// Conditional log posterior of the innovation `u` given the rest of the
/// state, evaluated through the birth map, together with its gradient in
/// `u` coordinates.
fn conditional_birth_value_grad(
    target: &EstimationTarget,
    state: &ChainState,
    u: &[f64],
    warm: Option<&DVector<f64>>,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let trial = birth_map(state, u);
    let eval = target.eval(&trial, warm)?;
    let j = state.dim_j();
    let m_new = trial.m();
    let n_free = state.theta_free.len();
    let mut g = DVector::zeros(j + 2);
    let mu_base = n_free + 1 + (m_new - 1);
    for jj in 0..j {
        g[jj] = eval.grad[mu_base + (m_new - 1) * j + jj];
    }
    let st_base = mu_base + m_new * j;
    g[j] = eval.grad[st_base + m_new - 1];
    // d/d log gamma: every alpha shifts by -1.
    let mut dlg = 0.0;
    for a_idx in 0..m_new - 1 {
        dlg -= eval.grad[n_free + 1 + a_idx];
    }
    g[j + 1] = dlg;
    Ok((eval.log_post, g, eval.emax.q))
}

/// Builds the Laplace proposal for a birth move from `state`: Newton mode
/// search in `(mu, log sigma~, log gamma)` with a finite-difference Hessian
/// of the analytic gradient; covariance is the inverse negative Hessian at
/// the mode. Falls back to a prior-shaped proposal when the mode search or
/// the Hessian fails.
pub(crate) fn build_birth_proposal(
    target: &EstimationTarget,
    state: &ChainState,
    cur_eval: &PosteriorEval,
    cfg: &RjConfig,
) -> BirthProposal {
    let j = state.dim_j();
    let n = j + 2;
    let fallback = |fallback_sd: f64| BirthProposal {
        mean: DVector::zeros(n),
        chol: None,
        log_norm: 0.0,
        fallback: true,
        fallback_sd,
    };

    // Start: mu at the choice-value gap of the worst-fit state, log sigma~
    // at the mean of the existing components, log gamma at the average
    // existing unnormalized weight.
    let mut u = DVector::zeros(n);
    if target.likelihood_weight > 0.0 {
        let mut worst = (0usize, -1.0);
        for x in 0..target.model.n_states {
            let occ = target.counts.occupancy(x);
            if occ <= 0.0 {
                continue;
            }
            let mut miss = 0.0;
            for d in 0..=target.model.n_actions {
                miss += (target.counts.counts[(x, d)] / occ - cur_eval.ccp.probs[(x, d)]).abs();
            }
            if miss > worst.1 {
                worst = (x, miss);
            }
        }
        let x_star = worst.0;
        let theta = &cur_eval.theta_full;
        let util = target.model.utility.utilities_with(theta);
        let q = &cur_eval.emax.q;
        let mut v0 = util[(x_star, 0)];
        for y in 0..target.model.n_states {
            v0 += target.model.beta * target.model.transitions[0][(x_star, y)] * q[y];
        }
        for jj in 0..j {
            let mut vj = util[(x_star, jj + 1)];
            for y in 0..target.model.n_states {
                vj += target.model.beta * target.model.transitions[jj + 1][(x_star, y)] * q[y];
            }
            u[jj] = (v0 - vj).clamp(-8.0, 8.0);
        }
    }
    let mean_lst =
        state.log_sigma_tildes.iter().sum::<f64>() / state.log_sigma_tildes.len() as f64;
    u[j] = mean_lst;
    let mean_alpha = if state.alphas.is_empty() {
        0.0
    } else {
        state.alphas.iter().sum::<f64>() / state.m() as f64
    };
    u[j + 1] = mean_alpha;

    let mut warm = Some(cur_eval.emax.q.clone());
    let mut val_grad = match conditional_birth_value_grad(target, state, u.as_slice(), warm.as_ref())
    {
        Ok(v) => v,
        Err(_) => return fallback(cfg.fallback_log_gamma_sd),
    };
    warm = Some(val_grad.2.clone());

    // BFGS ascent to the conditional mode; the Hessian is only computed
    // once at the end, by central differences of the analytic gradient.
    let mut h_inv = DMatrix::identity(n, n);
    let mut evals = 0usize;
    for _ in 0..cfg.max_mode_iters {
        if evals >= cfg.max_mode_evals {
            break;
        }
        let (val, grad, _) = &val_grad;
        if grad.amax() < cfg.mode_grad_tol * (1.0 + val.abs()) {
            break;
        }
        let mut dir = &h_inv * grad;
        if dir.dot(grad) <= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = grad.clone();
        }
        let norm = dir.amax();
        if norm > 5.0 {
            dir *= 5.0 / norm;
        }
        let mut step = 1.0;
        let mut advanced = false;
        for _ in 0..25 {
            if evals >= cfg.max_mode_evals {
                break;
            }
            let u_new = &u + &dir * step;
            evals += 1;
            if let Ok(vg) = conditional_birth_value_grad(target, state, u_new.as_slice(), warm.as_ref())
            {
                if vg.0.is_finite() && vg.0 > val_grad.0 {
                    let s_vec = &u_new - &u;
                    let y_vec = &val_grad.1 - &vg.1; // gradient of -g increases
                    let sy = y_vec.dot(&s_vec);
                    if sy > 1e-12 {
                        let rho = 1.0 / sy;
                        let i_mat = DMatrix::identity(n, n);
                        let left = &i_mat - &(&s_vec * y_vec.transpose()) * rho;
                        let right = &i_mat - &(&y_vec * s_vec.transpose()) * rho;
                        h_inv = &left * &h_inv * &right + (&s_vec * s_vec.transpose()) * rho;
                    }
                    u = u_new;
                    warm = Some(vg.2.clone());
                    val_grad = vg;
                    advanced = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !advanced {
            break;
        }
    }

    let fd_hessian = |u: &DVector<f64>, warm: Option<&DVector<f64>>| -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            let step = 1e-5 * (1.0 + u[i].abs());
            let mut up = u.clone();
            up[i] += step;
            let mut dn = u.clone();
            dn[i] -= step;
            let gp = conditional_birth_value_grad(target, state, up.as_slice(), warm).ok()?;
            let gm = conditional_birth_value_grad(target, state, dn.as_slice(), warm).ok()?;
            for r in 0..n {
                h[(r, i)] = (gp.1[r] - gm.1[r]) / (2.0 * step);
            }
        }
        Some((h.clone() + h.transpose()) * 0.5)
    };
    let Some(h) = fd_hessian(&u, warm.as_ref()) else {
        return fallback(cfg.fallback_log_gamma_sd);
    };
    match (-h).cholesky() {
        Some(neg_h_chol) => {
            // Covariance = (-H)^{-1}; density uses the precision directly:
            // log q(u) = log_norm - 1/2 (u - mode)' (-H) (u - mode).
            let neg_h = neg_h_chol.l() * neg_h_chol.l().transpose();
            let det_neg_h: f64 = neg_h_chol.l_dirty().diagonal().iter().map(|v| v * v).product();
            let cov = neg_h_chol.inverse();
            match nalgebra::Cholesky::new(cov) {
                Some(cov_chol) => {
                    let log_norm = -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
                        + 0.5 * det_neg_h.ln();
                    let _ = neg_h;
                    BirthProposal {
                        mean: u,
                        chol: Some(cov_chol),
                        log_norm,
                        fallback: false,
                        fallback_sd: cfg.fallback_log_gamma_sd,
                    }
                }
                None => fallback(cfg.fallback_log_gamma_sd),
            }
        }
        None => fallback(cfg.fallback_log_gamma_sd),
    }
}

/// Outcome of one reversible-jump proposal.
#[derive(Debug)]
pub struct RjOutcome {
    pub state: ChainState,
    pub eval: PosteriorEval,
    pub mv: RjMove,
    pub accepted: bool,
    pub used_fallback: bool,
}

/// One reversible-jump update: birth or death with probability 1/2 each.
/// A death at `m = 1` and a birth at `m = m_max` are proposed and
/// auto-rejected, keeping the simple symmetric move law.
pub fn rj_step<R: Rng + ?Sized>(
    target: &EstimationTarget,
    state: &ChainState,
    cur_eval: &PosteriorEval,
    cfg: &RjConfig,
    rng: &mut R,
) -> Result<RjOutcome> {
    let m = state.m();
    let birth = rng.gen::<f64>() < 0.5;
    if birth {
        if m >= target.prior.m_max {
            return Ok(RjOutcome {
                state: state.clone(),
                eval: cur_eval.clone(),
                mv: RjMove::Birth,
                accepted: false,
                used_fallback: false,
            });
        }
        let proposal = build_birth_proposal(target, state, cur_eval, cfg);
        let u = proposal.sample(target, rng);
        let log_q = proposal.log_density(target, &u);
        let trial = birth_map(state, &u);
        let accept_u: f64 = rng.gen();
        match target.eval(&trial, Some(&cur_eval.emax.q)) {
            Ok(trial_eval) if trial_eval.log_post.is_finite() => {
                let log_ratio = trial_eval.log_post - cur_eval.log_post - log_q;
                if accept_u.ln() < log_ratio {
                    Ok(RjOutcome {
                        state: trial,
                        eval: trial_eval,
                        mv: RjMove::Birth,
                        accepted: true,
                        used_fallback: proposal.fallback,
                    })
                } else {
                    Ok(RjOutcome {
                        state: state.clone(),
                        eval: cur_eval.clone(),
                        mv: RjMove::Birth,
                        accepted: false,
                        used_fallback: proposal.fallback,
                    })
                }
            }
            _ => Ok(RjOutcome {
                state: state.clone(),
                eval: cur_eval.clone(),
                mv: RjMove::Birth,
                accepted: false,
                used_fallback: proposal.fallback,
            }),
        }
    } else {
        if m <= 1 {
            return Ok(RjOutcome {
                state: state.clone(),
                eval: cur_eval.clone(),
                mv: RjMove::Death,
                accepted: false,
                used_fallback: false,
            });
        }
        let (reduced, u_rec) = death_map(state);
        let accept_u: f64 = rng.gen();
        match target.eval(&reduced, Some(&cur_eval.emax.q)) {
            Ok(reduced_eval) if reduced_eval.log_post.is_finite() => {
                let proposal = build_birth_proposal(target, &reduced, &reduced_eval, cfg);
                let log_q = proposal.log_density(target, &u_rec);
                let log_ratio = reduced_eval.log_post + log_q - cur_eval.log_post;
                if accept_u.ln() < log_ratio {
                    Ok(RjOutcome {
                        state: reduced,
                        eval: reduced_eval,
                        mv: RjMove::Death,
                        accepted: true,
                        used_fallback: proposal.fallback,
                    })
                } else {
                    Ok(RjOutcome {
                        state: state.clone(),
                        eval: cur_eval.clone(),
                        mv: RjMove::Death,
                        accepted: false,
                        used_fallback: proposal.fallback,
                    })
                }
            }
            _ => Ok(RjOutcome {
                state: state.clone(),
                eval: cur_eval.clone(),
                mv: RjMove::Death,
                accepted: false,
                used_fallback: false,
            }),
        }
    }
}

/// Per-kernel acceptance bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub hmc_proposed: usize,
    pub hmc_accepted: usize,
    pub birth_proposed: usize,
    pub birth_accepted: usize,
    pub death_proposed: usize,
    pub death_accepted: usize,
    pub laplace_fallbacks: usize,
}

/// Chain orchestration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// HMC updates per jump proposal.
    pub hmc_per_jump: usize,
    pub hmc: HmcConfig,
    pub rj: RjConfig,
    /// Initial number of mixture components.
    pub m_init: usize,
    /// Disables the jump block (fixed-`m` runs).
    pub rj_enabled: bool,
    /// Stored draws between checkpoint callbacks.
    pub checkpoint_every: usize,
    /// First metric-adaptation window length (positions per component
    /// count); subsequent windows double. Adaptation runs during the first
    /// three quarters of burn-in.
    pub mass_adapt_after: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 2_000,
            thin: 10,
            hmc_per_jump: 10,
            hmc: HmcConfig::default(),
            rj: RjConfig::default(),
            m_init: 1,
            rj_enabled: true,
            checkpoint_every: 1000,
            mass_adapt_after: 150,
        }
    }
}

/// One thinned posterior draw with its derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iter: usize,
    pub m: usize,
    pub log_post: f64,
    pub theta_renorm: Vec<f64>,
    /// Scale-normalization factor of the draw's mixture.
    pub s: f64,
    pub mix_mean: Vec<f64>,
    /// `p(d|x)` stacked for `d = 1..J` over all states.
    pub ccp_vec: Vec<f64>,
    pub functionals: Vec<f64>,
    pub psi: Psi,
}

/// Metadata stored alongside the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub hmc_per_jump: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_free: usize,
    pub d_theta: usize,
    pub theta_ref: Vec<f64>,
    pub functional_names: Vec<String>,
    pub acceptance: AcceptanceStats,
    /// Final (frozen) step size per component count encountered.
    pub step_sizes: BTreeMap<usize, f64>,
    /// Hash of the run configuration, filled by callers.
    pub config_hash: Option<String>,
}

/// Persisted posterior draws plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawStore {
    pub meta: StoreMeta,
    pub draws: Vec<Draw>,
}

/// Metric adaptation: Welford accumulation of the position covariance over
/// expanding windows during burn-in, with shrinkage toward the prior-based
/// diagonal. Each window boundary replaces the (dense) metric, restarts
/// the step-size tuner, and doubles the next window, so later, better-mixed
/// windows dominate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassState {
    /// Current position-covariance estimate (row-major).
    sigma: Vec<Vec<f64>>,
    initial_var: Vec<f64>,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<Vec<f64>>,
    window: usize,
}

impl MassState {
    fn new(initial_mass: Vec<f64>, first_window: usize) -> Self {
        let dim = initial_mass.len();
        let initial_var: Vec<f64> = initial_mass.iter().map(|m| 1.0 / m).collect();
        let sigma = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| if i == j { initial_var[i] } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            sigma,
            initial_var,
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![vec![0.0; dim]; dim],
            window: first_window.max(50),
        }
    }

    fn metric(&self) -> Metric {
        let n = self.mean.len();
        let sigma = DMatrix::from_fn(n, n, |i, j| self.sigma[i][j]);
        match nalgebra::Cholesky::new(sigma.clone()) {
            Some(ch) => Metric::Dense {
                sigma,
                chol_l: ch.l(),
            },
            None => Metric::Diagonal(DVector::from_fn(n, |i, _| 1.0 / self.initial_var[i])),
        }
    }

    fn observe(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let n = self.count as f64;
        let dim = self.mean.len();
        let mut delta = vec![0.0; dim];
        for i in 0..dim {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for i in 0..dim {
            let post_i = x[i] - self.mean[i];
            for j in 0..=i {
                self.m2[i][j] += delta[j] * post_i;
            }
        }
    }

    /// Replaces the metric at window boundaries with the shrunk sample
    /// covariance; returns true when the metric changed.
    fn try_adapt(&mut self) -> bool {
        if self.count < self.window {
            return false;
        }
        let n = self.count as f64;
        let w = n / (n + 5.0);
        let dim = self.mean.len();
        for i in 0..dim {
            for j in 0..=i {
                let cov = 0.5 * (self.m2[i][j] + self.m2[j][i]) / (n - 1.0);
                let mut v = w * cov;
                if i == j {
                    v += (1.0 - w) * self.initial_var[i] + 1e-10 * self.initial_var[i];
                }
                if v.is_finite() {
                    self.sigma[i][j] = v;
                    self.sigma[j][i] = v;
                }
            }
        }
        // Start a doubled, fresh window.
        self.count = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        self.window *= 2;
        true
    }
}

/// Serializable mid-run snapshot for resumable chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub next_iter: usize,
    pub state: ChainState,
    /// In-flight posterior evaluation, so a resumed chain reproduces an
    /// uninterrupted one bit for bit.
    pub eval: PosteriorEval,
    pub rng_word_pos: u128,
    pub tuners: BTreeMap<usize, DualAveraging>,
    pub frozen_eps: BTreeMap<usize, f64>,
    pub masses: BTreeMap<usize, MassState>,
    pub acceptance: AcceptanceStats,
}

/// Per-draw context handed to functional evaluators.
pub struct DrawContext<'a> {
    pub psi: &'a Psi,
    pub mixture: &'a crate::mixture::GumbelMixture,
    pub theta_full: &'a [f64],
    pub ccp: &'a CcpMatrix,
    pub q: &'a DVector<f64>,
}

/// A named derived quantity recomputed at every stored draw.
pub type FunctionalFn<'a> = Box<dyn Fn(&DrawContext) -> Result<f64> + 'a>;

/// Everything a chain run needs besides kernel settings.
pub struct RunSpec<'a> {
    pub target: EstimationTarget<'a>,
    /// Intercept/shock-coordinate pairs for renormalized reporting.
    pub renorm: Vec<InterceptMap>,
    pub functionals: Vec<(String, FunctionalFn<'a>)>,
}

/// Runs one chain: sweeps of one jump proposal followed by
/// `hmc_per_jump` HMC updates, thinned storage of derived quantities, and
/// optional checkpoint callbacks for resumable long runs.
pub fn run_chain(
    spec: &RunSpec,
    cfg: &ChainConfig,
    seed: u64,
    resume: Option<(ChainCheckpoint, Vec<Draw>)>,
    mut on_checkpoint: Option<&mut dyn FnMut(&DrawStore, &ChainCheckpoint) -> Result<()>>,
) -> Result<DrawStore> {
    let target = &spec.target;
    let model = target.model;
    let j_dim = model.n_actions;
    let n_free = target.free_theta_idx.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut stats = AcceptanceStats::default();
    let mut tuners: BTreeMap<usize, DualAveraging> = BTreeMap::new();
    let mut frozen_eps: BTreeMap<usize, f64> = BTreeMap::new();
    let mut masses: BTreeMap<usize, MassState> = BTreeMap::new();
    let mut draws: Vec<Draw> = Vec::new();
    let mut start_iter = 0usize;

    let (mut state, mut eval) = match &resume {
        Some((ck, existing)) => {
            rng.set_word_pos(ck.rng_word_pos);
            tuners = ck.tuners.clone();
            frozen_eps = ck.frozen_eps.clone();
            masses = ck.masses.clone();
            stats = ck.acceptance;
            draws = existing.clone();
            start_iter = ck.next_iter;
            (ck.state.clone(), ck.eval.clone())
        }
        None => {
            let state = ChainState {
                theta_free: target
                    .free_theta_idx
                    .iter()
                    .map(|&i| model.utility.theta[i])
                    .collect(),
                log_sigma: 0.0,
                alphas: vec![0.0; cfg.m_init.saturating_sub(1)],
                locations: vec![vec![0.0; j_dim]; cfg.m_init.max(1)],
                log_sigma_tildes: vec![0.0; cfg.m_init.max(1)],
            };
            let eval = target.eval(&state, None)?;
            (state, eval)
        }
    };
    if !eval.log_post.is_finite() {
        return Err(Error::InvalidParameter(
            "initial chain state has non-finite posterior".into(),
        ));
    }

    let mass_for = |m: usize| -> DVector<f64> {
        let dim = n_free + 1 + m * (j_dim + 2) - 1;
        let mut mass = DVector::from_element(dim, 1.0);
        for (i, prior) in target.prior.theta_free.iter().enumerate() {
            mass[i] = prior.variance().recip();
        }
        mass[n_free] = target.prior.log_sigma.variance().recip();
        let mu_base = n_free + 1 + (m - 1);
        for k in 0..m {
            for j in 0..j_dim {
                mass[mu_base + k * j_dim + j] = target.prior.location.variance().recip();
            }
            mass[mu_base + m * j_dim + k] = target.prior.log_sigma_tilde.variance().recip();
        }
        mass
    };

    let mut since_checkpoint = 0usize;
    for iter in start_iter..cfg.iterations {
        let cycle_len = 1 + cfg.hmc_per_jump.max(1);
        let is_jump = cfg.rj_enabled && iter % cycle_len == 0;
        if is_jump {
            let outcome = rj_step(target, &state, &eval, &cfg.rj, &mut rng)?;
            match outcome.mv {
                RjMove::Birth => {
                    stats.birth_proposed += 1;
                    if outcome.accepted {
                        stats.birth_accepted += 1;
                    }
                }
                RjMove::Death => {
                    stats.death_proposed += 1;
                    if outcome.accepted {
                        stats.death_accepted += 1;
                    }
                }
            }
            if outcome.used_fallback {
                stats.laplace_fallbacks += 1;
            }
            state = outcome.state;
            eval = outcome.eval;
        } else {
            let m = state.m();
            let mass_state = masses.entry(m).or_insert_with(|| {
                MassState::new(mass_for(m).as_slice().to_vec(), cfg.mass_adapt_after)
            });
            let metric = mass_state.metric();
            let flat = state.to_flat();
            let mut warm_q = eval.emax.q.clone();
            let mut last_full: Option<(DVector<f64>, PosteriorEval)> = None;
            let mut target_fn = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
                let st = ChainState::from_flat(x, n_free, m, j_dim).ok()?;
                match target.eval(&st, Some(&warm_q)) {
                    Ok(e) if e.log_post.is_finite() => {
                        warm_q = e.emax.q.clone();
                        let out = (e.log_post, e.grad.clone());
                        last_full = Some((x.clone(), e));
                        Some(out)
                    }
                    _ => None,
                }
            };
            let eps = if let Some(fixed) = cfg.hmc.step_size {
                fixed
            } else if let Some(&e) = frozen_eps.get(&m) {
                e
            } else {
                let tuner = tuners.entry(m).or_insert_with(|| {
                    let eps0 = find_reasonable_epsilon(
                        &mut target_fn,
                        &flat,
                        eval.log_post,
                        &eval.grad,
                        &metric,
                        &mut rng,
                    );
                    DualAveraging::new(eps0, cfg.hmc.target_accept)
                });
                if iter >= cfg.burn_in {
                    let e = tuner.finalized();
                    frozen_eps.insert(m, e);
                    e
                } else {
                    tuner.current()
                }
            };
            let step = hmc_step(
                &mut target_fn,
                &flat,
                eval.log_post,
                &eval.grad,
                &metric,
                eps,
                cfg.hmc.leapfrog_steps.max(1),
                &mut rng,
            );
            stats.hmc_proposed += 1;
            if step.accepted {
                stats.hmc_accepted += 1;
                state = ChainState::from_flat(&step.position, n_free, m, j_dim)?;
                // The last trajectory evaluation sits at the accepted point.
                eval = match last_full {
                    Some((pos, e)) if pos == step.position => e,
                    _ => target.eval(&state, Some(&eval.emax.q))?,
                };
            }
            if cfg.hmc.step_size.is_none() && iter < cfg.burn_in {
                if let Some(tuner) = tuners.get_mut(&m) {
                    tuner.update(step.accept_prob);
                }
            }
            // Metric adaptation over expanding windows during the first part
            // of burn-in; a fresh step-size search follows a metric change.
            if iter < cfg.burn_in * 3 / 4 {
                let mass_state = masses.get_mut(&m).expect("mass state exists");
                mass_state.observe(&state.to_flat());
                if mass_state.try_adapt() {
                    tuners.remove(&m);
                }
            }
        }

        if iter >= cfg.burn_in && (iter - cfg.burn_in) % cfg.thin.max(1) == 0 {
            // The draw's Emax came from a warm start; storing requires the
            // re-verified residual to sit within tolerance.
            if !eval.emax.converged {
                return Err(Error::NonConvergence {
                    context: "stored draw with non-converged Emax",
                    residual: eval.emax.residual,
                    iterations: iter,
                });
            }
            let psi = state.psi();
            let (s, theta_renorm) =
                renormalize_draw(&eval.mixture, &eval.theta_full, &spec.renorm)?;
            let all_states: Vec<usize> = (0..model.n_states).collect();
            let ccp_vec = eval.ccp.stacked_vector(&all_states);
            let ctx = DrawContext {
                psi: &psi,
                mixture: &eval.mixture,
                theta_full: &eval.theta_full,
                ccp: &eval.ccp,
                q: &eval.emax.q,
            };
            let functionals = spec
                .functionals
                .iter()
                .map(|(_, f)| f(&ctx))
                .collect::<Result<Vec<f64>>>()?;
            draws.push(Draw {
                iter,
                m: state.m(),
                log_post: eval.log_post,
                theta_renorm,
                s,
                mix_mean: eval.mixture.mean(),
                ccp_vec,
                functionals,
                psi,
            });
            since_checkpoint += 1;
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                if since_checkpoint >= cfg.checkpoint_every.max(1) {
                    since_checkpoint = 0;
                    let ck = ChainCheckpoint {
                        next_iter: iter + 1,
                        state: state.clone(),
                        eval: eval.clone(),
                        rng_word_pos: rng.get_word_pos(),
                        tuners: tuners.clone(),
                        frozen_eps: frozen_eps.clone(),
                        masses: masses.clone(),
                        acceptance: stats,
                    };
                    let store = DrawStore {
                        meta: make_meta(spec, cfg, seed, &stats, &frozen_eps),
                        draws: draws.clone(),
                    };
                    cb(&store, &ck)?;
                }
            }
        }
    }

    Ok(DrawStore {
        meta: make_meta(spec, cfg, seed, &stats, &frozen_eps),
        draws,
    })
}

fn make_meta(
    spec: &RunSpec,
    cfg: &ChainConfig,
    seed: u64,
    stats: &AcceptanceStats,
    frozen_eps: &BTreeMap<usize, f64>,
) -> StoreMeta {
    StoreMeta {
        seed,
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        hmc_per_jump: cfg.hmc_per_jump,
        n_states: spec.target.model.n_states,
        n_actions: spec.target.model.n_actions,
        n_free: spec.target.free_theta_idx.len(),
        d_theta: spec.target.model.utility.theta.len(),
        theta_ref: spec.target.model.utility.theta.clone(),
        functional_names: spec.functionals.iter().map(|(n, _)| n.clone()).collect(),
        acceptance: *stats,
        step_sizes: frozen_eps.clone(),
        config_hash: None,
    }
}

impl DrawStore {
    /// Writes `{base}.csv` (draw table), `{base}.meta.json` (metadata), and
    /// `{base}.psi.jsonl` (raw per-draw parameters).
    pub fn write<P: AsRef<Path>>(&self, dir: P, base: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{base}.csv")))?);
        let p = self.draws.first().map_or(self.meta.d_theta, |d| d.theta_renorm.len());
        let j = self.meta.n_actions;
        let k = self.meta.n_states;
        let mut header = vec!["iter".to_string(), "m".to_string(), "log_post".to_string()];
        header.extend((1..=p).map(|i| format!("theta_renorm_{i}")));
        header.push("s".into());
        header.extend((1..=j).map(|i| format!("mix_mean_{i}")));
        header.extend((1..=j * k).map(|i| format!("ccp_{i}")));
        header.extend(self.meta.functional_names.iter().map(|n| format!("functional_{n}")));
        writeln!(csv, "{}", header.join(","))?;
        for d in &self.draws {
            let mut row = vec![d.iter.to_string(), d.m.to_string(), fmt_f(d.log_post)];
            row.extend(d.theta_renorm.iter().map(|v| fmt_f(*v)));
            row.push(fmt_f(d.s));
            row.extend(d.mix_mean.iter().map(|v| fmt_f(*v)));
            row.extend(d.ccp_vec.iter().map(|v| fmt_f(*v)));
            row.extend(d.functionals.iter().map(|v| fmt_f(*v)));
            writeln!(csv, "{}", row.join(","))?;
        }
        csv.flush()?;

        let meta_file = std::fs::File::create(dir.join(format!("{base}.meta.json")))?;
        serde_json::to_writer_pretty(meta_file, &self.meta)?;

        let mut psi = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("{base}.psi.jsonl")),
        )?);
        for d in &self.draws {
            let line = serde_json::to_string(&(d.iter, d.m, &d.psi))?;
            writeln!(psi, "{line}")?;
        }
        psi.flush()?;
        Ok(())
    }

    /// Reads a store written by [`DrawStore::write`].
    pub fn read<P: AsRef<Path>>(dir: P, base: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: StoreMeta =
            serde_json::from_reader(std::fs::File::open(dir.join(format!("{base}.meta.json")))?)?;
        let mut rdr = csv::Reader::from_path(dir.join(format!("{base}.csv")))?;
        let psi_lines = std::fs::read_to_string(dir.join(format!("{base}.psi.jsonl")))?;
        let mut psis = psi_lines
            .lines()
            .map(|l| serde_json::from_str::<(usize, usize, Psi)>(l).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?
            .into_iter();

        let j = meta.n_actions;
        let k = meta.n_states;
        let n_fun = meta.functional_names.len();
        let mut draws = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let fields: Vec<f64> = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad_field(v)))
                .collect::<Result<Vec<f64>>>()?;
            let p = fields.len() - (3 + 1 + j + j * k + n_fun);
            let mut at = 0usize;
            let mut take = |n: usize| {
                let s = fields[at..at + n].to_vec();
                at += n;
                s
            };
            let head = take(3);
            let theta_renorm = take(p);
            let s = take(1)[0];
            let mix_mean = take(j);
            let ccp_vec = take(j * k);
            let functionals = take(n_fun);
            let (psi_iter, psi_m, psi) = psis.next().ok_or_else(|| {
                Error::InvalidParameter("psi sidecar shorter than draw table".into())
            })?;
            if psi_iter != head[0] as usize {
                return Err(Error::InvalidParameter(
                    "psi sidecar misaligned with draw table".into(),
                ));
            }
            draws.push(Draw {
                iter: head[0] as usize,
                m: head[1] as usize,
                log_post: head[2],
                theta_renorm,
                s,
                mix_mean,
                ccp_vec,
                functionals,
                psi,
            });
            debug_assert_eq!(psi_m, draws.last().unwrap().m);
        }
        Ok(Self { meta, draws })
    }
}

fn fmt_f(v: f64) -> String {
    // Round-trippable decimal form.
    format!("{v:.17e}")
}

fn bad_field(v: &str) -> Error {
    Error::InvalidParameter(format!("malformed numeric field `{v}`"))
}
