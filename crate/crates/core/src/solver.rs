//! Closed-form Emax and CCP evaluation under a Gumbel mixture, the
//! dynamic-logit special case, and the Newton-Kantorovich fixed-point
//! solver.
//!
//! With choice-specific values `v_j(x) = u(x,j) + beta G_x^j Q` and shock
//! mixture components `(w_k, mu_k, sigma_k)`, one Bellman application is
//!
//! ```text
//! T(Q)(x) = sum_k w_k sigma_k [ A_kx + E1(e^{-a_kx}) ],
//! A_kx = log sum_{j=1..J} exp((v_j + mu_jk)/sigma_k),
//! a_kx = v_0/sigma_k + gamma - A_kx,
//! ```
//!
//! and the CCPs are `p(0|x) = sum_k w_k exp(-e^{-a_kx})`,
//! `p(d|x) = sum_k w_k softmax_d^k (1 - exp(-e^{-a_kx}))` for `d >= 1`.

use crate::error::{Error, Result};
use crate::mixture::GumbelMixture;
use crate::model::DDCModel;
use crate::numerics::{e1_exp_neg, log_sum_exp, EULER_MASCHERONI};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const CCP_ROW_TOL: f64 = 1e-10;

/// Conditional choice probabilities, `K x (J+1)`, rows summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcpMatrix {
    pub probs: DMatrix<f64>,
}

impl CcpMatrix {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for x in 0..probs.nrows() {
            let mut sum = 0.0;
            for d in 0..probs.ncols() {
                let p = probs[(x, d)];
                if !(0.0..=1.0 + 1e-12).contains(&p) {
                    return Err(Error::InvalidParameter(format!(
                        "CCP entry out of [0,1] at (x={x}, d={d}): {p}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > CCP_ROW_TOL {
                return Err(Error::InvalidParameter(format!(
                    "CCP row {x} sums to {sum}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_choices(&self) -> usize {
        self.probs.ncols()
    }

    /// Stacks `p(d|x)` for `d = 1..J` over the given states (the redundant
    /// `d = 0` row is dropped).
    pub fn stacked_vector(&self, states: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(states.len() * (self.n_choices() - 1));
        for d in 1..self.n_choices() {
            for &x in states {
                out.push(self.probs[(x, d)]);
            }
        }
        out
    }
}

/// Fixed point of the Bellman operator plus convergence metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaxSolution {
    pub q: DVector<f64>,
    /// Sup-norm of `Q - T(Q)` at exit.
    pub residual: f64,
    pub sa_iterations: usize,
    pub newton_iterations: usize,
    pub converged: bool,
}

/// Solver schedule: successive approximation until the residual falls under
/// `sa_threshold` (or `max_sa` runs out), then Newton-Kantorovich.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub tol: f64,
    pub sa_threshold: f64,
    pub max_sa: usize,
    pub max_newton: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            sa_threshold: 1e-2,
            max_sa: 200,
            max_newton: 50,
        }
    }
}

/// Distribution of the additive shocks.
#[derive(Debug, Clone, Copy)]
pub enum ShockSpec<'a> {
    /// `J`-dimensional Gumbel mixture with the `epsilon_0 = 0` normalization.
    Mixture(&'a GumbelMixture),
    /// `J+1` i.i.d. standard Gumbel shocks: the dynamic logit.
    Logit,
}

/// Per-state, per-component quantities shared by the Bellman application,
/// the CCPs, and the likelihood derivatives.
#[derive(Debug, Clone)]
pub(crate) struct MixtureCache {
    /// `A_kx`, `K x m`.
    pub big_a: DMatrix<f64>,
    /// `a_kx`, `K x m`.
    pub a: DMatrix<f64>,
    /// `e^{-a_kx}` (may be 0 or inf), `K x m`.
    pub cap_e: DMatrix<f64>,
    /// `exp(-e^{-a_kx})`, `K x m`.
    pub c: DMatrix<f64>,
    /// `E1(e^{-a_kx})`, `K x m`.
    pub e1: DMatrix<f64>,
    /// Within-component softmax over non-baseline actions: `s[k][(x, j-1)]`.
    pub softmax: Vec<DMatrix<f64>>,
    /// Scaled values `t_jk = (v_j + mu_jk)/sigma_k`, one `K x J` per component.
    pub t_values: Vec<DMatrix<f64>>,
    /// `sum_j s_jk t_jk`, `K x m`.
    pub tbar: DMatrix<f64>,
    /// Component Emax `sigma_k (A_kx + E1)`, `K x m`.
    pub comp_q: DMatrix<f64>,
    /// `T(Q)`, length `K`.
    pub t_q: DVector<f64>,
}

/// Choice-specific values `v_j(x) = u(x,j) + beta G_x^j Q`.
pub(crate) fn choice_values(model: &DDCModel, u: &DMatrix<f64>, q: &DVector<f64>) -> DMatrix<f64> {
    let k = model.n_states;
    let n_choices = model.n_actions + 1;
    let mut v = u.clone();
    for d in 0..n_choices {
        let cont = &model.transitions[d] * q;
        for x in 0..k {
            v[(x, d)] += model.beta * cont[x];
        }
    }
    v
}

pub(crate) fn build_mixture_cache(
    model: &DDCModel,
    u: &DMatrix<f64>,
    mix: &GumbelMixture,
    q: &DVector<f64>,
) -> Result<MixtureCache> {
    if mix.dim() != model.n_actions {
        return Err(Error::DimensionMismatch {
            context: "mixture dimension vs non-baseline actions",
            expected: model.n_actions,
            got: mix.dim(),
        });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite utilities".into()));
    }
    let k = model.n_states;
    let j = model.n_actions;
    let m = mix.n_components();
    let values = choice_values(model, u, q);

    let mut big_a = DMatrix::zeros(k, m);
    let mut a = DMatrix::zeros(k, m);
    let mut cap_e = DMatrix::zeros(k, m);
    let mut c = DMatrix::zeros(k, m);
    let mut e1 = DMatrix::zeros(k, m);
    let mut tbar = DMatrix::zeros(k, m);
    let mut comp_q = DMatrix::zeros(k, m);
    let mut softmax: Vec<DMatrix<f64>> = (0..m).map(|_| DMatrix::zeros(k, j)).collect();
    let mut t_values: Vec<DMatrix<f64>> = (0..m).map(|_| DMatrix::zeros(k, j)).collect();
    let mut t_q = DVector::zeros(k);
    let mut t_buf = vec![0.0; j];

    for ki in 0..m {
        let sigma = mix.eff_scale(ki);
        let mu = &mix.locations()[ki];
        let w = mix.weights()[ki];
        for x in 0..k {
            for jj in 0..j {
                t_buf[jj] = (values[(x, jj + 1)] + mu[jj]) / sigma;
                if !t_buf[jj].is_finite() {
                    return Err(Error::Domain(format!(
                        "scaled utility overflow at state {x}, action {}, component {ki}",
                        jj + 1
                    )));
                }
            }
            let a_big = log_sum_exp(&t_buf);
            let mut tb = 0.0;
            for jj in 0..j {
                let s = (t_buf[jj] - a_big).exp();
                softmax[ki][(x, jj)] = s;
                t_values[ki][(x, jj)] = t_buf[jj];
                tb += s * t_buf[jj];
            }
            let a_small = values[(x, 0)] / sigma + EULER_MASCHERONI - a_big;
            let ee = (-a_small).exp();
            let cc = if ee.is_infinite() { 0.0 } else { (-ee).exp() };
            let e1v = e1_exp_neg(a_small);
            big_a[(x, ki)] = a_big;
            a[(x, ki)] = a_small;
            cap_e[(x, ki)] = ee;
            c[(x, ki)] = cc;
            e1[(x, ki)] = e1v;
            tbar[(x, ki)] = tb;
            let q_comp = sigma * (a_big + e1v);
            comp_q[(x, ki)] = q_comp;
            t_q[x] += w * q_comp;
        }
    }
    Ok(MixtureCache {
        big_a,
        a,
        cap_e,
        c,
        e1,
        softmax,
        t_values,
        tbar,
        comp_q,
        t_q,
    })
}

pub(crate) fn ccps_from_cache(model: &DDCModel, mix: &GumbelMixture, cache: &MixtureCache) -> Result<CcpMatrix> {
    let k = model.n_states;
    let j = model.n_actions;
    let mut probs = DMatrix::zeros(k, j + 1);
    for ki in 0..mix.n_components() {
        let w = mix.weights()[ki];
        for x in 0..k {
            let c = cache.c[(x, ki)];
            probs[(x, 0)] += w * c;
            for jj in 0..j {
                probs[(x, jj + 1)] += w * cache.softmax[ki][(x, jj)] * (1.0 - c);
            }
        }
    }
    CcpMatrix::new(probs)
}

fn logit_apply(model: &DDCModel, u: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
    let values = choice_values(model, u, q);
    let n_choices = model.n_actions + 1;
    let mut out = DVector::zeros(model.n_states);
    let mut buf = vec![0.0; n_choices];
    for x in 0..model.n_states {
        for d in 0..n_choices {
            buf[d] = values[(x, d)];
        }
        out[x] = log_sum_exp(&buf);
    }
    out
}

fn logit_ccps(model: &DDCModel, u: &DMatrix<f64>, q: &DVector<f64>) -> Result<CcpMatrix> {
    let values = choice_values(model, u, q);
    let n_choices = model.n_actions + 1;
    let mut probs = DMatrix::zeros(model.n_states, n_choices);
    let mut buf = vec![0.0; n_choices];
    for x in 0..model.n_states {
        for d in 0..n_choices {
            buf[d] = values[(x, d)];
        }
        let lse = log_sum_exp(&buf);
        for d in 0..n_choices {
            probs[(x, d)] = (buf[d] - lse).exp();
        }
    }
    CcpMatrix::new(probs)
}

/// One application of the Bellman operator at explicit utilities.
pub fn emax_apply_with(
    model: &DDCModel,
    u: &DMatrix<f64>,
    shock: ShockSpec,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    match shock {
        ShockSpec::Mixture(mix) => Ok(build_mixture_cache(model, u, mix, q)?.t_q),
        ShockSpec::Logit => {
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite utilities".into()));
            }
            Ok(logit_apply(model, u, q))
        }
    }
}

/// One application of the Bellman operator at the model's stored utilities.
pub fn emax_apply(model: &DDCModel, mix: &GumbelMixture, q: &DVector<f64>) -> Result<DVector<f64>> {
    emax_apply_with(model, &model.utilities(), ShockSpec::Mixture(mix), q)
}

/// CCP matrix at explicit utilities and candidate `Q`.
pub fn ccps_with(
    model: &DDCModel,
    u: &DMatrix<f64>,
    shock: ShockSpec,
    q: &DVector<f64>,
) -> Result<CcpMatrix> {
    match shock {
        ShockSpec::Mixture(mix) => {
            let cache = build_mixture_cache(model, u, mix, q)?;
            ccps_from_cache(model, mix, &cache)
        }
        ShockSpec::Logit => logit_ccps(model, u, q),
    }
}

/// CCP matrix at the model's stored utilities.
pub fn ccps(model: &DDCModel, mix: &GumbelMixture, q: &DVector<f64>) -> Result<CcpMatrix> {
    ccps_with(model, &model.utilities(), ShockSpec::Mixture(mix), q)
}

/// Derivative of the Bellman operator:
/// `T'(Q)_{xy} = beta sum_d G^d_{xy} p(d|x)`; every row sums to `beta`.
pub fn bellman_jacobian(model: &DDCModel, ccp: &CcpMatrix) -> DMatrix<f64> {
    let k = model.n_states;
    let mut jac = DMatrix::zeros(k, k);
    // Column-major accumulation.
    for d in 0..=model.n_actions {
        let g = &model.transitions[d];
        for y in 0..k {
            for x in 0..k {
                jac[(x, y)] += model.beta * g[(x, y)] * ccp.probs[(x, d)];
            }
        }
    }
    jac
}

/// `[I - T'(Q)]^T` assembled directly, for adjoint solves.
pub(crate) fn identity_minus_jacobian_transposed(
    model: &DDCModel,
    ccp: &CcpMatrix,
) -> DMatrix<f64> {
    let k = model.n_states;
    let mut out = DMatrix::identity(k, k);
    for d in 0..=model.n_actions {
        let g = &model.transitions[d];
        for y in 0..k {
            // out[(y, x)] -= beta g[(x, y)] p(d|x): iterate x contiguous in g.
            for x in 0..k {
                out[(y, x)] -= model.beta * g[(x, y)] * ccp.probs[(x, d)];
            }
        }
    }
    out
}

/// Solves `Q = T(Q)` by successive approximation followed by
/// Newton-Kantorovich: `Q <- Q - [I - T'(Q)]^{-1} [Q - T(Q)]`.
pub fn solve_emax_with(
    model: &DDCModel,
    u: &DMatrix<f64>,
    shock: ShockSpec,
    cfg: &SolveConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<EmaxSolution> {
    match shock {
        ShockSpec::Mixture(mix) => {
            Ok(solve_emax_mixture_cached(model, u, mix, cfg, warm_start)?.0)
        }
        ShockSpec::Logit => solve_emax_logit(model, u, cfg, warm_start),
    }
}

fn check_warm(k: usize, warm_start: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    match warm_start {
        Some(w) if w.len() != k => Err(Error::DimensionMismatch {
            context: "warm start length",
            expected: k,
            got: w.len(),
        }),
        Some(w) => Ok(w.clone()),
        None => Ok(DVector::zeros(k)),
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

/// Mixture solve that hands back the per-state cache at the solution, so
/// callers computing CCPs or derivatives avoid a rebuild.
pub(crate) fn solve_emax_mixture_cached(
    model: &DDCModel,
    u: &DMatrix<f64>,
    mix: &GumbelMixture,
    cfg: &SolveConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<(EmaxSolution, MixtureCache)> {
    let k = model.n_states;
    let mut q = check_warm(k, warm_start)?;
    let mut cache = build_mixture_cache(model, u, mix, &q)?;
    let mut residual = sup_norm(&(&cache.t_q - &q));
    let mut sa_iterations = 0;
    // Successive approximation until the Newton basin; a plateau detector
    // hands over early when the beta-rate contraction is too slow to be
    // worth iterating (beta near 1).
    while residual >= cfg.sa_threshold && sa_iterations < cfg.max_sa {
        let prev = residual;
        q = cache.t_q.clone();
        cache = build_mixture_cache(model, u, mix, &q)?;
        residual = sup_norm(&(&cache.t_q - &q));
        sa_iterations += 1;
        if !residual.is_finite() {
            return Err(Error::Domain(format!(
                "Bellman iteration diverged (residual {residual})"
            )));
        }
        if sa_iterations >= 2 && residual > 0.95 * prev {
            break;
        }
    }
    let mut newton_iterations = 0;
    while residual > cfg.tol && newton_iterations < cfg.max_newton {
        let ccp = ccps_from_cache(model, mix, &cache)?;
        let jac = bellman_jacobian(model, &ccp);
        let mut system = DMatrix::identity(k, k);
        system -= &jac;
        let rhs = &q - &cache.t_q;
        let step = system.lu().solve(&rhs).ok_or(Error::NonConvergence {
            context: "Newton-Kantorovich linear solve singular",
            residual,
            iterations: newton_iterations,
        })?;
        // Damped update: back off when a full step grows the residual.
        let mut scale = 1.0;
        let mut best: Option<(DVector<f64>, MixtureCache, f64)> = None;
        for _ in 0..6 {
            let q_try = &q - &step * scale;
            let cache_try = build_mixture_cache(model, u, mix, &q_try)?;
            let r_try = sup_norm(&(&cache_try.t_q - &q_try));
            if r_try.is_finite() && (r_try < residual || scale <= 0.0625) {
                best = Some((q_try, cache_try, r_try));
                break;
            }
            scale *= 0.5;
        }
        let Some((q_new, cache_new, r_new)) = best else {
            return Err(Error::Domain("Newton iteration produced non-finite Q".into()));
        };
        q = q_new;
        cache = cache_new;
        residual = r_new;
        newton_iterations += 1;
        if !residual.is_finite() {
            return Err(Error::Domain("Newton iteration produced non-finite Q".into()));
        }
    }
    Ok((
        EmaxSolution {
            q,
            residual,
            sa_iterations,
            newton_iterations,
            converged: residual <= cfg.tol,
        },
        cache,
    ))
}

fn solve_emax_logit(
    model: &DDCModel,
    u: &DMatrix<f64>,
    cfg: &SolveConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<EmaxSolution> {
    let k = model.n_states;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite utilities".into()));
    }
    let mut q = check_warm(k, warm_start)?;
    let mut residual = f64::INFINITY;
    let mut sa_iterations = 0;
    for _ in 0..cfg.max_sa {
        let prev = residual;
        let tq = logit_apply(model, u, &q);
        residual = sup_norm(&(&tq - &q));
        q = tq;
        sa_iterations += 1;
        if !residual.is_finite() {
            return Err(Error::Domain(format!(
                "Bellman iteration diverged (residual {residual})"
            )));
        }
        if residual < cfg.sa_threshold || (sa_iterations >= 2 && residual > 0.95 * prev) {
            break;
        }
    }
    let mut newton_iterations = 0;
    while residual > cfg.tol && newton_iterations < cfg.max_newton {
        let ccp = logit_ccps(model, u, &q)?;
        let tq = logit_apply(model, u, &q);
        let jac = bellman_jacobian(model, &ccp);
        let mut system = DMatrix::identity(k, k);
        system -= &jac;
        let rhs = &q - &tq;
        let step = system.lu().solve(&rhs).ok_or(Error::NonConvergence {
            context: "Newton-Kantorovich linear solve singular",
            residual,
            iterations: newton_iterations,
        })?;
        q -= &step;
        newton_iterations += 1;
        let tq_new = logit_apply(model, u, &q);
        residual = sup_norm(&(&tq_new - &q));
        if !residual.is_finite() {
            return Err(Error::Domain("Newton iteration produced non-finite Q".into()));
        }
    }
    Ok(EmaxSolution {
        q,
        residual,
        sa_iterations,
        newton_iterations,
        converged: residual <= cfg.tol,
    })
}

/// Solves the Emax fixed point at the model's stored utilities.
pub fn solve_emax(
    model: &DDCModel,
    mix: &GumbelMixture,
    cfg: &SolveConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<EmaxSolution> {
    solve_emax_with(model, &model.utilities(), ShockSpec::Mixture(mix), cfg, warm_start)
}

/// Solves the i.i.d.-Gumbel dynamic logit fixed point and returns the CCPs;
/// non-convergence is an error here since this is the parametric baseline.
pub fn logit_emax_and_ccps(
    model: &DDCModel,
    cfg: &SolveConfig,
) -> Result<(EmaxSolution, CcpMatrix)> {
    logit_emax_and_ccps_with(model, &model.utilities(), cfg)
}

/// Dynamic-logit solve at explicit utilities.
pub fn logit_emax_and_ccps_with(
    model: &DDCModel,
    u: &DMatrix<f64>,
    cfg: &SolveConfig,
) -> Result<(EmaxSolution, CcpMatrix)> {
    let sol = solve_emax_with(model, u, ShockSpec::Logit, cfg, None)?;
    if !sol.converged {
        return Err(Error::NonConvergence {
            context: "dynamic logit fixed point",
            residual: sol.residual,
            iterations: sol.sa_iterations + sol.newton_iterations,
        });
    }
    let ccp = ccps_with(model, u, ShockSpec::Logit, &sol.q)?;
    Ok((sol, ccp))
}
