//! Monte Carlo oracles for the defining integrals of the model.
//!
//! These deliberately avoid the closed-form evaluation path: choice values
//! are assembled directly from the utilities and transition rows, shocks are
//! drawn from the mixture sampler, and the integrands use max / argmax over
//! the sampled shocks. Used by validation suites to check the closed forms.

use crate::mixture::GumbelMixture;
use crate::model::{DDCModel, GilleskieModel};
use crate::solver::CcpMatrix;
use nalgebra::DVector;
use rand::Rng;

fn direct_choice_values(model: &DDCModel, q: &DVector<f64>, x: usize) -> Vec<f64> {
    let u = model.utilities();
    (0..=model.n_actions)
        .map(|d| {
            let mut cont = 0.0;
            for y in 0..model.n_states {
                cont += model.transitions[d][(x, y)] * q[y];
            }
            u[(x, d)] + model.beta * cont
        })
        .collect()
}

/// MC estimate of `E[max_j(v_j(x) + eps_j)]` with `eps_0 = 0` and
/// `eps_{1..J}` drawn from the mixture. Returns `(mean, standard error)`.
pub fn emax_mc<R: Rng + ?Sized>(
    model: &DDCModel,
    mix: &GumbelMixture,
    q: &DVector<f64>,
    x: usize,
    n_draws: usize,
    rng: &mut R,
) -> (f64, f64) {
    let v = direct_choice_values(model, q, x);
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n_draws {
        let eps = mix.sample(rng);
        let mut best = v[0];
        for j in 1..v.len() {
            let val = v[j] + eps[j - 1];
            if val > best {
                best = val;
            }
        }
        s1 += best;
        s2 += best * best;
    }
    let n = n_draws as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// MC estimate of the CCP vector at state `x` as argmax frequencies.
/// Returns per-action `(frequencies, binomial standard errors)`.
pub fn ccp_mc<R: Rng + ?Sized>(
    model: &DDCModel,
    mix: &GumbelMixture,
    q: &DVector<f64>,
    x: usize,
    n_draws: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let v = direct_choice_values(model, q, x);
    let mut wins = vec![0u64; v.len()];
    for _ in 0..n_draws {
        let eps = mix.sample(rng);
        let mut best = 0;
        let mut best_val = v[0];
        for j in 1..v.len() {
            let val = v[j] + eps[j - 1];
            if val > best_val {
                best_val = val;
                best = j;
            }
        }
        wins[best] += 1;
    }
    let n = n_draws as f64;
    let freqs: Vec<f64> = wins.iter().map(|&w| w as f64 / n).collect();
    let ses = freqs.iter().map(|&p| (p * (1.0 - p) / n).sqrt()).collect();
    (freqs, ses)
}

/// Simulates complete illness episodes from the onset state and returns the
/// mean number of doctor visits per episode with its standard error.
pub fn episode_visits_mc<R: Rng + ?Sized>(
    gm: &GilleskieModel,
    ccp: &CcpMatrix,
    n_episodes: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n_episodes {
        let mut x = gm.onset;
        let mut visits = 0.0;
        loop {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut d = gm.model.n_actions;
            for (i, p) in ccp.probs.row(x).iter().enumerate() {
                acc += p;
                if u < acc {
                    d = i;
                    break;
                }
            }
            if d == 1 || d == 3 {
                visits += 1.0;
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = gm.well;
            for y in 0..gm.model.n_states {
                acc += gm.model.transitions[d][(x, y)];
                if u < acc {
                    next = y;
                    break;
                }
            }
            if next == gm.well {
                break;
            }
            x = next;
        }
        s1 += visits;
        s2 += visits * visits;
    }
    let n = n_episodes as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}
