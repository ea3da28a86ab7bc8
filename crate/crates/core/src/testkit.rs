//! Random problem instances shared by validation suites.

use crate::likelihood::{ChainState, NormalMixturePrior, PriorConfig};
use crate::mixture::GumbelMixture;
use crate::model::{DDCModel, PanelCounts, UtilitySpec};
use nalgebra::DMatrix;
use rand::Rng;

/// Random model with dense transitions and fixed (empty-theta) utilities.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    k: usize,
    j: usize,
    m: usize,
    beta: f64,
) -> (DDCModel, GumbelMixture) {
    let model = random_model(rng, k, j, beta, 0);
    let mix = random_mixture(rng, j, m);
    (model, mix)
}

/// Random model with `n_theta` linear utility parameters (random covariate
/// matrices, reference values near zero).
pub fn random_model<R: Rng>(rng: &mut R, k: usize, j: usize, beta: f64, n_theta: usize) -> DDCModel {
    let mut transitions = Vec::new();
    for _ in 0..=j {
        let mut g = DMatrix::zeros(k, k);
        for x in 0..k {
            let mut row: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            for y in 0..k {
                g[(x, y)] = row[y];
            }
        }
        transitions.push(g);
    }
    let base = DMatrix::from_fn(k, j + 1, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
    let covariates: Vec<DMatrix<f64>> = (0..n_theta)
        .map(|_| DMatrix::from_fn(k, j + 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0))
        .collect();
    let theta: Vec<f64> = (0..n_theta).map(|_| rng.gen::<f64>() - 0.5).collect();
    DDCModel::new(
        beta,
        transitions,
        UtilitySpec {
            base,
            covariates,
            theta,
        },
    )
    .expect("random model is valid")
}

pub fn random_mixture<R: Rng>(rng: &mut R, j: usize, m: usize) -> GumbelMixture {
    let mut weights: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 0.2).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let locations = (0..m)
        .map(|_| (0..j).map(|_| rng.gen::<f64>() * 3.0 - 1.5).collect())
        .collect();
    let sigma_tildes = (0..m).map(|_| 0.5 + rng.gen::<f64>() * 1.5).collect();
    GumbelMixture::new(weights, locations, sigma_tildes, 1.0).expect("valid mixture")
}

/// Random transformed chain state in a numerically benign region.
pub fn random_chain_state<R: Rng>(rng: &mut R, m: usize, dim_j: usize, n_free: usize) -> ChainState {
    let norm = |rng: &mut R, sd: f64| {
        let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
        sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    ChainState {
        theta_free: (0..n_free).map(|_| norm(rng, 0.5)).collect(),
        log_sigma: norm(rng, 0.1),
        alphas: (0..m - 1).map(|_| norm(rng, 0.8)).collect(),
        locations: (0..m)
            .map(|_| (0..dim_j).map(|_| norm(rng, 1.5)).collect())
            .collect(),
        log_sigma_tildes: (0..m).map(|_| norm(rng, 0.4)).collect(),
    }
}

/// Random positive counts with some structural zeros.
pub fn random_counts<R: Rng>(rng: &mut R, k: usize, n_choices: usize) -> PanelCounts {
    loop {
        let counts = DMatrix::from_fn(k, n_choices, |_, _| {
            if rng.gen::<f64>() < 0.2 {
                0.0
            } else {
                (rng.gen::<f64>() * 20.0).round()
            }
        });
        if let Ok(c) = PanelCounts::new(counts) {
            return c;
        }
    }
}

/// A broad default prior used by validation suites.
pub fn default_prior(n_free: usize, m_max: usize) -> PriorConfig {
    PriorConfig {
        dirichlet_a: 10.0,
        m_penalty_a: 0.05,
        m_penalty_tau: 5.0,
        m_max,
        location: NormalMixturePrior::normal(0.0, 2.0),
        log_sigma_tilde: NormalMixturePrior::normal(0.0, 1.0),
        log_sigma: NormalMixturePrior::normal(0.0, 0.01),
        theta_free: (0..n_free)
            .map(|_| NormalMixturePrior::normal(0.0, 4.0))
            .collect(),
    }
}
