//! Numerical continuity of the Emax function and the CCPs in the shock
//! distribution: for mixture pairs at a small rho distance, the sup
//! differences stay within a fixed multiple of rho.

use ddcmix::mixture::{rho_distance, GumbelMixture};
use ddcmix::solver::{ccps, solve_emax, SolveConfig};
use ddcmix::testkit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn emax_and_ccps_lipschitz_in_shock_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (model, base_mix) = testkit::random_instance(&mut rng, 5, 2, 2, 0.9);
    let cfg = SolveConfig::default();
    let sol_base = solve_emax(&model, &base_mix, &cfg, None).unwrap();
    let ccp_base = ccps(&model, &base_mix, &sol_base.q).unwrap();

    // Theoretical scale of the constants: C = c/(1-beta) with
    // c = max(1, u_bar + beta (u_bar + sum_d E|eps_d|) / (1 - beta)),
    // and C' = 4 (J+1) beta C f_bar + 1 with a unit-scale density bound.
    let u_bar = model
        .utilities()
        .iter()
        .fold(0.0_f64, |m, &v| m.max(v.abs()));
    let e_abs: f64 = 3.0 * 2.5; // generous bound on sum_d E|eps_d| for these mixtures
    let c_small = (u_bar + model.beta * (u_bar + e_abs) / (1.0 - model.beta)).max(1.0);
    let c_q = c_small / (1.0 - model.beta);
    let c_p = 4.0 * 3.0 * model.beta * c_q * 1.0 + 1.0;

    for (i, delta) in [0.01, 0.03, 0.06].iter().enumerate() {
        // Perturb locations, scales, and weights by O(delta).
        let mut weights = base_mix.weights().to_vec();
        weights[0] += delta * 0.5;
        weights[1] -= delta * 0.5;
        let locations: Vec<Vec<f64>> = base_mix
            .locations()
            .iter()
            .map(|mu| mu.iter().map(|v| v + delta).collect())
            .collect();
        let sigma_tildes: Vec<f64> = base_mix
            .sigma_tildes()
            .iter()
            .map(|s| s * (1.0 + delta))
            .collect();
        let other = GumbelMixture::new(weights, locations, sigma_tildes, base_mix.sigma()).unwrap();

        let mut mc_rng = ChaCha8Rng::seed_from_u64(5000 + i as u64);
        let rho = rho_distance(&base_mix, &other, 400_000, &mut mc_rng).unwrap();
        assert!(rho.estimate > 0.0 && rho.std_error < 0.05 * rho.estimate);

        let sol = solve_emax(&model, &other, &cfg, None).unwrap();
        let ccp = ccps(&model, &other, &sol.q).unwrap();
        let q_diff = (&sol.q - &sol_base.q).amax();
        let p_diff = (ccp.probs.clone() - ccp_base.probs.clone()).amax();

        let q_ratio = q_diff / rho.estimate;
        let p_ratio = p_diff / rho.estimate;
        assert!(
            q_ratio <= c_q,
            "delta {delta}: |dQ|/rho = {q_ratio} exceeds theoretical scale {c_q}"
        );
        assert!(
            p_ratio <= c_p,
            "delta {delta}: |dp|/rho = {p_ratio} exceeds theoretical scale {c_p}"
        );
        // The empirical ratios sit far below the theoretical constants and
        // stay of the same order across the grid.
        assert!(q_ratio < 20.0, "unexpectedly large Emax sensitivity {q_ratio}");
        assert!(p_ratio < 5.0, "unexpectedly large CCP sensitivity {p_ratio}");
    }
}
