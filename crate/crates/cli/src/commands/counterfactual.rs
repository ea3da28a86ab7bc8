//! `counterfactual`: per-draw counterfactual solves, HPD and
//! identified-set intervals, and the dynamic-logit comparison columns.

use super::{find_chain_bases, setup, solve_cfg};
use anyhow::{bail, Context, Result};
use ddcmix::likelihood::{delta_method_ci, logit_mle, MleConfig};
use ddcmix::mcmc::DrawStore;
use ddcmix::model::{GilleskieModel, PanelCounts};
use ddcmix::numerics::{hpd_interval, Interval};
use ddcmix::postprocess::{
    ccp_credible_set, counterfactual_model, expected_visits, identified_set_interval,
    GilleskieOverrides,
};
use ddcmix::solver::{self, ShockSpec};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

#[derive(Serialize)]
struct IntervalOut {
    lo: f64,
    hi: f64,
    length: f64,
}

impl From<Interval> for IntervalOut {
    fn from(iv: Interval) -> Self {
        Self {
            lo: iv.lo,
            hi: iv.hi,
            length: iv.len(),
        }
    }
}

#[derive(Serialize)]
struct FunctionalRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    true_value: Option<f64>,
    mle_estimate: f64,
    mle_ci: IntervalOut,
    posterior_mean: f64,
    hpd: IntervalOut,
    b_hat: IntervalOut,
}

#[derive(Serialize)]
struct CfReport {
    config_hash: String,
    overrides: GilleskieOverrides,
    n_draws: usize,
    credible_set_ridge: f64,
    credible_set_dim: usize,
    ev: FunctionalRow,
    cf_ev: FunctionalRow,
}

#[derive(Deserialize)]
struct ManifestTruth {
    #[serde(default)]
    true_ev: Option<f64>,
    #[serde(default)]
    true_cf_ev: Option<f64>,
}

pub fn run(
    config_arg: &str,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let (cfg, hash, built, out_dir) = setup(config_arg, out)?;
    let data_dir = data.unwrap_or_else(|| out_dir.clone());
    let Some(gm) = built.gilleskie() else {
        bail!("counterfactual analysis requires an illness-episode (gilleskie) model");
    };
    let overrides = GilleskieOverrides {
        pc: cfg.counterfactual.pc,
        l: cfg.counterfactual.l,
        y: cfg.counterfactual.y,
    };
    let solve = solve_cfg(&cfg);

    let bases = find_chain_bases(&data_dir)?;
    let mut draws = Vec::new();
    let mut meta = None;
    for b in &bases {
        let store = DrawStore::read(&data_dir, b)?;
        if meta.is_none() {
            meta = Some(store.meta.clone());
        }
        draws.extend(store.draws);
    }
    let meta = meta.context("no chain metadata")?;
    if draws.is_empty() {
        bail!("draw stores contain no draws");
    }
    let free_idx: Vec<usize> = cfg.model.semiparametric_free(&cfg.estimate);

    let counts_path = data_dir.join("counts.csv");
    let counts = PanelCounts::read_csv(&counts_path, gm.model.n_states, gm.model.n_actions + 1)
        .with_context(|| format!("reading {}", counts_path.display()))?;
    let truth: Option<ManifestTruth> = std::fs::File::open(data_dir.join("manifest.json"))
        .ok()
        .and_then(|f| serde_json::from_reader(f).ok());

    // MLE comparison columns: estimate and delta-method CIs of E(v) in the
    // baseline and counterfactual environments under the dynamic logit.
    let mle_free = cfg.model.mle_free(&cfg.estimate);
    let fit = logit_mle(
        &gm.model,
        &counts,
        &mle_free,
        &MleConfig {
            seed: seed.unwrap_or(cfg.mcmc.seed) ^ 0xc0de,
            solve,
            ..MleConfig::default()
        },
    )?;
    let cf_gm = counterfactual_model(gm, &overrides)?;
    let logit_ev = |gmodel: &GilleskieModel, theta: &[f64]| -> ddcmix::Result<f64> {
        let u = gmodel.model.utility.utilities_with(theta);
        let (sol, _) = solver::logit_emax_and_ccps_with(&gmodel.model, &u, &solve)?;
        let ccp = solver::ccps_with(&gmodel.model, &u, ShockSpec::Logit, &sol.q)?;
        expected_visits(gmodel, &ccp)
    };
    let (mle_ev, mle_ev_ci) = delta_method_ci(&fit, |t| logit_ev(gm, t), 0.95)?;
    let (mle_cf, mle_cf_ci) = delta_method_ci(&fit, |t| logit_ev(&cf_gm, t), 0.95)?;

    // Per-draw counterfactual solves, warm-started along the chain.
    let ev_idx = meta
        .functional_names
        .iter()
        .position(|n| n == "ev")
        .context("stores carry no `ev` functional; re-run estimate")?;
    let mut ev_draws = Vec::with_capacity(draws.len());
    let mut cf_draws = Vec::with_capacity(draws.len());
    let mut warm: Option<DVector<f64>> = None;
    for d in &draws {
        ev_draws.push(d.functionals[ev_idx]);
        let mixture = d.psi.mixture()?;
        let mut theta = meta.theta_ref.clone();
        for (i, &idx) in free_idx.iter().enumerate() {
            theta[idx] = d.psi.theta_free[i];
        }
        let u = cf_gm.model.utility.utilities_with(&theta);
        let sol = solver::solve_emax_with(
            &cf_gm.model,
            &u,
            ShockSpec::Mixture(&mixture),
            &solve,
            warm.as_ref(),
        )?;
        if !sol.converged {
            bail!(ddcmix::Error::NonConvergence {
                context: "counterfactual Emax solve",
                residual: sol.residual,
                iterations: sol.sa_iterations + sol.newton_iterations,
            });
        }
        let ccp = solver::ccps_with(&cf_gm.model, &u, ShockSpec::Mixture(&mixture), &sol.q)?;
        cf_draws.push(expected_visits(&cf_gm, &ccp)?);
        warm = Some(sol.q);
    }

    // Identified-set credible intervals through the CCP ellipsoid,
    // restricted to coordinates with positive occupancy.
    let occupied: Vec<usize> = (0..gm.model.n_states)
        .filter(|&x| counts.occupancy(x) > 0.0)
        .collect();
    let k = gm.model.n_states;
    let coord_idx: Vec<usize> = (1..=gm.model.n_actions)
        .flat_map(|d| occupied.iter().map(move |&x| (d - 1) * k + x))
        .collect();
    let restricted: Vec<Vec<f64>> = draws
        .iter()
        .map(|d| coord_idx.iter().map(|&i| d.ccp_vec[i]).collect())
        .collect();
    let set = ccp_credible_set(&restricted, 0.05)?;
    let b_hat_ev = identified_set_interval(&ev_draws, &restricted, &set)?;
    let b_hat_cf = identified_set_interval(&cf_draws, &restricted, &set)?;

    let hpd_of = |series: &[f64]| -> ddcmix::Result<Interval> {
        let mut sorted = series.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hpd_interval(&sorted, 0.95)
    };
    let mean_of = |series: &[f64]| series.iter().sum::<f64>() / series.len() as f64;

    let report = CfReport {
        config_hash: hash,
        overrides,
        n_draws: draws.len(),
        credible_set_ridge: set.ridge,
        credible_set_dim: coord_idx.len(),
        ev: FunctionalRow {
            true_value: truth.as_ref().and_then(|t| t.true_ev),
            mle_estimate: mle_ev,
            mle_ci: mle_ev_ci.into(),
            posterior_mean: mean_of(&ev_draws),
            hpd: hpd_of(&ev_draws)?.into(),
            b_hat: b_hat_ev.into(),
        },
        cf_ev: FunctionalRow {
            true_value: truth.as_ref().and_then(|t| t.true_cf_ev),
            mle_estimate: mle_cf,
            mle_ci: mle_cf_ci.into(),
            posterior_mean: mean_of(&cf_draws),
            hpd: hpd_of(&cf_draws)?.into(),
            b_hat: b_hat_cf.into(),
        },
    };
    serde_json::to_writer_pretty(
        std::fs::File::create(out_dir.join("cf_report.json"))?,
        &report,
    )?;

    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("cf_draws.csv"))?);
    writeln!(csv, "iter,ev,cf_ev")?;
    for ((d, ev), cf) in draws.iter().zip(&ev_draws).zip(&cf_draws) {
        writeln!(csv, "{},{ev:.10e},{cf:.10e}", d.iter)?;
    }
    csv.flush()?;
    println!(
        "counterfactual: E(v) mean {:.4} -> cf {:.4}; wrote cf_report.json to {}",
        report.ev.posterior_mean,
        report.cf_ev.posterior_mean,
        out_dir.display()
    );
    Ok(())
}
