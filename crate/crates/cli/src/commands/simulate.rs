//! `simulate`: writes counts/panel CSVs plus a manifest with the
//! data-generating truth.

use super::{dgp_ccps, setup, solve_cfg};
use anyhow::{Context, Result};
use ddcmix::model::{ccps_to_counts, simulate_panel, write_panel_csv, InitialState};
use ddcmix::postprocess::{counterfactual_model, expected_visits, GilleskieOverrides};
use ddcmix::solver;
use rand::SeedableRng;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    dgp_kind: String,
    n_states: usize,
    n_choices: usize,
    theta: Vec<f64>,
    true_ccps: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_per_state: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    individuals: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    periods: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_ev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_cf_ev: Option<f64>,
}

pub fn run(config_arg: &str, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let (cfg, hash, built, out_dir) = setup(config_arg, out)?;
    let seed = seed.unwrap_or(cfg.dgp.seed);
    let model = built.model();
    let ccp = dgp_ccps(&cfg, &built)?;

    let mut manifest = Manifest {
        config_hash: hash,
        seed,
        dgp_kind: cfg.dgp.kind.clone(),
        n_states: model.n_states,
        n_choices: model.n_actions + 1,
        theta: model.utility.theta.clone(),
        true_ccps: (0..model.n_states)
            .map(|x| (0..=model.n_actions).map(|d| ccp.probs[(x, d)]).collect())
            .collect(),
        n_per_state: cfg.dgp.n_per_state,
        individuals: cfg.dgp.individuals,
        periods: cfg.dgp.periods,
        true_ev: None,
        true_cf_ev: None,
    };

    let counts = if let Some(n) = cfg.dgp.n_per_state {
        ccps_to_counts(&ccp, n)?
    } else {
        let individuals = cfg
            .dgp
            .individuals
            .context("dgp needs either n_per_state or individuals")?;
        let periods = cfg.dgp.periods.unwrap_or(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (initial, stop) = match built.gilleskie() {
            // One illness episode per individual: start at onset, stop on
            // recovery.
            Some(g) => (InitialState::Fixed(g.onset), Some(g.well)),
            None => (InitialState::Fixed(0), None),
        };
        let (records, counts) =
            simulate_panel(model, &ccp, individuals, periods, &initial, stop, &mut rng)?;
        let panel = std::fs::File::create(out_dir.join("panel.csv"))?;
        write_panel_csv(&records, std::io::BufWriter::new(panel))?;
        counts
    };
    let file = std::fs::File::create(out_dir.join("counts.csv"))?;
    counts.write_csv(std::io::BufWriter::new(file))?;

    if let Some(g) = built.gilleskie() {
        manifest.true_ev = Some(expected_visits(g, &ccp)?);
        let overrides = GilleskieOverrides {
            pc: cfg.counterfactual.pc,
            l: cfg.counterfactual.l,
            y: cfg.counterfactual.y,
        };
        if !overrides.is_empty() {
            let cf = counterfactual_model(g, &overrides)?;
            let solve = solve_cfg(&cfg);
            let cf_ccp = match cfg.dgp.kind.as_str() {
                "logit" => solver::logit_emax_and_ccps(&cf.model, &solve)?.1,
                _ => {
                    let mix = cfg.dgp.mixture.as_ref().unwrap().build()?;
                    let sol = solver::solve_emax(&cf.model, &mix, &solve, None)?;
                    solver::ccps(&cf.model, &mix, &sol.q)?
                }
            };
            manifest.true_cf_ev = Some(expected_visits(&cf, &cf_ccp)?);
        }
    }

    serde_json::to_writer_pretty(
        std::fs::File::create(out_dir.join("manifest.json"))?,
        &manifest,
    )?;
    println!(
        "simulate: wrote counts.csv{} and manifest.json to {}",
        if cfg.dgp.individuals.is_some() { ", panel.csv" } else { "" },
        out_dir.display()
    );
    Ok(())
}
