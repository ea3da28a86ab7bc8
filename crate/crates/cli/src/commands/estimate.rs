//! `estimate`: dynamic-logit reference fit, then the HMC + reversible-jump
//! posterior sampler, with per-chain resumable draw stores.

use super::{setup, solve_cfg};
use crate::config::BuiltModel;
use anyhow::{bail, Context, Result};
use ddcmix::likelihood::{logit_mle, EstimationTarget, MleConfig, MleFit};
use ddcmix::mcmc::{run_chain, ChainCheckpoint, DrawContext, DrawStore, FunctionalFn, RunSpec};
use ddcmix::model::{DDCModel, PanelCounts};
use ddcmix::postprocess::expected_visits;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
pub(crate) struct MleRecord {
    pub theta: Vec<f64>,
    pub free_idx: Vec<usize>,
    pub cov: Vec<Vec<f64>>,
    pub log_lik: f64,
    pub iterations: usize,
}

impl MleRecord {
    fn from_fit(fit: &MleFit) -> Self {
        let n = fit.free_idx.len();
        Self {
            theta: fit.theta.clone(),
            free_idx: fit.free_idx.clone(),
            cov: (0..n)
                .map(|i| (0..n).map(|j| fit.cov[(i, j)]).collect())
                .collect(),
            log_lik: fit.log_lik,
            iterations: fit.iterations,
        }
    }
}

pub fn run(
    config_arg: &str,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    chains: usize,
    resume: bool,
) -> Result<()> {
    let (cfg, hash, built, out_dir) = setup(config_arg, out)?;
    let data_dir = data.unwrap_or_else(|| out_dir.clone());
    let base_seed = seed.unwrap_or(cfg.mcmc.seed);
    if chains == 0 {
        bail!("--chains must be >= 1");
    }

    let model = built.model();
    let counts_path = data_dir.join("counts.csv");
    let counts = PanelCounts::read_csv(&counts_path, model.n_states, model.n_actions + 1)
        .with_context(|| format!("reading {}", counts_path.display()))?;

    // Reference parameters: the dynamic-logit estimates, recomputed per
    // dataset and recorded in the run metadata.
    let mle_free = cfg.model.mle_free(&cfg.estimate);
    let mut ref_model = model.clone();
    if !mle_free.is_empty() {
        let fit = logit_mle(
            model,
            &counts,
            &mle_free,
            &MleConfig {
                seed: base_seed ^ 0x5eed,
                solve: solve_cfg(&cfg),
                ..MleConfig::default()
            },
        )?;
        serde_json::to_writer_pretty(
            std::fs::File::create(out_dir.join("mle.json"))?,
            &MleRecord::from_fit(&fit),
        )?;
        ref_model.utility.theta = fit.theta;
        println!(
            "estimate: dynamic-logit reference fit log_lik = {:.4}",
            fit.log_lik
        );
    }

    let free_idx = cfg.model.semiparametric_free(&cfg.estimate);
    let prior = cfg.prior.build()?;
    if prior.theta_free.len() != free_idx.len() {
        bail!(
            "prior.theta_free has {} entries but {} utility parameters are free",
            prior.theta_free.len(),
            free_idx.len()
        );
    }
    let renorm = cfg.model.renorm_maps();
    let chain_cfg = cfg.mcmc.chain_config();
    let solve = solve_cfg(&cfg);

    let errors: Vec<String> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chain_id in 0..chains {
            let ref_model = &ref_model;
            let counts = &counts;
            let prior = &prior;
            let free_idx = &free_idx;
            let renorm = renorm.clone();
            let chain_cfg = chain_cfg.clone();
            let out_dir = out_dir.clone();
            let hash = hash.clone();
            let built = &built;
            handles.push(scope.spawn(move || -> Result<()> {
                let target = EstimationTarget::new(ref_model, counts, prior, free_idx, solve)?;
                let functionals = build_functionals(built, ref_model);
                let spec = RunSpec {
                    target,
                    renorm,
                    functionals,
                };
                let base = format!("chain{chain_id}");
                let chain_seed = base_seed.wrapping_add(chain_id as u64);
                let resume_state = if resume {
                    load_checkpoint(&out_dir, &base)?
                } else {
                    None
                };
                let ck_path = out_dir.join(format!("{base}.checkpoint.json"));
                let out_for_cb = out_dir.clone();
                let hash_for_cb = hash.clone();
                let base_for_cb = base.clone();
                let mut cb = move |store: &DrawStore, ck: &ChainCheckpoint| {
                    let mut store = store.clone();
                    store.meta.config_hash = Some(hash_for_cb.clone());
                    store.write(&out_for_cb, &base_for_cb)?;
                    let tmp = ck_path.with_extension("json.tmp");
                    serde_json::to_writer(std::fs::File::create(&tmp)?, ck)?;
                    std::fs::rename(&tmp, &ck_path)?;
                    eprintln!(
                        "chain {chain_id}: checkpoint at iteration {} ({} draws)",
                        ck.next_iter,
                        store.draws.len()
                    );
                    Ok(())
                };
                let mut store = run_chain(&spec, &chain_cfg, chain_seed, resume_state, Some(&mut cb))?;
                store.meta.config_hash = Some(hash);
                store.write(&out_dir, &base)?;
                // A completed run needs no checkpoint; a stale one would
                // desynchronize later --resume invocations.
                std::fs::remove_file(out_dir.join(format!("{base}.checkpoint.json"))).ok();
                println!(
                    "chain {chain_id}: {} draws, HMC acceptance {:.3}, birth/death acceptance {:.3}/{:.3}",
                    store.draws.len(),
                    rate(store.meta.acceptance.hmc_accepted, store.meta.acceptance.hmc_proposed),
                    rate(store.meta.acceptance.birth_accepted, store.meta.acceptance.birth_proposed),
                    rate(store.meta.acceptance.death_accepted, store.meta.acceptance.death_proposed),
                );
                Ok(())
            }));
        }
        handles
            .into_iter()
            .filter_map(|h| match h.join() {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(format!("{e:#}")),
                Err(_) => Some("chain thread panicked".to_string()),
            })
            .collect()
    });
    if !errors.is_empty() {
        bail!("estimation failed: {}", errors.join("; "));
    }
    println!("estimate: wrote chain stores to {}", out_dir.display());
    Ok(())
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derived quantities stored per draw: expected doctor visits for the
/// illness-episode model, nothing extra otherwise.
fn build_functionals<'a>(built: &'a BuiltModel, _ref_model: &'a DDCModel) -> Vec<(String, FunctionalFn<'a>)> {
    match built.gilleskie() {
        Some(g) => {
            vec![(
                "ev".to_string(),
                Box::new(move |ctx: &DrawContext| Ok(expected_visits(g, ctx.ccp)?)) as FunctionalFn,
            )]
        }
        None => Vec::new(),
    }
}

fn load_checkpoint(dir: &Path, base: &str) -> Result<Option<(ChainCheckpoint, Vec<ddcmix::mcmc::Draw>)>> {
    let ck_path = dir.join(format!("{base}.checkpoint.json"));
    if !ck_path.exists() {
        return Ok(None);
    }
    let ck: ChainCheckpoint = serde_json::from_reader(std::fs::File::open(&ck_path)?)?;
    let store = DrawStore::read(dir, base)?;
    // Keep only draws recorded before the checkpoint, in case the store
    // on disk ran ahead of the snapshot.
    let draws: Vec<ddcmix::mcmc::Draw> = store
        .draws
        .into_iter()
        .filter(|d| d.iter < ck.next_iter)
        .collect();
    println!(
        "chain {base}: resuming from iteration {} with {} stored draws",
        ck.next_iter,
        draws.len()
    );
    Ok(Some((ck, draws)))
}
