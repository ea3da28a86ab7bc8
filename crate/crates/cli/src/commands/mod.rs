pub mod counterfactual;
pub mod estimate;
pub mod simulate;
pub mod summarize;

use crate::config::{config_hash, load_config, BuiltModel, RunConfig};
use anyhow::{bail, Context, Result};
use ddcmix::solver::{self, CcpMatrix, SolveConfig};
use std::path::{Path, PathBuf};

/// Loads config + model and resolves the output directory.
pub(crate) fn setup(
    config_arg: &str,
    out: Option<PathBuf>,
) -> Result<(RunConfig, String, BuiltModel, PathBuf)> {
    let (cfg, text) = load_config(config_arg)?;
    let hash = config_hash(&text);
    let model = cfg.model.build()?;
    let out_dir = out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    Ok((cfg, hash, model, out_dir))
}

/// CCPs implied by the configured data-generating process.
pub(crate) fn dgp_ccps(cfg: &RunConfig, built: &BuiltModel) -> Result<CcpMatrix> {
    let model = built.model();
    let solve = cfg.mcmc.solve_config();
    match cfg.dgp.kind.as_str() {
        "logit" => {
            let (_, ccp) = solver::logit_emax_and_ccps(model, &solve)?;
            Ok(ccp)
        }
        "mixture" => {
            let mix = cfg
                .dgp
                .mixture
                .as_ref()
                .context("dgp.kind = \"mixture\" requires a [dgp.mixture] block")?
                .build()?;
            let sol = solver::solve_emax(model, &mix, &solve, None)?;
            if !sol.converged {
                bail!(ddcmix::Error::NonConvergence {
                    context: "DGP Emax solve",
                    residual: sol.residual,
                    iterations: sol.sa_iterations + sol.newton_iterations,
                });
            }
            Ok(solver::ccps(model, &mix, &sol.q)?)
        }
        other => bail!("unknown dgp.kind `{other}` (expected \"mixture\" or \"logit\")"),
    }
}

pub(crate) fn solve_cfg(cfg: &RunConfig) -> SolveConfig {
    cfg.mcmc.solve_config()
}

/// Lists chain store base names present in a directory.
pub(crate) fn find_chain_bases(dir: &Path) -> Result<Vec<String>> {
    let mut bases = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(base) = name.strip_suffix(".meta.json") {
            if base.starts_with("chain") {
                bases.push(base.to_string());
            }
        }
    }
    bases.sort();
    if bases.is_empty() {
        bail!("no chain stores found in {}", dir.display());
    }
    Ok(bases)
}
