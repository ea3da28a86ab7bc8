//! TOML run configuration and built-in presets.

use anyhow::{bail, Context, Result};
use ddcmix::likelihood::{NormalMixturePrior, PriorComponent, PriorConfig};
use ddcmix::mixture::GumbelMixture;
use ddcmix::model::{
    build_gilleskie_model, build_rust_model, DDCModel, GilleskieModel, GilleskieParams,
    UtilitySpec,
};
use ddcmix::postprocess::InterceptMap;
use ddcmix::solver::SolveConfig;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dgp: DgpConfig,
    pub prior: PriorSection,
    pub mcmc: McmcSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub counterfactual: CounterfactualSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Rust {
        beta: f64,
        /// `(theta0, theta1)` utility and `(theta2, theta3)` mileage
        /// increment probabilities.
        theta: [f64; 2],
        mileage_probs: [f64; 2],
        #[serde(default = "default_rust_states")]
        n_states: usize,
    },
    Gilleskie {
        beta: f64,
        params: GilleskieParams,
    },
    /// Explicit tables loaded from a JSON file with fields
    /// `beta`, `transitions` (list of `K x K` rows), `utility_base`
    /// (`K x (J+1)` rows), and optional `covariates` + `theta`.
    Custom { path: String },
}

fn default_rust_states() -> usize {
    90
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    /// "mixture" or "logit".
    pub kind: String,
    pub seed: u64,
    /// Fractional count design: `n_{dx} = p(d|x) * n_per_state`.
    #[serde(default)]
    pub n_per_state: Option<f64>,
    /// Panel simulation size.
    #[serde(default)]
    pub individuals: Option<usize>,
    #[serde(default)]
    pub periods: Option<usize>,
    #[serde(default)]
    pub mixture: Option<MixtureSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub locations: Vec<Vec<f64>>,
    pub sigma_tildes: Vec<f64>,
    pub sigma: f64,
}

impl MixtureSection {
    pub fn build(&self) -> Result<GumbelMixture> {
        Ok(GumbelMixture::new(
            self.weights.clone(),
            self.locations.clone(),
            self.sigma_tildes.clone(),
            self.sigma,
        )?)
    }
}

/// Prior specification; scalar priors are lists of `(weight, mean, sd)`
/// rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSection {
    pub dirichlet_a: f64,
    pub m_penalty_a: f64,
    pub m_penalty_tau: f64,
    pub m_max: usize,
    pub location: Vec<[f64; 3]>,
    pub log_sigma_tilde: Vec<[f64; 3]>,
    pub log_sigma: Vec<[f64; 3]>,
    #[serde(default)]
    pub theta_free: Vec<Vec<[f64; 3]>>,
}

fn rows_to_prior(rows: &[[f64; 3]]) -> NormalMixturePrior {
    NormalMixturePrior {
        components: rows
            .iter()
            .map(|r| PriorComponent {
                weight: r[0],
                mean: r[1],
                sd: r[2],
            })
            .collect(),
    }
}

impl PriorSection {
    pub fn build(&self) -> Result<PriorConfig> {
        let cfg = PriorConfig {
            dirichlet_a: self.dirichlet_a,
            m_penalty_a: self.m_penalty_a,
            m_penalty_tau: self.m_penalty_tau,
            m_max: self.m_max,
            location: rows_to_prior(&self.location),
            log_sigma_tilde: rows_to_prior(&self.log_sigma_tilde),
            log_sigma: rows_to_prior(&self.log_sigma),
            theta_free: self.theta_free.iter().map(|r| rows_to_prior(r)).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub hmc_per_jump: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub m_init: usize,
    pub seed: u64,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_every: usize,
    #[serde(default = "default_emax_tol")]
    pub emax_tol: f64,
}

fn default_checkpoint() -> usize {
    1000
}

fn default_emax_tol() -> f64 {
    1e-10
}

impl McmcSection {
    pub fn chain_config(&self) -> ddcmix::mcmc::ChainConfig {
        ddcmix::mcmc::ChainConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            hmc_per_jump: self.hmc_per_jump,
            hmc: ddcmix::mcmc::HmcConfig {
                leapfrog_steps: self.leapfrog_steps,
                target_accept: self.target_accept,
                step_size: None,
            },
            rj: ddcmix::mcmc::RjConfig::default(),
            m_init: self.m_init,
            rj_enabled: true,
            checkpoint_every: self.checkpoint_every,
            mass_adapt_after: 150,
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            tol: self.emax_tol,
            ..SolveConfig::default()
        }
    }
}

/// Overrides for non-preset models; presets fill these by model kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EstimateSection {
    #[serde(default)]
    pub free_theta: Option<Vec<usize>>,
    #[serde(default)]
    pub mle_free: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CounterfactualSection {
    #[serde(default)]
    pub pc: Option<f64>,
    #[serde(default)]
    pub l: Option<f64>,
    #[serde(default)]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

/// A model built from configuration, with the Gilleskie state table kept
/// when applicable.
pub enum BuiltModel {
    Plain(DDCModel),
    Gilleskie(GilleskieModel),
}

impl BuiltModel {
    pub fn model(&self) -> &DDCModel {
        match self {
            BuiltModel::Plain(m) => m,
            BuiltModel::Gilleskie(g) => &g.model,
        }
    }

    pub fn gilleskie(&self) -> Option<&GilleskieModel> {
        match self {
            BuiltModel::Gilleskie(g) => Some(g),
            BuiltModel::Plain(_) => None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CustomModelFile {
    beta: f64,
    transitions: Vec<Vec<Vec<f64>>>,
    utility_base: Vec<Vec<f64>>,
    #[serde(default)]
    covariates: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    theta: Vec<f64>,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = rows.len();
    if k == 0 {
        bail!("empty matrix in custom model file");
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        bail!("ragged matrix in custom model file");
    }
    Ok(DMatrix::from_fn(k, n, |i, j| rows[i][j]))
}

impl ModelConfig {
    pub fn build(&self) -> Result<BuiltModel> {
        match self {
            ModelConfig::Rust {
                beta,
                theta,
                mileage_probs,
                n_states,
            } => Ok(BuiltModel::Plain(build_rust_model(
                theta[0],
                theta[1],
                mileage_probs[0],
                mileage_probs[1],
                *beta,
                *n_states,
            )?)),
            ModelConfig::Gilleskie { beta, params } => Ok(BuiltModel::Gilleskie(
                build_gilleskie_model(params.clone(), *beta)?,
            )),
            ModelConfig::Custom { path } => {
                let raw: CustomModelFile = serde_json::from_reader(
                    std::fs::File::open(path).with_context(|| format!("opening {path}"))?,
                )?;
                let transitions = raw
                    .transitions
                    .iter()
                    .map(|t| rows_to_matrix(t))
                    .collect::<Result<Vec<_>>>()?;
                let base = rows_to_matrix(&raw.utility_base)?;
                let covariates = raw
                    .covariates
                    .iter()
                    .map(|t| rows_to_matrix(t))
                    .collect::<Result<Vec<_>>>()?;
                Ok(BuiltModel::Plain(DDCModel::new(
                    raw.beta,
                    transitions,
                    UtilitySpec {
                        base,
                        covariates,
                        theta: raw.theta,
                    },
                )?))
            }
        }
    }

    /// Utility parameters estimated by the dynamic-logit MLE.
    pub fn mle_free(&self, estimate: &EstimateSection) -> Vec<usize> {
        if let Some(f) = &estimate.mle_free {
            return f.clone();
        }
        match self {
            ModelConfig::Rust { .. } => vec![0, 1],
            ModelConfig::Gilleskie { .. } => vec![0, 1, 2, 5],
            ModelConfig::Custom { .. } => vec![],
        }
    }

    /// Utility parameters sampled by the semiparametric posterior.
    pub fn semiparametric_free(&self, estimate: &EstimateSection) -> Vec<usize> {
        if let Some(f) = &estimate.free_theta {
            return f.clone();
        }
        match self {
            ModelConfig::Rust { .. } => vec![],
            ModelConfig::Gilleskie { .. } => vec![5],
            ModelConfig::Custom { .. } => vec![],
        }
    }

    /// Intercept/shock pairings for the renormalized reporting scale.
    pub fn renorm_maps(&self) -> Vec<InterceptMap> {
        match self {
            // The maintenance intercept absorbs the (baseline-differenced)
            // shock mean with a negative sign.
            ModelConfig::Rust { .. } => vec![InterceptMap {
                theta_idx: 0,
                shock_coord: 0,
                sign: -1.0,
            }],
            ModelConfig::Gilleskie { .. } => (0..3)
                .map(|j| InterceptMap {
                    theta_idx: j,
                    shock_coord: j,
                    sign: 1.0,
                })
                .collect(),
            ModelConfig::Custom { .. } => vec![],
        }
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("rust-n3", include_str!("../presets/rust-n3.toml")),
    ("rust-n10", include_str!("../presets/rust-n10.toml")),
    ("gilleskie-mix", include_str!("../presets/gilleskie-mix.toml")),
    ("gilleskie-logit", include_str!("../presets/gilleskie-logit.toml")),
];

/// Loads a configuration from a file path or a built-in preset name, and
/// returns it with the raw text used for hashing.
pub fn load_config(path_or_preset: &str) -> Result<(RunConfig, String)> {
    let text = if let Some((_, body)) = PRESETS.iter().find(|(n, _)| *n == path_or_preset) {
        body.to_string()
    } else {
        let p = Path::new(path_or_preset);
        if !p.exists() {
            bail!(
                "config `{path_or_preset}` is neither a file nor a preset ({})",
                PRESETS
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        std::fs::read_to_string(p).with_context(|| format!("reading {path_or_preset}"))?
    };
    let cfg: RunConfig = toml::from_str(&text).context("parsing configuration")?;
    Ok((cfg, text))
}

/// SHA-256 of the raw configuration text.
pub fn config_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}
