//! Dynamic discrete choice model specification, the two application
//! builders, and panel/count data generation.
//!
//! A model has `K` observed states, actions `0..=J` (action 0 is the
//! baseline that carries no shock under the `epsilon_0 = 0` normalization),
//! a discount factor `beta`, one `K x K` row-stochastic transition matrix
//! per action, and per-period utilities that are linear in the parameter
//! vector: `u(x, d) = base[x, d] + sum_i theta_i * Z_i[x, d]`.

use crate::error::{Error, Result};
use crate::solver::CcpMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const ROW_SUM_TOL: f64 = 1e-12;

/// Linear-in-parameters utility specification.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    /// Fixed part of the utilities, `K x (J+1)`.
    pub base: DMatrix<f64>,
    /// Covariate matrix per parameter, each `K x (J+1)`.
    pub covariates: Vec<DMatrix<f64>>,
    /// Reference parameter values (data-generating or fixed estimates).
    pub theta: Vec<f64>,
}

impl UtilitySpec {
    /// Utilities at the stored parameter values.
    pub fn utilities(&self) -> DMatrix<f64> {
        self.utilities_with(&self.theta)
    }

    /// Utilities at the supplied parameter values.
    pub fn utilities_with(&self, theta: &[f64]) -> DMatrix<f64> {
        assert_eq!(theta.len(), self.covariates.len(), "theta length");
        let mut u = self.base.clone();
        for (t, z) in theta.iter().zip(&self.covariates) {
            u += z * *t;
        }
        u
    }
}

/// Finite-state, finite-action dynamic discrete choice model.
#[derive(Debug, Clone, PartialEq)]
pub struct DDCModel {
    pub n_states: usize,
    /// Number of non-baseline actions `J`; actions are `0..=J`.
    pub n_actions: usize,
    pub beta: f64,
    /// Transition matrix per action, `J+1` matrices of size `K x K`.
    pub transitions: Vec<DMatrix<f64>>,
    pub utility: UtilitySpec,
}

impl DDCModel {
    pub fn new(
        beta: f64,
        transitions: Vec<DMatrix<f64>>,
        utility: UtilitySpec,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::InvalidParameter("model needs >= 1 action".into()));
        }
        let k = transitions[0].nrows();
        let n_actions = transitions.len() - 1;
        if n_actions == 0 {
            return Err(Error::InvalidParameter(
                "model needs at least one non-baseline action".into(),
            ));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!(
                "discount factor must be in [0,1), got {beta}"
            )));
        }
        for (d, g) in transitions.iter().enumerate() {
            if g.nrows() != k || g.ncols() != k {
                return Err(Error::DimensionMismatch {
                    context: "transition matrix shape",
                    expected: k,
                    got: g.nrows().max(g.ncols()),
                });
            }
            for x in 0..k {
                let mut sum = 0.0;
                for y in 0..k {
                    let p = g[(x, y)];
                    if p < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "negative transition probability at (d={d}, x={x}, y={y})"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "transition row (d={d}, x={x}) sums to {sum}"
                    )));
                }
            }
        }
        if utility.base.nrows() != k || utility.base.ncols() != n_actions + 1 {
            return Err(Error::DimensionMismatch {
                context: "utility base shape",
                expected: k * (n_actions + 1),
                got: utility.base.nrows() * utility.base.ncols(),
            });
        }
        if utility.theta.len() != utility.covariates.len() {
            return Err(Error::DimensionMismatch {
                context: "utility theta length",
                expected: utility.covariates.len(),
                got: utility.theta.len(),
            });
        }
        Ok(Self {
            n_states: k,
            n_actions,
            beta,
            transitions,
            utility,
        })
    }

    pub fn utilities(&self) -> DMatrix<f64> {
        self.utility.utilities()
    }
}

/// Builds the bus-engine replacement model: binary choice over keeping
/// (`d = 0`, maintenance cost `theta0 + theta1 x`) or replacing (`d = 1`,
/// utility 0, mileage reset to 1). Mileage advances by 0/1/2 with
/// probabilities `(theta2, theta3, 1 - theta2 - theta3)`, truncated at `K`
/// by piling the residual mass onto the last state.
pub fn build_rust_model(
    theta0: f64,
    theta1: f64,
    theta2: f64,
    theta3: f64,
    beta: f64,
    n_states: usize,
) -> Result<DDCModel> {
    if theta2 < 0.0 || theta3 < 0.0 || theta2 + theta3 > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "mileage increment probabilities invalid: ({theta2}, {theta3})"
        )));
    }
    if n_states < 3 {
        return Err(Error::InvalidParameter("need >= 3 mileage states".into()));
    }
    let k = n_states;
    let p = [theta2, theta3, 1.0 - theta2 - theta3];
    let mut g0 = DMatrix::zeros(k, k);
    for x in 0..k {
        for (step, &prob) in p.iter().enumerate() {
            let y = (x + step).min(k - 1);
            g0[(x, y)] += prob;
        }
    }
    let mut g1 = DMatrix::zeros(k, k);
    for x in 0..k {
        g1[(x, 0)] = 1.0;
    }
    // u(x, 0) = theta0 + theta1 * x with mileage x in 1..=K; u(x, 1) = 0.
    let base = DMatrix::zeros(k, 2);
    let mut z0 = DMatrix::zeros(k, 2);
    let mut z1 = DMatrix::zeros(k, 2);
    for x in 0..k {
        z0[(x, 0)] = 1.0;
        z1[(x, 0)] = (x + 1) as f64;
    }
    DDCModel::new(
        beta,
        vec![g0, g1],
        UtilitySpec {
            base,
            covariates: vec![z0, z1],
            theta: vec![theta0, theta1],
        },
    )
}

/// State transition specification for the illness-episode model: either
/// logistic-index coefficients or explicit probability tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GilleskieTransitions {
    /// `pi_w(x, d) = logistic(eta' E(x, d) + xi_h)` with
    /// `E = (1, v', v'^2, a', a'^2, v'a', t, t^2, t^3)`, and
    /// `pi_s = 1 / (1 + exp(delta_h))`.
    Coefficients {
        eta: [f64; 9],
        delta_h: f64,
        xi_h: f64,
    },
    /// Explicit probabilities: `pi_w[state][action]` is read at sick,
    /// non-terminal states only.
    Tables { pi_s: f64, pi_w: Vec<Vec<f64>> },
}

/// Parameters of the illness-episode model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GilleskieParams {
    /// Maximum episode length `T`.
    pub t_max: usize,
    /// Per-period labor income.
    pub y: f64,
    /// Out-of-pocket cost of a medical visit.
    pub pc: f64,
    /// Sick-leave coverage rate, in (0, 1).
    pub l: f64,
    /// Sick-leave replacement curve coefficients.
    pub phi1: f64,
    pub phi2: f64,
    /// Utility coefficients `theta1..theta6`.
    pub theta: [f64; 6],
    pub transitions: GilleskieTransitions,
}

impl GilleskieParams {
    /// Data-generating values for the bundled illness-episode experiment:
    /// an 8-period episode with income 100, visit cost 15, coverage 0.7,
    /// and utility coefficients `(-1.25, -0.83, -2.08, -10000, 1, 0.0469)`.
    ///
    /// The transition coefficients are placeholder values chosen to give a
    /// realistic illness process (slow recovery that speeds up late in an
    /// episode, slightly helped by doctor visits); they are configuration,
    /// not estimates.
    pub fn default_dgp() -> Self {
        Self {
            t_max: 8,
            y: 100.0,
            pc: 15.0,
            l: 0.7,
            phi1: 5.6,
            phi2: -1.75,
            theta: [-1.25, -0.83, -2.08, -10000.0, 1.0, 0.0469],
            transitions: GilleskieTransitions::Coefficients {
                eta: [-5.0, 0.05, -0.06, 0.0, -0.02, 0.02, 0.4, 0.0, 0.0],
                delta_h: 1.4,
                xi_h: 0.0,
            },
        }
    }

    /// The two-component shock mixture used by the data-generating process
    /// of the illness-episode experiment.
    pub fn dgp_mixture() -> crate::mixture::GumbelMixture {
        crate::mixture::GumbelMixture::new(
            vec![0.5568, 0.4432],
            vec![
                vec![-0.4683, 3.4628, -0.0914],
                vec![0.9798, -2.2437, 1.3496],
            ],
            vec![3.7045, 0.6378],
            1.0,
        )
        .expect("valid mixture")
    }
}

/// The illness-episode model together with its state table.
#[derive(Debug, Clone, PartialEq)]
pub struct GilleskieModel {
    pub model: DDCModel,
    pub params: GilleskieParams,
    /// `(t, v, a)` per state index.
    pub states: Vec<(usize, usize, usize)>,
    /// Index of the well state `(0, 0, 0)`.
    pub well: usize,
    /// Index of the illness-onset state `(1, 0, 0)`.
    pub onset: usize,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Builds the multinomial medical-care-use model. States enumerate
/// `(t, v, a)`: elapsed illness length, accumulated doctor visits, and
/// accumulated work absences, giving `K = 1 + T(T+1)(2T+1)/6` states.
/// Actions: 0 work, 1 work+visit, 2 absent, 3 absent+visit.
pub fn build_gilleskie_model(params: GilleskieParams, beta: f64) -> Result<GilleskieModel> {
    let t_max = params.t_max;
    if t_max < 2 {
        return Err(Error::InvalidParameter("episode length must be >= 2".into()));
    }
    if !(0.0 < params.l && params.l < 1.0) {
        return Err(Error::InvalidParameter("coverage rate must be in (0,1)".into()));
    }
    if params.y <= 0.0 {
        return Err(Error::InvalidParameter("income must be positive".into()));
    }

    // State table: (0,0,0), (1,0,0), then (t,v,a) for t = 2..=T with
    // v, a in 0..t, v-major.
    let mut states = vec![(0, 0, 0), (1, 0, 0)];
    for t in 2..=t_max {
        for v in 0..t {
            for a in 0..t {
                states.push((t, v, a));
            }
        }
    }
    let k = states.len();
    debug_assert_eq!(k, 1 + t_max * (t_max + 1) * (2 * t_max + 1) / 6);
    let index_of = |t: usize, v: usize, a: usize| -> usize {
        if t == 0 {
            0
        } else if t == 1 {
            1
        } else {
            2 + (t - 1) * t * (2 * t - 1) / 6 - 1 + v * t + a
        }
    };

    let pi_s = match &params.transitions {
        GilleskieTransitions::Coefficients { delta_h, .. } => logistic(-delta_h),
        GilleskieTransitions::Tables { pi_s, .. } => *pi_s,
    };
    if !(0.0..=1.0).contains(&pi_s) {
        return Err(Error::InvalidParameter(format!(
            "illness onset probability {pi_s} outside [0,1]"
        )));
    }
    let pi_w = |x: usize, d: usize| -> Result<f64> {
        let (t, v, a) = states[x];
        let v_next = v + usize::from(d == 1 || d == 3);
        let a_next = a + usize::from(d == 2 || d == 3);
        let p = match &params.transitions {
            GilleskieTransitions::Coefficients { eta, xi_h, .. } => {
                let (vn, an, tt) = (v_next as f64, a_next as f64, t as f64);
                logistic(
                    eta[0]
                        + eta[1] * vn
                        + eta[2] * vn * vn
                        + eta[3] * an
                        + eta[4] * an * an
                        + eta[5] * vn * an
                        + eta[6] * tt
                        + eta[7] * tt * tt
                        + eta[8] * tt * tt * tt
                        + xi_h,
                )
            }
            GilleskieTransitions::Tables { pi_w, .. } => *pi_w
                .get(x)
                .and_then(|row| row.get(d))
                .ok_or_else(|| Error::InvalidParameter("recovery table too small".into()))?,
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "recovery probability {p} at state {x} action {d} outside [0,1]"
            )));
        }
        Ok(p)
    };

    let mut transitions = Vec::with_capacity(4);
    for d in 0..4 {
        let mut g = DMatrix::zeros(k, k);
        for x in 0..k {
            let (t, v, a) = states[x];
            if t == 0 {
                g[(x, 0)] = 1.0 - pi_s;
                g[(x, 1)] = pi_s;
            } else if t == t_max || v == t_max - 1 || a == t_max - 1 {
                // Forced end of the episode.
                g[(x, 0)] = 1.0;
            } else {
                let p_rec = pi_w(x, d)?;
                let v_next = v + usize::from(d == 1 || d == 3);
                let a_next = a + usize::from(d == 2 || d == 3);
                g[(x, 0)] += p_rec;
                g[(x, index_of(t + 1, v_next, a_next))] += 1.0 - p_rec;
            }
        }
        transitions.push(g);
    }

    // Consumption: C(x,d) = Y - [PC 1(d in {1,3})
    //   + Y (1 - L Phi(x,d)) 1(d in {2,3})] 1(t>0),
    // Phi = logistic(phi1 + phi2 a'(x,d)).
    let consumption = |x: usize, d: usize| -> f64 {
        let (t, _v, a) = states[x];
        if t == 0 {
            return params.y;
        }
        let a_next = (a + usize::from(d == 2 || d == 3)) as f64;
        let phi = logistic(params.phi1 + params.phi2 * a_next);
        let visit_cost = if d == 1 || d == 3 { params.pc } else { 0.0 };
        let absence_cost = if d == 2 || d == 3 {
            params.y * (1.0 - params.l * phi)
        } else {
            0.0
        };
        params.y - visit_cost - absence_cost
    };

    // Covariates for theta1..theta6.
    let base = DMatrix::zeros(k, 4);
    let mut covs: Vec<DMatrix<f64>> = (0..6).map(|_| DMatrix::zeros(k, 4)).collect();
    for x in 0..k {
        let (t, _, _) = states[x];
        let sick = t > 0;
        for d in 1..=3 {
            covs[d - 1][(x, d)] = 1.0; // theta1..theta3 intercepts
            if !sick {
                covs[3][(x, d)] = 1.0; // theta4 forces d=0 at t=0
            }
        }
        if !sick {
            covs[4][(x, 0)] = 1.0; // theta5
        }
        if sick {
            for d in 0..4 {
                covs[5][(x, d)] = consumption(x, d); // theta6
            }
        }
    }

    let model = DDCModel::new(
        beta,
        transitions,
        UtilitySpec {
            base,
            covariates: covs,
            theta: params.theta.to_vec(),
        },
    )?;
    Ok(GilleskieModel {
        model,
        params,
        states,
        well: 0,
        onset: 1,
    })
}

/// Choice counts `n_{dx}`, real-valued to support fractional designs.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelCounts {
    /// `K x (J+1)`: `counts[(x, d)]` is the weight on action `d` at state `x`.
    pub counts: DMatrix<f64>,
}

impl PanelCounts {
    pub fn new(counts: DMatrix<f64>) -> Result<Self> {
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::InvalidParameter("counts must be finite and >= 0".into()));
        }
        if !counts.iter().any(|&c| c > 0.0) {
            return Err(Error::InvalidParameter("counts must have a positive entry".into()));
        }
        Ok(Self { counts })
    }

    pub fn n_states(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_choices(&self) -> usize {
        self.counts.ncols()
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }

    /// Total weight observed at state `x`.
    pub fn occupancy(&self, x: usize) -> f64 {
        self.counts.row(x).sum()
    }

    /// Serializes as CSV `d,x,n` with 1-based states.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "d,x,n")?;
        for d in 0..self.n_choices() {
            for x in 0..self.n_states() {
                writeln!(w, "{},{},{}", d, x + 1, self.counts[(x, d)])?;
            }
        }
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P, n_states: usize, n_choices: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let mut counts = DMatrix::zeros(n_states, n_choices);
        for rec in rdr.records() {
            let rec = rec?;
            let d: usize = rec[0].parse().map_err(|_| bad_csv("d"))?;
            let x: usize = rec[1].parse().map_err(|_| bad_csv("x"))?;
            let n: f64 = rec[2].parse().map_err(|_| bad_csv("n"))?;
            if d >= n_choices || x == 0 || x > n_states {
                return Err(Error::InvalidParameter(format!(
                    "count record out of range: d={d}, x={x}"
                )));
            }
            counts[(x - 1, d)] = n;
        }
        Self::new(counts)
    }
}

fn bad_csv(field: &str) -> Error {
    Error::InvalidParameter(format!("malformed CSV field `{field}`"))
}

/// Converts a CCP matrix into the fractional count design `n_{dx} = p(d|x) N`.
pub fn ccps_to_counts(ccp: &CcpMatrix, n_per_state: f64) -> Result<PanelCounts> {
    PanelCounts::new(ccp.probs.map(|p| p * n_per_state))
}

/// One simulated decision record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub individual: usize,
    pub period: usize,
    /// 0-based state index.
    pub state: usize,
    pub action: usize,
}

/// Initial state law for panel simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(usize),
    Distribution(Vec<f64>),
}

fn sample_categorical<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Forward-simulates `n` individuals for up to `t_periods` decision periods.
///
/// Choices are drawn from `ccp` rows and states evolve through the chosen
/// action's transition matrix. If `stop_state` is given, an individual's
/// record ends once the chain enters that state (used to simulate single
/// illness episodes).
pub fn simulate_panel<R: Rng + ?Sized>(
    model: &DDCModel,
    ccp: &CcpMatrix,
    n: usize,
    t_periods: usize,
    initial: &InitialState,
    stop_state: Option<usize>,
    rng: &mut R,
) -> Result<(Vec<PanelRecord>, PanelCounts)> {
    if ccp.probs.nrows() != model.n_states || ccp.probs.ncols() != model.n_actions + 1 {
        return Err(Error::DimensionMismatch {
            context: "CCP matrix shape",
            expected: model.n_states * (model.n_actions + 1),
            got: ccp.probs.nrows() * ccp.probs.ncols(),
        });
    }
    let mut records = Vec::new();
    let mut counts = DMatrix::zeros(model.n_states, model.n_actions + 1);
    for i in 0..n {
        let mut x = match initial {
            InitialState::Fixed(s) => {
                if *s >= model.n_states {
                    return Err(Error::InvalidParameter("initial state out of range".into()));
                }
                *s
            }
            InitialState::Distribution(law) => {
                if law.len() != model.n_states {
                    return Err(Error::DimensionMismatch {
                        context: "initial state law",
                        expected: model.n_states,
                        got: law.len(),
                    });
                }
                sample_categorical(law.iter().cloned(), rng)
            }
        };
        for t in 1..=t_periods {
            let d = sample_categorical(ccp.probs.row(x).iter().cloned(), rng);
            records.push(PanelRecord {
                individual: i,
                period: t,
                state: x,
                action: d,
            });
            counts[(x, d)] += 1.0;
            let next = sample_categorical(model.transitions[d].row(x).iter().cloned(), rng);
            if Some(next) == stop_state {
                break;
            }
            x = next;
        }
    }
    Ok((records, PanelCounts::new(counts)?))
}

/// Serializes panel records as CSV `i,t,x,d` with 1-based states.
pub fn write_panel_csv<W: Write>(records: &[PanelRecord], mut w: W) -> Result<()> {
    writeln!(w, "i,t,x,d")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.individual, r.period, r.state + 1, r.action)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn rust_dgp() -> DDCModel {
        build_rust_model(5.0727, -0.002293, 0.3919, 0.5953, 0.999, 90).unwrap()
    }

    pub(crate) fn gilleskie_dgp_params() -> GilleskieParams {
        GilleskieParams::default_dgp()
    }

    #[test]
    fn rust_builder_rows_stochastic_and_reset() {
        let m = rust_dgp();
        assert_eq!(m.n_states, 90);
        assert_eq!(m.n_actions, 1);
        for g in &m.transitions {
            for x in 0..90 {
                assert_relative_eq!(g.row(x).sum(), 1.0, epsilon = 1e-12);
            }
        }
        for x in 0..90 {
            assert_eq!(m.transitions[1][(x, 0)], 1.0);
        }
        // Truncation piles residual mass onto the last state.
        assert_relative_eq!(m.transitions[0][(88, 89)], 1.0 - 0.3919, epsilon = 1e-12);
        assert_relative_eq!(m.transitions[0][(89, 89)], 1.0, epsilon = 1e-12);
        // Utilities: u(x,0) = theta0 + theta1 x, u(x,1) = 0, mileage 1-based.
        let u = m.utilities();
        assert_relative_eq!(u[(0, 0)], 5.0727 - 0.002293, epsilon = 1e-12);
        assert_relative_eq!(u[(89, 0)], 5.0727 - 0.002293 * 90.0, epsilon = 1e-12);
        assert_eq!(u[(17, 1)], 0.0);
    }

    #[test]
    fn rust_builder_rejects_bad_probabilities() {
        assert!(build_rust_model(5.0, 0.0, 0.7, 0.5, 0.99, 90).is_err());
        assert!(build_rust_model(5.0, 0.0, -0.1, 0.5, 0.99, 90).is_err());
    }

    #[test]
    fn gilleskie_t2_matches_enumerated_transitions() {
        let mut p = gilleskie_dgp_params();
        p.t_max = 2;
        let gm = build_gilleskie_model(p, 0.9).unwrap();
        assert_eq!(gm.model.n_states, 6);
        assert_eq!(
            gm.states,
            vec![(0, 0, 0), (1, 0, 0), (2, 0, 0), (2, 0, 1), (2, 1, 0), (2, 1, 1)]
        );
        // From onset (1,0,0): d=1 sends surviving mass to (2,1,0) = index 4.
        let g1 = &gm.model.transitions[1];
        let p_rec = g1[(1, 0)];
        assert!(p_rec > 0.0 && p_rec < 1.0);
        assert_relative_eq!(g1[(1, 4)], 1.0 - p_rec, epsilon = 1e-12);
        // d=2 goes to (2,0,1) = index 3; d=3 to (2,1,1) = 5; d=0 to (2,0,0) = 2.
        assert!(gm.model.transitions[2][(1, 3)] > 0.0);
        assert!(gm.model.transitions[3][(1, 5)] > 0.0);
        assert!(gm.model.transitions[0][(1, 2)] > 0.0);
        // Episode end: every t=2 state returns to well with probability 1.
        for d in 0..4 {
            for x in 2..6 {
                assert_eq!(gm.model.transitions[d][(x, 0)], 1.0);
            }
        }
        // Well state transitions are action-invariant: pi_s = 1/(1+e^{delta_h}).
        for d in 0..4 {
            assert_relative_eq!(
                gm.model.transitions[d][(0, 1)],
                1.0 / (1.0 + 1.4_f64.exp()),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn gilleskie_state_count_t8() {
        let gm = build_gilleskie_model(gilleskie_dgp_params(), 0.9).unwrap();
        assert_eq!(gm.model.n_states, 205);
        assert_eq!(gm.states.len(), 205);
        // Spot-check the index arithmetic through the state table.
        for (i, &(t, v, a)) in gm.states.iter().enumerate() {
            assert!(t <= 8 && (t == 0 || (v < t && a < t)), "state {i} = ({t},{v},{a})");
        }
    }

    #[test]
    fn gilleskie_theta6_zero_gives_state_invariant_sick_utilities() {
        let mut p = gilleskie_dgp_params();
        p.theta[5] = 0.0;
        let gm = build_gilleskie_model(p, 0.9).unwrap();
        let u = gm.model.utilities();
        for x in 1..gm.model.n_states {
            for d in 0..4 {
                assert_relative_eq!(u[(x, d)], u[(1, d)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gilleskie_consumption_in_utilities() {
        let p = gilleskie_dgp_params();
        let gm = build_gilleskie_model(p.clone(), 0.9).unwrap();
        let u = gm.model.utilities();
        // At a sick state: u(x,1) - theta1 = theta6 (Y - PC).
        assert_relative_eq!(
            u[(1, 1)] - p.theta[0],
            p.theta[5] * (p.y - p.pc),
            epsilon = 1e-10
        );
        // d=2 at onset: C = Y L Phi with a' = 1.
        let phi = logistic(p.phi1 + p.phi2);
        assert_relative_eq!(
            u[(1, 2)] - p.theta[1],
            p.theta[5] * p.y * p.l * phi,
            epsilon = 1e-10
        );
        // Well state: intercepts only.
        assert_relative_eq!(u[(0, 0)], p.theta[4], epsilon = 1e-12);
        assert_relative_eq!(u[(0, 3)], p.theta[2] + p.theta[3], epsilon = 1e-9);
    }

    #[test]
    fn gilleskie_all_states_reachable() {
        let gm = build_gilleskie_model(gilleskie_dgp_params(), 0.9).unwrap();
        let k = gm.model.n_states;
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for g in &gm.model.transitions {
                for y in 0..k {
                    if g[(x, y)] > 0.0 && !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "unreachable states exist");
    }

    #[test]
    fn counts_from_ccps() {
        let probs = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.6, 0.4]);
        let ccp = CcpMatrix::new(probs).unwrap();
        let counts = ccps_to_counts(&ccp, 10.0).unwrap();
        for x in 0..2 {
            assert_relative_eq!(counts.occupancy(x), 10.0, epsilon = 1e-12);
        }
        assert!(ccps_to_counts(&ccp, 0.0).is_err());
    }

    #[test]
    fn panel_counts_validation_and_csv_round_trip() {
        let bad = DMatrix::zeros(2, 2);
        assert!(PanelCounts::new(bad).is_err());
        let counts =
            PanelCounts::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.5, 0.0, 3.0])).unwrap();
        let mut buf = Vec::new();
        counts.write_csv(&mut buf).unwrap();
        let tmp = std::env::temp_dir().join("ddcmix_counts_test.csv");
        std::fs::write(&tmp, &buf).unwrap();
        let back = PanelCounts::read_csv(&tmp, 2, 2).unwrap();
        assert_eq!(back.counts, counts.counts);
        std::fs::remove_file(&tmp).ok();
    }

    #[test]
    fn simulate_panel_degenerate_ccp_always_picks_zero() {
        let m = rust_dgp();
        let mut probs = DMatrix::zeros(90, 2);
        for x in 0..90 {
            probs[(x, 0)] = 1.0;
        }
        let ccp = CcpMatrix::new(probs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (records, _) =
            simulate_panel(&m, &ccp, 50, 10, &InitialState::Fixed(0), None, &mut rng).unwrap();
        assert!(records.iter().all(|r| r.action == 0));
        assert_eq!(records.len(), 500);
    }

    #[test]
    fn simulate_panel_is_deterministic() {
        let m = rust_dgp();
        let mut probs = DMatrix::zeros(90, 2);
        for x in 0..90 {
            probs[(x, 0)] = 0.9;
            probs[(x, 1)] = 0.1;
        }
        let ccp = CcpMatrix::new(probs).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            simulate_panel(&m, &ccp, 20, 8, &InitialState::Fixed(0), None, &mut rng)
                .unwrap()
                .0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn simulate_panel_matches_occupancy_law() {
        // Three-state chain; verify empirical state frequencies at each
        // period against the exact law propagated by the combined kernel.
        let g0 = DMatrix::from_row_slice(
            3,
            3,
            &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5],
        );
        let g1 = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        );
        let base = DMatrix::zeros(3, 2);
        let model = DDCModel::new(
            0.9,
            vec![g0.clone(), g1.clone()],
            UtilitySpec {
                base,
                covariates: vec![],
                theta: vec![],
            },
        )
        .unwrap();
        let probs = DMatrix::from_row_slice(3, 2, &[0.7, 0.3, 0.4, 0.6, 0.9, 0.1]);
        let ccp = CcpMatrix::new(probs.clone()).unwrap();

        let t_periods = 6;
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let (records, _) = simulate_panel(
            &model,
            &ccp,
            n,
            t_periods,
            &InitialState::Fixed(0),
            None,
            &mut rng,
        )
        .unwrap();

        // Exact law: row vector propagated by M[x,y] = sum_d p(d|x) G^d[x,y].
        let mut kernel = DMatrix::zeros(3, 3);
        for x in 0..3 {
            for y in 0..3 {
                kernel[(x, y)] = probs[(x, 0)] * g0[(x, y)] + probs[(x, 1)] * g1[(x, y)];
            }
        }
        let mut law = nalgebra::RowDVector::from_row_slice(&[1.0, 0.0, 0.0]);
        for t in 1..=t_periods {
            let mut freq = [0.0; 3];
            for r in records.iter().filter(|r| r.period == t) {
                freq[r.state] += 1.0 / n as f64;
            }
            for s in 0..3 {
                assert!(
                    (freq[s] - law[s]).abs() < 0.01,
                    "period {t} state {s}: {} vs {}",
                    freq[s],
                    law[s]
                );
            }
            law = &law * &kernel;
        }
    }
}
