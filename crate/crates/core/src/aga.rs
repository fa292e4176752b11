//! Adaptive gradient ascent: box-projected ascent on a penalized objective
//! where the penalty weight is recomputed every epoch so that the step
//! always points toward lower cost while over budget.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::netfeat::FrequencyMatrix;
use crate::objective::{record_penalty, InfluenceProblem, ObjectiveError, PenaltyKind};
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum AgaError {
    #[error("invalid AGA config: {0}")]
    Config(String),
    #[error("penalty gradient is zero while the cost overrun is {0} > 0")]
    ZeroPenaltyGradient(f64),
    #[error("gradient lengths differ ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("no feasible iterate within {0} epochs")]
    NoFeasibleIterate(usize),
    #[error("real initialization needs observed frequencies (missing on route '{0}')")]
    MissingObserved(String),
    #[error("non-finite objective or gradient at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Zero,
    Real,
    Random,
}

impl std::str::FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zero" => Ok(InitScheme::Zero),
            "real" => Ok(InitScheme::Real),
            "random" => Ok(InitScheme::Random),
            _ => Err(format!("unknown init '{s}' (expected zero, real or random)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgaConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub penalty: PenaltyKind,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub init: InitScheme,
    pub seed: u64,
    /// Compute beta over the coordinates the box leaves free; see
    /// [`corrective_direction`].
    pub box_aware_beta: bool,
}

impl Default for AgaConfig {
    fn default() -> Self {
        AgaConfig {
            gamma: 10.0,
            epsilon: 1000.0,
            penalty: PenaltyKind::Relu,
            min_epochs: 500,
            max_epochs: 2000,
            init: InitScheme::Zero,
            seed: 0,
            box_aware_beta: true,
        }
    }
}

impl AgaConfig {
    pub fn validate(&self) -> Result<(), AgaError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(AgaError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(AgaError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return Err(AgaError::Config(format!(
                "need 1 <= max_epochs and min_epochs <= max_epochs (got {} / {})",
                self.min_epochs, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Penalty weight that makes the ascent direction decrease the overrun:
/// `(o' . c') / (c' . c') + c * epsilon`.
pub fn beta_update(grad_o: &[f64], grad_penalty: &[f64], c_value: f64, epsilon: f64) -> Result<f64, AgaError> {
    if grad_o.len() != grad_penalty.len() {
        return Err(AgaError::Dimension(grad_o.len(), grad_penalty.len()));
    }
    let oc: f64 = grad_o.iter().zip(grad_penalty).map(|(a, b)| a * b).sum();
    let cc: f64 = grad_penalty.iter().map(|v| v * v).sum();
    if cc == 0.0 {
        return Err(AgaError::ZeroPenaltyGradient(c_value));
    }
    Ok(oc / cc + c_value * epsilon)
}

/// Anything AGA can climb: an objective and a cost overrun over a boxed
/// vector of decision variables.
pub trait AscentProblem {
    fn dim(&self) -> usize;

    /// Per-coordinate `(lo, hi)`; infinite bounds are allowed.
    fn bounds(&self) -> Vec<(f64, f64)>;

    /// Records `(o, c)` for the `dim x 1` variable `x`.
    fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), AdError>;
}

impl AscentProblem for InfluenceProblem {
    fn dim(&self) -> usize {
        self.n_routes()
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        self.f_max().into_iter().map(|hi| (0.0, hi)).collect()
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), AdError> {
        let o = self.record_influence(tape, x)?;
        let c = self.record_overrun(tape, x)?;
        Ok((o, c))
    }
}

/// Maximize `x1^2 + x2^2` subject to `(x1-1)^2 + (x2-1)^2 <= 1`.
/// The optimum is `(1 + 1/sqrt 2, 1 + 1/sqrt 2)` with value `3 + 2 sqrt 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiskProblem;

impl DiskProblem {
    pub const OPTIMUM: f64 = 3.0 + 2.0 * std::f64::consts::SQRT_2;

    pub fn objective(x: &[f64]) -> f64 {
        x[0] * x[0] + x[1] * x[1]
    }

    pub fn overrun(x: &[f64]) -> f64 {
        (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2) - 1.0
    }
}

impl AscentProblem for DiskProblem {
    fn dim(&self) -> usize {
        2
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY); 2]
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), AdError> {
        let sq = tape.mul(x, x)?;
        let o = tape.sum(sq)?;
        let one = tape.scalar_const(1.0);
        let d = tape.sub(x, one)?;
        let dd = tape.mul(d, d)?;
        let s = tape.sum(dd)?;
        let c = tape.sub(s, one)?;
        Ok((o, c))
    }
}

/// How the ascent loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// First feasible epoch at or after `min_epochs`.
    Converged,
    /// Hit `max_epochs`; the best feasible iterate seen is returned.
    BestFeasible,
}

#[derive(Clone, Debug)]
pub struct AscentOutcome {
    /// Continuous iterate that was returned (feasible).
    pub x: Vec<f64>,
    pub objective: f64,
    pub cost_overrun: f64,
    pub epoch: usize,
    pub stop: StopReason,
    pub trace: Trace,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// One forward/backward pass: `(o, c, o', penalty')`.
fn evaluate<P: AscentProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    kind: PenaltyKind,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>), AdError> {
    let mut tape = Tape::new();
    let xv = tape.var(Tensor::column(x.to_vec()));
    let (o, c) = problem.record(&mut tape, xv)?;
    let p = record_penalty(&mut tape, c, kind)?;
    let go = tape.gradient(o, &[xv])?.remove(0).into_data();
    let gp = tape.gradient(p, &[xv])?.remove(0).into_data();
    Ok((tape.scalar_value(o), tape.scalar_value(c), go, gp))
}

/// Direction `o' - beta c'` while over budget, with `beta` from
/// [`beta_update`].
///
/// With `box_aware`, coordinates sitting on a bound that the direction would
/// push further out are frozen, repeatedly until none freeze, and `beta` is
/// recomputed over the free set `F` as
/// `(o'_F . c'_F) / |c'_F|^2 + c * epsilon * |c'|^2 / |c'_F|^2`,
/// so the clipped step still lowers the overrun at the rate `-c eps |c'|^2`
/// that the unclipped step would. Without this, clipping can cancel most of
/// the correction and leave the iterate creeping toward the budget from
/// above without ever reaching it.
pub fn corrective_direction(
    x: &[f64],
    bounds: &[(f64, f64)],
    grad_o: &[f64],
    grad_penalty: &[f64],
    c_value: f64,
    epsilon: f64,
    box_aware: bool,
) -> Result<(Vec<f64>, f64), AgaError> {
    let full = beta_update(grad_o, grad_penalty, c_value, epsilon)?;
    let direction = |beta: f64, free: &[bool]| -> Vec<f64> {
        grad_o
            .iter()
            .zip(grad_penalty)
            .zip(free)
            .map(|((o, p), &f)| if f { o - beta * p } else { 0.0 })
            .collect()
    };
    let n = x.len();
    let mut free = vec![true; n];
    if !box_aware {
        return Ok((direction(full, &free), full));
    }
    let norm2: f64 = grad_penalty.iter().map(|v| v * v).sum();
    let mut beta = full;
    loop {
        let d = direction(beta, &free);
        let mut changed = false;
        for i in 0..n {
            let (lo, hi) = bounds[i];
            if free[i] && ((x[i] <= lo && d[i] < 0.0) || (x[i] >= hi && d[i] > 0.0)) {
                free[i] = false;
                changed = true;
            }
        }
        if !changed {
            return Ok((d, beta));
        }
        let (mut oc, mut cc) = (0.0, 0.0);
        for i in (0..n).filter(|&i| free[i]) {
            oc += grad_o[i] * grad_penalty[i];
            cc += grad_penalty[i] * grad_penalty[i];
        }
        if cc == 0.0 {
            // nothing left that can lower the cost
            return Ok((vec![0.0; n], full));
        }
        beta = oc / cc + c_value * epsilon * norm2 / cc;
    }
}

/// The continuous ascent loop, starting from `x0` (projected into the box).
pub fn ascend<P: AscentProblem + ?Sized>(problem: &P, x0: &[f64], cfg: &AgaConfig) -> Result<AscentOutcome, AgaError> {
    cfg.validate()?;
    if x0.len() != problem.dim() {
        return Err(AgaError::Dimension(x0.len(), problem.dim()));
    }
    let bounds = problem.bounds();
    let mut x = x0.to_vec();
    project(&mut x, &bounds);

    let start = Instant::now();
    let mut trace = Trace::new();
    let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
    for epoch in 0..cfg.max_epochs {
        let (o, c, go, gp) = evaluate(problem, &x, cfg.penalty)?;
        if !o.is_finite() || !c.is_finite() || go.iter().chain(&gp).any(|v| !v.is_finite()) {
            return Err(AgaError::NonFinite(epoch));
        }
        let (step, beta) = if c > 0.0 {
            corrective_direction(&x, &bounds, &go, &gp, c, cfg.epsilon, cfg.box_aware_beta)?
        } else {
            (go, 0.0)
        };
        trace.push(TraceRecord {
            epoch,
            objective: o,
            cost_overrun: c,
            beta,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if c <= 0.0 {
            if epoch >= cfg.min_epochs {
                return Ok(AscentOutcome {
                    x,
                    objective: o,
                    cost_overrun: c,
                    epoch,
                    stop: StopReason::Converged,
                    trace,
                });
            }
            if best.as_ref().is_none_or(|b| o > b.0) {
                best = Some((o, c, epoch, x.clone()));
            }
        }
        for (xi, d) in x.iter_mut().zip(&step) {
            *xi += cfg.gamma * d;
        }
        project(&mut x, &bounds);
    }
    let (objective, cost_overrun, epoch, x) = best.ok_or(AgaError::NoFeasibleIterate(cfg.max_epochs))?;
    Ok(AscentOutcome {
        x,
        objective,
        cost_overrun,
        epoch,
        stop: StopReason::BestFeasible,
        trace,
    })
}

/// Problem-scaled step size and margin.
///
/// The default `gamma = 10`, `epsilon = 1000` only make sense when
/// frequencies, costs and passengers are of order one. This picks `gamma` so
/// the first step moves the steepest coordinate by `step_fraction * scale`,
/// and `epsilon` so one corrective step removes about `margin` times the
/// overrun (ReLU) or about `margin` times a typical one-step overrun
/// (Lagrangian).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub step_fraction: f64,
    pub relu_margin: f64,
    pub lagrangian_margin: f64,
    /// Fixed step size; calibrated when absent.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Fixed `epsilon`; calibrated when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            step_fraction: 0.02,
            relu_margin: 1.1,
            lagrangian_margin: 5.0,
            gamma: None,
            epsilon: None,
        }
    }
}

impl Calibration {
    /// `(gamma, epsilon)` for `problem` at `x0`; `scale` is the typical size
    /// of a decision variable.
    pub fn calibrate<P: AscentProblem + ?Sized>(
        &self,
        problem: &P,
        x0: &[f64],
        penalty: PenaltyKind,
        scale: f64,
    ) -> Result<(f64, f64), AgaError> {
        if !(self.step_fraction > 0.0 && self.relu_margin > 0.0 && self.lagrangian_margin > 0.0 && scale > 0.0) {
            return Err(AgaError::Config("calibration parameters must be positive".into()));
        }
        if self.gamma.is_some_and(|g| !(g > 0.0 && g.is_finite())) || self.epsilon.is_some_and(|e| !(e >= 0.0 && e.is_finite())) {
            return Err(AgaError::Config("fixed gamma must be > 0 and epsilon >= 0".into()));
        }
        let mut tape = Tape::new();
        let xv = tape.var(Tensor::column(x0.to_vec()));
        let (o, c) = problem.record(&mut tape, xv)?;
        let go = tape.gradient(o, &[xv])?.remove(0).into_data();
        let gc = tape.gradient(c, &[xv])?.remove(0).into_data();
        let steepest = go.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gamma = if let Some(g) = self.gamma {
            g
        } else if steepest > 0.0 {
            self.step_fraction * scale / steepest
        } else {
            self.step_fraction * scale
        };
        let norm2: f64 = gc.iter().map(|v| v * v).sum();
        if norm2 == 0.0 {
            return Err(AgaError::ZeroPenaltyGradient(tape.scalar_value(c)));
        }
        let epsilon = match penalty {
            _ if self.epsilon.is_some() => self.epsilon.expect("checked"),
            PenaltyKind::Relu => self.relu_margin / (gamma * norm2),
            PenaltyKind::Lagrangian => {
                let drift: f64 = gamma * go.iter().zip(&gc).map(|(a, b)| (a * b).abs()).sum::<f64>();
                let drift = if drift > 0.0 { drift } else { gamma * norm2.sqrt() * scale };
                self.lagrangian_margin / (gamma * norm2 * drift)
            }
        };
        Ok((gamma, epsilon))
    }

    /// `cfg` with `gamma` and `epsilon` calibrated for an influence problem
    /// at its configured starting schedule.
    pub fn apply(&self, problem: &InfluenceProblem, cfg: &AgaConfig) -> Result<AgaConfig, AgaError> {
        let x0 = initialize(problem, cfg.init, cfg.seed)?;
        let fmax = problem.f_max();
        let scale = if fmax.is_empty() {
            1.0
        } else {
            (fmax.iter().sum::<f64>() / fmax.len() as f64).max(1.0)
        };
        let (gamma, epsilon) = self.calibrate(problem, &x0, cfg.penalty, scale)?;
        Ok(AgaConfig {
            gamma,
            epsilon,
            ..cfg.clone()
        })
    }
}

/// Starting schedule for `scheme`.
pub fn initialize(problem: &InfluenceProblem, scheme: InitScheme, seed: u64) -> Result<Vec<f64>, AgaError> {
    match scheme {
        InitScheme::Zero => Ok(vec![0.0; problem.n_routes()]),
        InitScheme::Real => problem
            .routes()
            .iter()
            .map(|r| {
                r.observed_freq
                    .map(|f| f.clamp(0.0, r.f_max))
                    .ok_or_else(|| AgaError::MissingObserved(r.id.clone()))
            })
            .collect(),
        InitScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(problem
                .routes()
                .iter()
                .map(|r| rng.random::<f64>() * 0.1 * r.f_max)
                .collect())
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgaResult {
    /// Integer frequencies per decision route (route-id order).
    pub schedule: Vec<f64>,
    pub matrix: FrequencyMatrix,
    /// Influence of the integer schedule.
    pub objective: f64,
    pub total_cost: f64,
    /// The continuous outcome before rounding.
    pub relaxed: AscentOutcome,
}

/// Runs the ascent on an influence problem and rounds frequencies down.
pub fn optimize(problem: &InfluenceProblem, cfg: &AgaConfig) -> Result<AgaResult, AgaError> {
    let x0 = initialize(problem, cfg.init, cfg.seed)?;
    let relaxed = ascend(problem, &x0, cfg)?;
    let schedule: Vec<f64> = relaxed.x.iter().map(|v| v.floor()).collect();
    let matrix = problem.frequency_matrix(&schedule)?;
    let objective = problem.influence(&schedule)?;
    let total_cost = problem.total_cost(&schedule);
    Ok(AgaResult {
        schedule,
        matrix,
        objective,
        total_cost,
        relaxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_examples() {
        assert_eq!(beta_update(&[3.0, 4.0], &[1.0, 0.0], 2.0, 1.0).unwrap(), 5.0);
        let b = beta_update(&[0.0, 1.0], &[1.0, 0.0], 1e-12, 1.0).unwrap();
        assert!(b.abs() < 1e-11);
        assert!(matches!(
            beta_update(&[1.0], &[0.0], 1.0, 1.0),
            Err(AgaError::ZeroPenaltyGradient(_))
        ));
        assert!(matches!(beta_update(&[1.0], &[1.0, 2.0], 1.0, 1.0), Err(AgaError::Dimension(1, 2))));
    }

    #[test]
    fn config_validation() {
        assert!(AgaConfig::default().validate().is_ok());
        for bad in [
            AgaConfig { gamma: 0.0, ..AgaConfig::default() },
            AgaConfig { epsilon: -1.0, ..AgaConfig::default() },
            AgaConfig { min_epochs: 10, max_epochs: 5, ..AgaConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn disk_records_match_closed_form() {
        let x = [0.2, 1.8];
        let (o, c, go, gp) = evaluate(&DiskProblem, &x, PenaltyKind::Relu).unwrap();
        assert_eq!(o, DiskProblem::objective(&x));
        assert!((c - DiskProblem::overrun(&x)).abs() < 1e-15);
        assert_eq!(go, vec![0.4, 3.6]);
        // c > 0 here, so the relu penalty gradient equals the constraint gradient
        assert!(c > 0.0);
        assert!((gp[0] + 1.6).abs() < 1e-12 && (gp[1] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn disk_converges_from_center() {
        let cfg = AgaConfig {
            gamma: 1e-3,
            epsilon: 275.0,
            min_epochs: 3000,
            max_epochs: 6000,
            ..AgaConfig::default()
        };
        let out = ascend(&DiskProblem, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(out.stop, StopReason::Converged);
        assert!(out.cost_overrun <= 0.0);
        assert!((out.objective - DiskProblem::OPTIMUM).abs() < 1e-2, "{}", out.objective);
    }

    #[test]
    fn infeasible_forever_is_an_error() {
        struct Hopeless;
        impl AscentProblem for Hopeless {
            fn dim(&self) -> usize {
                1
            }
            fn bounds(&self) -> Vec<(f64, f64)> {
                vec![(0.0, 1.0)]
            }
            fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), AdError> {
                let o = tape.sum(x)?;
                let k = tape.scalar_const(5.0);
                let c = tape.add(o, k)?;
                Ok((o, c))
            }
        }
        let cfg = AgaConfig {
            gamma: 0.1,
            epsilon: 1.0,
            min_epochs: 0,
            max_epochs: 20,
            ..AgaConfig::default()
        };
        assert!(matches!(ascend(&Hopeless, &[0.5], &cfg), Err(AgaError::NoFeasibleIterate(20))));
    }
}
