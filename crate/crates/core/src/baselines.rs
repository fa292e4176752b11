//! Reference optimizers: greedy marginal gain and exhaustive grid search.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netfeat::FrequencyMatrix;
use crate::objective::{InfluenceProblem, ObjectiveError};
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error("grid too large: {routes} routes, {points} points (limits: {route_limit} routes, {max_points} points)")]
    GridTooLarge {
        routes: usize,
        points: f64,
        route_limit: usize,
        max_points: u64,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub alpha: u32,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig { alpha: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceConfig {
    pub alpha: u32,
    pub batch_size: usize,
    pub route_limit: usize,
    /// Upper bound on the number of grid points.
    pub max_points: u64,
}

impl Default for BruteForceConfig {
    fn default() -> Self {
        BruteForceConfig {
            alpha: 1,
            batch_size: 1024,
            route_limit: 3,
            max_points: 50_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub schedule: Vec<f64>,
    pub matrix: FrequencyMatrix,
    pub objective: f64,
    pub total_cost: f64,
    /// Number of influence evaluations performed.
    pub evaluations: u64,
    pub trace: Trace,
}

fn check_alpha(alpha: u32) -> Result<f64, BaselineError> {
    if alpha < 1 {
        return Err(BaselineError::Config("alpha must be an integer >= 1".into()));
    }
    Ok(alpha as f64)
}

fn finish(
    problem: &InfluenceProblem,
    schedule: Vec<f64>,
    objective: f64,
    evaluations: u64,
    trace: Trace,
) -> Result<BaselineResult, BaselineError> {
    Ok(BaselineResult {
        matrix: problem.frequency_matrix(&schedule)?,
        total_cost: problem.total_cost(&schedule),
        schedule,
        objective,
        evaluations,
        trace,
    })
}

/// Starts from the empty schedule and repeatedly adds `alpha` flights to the
/// affordable route with the largest influence gain; stops once no
/// affordable step gains anything. Ties go to the first route in id order.
pub fn greedy_optimize(problem: &InfluenceProblem, cfg: &GreedyConfig) -> Result<BaselineResult, BaselineError> {
    let alpha = check_alpha(cfg.alpha)?;
    let start = Instant::now();
    let routes = problem.routes();
    let mut x = vec![0.0; routes.len()];
    let mut spend = 0.0;
    let mut current = problem.influence(&x)?;
    let mut evaluations = 1u64;
    let mut trace = Trace::new();
    let record = |trace: &mut Trace, step: usize, o: f64, spend: f64| {
        trace.push(TraceRecord {
            epoch: step,
            objective: o,
            cost_overrun: spend - problem.budget(),
            beta: 0.0,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    record(&mut trace, 0, current, spend);
    let mut step = 0;
    loop {
        let mut best: Option<(usize, f64, f64)> = None;
        for (k, r) in routes.iter().enumerate() {
            if x[k] + alpha > r.f_max || spend + alpha * r.cost > problem.budget() {
                continue;
            }
            x[k] += alpha;
            let o = problem.influence(&x)?;
            x[k] -= alpha;
            evaluations += 1;
            let gain = o - current;
            if best.is_none_or(|(_, g, _)| gain > g) {
                best = Some((k, gain, o));
            }
        }
        match best {
            Some((k, gain, o)) if gain > 0.0 => {
                x[k] += alpha;
                spend += alpha * routes[k].cost;
                current = o;
                step += 1;
                record(&mut trace, step, current, spend);
            }
            _ => break,
        }
    }
    finish(problem, x, current, evaluations, trace)
}

/// Grid values for one route: multiples of `alpha` up to `f_max`, plus
/// `f_max` itself when it is off the grid.
pub fn route_grid(f_max: f64, alpha: f64) -> Vec<f64> {
    let mut g = Vec::new();
    let mut k = 0u64;
    loop {
        let v = k as f64 * alpha;
        if v > f_max {
            break;
        }
        g.push(v);
        k += 1;
    }
    if g.last() != Some(&f_max) {
        g.push(f_max);
    }
    g
}

/// Exact optimum over the `alpha` grid. Points are enumerated in
/// lexicographic order (last route fastest) and evaluated `batch_size` at a
/// time in parallel; ties keep the earliest point.
pub fn brute_force_optimize(problem: &InfluenceProblem, cfg: &BruteForceConfig) -> Result<BaselineResult, BaselineError> {
    let alpha = check_alpha(cfg.alpha)?;
    if cfg.batch_size == 0 {
        return Err(BaselineError::Config("batch_size must be >= 1".into()));
    }
    let routes = problem.routes();
    let grids: Vec<Vec<f64>> = routes.iter().map(|r| route_grid(r.f_max, alpha)).collect();
    let points: f64 = grids.iter().map(|g| g.len() as f64).product();
    if routes.len() > cfg.route_limit || points > cfg.max_points as f64 {
        return Err(BaselineError::GridTooLarge {
            routes: routes.len(),
            points,
            route_limit: cfg.route_limit,
            max_points: cfg.max_points,
        });
    }
    let total = points as u64;
    let start = Instant::now();
    let mut trace = Trace::new();
    let mut evaluations = 0u64;
    let mut best: Option<(f64, Vec<f64>)> = None;

    let decode = |mut idx: u64| -> Vec<f64> {
        let mut x = vec![0.0; grids.len()];
        for k in (0..grids.len()).rev() {
            let n = grids[k].len() as u64;
            x[k] = grids[k][(idx % n) as usize];
            idx /= n;
        }
        x
    };

    let mut next = 0u64;
    let mut batch_no = 0;
    while next < total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size && next < total {
            let x = decode(next);
            next += 1;
            if problem.cost_overrun(&x) <= 0.0 {
                batch.push(x);
            }
        }
        if batch.is_empty() {
            continue;
        }
        let values = batch
            .par_iter()
            .map(|x| problem.influence(x))
            .collect::<Result<Vec<f64>, _>>()?;
        evaluations += batch.len() as u64;
        for (x, o) in batch.into_iter().zip(values) {
            if best.as_ref().is_none_or(|(b, _)| o > *b) {
                best = Some((o, x));
            }
        }
        let (o, x) = best.as_ref().expect("zero schedule is always feasible");
        trace.push(TraceRecord {
            epoch: batch_no,
            objective: *o,
            cost_overrun: problem.cost_overrun(x),
            beta: 0.0,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        batch_no += 1;
    }
    let (objective, x) = best.expect("zero schedule is always feasible");
    finish(problem, x, objective, evaluations, trace)
}
