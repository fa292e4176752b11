//! Running a named method on a problem and describing the result.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aga::{self, AgaConfig, AgaError, Calibration};
use crate::baselines::{self, BaselineError, BruteForceConfig, GreedyConfig};
use crate::objective::{InfluenceProblem, ObjectiveError, PenaltyKind};
use crate::trace::Trace;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Aga(#[from] AgaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "aga-lagrange")]
    AgaLagrange,
    #[serde(rename = "aga-relu")]
    AgaRelu,
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "brute")]
    Brute,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::AgaLagrange, Method::AgaRelu, Method::Greedy, Method::Brute];

    pub fn name(self) -> &'static str {
        match self {
            Method::AgaLagrange => "aga-lagrange",
            Method::AgaRelu => "aga-relu",
            Method::Greedy => "greedy",
            Method::Brute => "brute",
        }
    }

    pub fn penalty(self) -> Option<PenaltyKind> {
        match self {
            Method::AgaLagrange => Some(PenaltyKind::Lagrangian),
            Method::AgaRelu => Some(PenaltyKind::Relu),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method '{s}' (valid: {})", names.join(", "))
        })
    }
}

/// Everything a method run can be configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    /// `gamma`/`epsilon` here are ignored when `calibration` is set.
    pub aga: AgaConfig,
    pub calibration: Option<Calibration>,
    pub greedy: GreedyConfig,
    pub brute: BruteForceConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            aga: AgaConfig::default(),
            calibration: Some(Calibration::default()),
            greedy: GreedyConfig::default(),
            brute: BruteForceConfig::default(),
        }
    }
}

/// Integer schedule and bookkeeping of one run.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub schedule: Vec<f64>,
    pub objective: f64,
    pub total_cost: f64,
    pub trace: Trace,
    pub runtime_ms: f64,
    /// Echo of the settings that were actually used.
    pub config: serde_json::Value,
    pub evaluations: Option<u64>,
    pub stop: Option<aga::StopReason>,
}

pub fn run_method(problem: &InfluenceProblem, method: Method, cfg: &MethodConfig) -> Result<MethodRun, RunError> {
    let start = Instant::now();
    let run = match method {
        Method::AgaLagrange | Method::AgaRelu => {
            let mut aga_cfg = AgaConfig {
                penalty: method.penalty().expect("aga method"),
                ..cfg.aga.clone()
            };
            if let Some(cal) = &cfg.calibration {
                aga_cfg = cal.apply(problem, &aga_cfg)?;
            }
            let r = aga::optimize(problem, &aga_cfg)?;
            MethodRun {
                method,
                schedule: r.schedule,
                objective: r.objective,
                total_cost: r.total_cost,
                trace: r.relaxed.trace,
                runtime_ms: 0.0,
                config: serde_json::json!({ "aga": aga_cfg, "calibration": cfg.calibration }),
                evaluations: None,
                stop: Some(r.relaxed.stop),
            }
        }
        Method::Greedy => {
            let r = baselines::greedy_optimize(problem, &cfg.greedy)?;
            MethodRun {
                method,
                schedule: r.schedule,
                objective: r.objective,
                total_cost: r.total_cost,
                trace: r.trace,
                runtime_ms: 0.0,
                config: serde_json::json!({ "greedy": cfg.greedy }),
                evaluations: Some(r.evaluations),
                stop: None,
            }
        }
        Method::Brute => {
            let r = baselines::brute_force_optimize(problem, &cfg.brute)?;
            MethodRun {
                method,
                schedule: r.schedule,
                objective: r.objective,
                total_cost: r.total_cost,
                trace: r.trace,
                runtime_ms: 0.0,
                config: serde_json::json!({ "brute": cfg.brute }),
                evaluations: Some(r.evaluations),
                stop: None,
            }
        }
    };
    Ok(MethodRun {
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        ..run
    })
}

/// Git-style object hash (`sha256("blob <len>\0" + bytes)`), hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of the fully resolved problem (models inlined).
pub fn problem_hash(problem: &InfluenceProblem) -> Result<String, RunError> {
    Ok(blob_hash(serde_json::to_string(&problem.to_file())?.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteFrequency {
    pub route: String,
    pub freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub method: Method,
    pub carrier: String,
    pub month: String,
    pub route_count: usize,
    /// Passengers per month in the sampled data.
    pub objective: f64,
    /// `objective / sample_fraction`: passengers at full scale.
    pub objective_scaled: f64,
    pub sample_fraction: f64,
    pub total_cost: f64,
    pub budget: f64,
    pub feasible: bool,
    /// Every frequency of the carrier is zero, so the share models were
    /// evaluated outside anything they could have been trained on.
    pub zero_schedule: bool,
    pub runtime_ms: f64,
    pub schedule: Vec<RouteFrequency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<aga::StopReason>,
    pub config: serde_json::Value,
    pub input_hash: String,
}

impl RunReport {
    pub fn new(problem: &InfluenceProblem, run: &MethodRun) -> Result<Self, RunError> {
        let in_box = problem
            .routes()
            .iter()
            .zip(&run.schedule)
            .all(|(r, &f)| f >= 0.0 && f <= r.f_max && f.fract() == 0.0);
        let zero_schedule =
            run.schedule.iter().all(|&f| f == 0.0) && problem.fixed().iter().all(|&(_, _, f)| f == 0.0);
        Ok(RunReport {
            version: REPORT_FORMAT_VERSION,
            method: run.method,
            carrier: problem.carrier().to_string(),
            month: problem.month().to_string(),
            route_count: problem.n_routes(),
            objective: run.objective,
            objective_scaled: run.objective / problem.sample_fraction(),
            sample_fraction: problem.sample_fraction(),
            total_cost: run.total_cost,
            budget: problem.budget(),
            feasible: in_box && run.total_cost <= problem.budget(),
            zero_schedule,
            runtime_ms: run.runtime_ms,
            schedule: problem
                .routes()
                .iter()
                .zip(&run.schedule)
                .map(|(r, &f)| RouteFrequency {
                    route: r.id.clone(),
                    freq: f,
                })
                .collect(),
            evaluations: run.evaluations,
            stop: run.stop,
            config: run.config.clone(),
            input_hash: problem_hash(problem)?,
        })
    }

    /// Drops wall-clock readings.
    pub fn zero_times(&mut self) {
        self.runtime_ms = 0.0;
    }

    pub fn to_json(&self) -> Result<String, RunError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One row of a benchmark table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub problem: String,
    pub method: Method,
    pub repetition: usize,
    pub route_count: usize,
    pub objective: f64,
    pub objective_scaled: f64,
    pub total_cost: f64,
    pub budget: f64,
    pub feasible: bool,
    pub runtime_ms: f64,
}

impl BenchmarkRow {
    pub fn from_report(problem: &str, repetition: usize, r: &RunReport) -> Self {
        BenchmarkRow {
            problem: problem.to_string(),
            method: r.method,
            repetition,
            route_count: r.route_count,
            objective: r.objective,
            objective_scaled: r.objective_scaled,
            total_cost: r.total_cost,
            budget: r.budget,
            feasible: r.feasible,
            runtime_ms: r.runtime_ms,
        }
    }
}

pub fn write_benchmark_csv<W: io::Write>(w: W, rows: &[BenchmarkRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_benchmark_csv<R: io::Read>(r: R) -> Result<Vec<BenchmarkRow>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}
