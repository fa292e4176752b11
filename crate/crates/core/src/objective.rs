//! Market influence, budget overrun and the penalized objectives.
//!
//! For a focal carrier with per-route frequencies `x`:
//!
//! * influence `o(x) = sum_r demand_r * m_r(x)`, where every share is computed
//!   from network features of the whole schedule, so routes interact;
//! * overrun `c(x) = sum_r cost_r * x_r - budget`;
//! * `o - beta * c^2 / 2` (Lagrangian-squared) or `o - beta * relu(c)`.
//!
//! Competitor features and the focal carrier's non-network features are held
//! at their snapshot values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Shape, Tape, Tensor, Var};
use crate::netfeat::{
    network_feature_rows, FeatureVector, FrequencyMatrix, NetError, Network, PageRankConfig, StaticFeatures,
    N_FEATURES,
};
use crate::sharemodel::{ModelError, ShareModel};

pub const PROBLEM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("no share model for route '{0}'")]
    MissingModel(String),
    #[error("route '{0}' is not part of the network")]
    UnknownRoute(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("schedule has {got} entries, problem has {want} routes")]
    ScheduleLength { got: usize, want: usize },
    #[error("delta must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("problem file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("problem json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `beta * c^2 / 2`
    Lagrangian,
    /// `beta * max(0, c)`
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Competitor {
    pub carrier: String,
    pub features: FeatureVector,
}

/// One decision route of the focal carrier.
#[derive(Clone, Debug)]
pub struct ProblemRoute {
    pub id: String,
    pub src: usize,
    pub dst: usize,
    pub demand: f64,
    pub cost: f64,
    pub f_max: f64,
    pub observed_freq: Option<f64>,
    pub statics: StaticFeatures,
    pub competitors: Vec<Competitor>,
    pub model: Arc<ShareModel>,
    competitor_scores: Vec<f64>,
}

impl ProblemRoute {
    pub fn competitor_scores(&self) -> &[f64] {
        &self.competitor_scores
    }
}

/// Budgeted influence maximization for one carrier.
#[derive(Clone, Debug)]
pub struct InfluenceProblem {
    network: Network,
    carrier: String,
    month: String,
    routes: Vec<ProblemRoute>,
    fixed: Vec<(usize, usize, f64)>,
    budget: f64,
    sample_fraction: f64,
    pagerank: PageRankConfig,
}

/// Serialized problem description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub version: u32,
    pub carrier: String,
    #[serde(default)]
    pub month: String,
    pub budget: f64,
    #[serde(default = "one")]
    pub sample_fraction: f64,
    pub airports: Vec<String>,
    /// Every structural route of the market (the network mask).
    pub network_routes: Vec<RouteRef>,
    /// Decision routes of the focal carrier.
    pub routes: Vec<RouteSpec>,
    /// Focal-carrier frequencies held fixed on non-decision routes.
    #[serde(default)]
    pub fixed: Vec<FixedFrequency>,
    #[serde(default)]
    pub pagerank: PageRankConfig,
    /// Directory of `<route>.json` model files, relative to the problem file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_dir: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub models: BTreeMap<String, ShareModel>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRef {
    pub id: String,
    pub src: String,
    pub dst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub id: String,
    pub demand: f64,
    pub cost: f64,
    pub f_max: f64,
    #[serde(default)]
    pub observed_freq: Option<f64>,
    pub static_features: StaticFeatures,
    pub competitors: Vec<Competitor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedFrequency {
    pub route: String,
    pub freq: f64,
}

/// Location of a route's model file inside a model directory.
pub fn model_path(dir: &Path, route: &str) -> PathBuf {
    dir.join(format!("{route}.json"))
}

impl ProblemFile {
    pub fn load(path: &Path) -> Result<Self, ObjectiveError> {
        let text = std::fs::read_to_string(path).map_err(|source| ObjectiveError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ObjectiveError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|source| ObjectiveError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Collects inline models, then fills the rest from `model_dir` (or the
    /// override) resolved against `base`.
    pub fn resolve_models(
        &self,
        base: &Path,
        override_dir: Option<&Path>,
    ) -> Result<BTreeMap<String, ShareModel>, ObjectiveError> {
        let mut models = self.models.clone();
        let dir = match (override_dir, &self.model_dir) {
            (Some(d), _) => Some(d.to_path_buf()),
            (None, Some(d)) => Some(base.join(d)),
            (None, None) => None,
        };
        for r in &self.routes {
            if models.contains_key(&r.id) && override_dir.is_none() {
                continue;
            }
            let Some(dir) = &dir else {
                return Err(ObjectiveError::MissingModel(r.id.clone()));
            };
            let p = model_path(dir, &r.id);
            if !p.exists() {
                return Err(ObjectiveError::MissingModel(r.id.clone()));
            }
            models.insert(r.id.clone(), ShareModel::load(&p)?);
        }
        Ok(models)
    }

    pub fn build(&self, models: &BTreeMap<String, ShareModel>) -> Result<InfluenceProblem, ObjectiveError> {
        let net_routes: Vec<(&str, &str, &str)> = self
            .network_routes
            .iter()
            .map(|r| (r.id.as_str(), r.src.as_str(), r.dst.as_str()))
            .collect();
        let network = Network::new(self.airports.clone(), &net_routes)?;
        let mut routes = Vec::with_capacity(self.routes.len());
        for spec in &self.routes {
            let edge = network
                .route(&spec.id)
                .ok_or_else(|| ObjectiveError::UnknownRoute(spec.id.clone()))?;
            let model = models
                .get(&spec.id)
                .ok_or_else(|| ObjectiveError::MissingModel(spec.id.clone()))?;
            routes.push(ProblemRoute {
                id: spec.id.clone(),
                src: edge.src,
                dst: edge.dst,
                demand: spec.demand,
                cost: spec.cost,
                f_max: spec.f_max,
                observed_freq: spec.observed_freq,
                statics: spec.static_features,
                competitors: spec.competitors.clone(),
                model: Arc::new(model.clone()),
                competitor_scores: Vec::new(),
            });
        }
        let mut fixed = Vec::with_capacity(self.fixed.len());
        for f in &self.fixed {
            let edge = network
                .route(&f.route)
                .ok_or_else(|| ObjectiveError::UnknownRoute(f.route.clone()))?;
            fixed.push((edge.src, edge.dst, f.freq));
        }
        InfluenceProblem::new(
            network,
            self.carrier.clone(),
            self.month.clone(),
            routes,
            fixed,
            self.budget,
            self.sample_fraction,
            self.pagerank,
        )
    }
}

impl InfluenceProblem {
    /// Validates the inputs, sorts routes by id and caches competitor scores.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        network: Network,
        carrier: String,
        month: String,
        mut routes: Vec<ProblemRoute>,
        fixed: Vec<(usize, usize, f64)>,
        budget: f64,
        sample_fraction: f64,
        pagerank: PageRankConfig,
    ) -> Result<Self, ObjectiveError> {
        let invalid = |s: String| Err(ObjectiveError::Invalid(s));
        if !(budget >= 0.0) {
            return invalid(format!("budget must be >= 0, got {budget}"));
        }
        if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
            return invalid(format!("sample_fraction must be in (0, 1], got {sample_fraction}"));
        }
        if !(pagerank.damping > 0.0 && pagerank.damping < 1.0) || pagerank.iterations == 0 {
            return invalid("pagerank needs 0 < damping < 1 and iterations >= 1".into());
        }
        routes.sort_by(|a, b| a.id.cmp(&b.id));
        for w in routes.windows(2) {
            if w[0].id == w[1].id {
                return invalid(format!("route '{}' listed twice", w[0].id));
            }
        }
        let mut used = vec![false; network.n_airports().pow(2)];
        for r in &mut routes {
            if !network.has_route(r.src, r.dst) {
                return Err(ObjectiveError::UnknownRoute(r.id.clone()));
            }
            used[r.src * network.n_airports() + r.dst] = true;
            if !(r.demand >= 0.0) || !(r.cost > 0.0) || !(r.f_max >= 0.0) {
                return invalid(format!(
                    "route '{}': need demand >= 0, cost > 0, f_max >= 0 (got {}, {}, {})",
                    r.id, r.demand, r.cost, r.f_max
                ));
            }
            r.model.validate()?;
            r.competitor_scores = r.competitors.iter().map(|c| r.model.score_value(&c.features)).collect();
        }
        for &(s, d, f) in &fixed {
            if !network.has_route(s, d) || used[s * network.n_airports() + d] || !(f >= 0.0) {
                return invalid(format!("fixed frequency on ({s}, {d}) conflicts with the network or decision routes"));
            }
        }
        Ok(InfluenceProblem {
            network,
            carrier,
            month,
            routes,
            fixed,
            budget,
            sample_fraction,
            pagerank,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn carrier(&self) -> &str {
        &self.carrier
    }

    pub fn month(&self) -> &str {
        &self.month
    }

    pub fn routes(&self) -> &[ProblemRoute] {
        &self.routes
    }

    pub fn n_routes(&self) -> usize {
        self.routes.len()
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn sample_fraction(&self) -> f64 {
        self.sample_fraction
    }

    pub fn pagerank_config(&self) -> &PageRankConfig {
        &self.pagerank
    }

    pub fn fixed(&self) -> &[(usize, usize, f64)] {
        &self.fixed
    }

    pub fn f_max(&self) -> Vec<f64> {
        self.routes.iter().map(|r| r.f_max).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.routes.iter().map(|r| r.cost).collect()
    }

    /// Copy of the problem with a different budget.
    pub fn with_budget(&self, budget: f64) -> Result<Self, ObjectiveError> {
        if !(budget >= 0.0) {
            return Err(ObjectiveError::Invalid(format!("budget must be >= 0, got {budget}")));
        }
        let mut p = self.clone();
        p.budget = budget;
        Ok(p)
    }

    fn check_len(&self, x: &[f64]) -> Result<(), ObjectiveError> {
        if x.len() != self.routes.len() {
            return Err(ObjectiveError::ScheduleLength {
                got: x.len(),
                want: self.routes.len(),
            });
        }
        Ok(())
    }

    /// Full frequency matrix for the decision vector `x` (route order).
    pub fn frequency_matrix(&self, x: &[f64]) -> Result<FrequencyMatrix, ObjectiveError> {
        self.check_len(x)?;
        let mut a = FrequencyMatrix::zeros(self.network.n_airports(), self.carrier.clone());
        for &(s, d, f) in &self.fixed {
            a.set(s, d, f);
        }
        for (r, &f) in self.routes.iter().zip(x) {
            a.set(r.src, r.dst, f);
        }
        Ok(a)
    }

    /// Decision vector read back from a frequency matrix.
    pub fn schedule_from_matrix(&self, a: &FrequencyMatrix) -> Vec<f64> {
        self.routes.iter().map(|r| a.get(r.src, r.dst)).collect()
    }

    /// Records `A` from the decision column `x` (`R x 1`).
    fn record_matrix(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let n = self.network.n_airports();
        let index: Vec<usize> = self.routes.iter().map(|r| r.src * n + r.dst).collect();
        let placed = tape.scatter(x, &index, Shape::new(n, n))?;
        if self.fixed.is_empty() {
            return Ok(placed);
        }
        let mut data = vec![0.0; n * n];
        for &(s, d, f) in &self.fixed {
            data[s * n + d] = f;
        }
        let bg = tape.constant(Tensor::new(n, n, data)?);
        tape.add(placed, bg)
    }

    /// Records the focal carrier's share on every route, as `R x 1`.
    pub fn record_shares(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let a = self.record_matrix(tape, x)?;
        self.record_shares_from_matrix(tape, a)
    }

    /// Same as [`record_shares`](Self::record_shares) but from a recorded
    /// `n x n` frequency matrix, so gradients can be taken against `A` itself.
    pub fn record_shares_from_matrix(&self, tape: &mut Tape, a: Var) -> Result<Var, AdError> {
        let r_count = self.routes.len();
        let pairs: Vec<(usize, usize)> = self.routes.iter().map(|r| (r.src, r.dst)).collect();
        let net_rows = network_feature_rows(tape, &self.network, a, &pairs, &self.pagerank)?;
        let statics: Vec<f64> = self.routes.iter().flat_map(|r| r.statics.to_feature_row()).collect();
        let statics = tape.constant(Tensor::new(r_count, N_FEATURES, statics)?);
        let feats = tape.add(net_rows, statics)?;

        let mut scores = Vec::with_capacity(r_count);
        for (k, route) in self.routes.iter().enumerate() {
            let idx: Vec<usize> = (k * N_FEATURES..(k + 1) * N_FEATURES).collect();
            let row = tape.gather(feats, &idx, Shape::new(1, N_FEATURES))?;
            let bound = route.model.bind(tape, false);
            scores.push(ShareModel::scores(tape, &bound, row)?);
        }
        let s = tape.stack(&scores)?;

        // m = e^(s - shift) / (e^(s - shift) + sum_c e^(s_c - shift))
        let mut shift = Vec::with_capacity(r_count);
        let mut rest = Vec::with_capacity(r_count);
        for (route, &sv) in self.routes.iter().zip(tape.value(s).data()) {
            let hi = route.competitor_scores.iter().copied().fold(sv, f64::max);
            shift.push(hi);
            rest.push(route.competitor_scores.iter().map(|c| (c - hi).exp()).sum::<f64>());
        }
        let shift = tape.constant(Tensor::column(shift));
        let rest = tape.constant(Tensor::column(rest));
        let shifted = tape.sub(s, shift)?;
        let e = tape.exp(shifted)?;
        let denom = tape.add(e, rest)?;
        tape.div(e, denom)
    }

    /// Records `o(x)`.
    pub fn record_influence(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let m = self.record_shares(tape, x)?;
        self.weight_by_demand(tape, m)
    }

    /// Records `o(A)` from a full frequency matrix.
    pub fn record_influence_from_matrix(&self, tape: &mut Tape, a: Var) -> Result<Var, AdError> {
        let m = self.record_shares_from_matrix(tape, a)?;
        self.weight_by_demand(tape, m)
    }

    /// Records `c(A)` from a full frequency matrix; only decision entries cost.
    pub fn record_overrun_from_matrix(&self, tape: &mut Tape, a: Var) -> Result<Var, AdError> {
        let n = self.network.n_airports();
        let mut cost = vec![0.0; n * n];
        for r in &self.routes {
            cost[r.src * n + r.dst] = r.cost;
        }
        let cost = tape.constant(Tensor::new(n, n, cost)?);
        let spend = tape.mul(a, cost)?;
        let total = tape.sum(spend)?;
        let budget = tape.scalar_const(self.budget);
        tape.sub(total, budget)
    }

    fn weight_by_demand(&self, tape: &mut Tape, m: Var) -> Result<Var, AdError> {
        let demand = tape.constant(Tensor::column(self.routes.iter().map(|r| r.demand).collect()));
        let weighted = tape.mul(m, demand)?;
        tape.sum(weighted)
    }

    /// Records `c(x)`.
    pub fn record_overrun(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let cost = tape.constant(Tensor::column(self.costs()));
        let spend = tape.mul(x, cost)?;
        let total = tape.sum(spend)?;
        let budget = tape.scalar_const(self.budget);
        tape.sub(total, budget)
    }

    fn with_tape<T>(&self, x: &[f64], f: impl FnOnce(&mut Tape, Var) -> Result<T, AdError>) -> Result<T, ObjectiveError> {
        self.check_len(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::column(x.to_vec()));
        Ok(f(&mut tape, xv)?)
    }

    pub fn shares(&self, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        self.with_tape(x, |t, xv| {
            let m = self.record_shares(t, xv)?;
            Ok(t.value(m).data().to_vec())
        })
    }

    /// Passengers per month carried by the focal carrier under schedule `x`.
    pub fn influence(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        self.with_tape(x, |t, xv| {
            let o = self.record_influence(t, xv)?;
            Ok(t.scalar_value(o))
        })
    }

    pub fn total_cost(&self, x: &[f64]) -> f64 {
        self.routes.iter().zip(x).map(|(r, f)| r.cost * f).sum()
    }

    /// Spend minus budget; negative means slack.
    pub fn cost_overrun(&self, x: &[f64]) -> f64 {
        self.total_cost(x) - self.budget
    }

    pub fn penalized(&self, x: &[f64], beta: f64, kind: PenaltyKind) -> Result<f64, ObjectiveError> {
        if !(beta >= 0.0) {
            return Err(ObjectiveError::Invalid(format!("beta must be >= 0, got {beta}")));
        }
        self.with_tape(x, |t, xv| {
            let o = self.record_influence(t, xv)?;
            let c = self.record_overrun(t, xv)?;
            let l = record_penalized(t, o, c, beta, kind)?;
            Ok(t.scalar_value(l))
        })
    }

    /// True when `x` is inside the box and within budget.
    pub fn is_feasible(&self, x: &[f64]) -> bool {
        x.len() == self.routes.len()
            && self.routes.iter().zip(x).all(|(r, &f)| f >= 0.0 && f <= r.f_max)
            && self.cost_overrun(x) <= 0.0
    }

    /// Serializable form with inline models.
    pub fn to_file(&self) -> ProblemFile {
        let route_id = |s: usize, d: usize| {
            self.network
                .routes()
                .iter()
                .find(|e| e.src == s && e.dst == d)
                .map(|e| e.id.clone())
                .unwrap_or_default()
        };
        ProblemFile {
            version: PROBLEM_FORMAT_VERSION,
            carrier: self.carrier.clone(),
            month: self.month.clone(),
            budget: self.budget,
            sample_fraction: self.sample_fraction,
            airports: self.network.airports().to_vec(),
            network_routes: self
                .network
                .routes()
                .iter()
                .map(|e| RouteRef {
                    id: e.id.clone(),
                    src: self.network.airports()[e.src].clone(),
                    dst: self.network.airports()[e.dst].clone(),
                })
                .collect(),
            routes: self
                .routes
                .iter()
                .map(|r| RouteSpec {
                    id: r.id.clone(),
                    demand: r.demand,
                    cost: r.cost,
                    f_max: r.f_max,
                    observed_freq: r.observed_freq,
                    static_features: r.statics,
                    competitors: r.competitors.clone(),
                })
                .collect(),
            fixed: self
                .fixed
                .iter()
                .map(|&(s, d, f)| FixedFrequency { route: route_id(s, d), freq: f })
                .collect(),
            pagerank: self.pagerank,
            model_dir: None,
            models: self.routes.iter().map(|r| (r.id.clone(), (*r.model).clone())).collect(),
        }
    }
}

/// The penalty term for `kind` applied to a recorded overrun.
pub fn record_penalty(tape: &mut Tape, c: Var, kind: PenaltyKind) -> Result<Var, AdError> {
    match kind {
        PenaltyKind::Lagrangian => {
            let sq = tape.mul(c, c)?;
            tape.scale(sq, 0.5)
        }
        PenaltyKind::Relu => tape.relu(c),
    }
}

/// `o - beta * penalty(c)`.
pub fn record_penalized(tape: &mut Tape, o: Var, c: Var, beta: f64, kind: PenaltyKind) -> Result<Var, AdError> {
    let p = record_penalty(tape, c, kind)?;
    let bp = tape.scale(p, beta)?;
    tape.sub(o, bp)
}

/// Scalar form of the penalized objective.
pub fn penalized_value(o: f64, c: f64, beta: f64, kind: PenaltyKind) -> f64 {
    match kind {
        PenaltyKind::Lagrangian => o - beta * c * c / 2.0,
        PenaltyKind::Relu => o - beta * c.max(0.0),
    }
}

/// Minimizer over `lambda` of `o - lambda c + delta lambda^2`.
pub fn lambda_hat(c: f64, delta: f64) -> Result<f64, ObjectiveError> {
    if !(delta > 0.0) {
        return Err(ObjectiveError::NonPositiveDelta(delta));
    }
    Ok(c / (2.0 * delta))
}
