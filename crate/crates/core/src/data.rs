//! Market panels (CSV tables plus a small JSON metadata file), a synthetic
//! market generator with known share models, and the glue that turns a
//! panel into training sets and optimization problems.
//!
//! A panel directory holds:
//!
//! * `airports.csv`: `airport_id,name`
//! * `routes.csv`: `route_id,src_airport,dst_airport,f_max`
//! * `observations.csv`: `month,route_id,carrier_id,price,freq,delay_ratio,
//!   delay_min,cancel_ratio,divert_ratio,fatal,serious,minor,aircraft_size,
//!   seat_avail,share,demand,unit_cost`
//! * `panel.json` (optional): `{"sample_fraction": ...}`

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netfeat::{
    assemble_route_features, FeatureVector, FrequencyMatrix, NetError, Network, NetworkFeatures, PageRankConfig,
    StaticFeatures, FREQ, N_FEATURES,
};
use crate::objective::{
    Competitor, FixedFrequency, InfluenceProblem, ObjectiveError, ProblemFile, RouteRef, RouteSpec,
    PROBLEM_FORMAT_VERSION,
};
use crate::sharemodel::{Architecture, ModelError, MonthSample, Parameters, RouteData, Scaler, ShareModel};

pub const AIRPORTS_FILE: &str = "airports.csv";
pub const ROUTES_FILE: &str = "routes.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const META_FILE: &str = "panel.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

pub const AIRPORT_COLUMNS: [&str; 2] = ["airport_id", "name"];
pub const ROUTE_COLUMNS: [&str; 4] = ["route_id", "src_airport", "dst_airport", "f_max"];
pub const OBSERVATION_COLUMNS: [&str; 17] = [
    "month",
    "route_id",
    "carrier_id",
    "price",
    "freq",
    "delay_ratio",
    "delay_min",
    "cancel_ratio",
    "divert_ratio",
    "fatal",
    "serious",
    "minor",
    "aircraft_size",
    "seat_avail",
    "share",
    "demand",
    "unit_cost",
];

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{file} line {line}, column '{column}': {message}")]
    Schema {
        file: String,
        line: u64,
        column: String,
        message: String,
    },
    #[error("route '{route}' month '{month}': shares sum to {sum}, expected 1")]
    Simplex { route: String, month: String, sum: f64 },
    #[error("empty market: {0}")]
    EmptyMarket(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{0}")]
    Lookup(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Airport {
    pub airport_id: String,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub route_id: String,
    pub src_airport: String,
    pub dst_airport: String,
    pub f_max: f64,
}

/// One `(month, route, carrier)` row.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub month: String,
    pub route_id: String,
    pub carrier_id: String,
    pub freq: f64,
    pub statics: StaticFeatures,
    pub share: f64,
    pub demand: f64,
    pub unit_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
}

fn default_fraction() -> f64 {
    1.0
}

impl Default for PanelMeta {
    fn default() -> Self {
        PanelMeta {
            sample_fraction: default_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketPanel {
    pub airports: Vec<Airport>,
    pub routes: Vec<RouteRow>,
    pub observations: Vec<Observation>,
    pub meta: PanelMeta,
}

impl MarketPanel {
    /// Periods in order of first appearance.
    pub fn months(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for o in &self.observations {
            if seen.insert(o.month.as_str()) {
                out.push(o.month.clone());
            }
        }
        out
    }

    pub fn carriers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.observations.iter().map(|o| o.carrier_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn network(&self) -> Result<Network, DataError> {
        let airports = self.airports.iter().map(|a| a.airport_id.clone()).collect();
        let routes: Vec<(&str, &str, &str)> = self
            .routes
            .iter()
            .map(|r| (r.route_id.as_str(), r.src_airport.as_str(), r.dst_airport.as_str()))
            .collect();
        Ok(Network::new(airports, &routes)?)
    }

    /// Checks non-negativity, referential integrity and the share simplex.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.airports.is_empty() {
            return Err(DataError::EmptyMarket("no airports".into()));
        }
        if self.routes.is_empty() {
            return Err(DataError::EmptyMarket("no routes".into()));
        }
        if self.observations.is_empty() {
            return Err(DataError::EmptyMarket("no observations".into()));
        }
        let net = self.network()?;
        for (i, r) in self.routes.iter().enumerate() {
            if !(r.f_max >= 0.0) {
                return Err(schema(ROUTES_FILE, i, "f_max", format!("must be >= 0, got {}", r.f_max)));
            }
        }
        let mut sums: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        let mut demand: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, o) in self.observations.iter().enumerate() {
            if net.route(&o.route_id).is_none() {
                return Err(schema(
                    OBSERVATIONS_FILE,
                    i,
                    "route_id",
                    format!("unknown route '{}'", o.route_id),
                ));
            }
            if !seen.insert((&o.month, &o.route_id, &o.carrier_id)) {
                return Err(schema(
                    OBSERVATIONS_FILE,
                    i,
                    "carrier_id",
                    format!("duplicate row for ({}, {}, {})", o.month, o.route_id, o.carrier_id),
                ));
            }
            for (col, v) in [
                ("freq", o.freq),
                ("share", o.share),
                ("demand", o.demand),
                ("unit_cost", o.unit_cost),
            ] {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(schema(OBSERVATIONS_FILE, i, col, format!("must be finite and >= 0, got {v}")));
                }
            }
            let key = (o.route_id.as_str(), o.month.as_str());
            *sums.entry(key).or_default() += o.share;
            if let Some(&d) = demand.get(&key) {
                if d != o.demand {
                    return Err(schema(
                        OBSERVATIONS_FILE,
                        i,
                        "demand",
                        format!("differs from other carriers on the same route and month ({d} vs {})", o.demand),
                    ));
                }
            } else {
                demand.insert(key, o.demand);
            }
        }
        for ((route, month), sum) in sums {
            if !((sum - 1.0).abs() <= SIMPLEX_TOL) {
                return Err(DataError::Simplex {
                    route: route.into(),
                    month: month.into(),
                    sum,
                });
            }
        }
        if !(self.meta.sample_fraction > 0.0 && self.meta.sample_fraction <= 1.0) {
            return Err(DataError::Config(format!(
                "sample_fraction must be in (0, 1], got {}",
                self.meta.sample_fraction
            )));
        }
        Ok(())
    }

    /// Schedule matrix of every `(month, carrier)`.
    pub fn schedules(&self, net: &Network) -> Result<BTreeMap<(String, String), FrequencyMatrix>, DataError> {
        let mut out: BTreeMap<(String, String), FrequencyMatrix> = BTreeMap::new();
        for o in &self.observations {
            let edge = net
                .route(&o.route_id)
                .ok_or_else(|| DataError::Lookup(format!("unknown route '{}'", o.route_id)))?;
            out.entry((o.month.clone(), o.carrier_id.clone()))
                .or_insert_with(|| FrequencyMatrix::zeros(net.n_airports(), o.carrier_id.clone()))
                .set(edge.src, edge.dst, o.freq);
        }
        Ok(out)
    }

    /// Feature vector of every observation, in row order.
    pub fn feature_vectors(&self, pagerank: &PageRankConfig) -> Result<Vec<FeatureVector>, DataError> {
        let net = self.network()?;
        let schedules = self.schedules(&net)?;
        let mut feats = BTreeMap::new();
        for (key, a) in &schedules {
            feats.insert(key.clone(), NetworkFeatures::compute(&net, a, pagerank)?);
        }
        self.observations
            .iter()
            .map(|o| {
                let key = (o.month.clone(), o.carrier_id.clone());
                let edge = net.route(&o.route_id).expect("validated route");
                Ok(assemble_route_features(&o.statics, &feats[&key], &schedules[&key], edge))
            })
            .collect()
    }

    /// Per-route training sets in route-id order. Months where fewer than
    /// two carriers fly are skipped, and so are routes left with no months.
    pub fn route_data(&self, pagerank: &PageRankConfig) -> Result<Vec<RouteData>, DataError> {
        let fv = self.feature_vectors(pagerank)?;
        let months = self.months();
        let order: BTreeMap<&str, usize> = months.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
        let mut grouped: BTreeMap<&str, BTreeMap<usize, MonthSample>> = BTreeMap::new();
        for (o, f) in self.observations.iter().zip(fv) {
            let m = order[o.month.as_str()];
            let s = grouped.entry(&o.route_id).or_default().entry(m).or_insert_with(|| MonthSample {
                month: o.month.clone(),
                carriers: Vec::new(),
                features: Vec::new(),
                shares: Vec::new(),
            });
            s.carriers.push(o.carrier_id.clone());
            s.features.push(f);
            s.shares.push(o.share);
        }
        let mut out = Vec::new();
        for (route, by_month) in grouped {
            let months: Vec<MonthSample> = by_month
                .into_values()
                .filter(|s| {
                    let keep = s.shares.len() >= 2;
                    if !keep {
                        warn!("route {route} month {}: single carrier, skipped for training", s.month);
                    }
                    keep
                })
                .collect();
            if months.is_empty() {
                warn!("route {route}: no month with competition, no model trained");
                continue;
            }
            out.push(RouteData {
                route: route.to_string(),
                months,
            });
        }
        Ok(out)
    }
}

fn schema(file: &str, row: usize, column: &str, message: String) -> DataError {
    DataError::Schema {
        file: file.into(),
        line: row as u64 + 2,
        column: column.into(),
        message,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn werr(file: &'static str) -> impl Fn(csv::Error) -> DataError {
    move |e| csv_err(file, e)
}

fn csv_err(file: &str, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DataError::Schema {
        file: file.into(),
        line,
        column: String::new(),
        message: e.to_string(),
    }
}

/// Reads a CSV table whose header must equal `columns`.
fn read_table(dir: &Path, file: &str, columns: &[&str]) -> Result<Vec<csv::StringRecord>, DataError> {
    let path = dir.join(file);
    let f = File::open(&path).map_err(io_err(&path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let header = rdr.headers().map_err(|e| csv_err(file, e))?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != columns {
        return Err(DataError::Schema {
            file: file.into(),
            line: 1,
            column: String::new(),
            message: format!("header must be [{}], got [{}]", columns.join(","), got.join(",")),
        });
    }
    rdr.records()
        .map(|r| r.map_err(|e| csv_err(file, e)))
        .collect()
}

fn parse_f64(file: &str, row: usize, column: &str, s: &str) -> Result<f64, DataError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| schema(file, row, column, format!("expected a number, got '{s}'")))
}

pub fn load_panel(dir: &Path) -> Result<MarketPanel, DataError> {
    if !dir.is_dir() {
        return Err(DataError::Io {
            path: dir.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "panel directory not found"),
        });
    }
    let airports = read_table(dir, AIRPORTS_FILE, &AIRPORT_COLUMNS)?
        .into_iter()
        .map(|r| Airport {
            airport_id: r[0].to_string(),
            name: r[1].to_string(),
        })
        .collect();
    let routes = read_table(dir, ROUTES_FILE, &ROUTE_COLUMNS)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RouteRow {
                route_id: r[0].to_string(),
                src_airport: r[1].to_string(),
                dst_airport: r[2].to_string(),
                f_max: parse_f64(ROUTES_FILE, i, "f_max", &r[3])?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let observations = read_table(dir, OBSERVATIONS_FILE, &OBSERVATION_COLUMNS)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut v = [0.0; 14];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = parse_f64(OBSERVATIONS_FILE, i, OBSERVATION_COLUMNS[k + 3], &r[k + 3])?;
            }
            let mut f = [0.0; N_FEATURES];
            f[..11].copy_from_slice(&v[..11]);
            Ok(Observation {
                month: r[0].to_string(),
                route_id: r[1].to_string(),
                carrier_id: r[2].to_string(),
                freq: v[1],
                statics: FeatureVector(f).statics(),
                share: v[11],
                demand: v[12],
                unit_cost: v[13],
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?
    } else {
        PanelMeta::default()
    };
    let panel = MarketPanel {
        airports,
        routes,
        observations,
        meta,
    };
    panel.validate()?;
    Ok(panel)
}

pub fn save_panel(panel: &MarketPanel, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let open = |file: &str| -> Result<csv::Writer<File>, DataError> {
        let path = dir.join(file);
        Ok(csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(File::create(&path).map_err(io_err(&path))?))
    };

    let mut w = open(AIRPORTS_FILE)?;
    w.write_record(AIRPORT_COLUMNS).map_err(werr(AIRPORTS_FILE))?;
    for a in &panel.airports {
        w.write_record([&a.airport_id, &a.name]).map_err(werr(AIRPORTS_FILE))?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = open(ROUTES_FILE)?;
    w.write_record(ROUTE_COLUMNS).map_err(werr(ROUTES_FILE))?;
    for r in &panel.routes {
        w.serialize(r).map_err(werr(ROUTES_FILE))?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = open(OBSERVATIONS_FILE)?;
    w.write_record(OBSERVATION_COLUMNS).map_err(werr(OBSERVATIONS_FILE))?;
    for o in &panel.observations {
        let mut row = o.statics.to_feature_row();
        row[FREQ] = o.freq;
        w.serialize((
            &o.month,
            &o.route_id,
            &o.carrier_id,
            &row[..11],
            o.share,
            o.demand,
            o.unit_cost,
        ))
        .map_err(werr(OBSERVATIONS_FILE))?;
    }
    w.flush().map_err(io_err(dir))?;

    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&panel.meta)?).map_err(io_err(&meta_path))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HiddenModel {
    MultiLogit,
    Mlp { layers: usize, width: usize },
}

impl HiddenModel {
    fn architecture(&self) -> Architecture {
        match *self {
            HiddenModel::MultiLogit => Architecture::MultiLogit,
            HiddenModel::Mlp { layers, width } => Architecture::Mlp { layers, width },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_airports: usize,
    pub n_routes: usize,
    pub n_carriers: usize,
    pub n_months: usize,
    /// Standard deviation of the Gaussian noise added to shares.
    pub noise_std: f64,
    pub hidden_model: HiddenModel,
    pub seed: u64,
    pub f_max_min: u32,
    pub f_max_max: u32,
    /// Log-normal parameters of monthly route demand (sampled passengers).
    pub demand_log_mean: f64,
    pub demand_log_std: f64,
    /// Log-normal parameters of the cost of one flight.
    pub cost_log_mean: f64,
    pub cost_log_std: f64,
    /// Scale of the hidden multi-logit weights on standardized features.
    pub weight_scale: f64,
    pub sample_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_airports: 12,
            n_routes: 30,
            n_carriers: 3,
            n_months: 6,
            noise_std: 0.0,
            hidden_model: HiddenModel::MultiLogit,
            seed: 0,
            f_max_min: 40,
            f_max_max: 80,
            demand_log_mean: 1500f64.ln(),
            demand_log_std: 0.5,
            cost_log_mean: 8000f64.ln(),
            cost_log_std: 0.3,
            weight_scale: 0.3,
            sample_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |s: String| Err(DataError::Config(s));
        if self.n_airports < 2 {
            return bad("n_airports must be >= 2".into());
        }
        let cap = self.n_airports * (self.n_airports - 1);
        if self.n_routes == 0 || self.n_routes > cap {
            return bad(format!("n_routes must be in 1..={cap} for {} airports", self.n_airports));
        }
        if self.n_carriers < 2 {
            return bad("n_carriers must be >= 2".into());
        }
        if self.n_months == 0 {
            return bad("n_months must be >= 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.f_max_min < 1 || self.f_max_min > self.f_max_max {
            return bad("need 1 <= f_max_min <= f_max_max".into());
        }
        if !(self.demand_log_std >= 0.0 && self.cost_log_std >= 0.0) {
            return bad("log-normal spreads must be >= 0".into());
        }
        if !(self.weight_scale >= 0.0) {
            return bad("weight_scale must be >= 0".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must be in (0, 1]".into());
        }
        self.hidden_model.architecture().validate()?;
        Ok(())
    }
}

/// The share models that generated a synthetic panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub models: BTreeMap<String, ShareModel>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(
            &std::fs::read_to_string(path).map_err(io_err(path))?,
        )?)
    }
}

/// Directed routes sampled with probability growing in endpoint degree,
/// which yields a hub-heavy graph.
fn sample_routes(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut degree = vec![1.0f64; n];
    let mut used = BTreeSet::new();
    let mut routes = Vec::with_capacity(count);
    let pick = |degree: &[f64], rng: &mut ChaCha8Rng| {
        let total: f64 = degree.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, d) in degree.iter().enumerate() {
            if u < *d {
                return i;
            }
            u -= d;
        }
        degree.len() - 1
    };
    let mut attempts = 0;
    while routes.len() < count && attempts < 200 * count {
        attempts += 1;
        let s = pick(&degree, rng);
        let d = pick(&degree, rng);
        if s == d || !used.insert((s, d)) {
            continue;
        }
        routes.push((s, d));
        degree[s] += 1.0;
        degree[d] += 1.0;
    }
    if routes.len() < count {
        let mut rest: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (0..n).map(move |d| (s, d)))
            .filter(|&(s, d)| s != d && !used.contains(&(s, d)))
            .collect();
        rest.shuffle(rng);
        routes.extend(rest.into_iter().take(count - routes.len()));
    }
    routes
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn small_count(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    (0..3).filter(|_| rng.random::<f64>() < p).count() as f64
}

fn airport_id(i: usize) -> String {
    format!("A{i:03}")
}

fn route_id(i: usize) -> String {
    format!("R{i:04}")
}

fn carrier_id(i: usize) -> String {
    format!("C{i:02}")
}

fn month_id(i: usize) -> String {
    format!("M{:02}", i + 1)
}

/// Samples a market and the hidden share models that produced its shares.
pub fn generate_market(cfg: &SynthConfig) -> Result<(MarketPanel, GroundTruth), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_airports;
    let edges = sample_routes(n, cfg.n_routes, &mut rng);

    let airports: Vec<Airport> = (0..n)
        .map(|i| Airport {
            airport_id: airport_id(i),
            name: format!("Airport {i}"),
        })
        .collect();
    let routes: Vec<RouteRow> = edges
        .iter()
        .enumerate()
        .map(|(i, &(s, d))| RouteRow {
            route_id: route_id(i),
            src_airport: airport_id(s),
            dst_airport: airport_id(d),
            f_max: rng.random_range(cfg.f_max_min..=cfg.f_max_max) as f64,
        })
        .collect();

    let demand_dist = LogNormal::new(cfg.demand_log_mean, cfg.demand_log_std).map_err(|e| DataError::Config(e.to_string()))?;
    let cost_dist = LogNormal::new(cfg.cost_log_mean, cfg.cost_log_std).map_err(|e| DataError::Config(e.to_string()))?;
    let jitter = LogNormal::new(0.0, 0.1).expect("valid");

    // per (route, carrier) baseline attributes
    struct Base {
        price: f64,
        freq_frac: f64,
        delay: f64,
        size: f64,
        seats: f64,
        cost: f64,
    }
    let mut bases = Vec::with_capacity(cfg.n_routes * cfg.n_carriers);
    for _ in 0..cfg.n_routes {
        for _ in 0..cfg.n_carriers {
            bases.push(Base {
                price: uniform(&mut rng, 120.0, 450.0),
                freq_frac: uniform(&mut rng, 0.2, 0.8),
                delay: uniform(&mut rng, 0.1, 0.3),
                size: uniform(&mut rng, 70.0, 300.0),
                seats: uniform(&mut rng, 0.6, 0.95),
                cost: cost_dist.sample(&mut rng),
            });
        }
    }
    let route_demand: Vec<f64> = (0..cfg.n_routes).map(|_| demand_dist.sample(&mut rng)).collect();

    let mut observations = Vec::with_capacity(cfg.n_months * cfg.n_routes * cfg.n_carriers);
    for m in 0..cfg.n_months {
        for (r, route) in routes.iter().enumerate() {
            let demand = (route_demand[r] * jitter.sample(&mut rng)).round().max(1.0);
            for k in 0..cfg.n_carriers {
                let b = &bases[r * cfg.n_carriers + k];
                let f = (b.freq_frac * route.f_max * uniform(&mut rng, 0.7, 1.3)).round();
                let statics = StaticFeatures {
                    price: b.price * jitter.sample(&mut rng),
                    delay_ratio: (b.delay * jitter.sample(&mut rng)).min(1.0),
                    delay_min: uniform(&mut rng, 5.0, 40.0),
                    cancel_ratio: uniform(&mut rng, 0.0, 0.03),
                    divert_ratio: uniform(&mut rng, 0.0, 0.005),
                    fatal: small_count(&mut rng, 0.01),
                    serious: small_count(&mut rng, 0.03),
                    minor: small_count(&mut rng, 0.1),
                    aircraft_size: b.size,
                    seat_avail: (b.seats * jitter.sample(&mut rng)).min(1.0),
                };
                observations.push(Observation {
                    month: month_id(m),
                    route_id: route.route_id.clone(),
                    carrier_id: carrier_id(k),
                    freq: f.clamp(1.0, route.f_max),
                    statics,
                    share: 0.0,
                    demand,
                    unit_cost: (b.cost * uniform(&mut rng, 0.95, 1.05)).round(),
                });
            }
        }
    }
    let mut panel = MarketPanel {
        airports,
        routes,
        observations,
        meta: PanelMeta {
            sample_fraction: cfg.sample_fraction,
        },
    };

    // hidden models, fitted to the feature distribution of each route
    let fv = panel.feature_vectors(&PageRankConfig::default())?;
    let arch = cfg.hidden_model.architecture();
    let mut models = BTreeMap::new();
    for route in &panel.routes {
        let rows: Vec<&FeatureVector> = panel
            .observations
            .iter()
            .zip(&fv)
            .filter(|(o, _)| o.route_id == route.route_id)
            .map(|(_, f)| f)
            .collect();
        let (scaler, constant) = Scaler::fit(rows.iter().copied());
        let subset: Vec<usize> = (0..N_FEATURES).filter(|j| !constant.contains(j)).collect();
        let mut model = ShareModel::init(&route.route_id, arch.clone(), subset.clone(), scaler, rng.random())?;
        if let Parameters::MultiLogit { weights } = &mut model.parameters {
            let normal = Normal::new(0.0, cfg.weight_scale).expect("valid");
            for (w, &j) in weights.iter_mut().zip(&subset) {
                let v: f64 = normal.sample(&mut rng);
                // more flights and a stronger network should never hurt
                *w = match j {
                    FREQ => cfg.weight_scale * (0.5 + 0.5 * v.abs()),
                    j if j >= 11 => 0.1 * v.abs(),
                    _ => 0.5 * v,
                };
            }
        }
        models.insert(route.route_id.clone(), model);
    }

    // shares from the hidden models, grouped by (month, route)
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, o) in panel.observations.iter().enumerate() {
        groups.entry((o.month.clone(), o.route_id.clone())).or_default().push(i);
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid");
    for ((_, route), idx) in groups {
        let feats: Vec<FeatureVector> = idx.iter().map(|&i| fv[i]).collect();
        let mut shares = models[&route].predict_shares(&feats)?;
        if cfg.noise_std > 0.0 {
            for s in &mut shares {
                *s = (*s + noise.sample(&mut rng)).max(1e-6);
            }
            let total: f64 = shares.iter().sum();
            for s in &mut shares {
                *s /= total;
            }
        }
        for (&i, s) in idx.iter().zip(shares) {
            panel.observations[i].share = s;
        }
    }
    panel.validate()?;
    Ok((
        panel,
        GroundTruth {
            config: cfg.clone(),
            models,
        },
    ))
}

/// How to cut an optimization problem out of a panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemOptions {
    pub carrier: String,
    /// Defaults to the last month of the panel.
    pub month: Option<String>,
    /// Decision routes; defaults to every route the carrier flies that
    /// month. The carrier's other routes are held at observed frequencies.
    pub routes: Option<Vec<String>>,
    /// Absolute budget; when absent, `budget_scale` times the observed spend
    /// on the decision routes.
    pub budget: Option<f64>,
    pub budget_scale: f64,
}

impl ProblemOptions {
    pub fn new(carrier: impl Into<String>) -> Self {
        ProblemOptions {
            carrier: carrier.into(),
            month: None,
            routes: None,
            budget: None,
            budget_scale: 1.0,
        }
    }
}

/// Problem description for one carrier and month; models are not attached.
pub fn build_problem(panel: &MarketPanel, opts: &ProblemOptions) -> Result<ProblemFile, DataError> {
    let net = panel.network()?;
    let month = match &opts.month {
        Some(m) => m.clone(),
        None => panel
            .months()
            .pop()
            .ok_or_else(|| DataError::EmptyMarket("no months".into()))?,
    };
    let schedules = panel.schedules(&net)?;
    let pagerank = PageRankConfig::default();
    let mut feats = BTreeMap::new();
    for ((m, c), a) in &schedules {
        if *m == month {
            feats.insert(c.clone(), NetworkFeatures::compute(&net, a, &pagerank)?);
        }
    }
    let rows: Vec<&Observation> = panel.observations.iter().filter(|o| o.month == month).collect();
    let own: BTreeMap<&str, &Observation> = rows
        .iter()
        .filter(|o| o.carrier_id == opts.carrier)
        .map(|o| (o.route_id.as_str(), *o))
        .collect();
    if own.is_empty() {
        return Err(DataError::Lookup(format!(
            "carrier '{}' has no observations in month '{month}'",
            opts.carrier
        )));
    }
    let decision: Vec<String> = match &opts.routes {
        Some(rs) => {
            for r in rs {
                if !own.contains_key(r.as_str()) {
                    return Err(DataError::Lookup(format!(
                        "carrier '{}' does not fly route '{r}' in month '{month}'",
                        opts.carrier
                    )));
                }
            }
            rs.clone()
        }
        None => own.keys().map(|s| s.to_string()).collect(),
    };
    let chosen: BTreeSet<&str> = decision.iter().map(String::as_str).collect();

    let mut specs = Vec::with_capacity(decision.len());
    let mut spend = 0.0;
    for rid in &decision {
        let o = own[rid.as_str()];
        let f_max = panel
            .routes
            .iter()
            .find(|r| r.route_id == *rid)
            .map(|r| r.f_max)
            .expect("validated route");
        let competitors = rows
            .iter()
            .filter(|c| c.route_id == *rid && c.carrier_id != opts.carrier)
            .map(|c| {
                let key = (month.clone(), c.carrier_id.clone());
                let edge = net.route(rid).expect("validated route");
                Competitor {
                    carrier: c.carrier_id.clone(),
                    features: assemble_route_features(&c.statics, &feats[&c.carrier_id], &schedules[&key], edge),
                }
            })
            .collect();
        spend += o.unit_cost * o.freq;
        specs.push(RouteSpec {
            id: rid.clone(),
            demand: o.demand,
            cost: o.unit_cost,
            f_max,
            observed_freq: Some(o.freq),
            static_features: o.statics,
            competitors,
        });
    }
    let fixed = own
        .iter()
        .filter(|(r, _)| !chosen.contains(*r))
        .map(|(r, o)| FixedFrequency {
            route: r.to_string(),
            freq: o.freq,
        })
        .collect();
    Ok(ProblemFile {
        version: PROBLEM_FORMAT_VERSION,
        carrier: opts.carrier.clone(),
        month,
        budget: opts.budget.unwrap_or(spend * opts.budget_scale),
        sample_fraction: panel.meta.sample_fraction,
        airports: panel.airports.iter().map(|a| a.airport_id.clone()).collect(),
        network_routes: panel
            .routes
            .iter()
            .map(|r| RouteRef {
                id: r.route_id.clone(),
                src: r.src_airport.clone(),
                dst: r.dst_airport.clone(),
            })
            .collect(),
        routes: specs,
        fixed,
        pagerank,
        model_dir: None,
        models: BTreeMap::new(),
    })
}

/// A random optimization instance over ground-truth models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProblemConfig {
    pub market: SynthConfig,
    /// Number of decision routes (all of the carrier's routes when `None`).
    pub decision_routes: Option<usize>,
    pub budget: BudgetRule,
}

/// How a synthetic problem's budget is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BudgetRule {
    /// Multiple of the carrier's observed spend on the decision routes.
    ObservedSpend(f64),
    /// Fraction of the cost of flying every decision route at `f_max`.
    CapacityFraction(f64),
    Absolute(f64),
}

impl Default for SynthProblemConfig {
    fn default() -> Self {
        SynthProblemConfig {
            market: SynthConfig::default(),
            decision_routes: None,
            budget: BudgetRule::ObservedSpend(1.0),
        }
    }
}

/// Generates a market and cuts a problem for its first carrier in the last
/// month, using the hidden models as share models.
pub fn synthetic_problem(cfg: &SynthProblemConfig) -> Result<InfluenceProblem, DataError> {
    let (BudgetRule::ObservedSpend(v) | BudgetRule::CapacityFraction(v) | BudgetRule::Absolute(v)) = cfg.budget;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(DataError::Config(format!("budget parameter must be finite and >= 0, got {v}")));
    }
    let (panel, truth) = generate_market(&cfg.market)?;
    let mut opts = ProblemOptions::new(carrier_id(0));
    if let Some(k) = cfg.decision_routes {
        if k == 0 || k > panel.routes.len() {
            return Err(DataError::Config(format!(
                "decision_routes must be in 1..={}",
                panel.routes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.market.seed ^ 0x5eed);
        let mut ids: Vec<String> = panel.routes.iter().map(|r| r.route_id.clone()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(k);
        ids.sort();
        opts.routes = Some(ids);
    }
    let mut file = build_problem(&panel, &opts)?;
    file.budget = match cfg.budget {
        BudgetRule::ObservedSpend(k) => {
            k * file
                .routes
                .iter()
                .map(|r| r.cost * r.observed_freq.unwrap_or(0.0))
                .sum::<f64>()
        }
        BudgetRule::CapacityFraction(k) => k * file.routes.iter().map(|r| r.cost * r.f_max).sum::<f64>(),
        BudgetRule::Absolute(b) => b,
    };
    file.models = file
        .routes
        .iter()
        .map(|r| (r.id.clone(), truth.models[&r.id].clone()))
        .collect();
    Ok(file.build(&file.models)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_airports: 6,
            n_routes: 10,
            n_months: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        for bad in [
            SynthConfig { n_routes: 31, n_airports: 6, ..small() },
            SynthConfig { n_carriers: 1, ..small() },
            SynthConfig { noise_std: -0.1, ..small() },
            SynthConfig { n_months: 0, ..small() },
        ] {
            assert!(matches!(bad.validate(), Err(DataError::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn dense_route_request_fills_the_graph() {
        let cfg = SynthConfig {
            n_airports: 4,
            n_routes: 12,
            n_months: 1,
            ..SynthConfig::default()
        };
        let (panel, _) = generate_market(&cfg).unwrap();
        assert_eq!(panel.routes.len(), 12);
    }

    #[test]
    fn noiseless_shares_are_model_predictions() {
        let (panel, truth) = generate_market(&small()).unwrap();
        let fv = panel.feature_vectors(&PageRankConfig::default()).unwrap();
        let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        for (i, o) in panel.observations.iter().enumerate() {
            groups.entry((&o.month, &o.route_id)).or_default().push(i);
        }
        for ((_, route), idx) in groups {
            let feats: Vec<FeatureVector> = idx.iter().map(|&i| fv[i]).collect();
            let p = truth.models[route].predict_shares(&feats).unwrap();
            for (&i, s) in idx.iter().zip(p) {
                assert_eq!(panel.observations[i].share, s);
            }
        }
    }

    #[test]
    fn synthetic_problem_shapes() {
        let p = synthetic_problem(&SynthProblemConfig {
            market: small(),
            decision_routes: Some(3),
            budget: BudgetRule::CapacityFraction(0.4),
        })
        .unwrap();
        assert_eq!(p.n_routes(), 3);
        assert_eq!(p.fixed().len(), 7);
        let full: f64 = p.routes().iter().map(|r| r.cost * r.f_max).sum();
        assert!((p.budget() - 0.4 * full).abs() < 1e-6 * full);
        assert!(p.routes().iter().all(|r| r.competitors.len() == 2));
    }
}
