//! Carrier transportation networks and their differentiable features.
//!
//! A carrier's schedule is a weighted adjacency matrix over airports. From it
//! we derive in/out degree, PageRank and ego-network density per airport, and
//! the 19-entry per-(route, carrier) feature vector that the share models
//! consume. All network features are built on an [`autodiff::Tape`] so the
//! share prediction can be differentiated back to the frequency entries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Shape, Tape, Tensor, Var};

pub const N_FEATURES: usize = 19;

/// Column index of the flight frequency feature.
pub const FREQ: usize = 1;

/// Feature names in vector order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
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
    "in_degree_src",
    "in_degree_dst",
    "out_degree_src",
    "out_degree_dst",
    "pagerank_src",
    "pagerank_dst",
    "ego_density_src",
    "ego_density_dst",
];

/// Positions of the carrier/route attributes that stay fixed during optimization.
pub const STATIC_INDICES: [usize; 10] = [0, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Positions derived from the frequency matrix.
pub const NETWORK_INDICES: [usize; 9] = [1, 11, 12, 13, 14, 15, 16, 17, 18];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unknown airport '{0}'")]
    UnknownAirport(String),
    #[error("duplicate airport '{0}'")]
    DuplicateAirport(String),
    #[error("route '{0}' connects an airport to itself")]
    SelfRoute(String),
    #[error("duplicate route '{0}'")]
    DuplicateRoute(String),
    #[error("unknown route '{0}'")]
    UnknownRoute(String),
    #[error("no static features for route '{route}' carrier '{carrier}'")]
    MissingStatic { route: String, carrier: String },
    #[error("frequency on ({src}, {dst}) which is not a route")]
    OffMask { src: usize, dst: usize },
    #[error("frequency matrix has {got} entries, network needs {want}")]
    Size { got: usize, want: usize },
    #[error("feature csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteEdge {
    pub id: String,
    pub src: usize,
    pub dst: usize,
}

/// Airports plus the structural route set.
#[derive(Clone, Debug)]
pub struct Network {
    airports: Vec<String>,
    airport_index: HashMap<String, usize>,
    mask: Vec<bool>,
    routes: Vec<RouteEdge>,
    route_index: BTreeMap<String, usize>,
    ego: EgoIndex,
}

/// Precomputed linear map from the flattened matrix to per-airport density.
#[derive(Clone, Debug, Default)]
struct EgoIndex {
    entries: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

impl Network {
    /// `routes` are `(route_id, src_airport, dst_airport)`.
    pub fn new<S: AsRef<str>>(airports: Vec<String>, routes: &[(S, S, S)]) -> Result<Self, NetError> {
        let mut airport_index = HashMap::new();
        for (i, a) in airports.iter().enumerate() {
            if airport_index.insert(a.clone(), i).is_some() {
                return Err(NetError::DuplicateAirport(a.clone()));
            }
        }
        let n = airports.len();
        let mut mask = vec![false; n * n];
        let mut edges = Vec::with_capacity(routes.len());
        let mut route_index = BTreeMap::new();
        for (id, s, d) in routes {
            let (id, s, d) = (id.as_ref(), s.as_ref(), d.as_ref());
            let src = *airport_index
                .get(s)
                .ok_or_else(|| NetError::UnknownAirport(s.to_string()))?;
            let dst = *airport_index
                .get(d)
                .ok_or_else(|| NetError::UnknownAirport(d.to_string()))?;
            if src == dst {
                return Err(NetError::SelfRoute(id.to_string()));
            }
            if mask[src * n + dst] || route_index.contains_key(id) {
                return Err(NetError::DuplicateRoute(id.to_string()));
            }
            mask[src * n + dst] = true;
            route_index.insert(id.to_string(), edges.len());
            edges.push(RouteEdge {
                id: id.to_string(),
                src,
                dst,
            });
        }
        let mut net = Network {
            airports,
            airport_index,
            mask,
            routes: edges,
            route_index,
            ego: EgoIndex::default(),
        };
        net.ego = net.build_ego_index();
        Ok(net)
    }

    pub fn n_airports(&self) -> usize {
        self.airports.len()
    }

    pub fn airports(&self) -> &[String] {
        &self.airports
    }

    pub fn airport(&self, id: &str) -> Option<usize> {
        self.airport_index.get(id).copied()
    }

    pub fn routes(&self) -> &[RouteEdge] {
        &self.routes
    }

    pub fn route(&self, id: &str) -> Option<&RouteEdge> {
        self.route_index.get(id).map(|&i| &self.routes[i])
    }

    pub fn route_position(&self, id: &str) -> Option<usize> {
        self.route_index.get(id).copied()
    }

    pub fn has_route(&self, src: usize, dst: usize) -> bool {
        let n = self.n_airports();
        src < n && dst < n && self.mask[src * n + dst]
    }

    /// The ego vertex plus every airport sharing a route with it, sorted.
    pub fn ego_neighborhood(&self, v: usize) -> Vec<usize> {
        let n = self.n_airports();
        let mut set = BTreeSet::new();
        set.insert(v);
        for u in 0..n {
            if self.mask[v * n + u] || self.mask[u * n + v] {
                set.insert(u);
            }
        }
        set.into_iter().collect()
    }

    fn build_ego_index(&self) -> EgoIndex {
        let n = self.n_airports();
        let mut idx = EgoIndex::default();
        for v in 0..n {
            let hood = self.ego_neighborhood(v);
            let k = hood.len();
            if k < 2 {
                continue;
            }
            let w = 1.0 / (k * (k - 1)) as f64;
            for &i in &hood {
                for &j in &hood {
                    if self.mask[i * n + j] {
                        idx.entries.push(i * n + j);
                        idx.targets.push(v);
                        idx.weights.push(w);
                    }
                }
            }
        }
        idx
    }
}

/// A carrier's flights per month between airports.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMatrix {
    n: usize,
    values: Vec<f64>,
    pub carrier: String,
}

impl FrequencyMatrix {
    pub fn zeros(n: usize, carrier: impl Into<String>) -> Self {
        FrequencyMatrix {
            n,
            values: vec![0.0; n * n],
            carrier: carrier.into(),
        }
    }

    pub fn from_values(net: &Network, values: Vec<f64>, carrier: impl Into<String>) -> Result<Self, NetError> {
        let n = net.n_airports();
        if values.len() != n * n {
            return Err(NetError::Size {
                got: values.len(),
                want: n * n,
            });
        }
        for (k, &v) in values.iter().enumerate() {
            if v != 0.0 && !net.mask[k] {
                return Err(NetError::OffMask { src: k / n, dst: k % n });
            }
        }
        Ok(FrequencyMatrix {
            n,
            values,
            carrier: carrier.into(),
        })
    }

    /// Builds a matrix from per-route frequencies keyed by route id.
    pub fn from_routes<'a>(
        net: &Network,
        freqs: impl IntoIterator<Item = (&'a str, f64)>,
        carrier: impl Into<String>,
    ) -> Result<Self, NetError> {
        let mut m = FrequencyMatrix::zeros(net.n_airports(), carrier);
        for (id, f) in freqs {
            let r = net
                .route(id)
                .ok_or_else(|| NetError::UnknownRoute(id.to_string()))?;
            m.values[r.src * m.n + r.dst] = f;
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, src: usize, dst: usize) -> f64 {
        self.values[src * self.n + dst]
    }

    pub fn set(&mut self, src: usize, dst: usize, v: f64) {
        self.values[src * self.n + dst] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.n, self.n, self.values.clone()).expect("square matrix")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageRankConfig {
    pub damping: f64,
    pub iterations: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        PageRankConfig {
            damping: 0.85,
            iterations: 50,
        }
    }
}

/// Returns `(in_degree, out_degree)`: column sums as `1 x n`, row sums as
/// `n x 1`. Either can be gathered by airport index.
pub fn degree_centrality(tape: &mut Tape, a: Var) -> Result<(Var, Var), AdError> {
    let out_deg = tape.row_sum(a)?;
    let in_deg = tape.col_sum(a)?;
    Ok((in_deg, out_deg))
}

/// Ego density of every airport as an `n x 1` column.
pub fn ego_density_all(tape: &mut Tape, net: &Network, a: Var) -> Result<Var, AdError> {
    let n = net.n_airports();
    let e = &net.ego;
    let m = e.entries.len();
    let picked = tape.gather(a, &e.entries, Shape::new(m, 1))?;
    let w = tape.constant(Tensor::column(e.weights.clone()));
    let weighted = tape.mul(picked, w)?;
    tape.scatter(weighted, &e.targets, Shape::new(n, 1))
}

/// Ego density of one airport; isolated airports have density 0.
pub fn ego_density(tape: &mut Tape, net: &Network, a: Var, v: usize) -> Result<Var, AdError> {
    let all = ego_density_all(tape, net, a)?;
    tape.gather(all, &[v], Shape::SCALAR)
}

/// PageRank by `iterations` unrolled power steps from the uniform vector.
///
/// Rows with zero out-weight jump uniformly; that replacement is a constant,
/// so dangling rows pass no gradient back to `a`.
pub fn pagerank(tape: &mut Tape, a: Var, cfg: &PageRankConfig) -> Result<Var, AdError> {
    let n = tape.shape(a).rows;
    let nf = n as f64;
    let out = tape.row_sum(a)?;
    let dangling: Vec<bool> = tape.value(out).data().iter().map(|&s| s <= 0.0).collect();
    let keep = tape.constant(Tensor::column(
        dangling.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect(),
    ));
    let pad = tape.constant(Tensor::column(
        dangling.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
    ));
    let jump = tape.constant(Tensor::column(
        dangling.iter().map(|&d| if d { 1.0 / nf } else { 0.0 }).collect(),
    ));
    let kept = tape.mul(a, keep)?;
    let denom = tape.add(out, pad)?;
    let normalized = tape.div(kept, denom)?;
    let transition = tape.add(normalized, jump)?;
    let teleport = tape.scalar_const((1.0 - cfg.damping) / nf);
    let mut p = tape.constant(Tensor::filled(1, n, 1.0 / nf));
    for _ in 0..cfg.iterations {
        let step = tape.matmul(p, transition)?;
        let damped = tape.scale(step, cfg.damping)?;
        p = tape.add(damped, teleport)?;
    }
    Ok(p)
}

/// Per-airport features as plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkFeatures {
    pub in_degree: Vec<f64>,
    pub out_degree: Vec<f64>,
    pub pagerank: Vec<f64>,
    pub ego_density: Vec<f64>,
}

/// Differentiable handles to the per-airport features.
#[derive(Clone, Copy, Debug)]
pub struct NetworkFeatureVars {
    pub in_degree: Var,
    pub out_degree: Var,
    pub pagerank: Var,
    pub ego_density: Var,
}

pub fn network_feature_vars(
    tape: &mut Tape,
    net: &Network,
    a: Var,
    cfg: &PageRankConfig,
) -> Result<NetworkFeatureVars, AdError> {
    let (in_degree, out_degree) = degree_centrality(tape, a)?;
    let pagerank = pagerank(tape, a, cfg)?;
    let ego_density = ego_density_all(tape, net, a)?;
    Ok(NetworkFeatureVars {
        in_degree,
        out_degree,
        pagerank,
        ego_density,
    })
}

impl NetworkFeatures {
    pub fn compute(net: &Network, a: &FrequencyMatrix, cfg: &PageRankConfig) -> Result<Self, NetError> {
        if a.n() != net.n_airports() {
            return Err(NetError::Size {
                got: a.n() * a.n(),
                want: net.n_airports() * net.n_airports(),
            });
        }
        let mut tape = Tape::new();
        let av = tape.constant(a.to_tensor());
        let v = network_feature_vars(&mut tape, net, av, cfg)?;
        let get = |x: Var| tape.value(x).data().to_vec();
        Ok(NetworkFeatures {
            in_degree: get(v.in_degree),
            out_degree: get(v.out_degree),
            pagerank: get(v.pagerank),
            ego_density: get(v.ego_density),
        })
    }
}

/// Differentiable network part of the feature matrix, one row per route in
/// `routes`: frequency at column 1 and the eight airport features at 11..=18.
/// Static columns are zero.
pub fn network_feature_rows(
    tape: &mut Tape,
    net: &Network,
    a: Var,
    routes: &[(usize, usize)],
    cfg: &PageRankConfig,
) -> Result<Var, AdError> {
    let n = net.n_airports();
    let rows = routes.len();
    let shape = Shape::new(rows, N_FEATURES);
    let v = network_feature_vars(tape, net, a, cfg)?;
    let src: Vec<usize> = routes.iter().map(|r| r.0).collect();
    let dst: Vec<usize> = routes.iter().map(|r| r.1).collect();
    let freq_idx: Vec<usize> = routes.iter().map(|&(s, d)| s * n + d).collect();
    let sources: [(Var, &[usize], usize); 9] = [
        (a, &freq_idx, FREQ),
        (v.in_degree, &src, 11),
        (v.in_degree, &dst, 12),
        (v.out_degree, &src, 13),
        (v.out_degree, &dst, 14),
        (v.pagerank, &src, 15),
        (v.pagerank, &dst, 16),
        (v.ego_density, &src, 17),
        (v.ego_density, &dst, 18),
    ];
    let mut acc: Option<Var> = None;
    for (from, index, col) in sources {
        let picked = tape.gather(from, index, Shape::new(rows, 1))?;
        let place: Vec<usize> = (0..rows).map(|r| r * N_FEATURES + col).collect();
        let placed = tape.scatter(picked, &place, shape)?;
        acc = Some(match acc {
            None => placed,
            Some(prev) => tape.add(prev, placed)?,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::zeros(rows, N_FEATURES))),
    }
}

/// Carrier attributes that do not depend on the frequency matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticFeatures {
    pub price: f64,
    pub delay_ratio: f64,
    pub delay_min: f64,
    pub cancel_ratio: f64,
    pub divert_ratio: f64,
    pub fatal: f64,
    pub serious: f64,
    pub minor: f64,
    pub aircraft_size: f64,
    pub seat_avail: f64,
}

impl StaticFeatures {
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.price,
            self.delay_ratio,
            self.delay_min,
            self.cancel_ratio,
            self.divert_ratio,
            self.fatal,
            self.serious,
            self.minor,
            self.aircraft_size,
            self.seat_avail,
        ]
    }

    pub fn from_array(a: [f64; 10]) -> Self {
        StaticFeatures {
            price: a[0],
            delay_ratio: a[1],
            delay_min: a[2],
            cancel_ratio: a[3],
            divert_ratio: a[4],
            fatal: a[5],
            serious: a[6],
            minor: a[7],
            aircraft_size: a[8],
            seat_avail: a[9],
        }
    }

    /// Places the static values at their vector positions, zeros elsewhere.
    pub fn to_feature_row(&self) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for (&i, v) in STATIC_INDICES.iter().zip(self.to_array()) {
            out[i] = v;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn values(&self) -> &[f64; N_FEATURES] {
        &self.0
    }

    pub fn statics(&self) -> StaticFeatures {
        let mut a = [0.0; 10];
        for (k, &i) in STATIC_INDICES.iter().enumerate() {
            a[k] = self.0[i];
        }
        StaticFeatures::from_array(a)
    }
}

/// Feature vector of `route` for the carrier whose schedule is `a`.
pub fn assemble_route_features(
    statics: &StaticFeatures,
    feats: &NetworkFeatures,
    a: &FrequencyMatrix,
    route: &RouteEdge,
) -> FeatureVector {
    let mut f = statics.to_feature_row();
    let (s, d) = (route.src, route.dst);
    f[FREQ] = a.get(s, d);
    f[11] = feats.in_degree[s];
    f[12] = feats.in_degree[d];
    f[13] = feats.out_degree[s];
    f[14] = feats.out_degree[d];
    f[15] = feats.pagerank[s];
    f[16] = feats.pagerank[d];
    f[17] = feats.ego_density[s];
    f[18] = feats.ego_density[d];
    FeatureVector(f)
}

/// Looks up the carrier's schedule and static attributes and assembles the
/// feature vector for `(route, carrier)`.
pub fn assemble_features(
    net: &Network,
    schedules: &BTreeMap<String, FrequencyMatrix>,
    statics: &BTreeMap<(String, String), StaticFeatures>,
    route: &str,
    carrier: &str,
    cfg: &PageRankConfig,
) -> Result<FeatureVector, NetError> {
    let edge = net
        .route(route)
        .ok_or_else(|| NetError::UnknownRoute(route.to_string()))?;
    let missing = || NetError::MissingStatic {
        route: route.to_string(),
        carrier: carrier.to_string(),
    };
    let st = statics
        .get(&(route.to_string(), carrier.to_string()))
        .ok_or_else(missing)?;
    let zero;
    let a = match schedules.get(carrier) {
        Some(a) => a,
        None => {
            zero = FrequencyMatrix::zeros(net.n_airports(), carrier);
            &zero
        }
    };
    let feats = NetworkFeatures::compute(net, a, cfg)?;
    Ok(assemble_route_features(st, &feats, a, edge))
}

/// Writes feature vectors as CSV with a header of feature names.
pub fn write_features_csv<W: io::Write>(w: W, rows: &[FeatureVector]) -> Result<(), NetError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| NetError::Csv(e.to_string());
    wtr.write_record(FEATURE_NAMES).map_err(err)?;
    for r in rows {
        wtr.serialize(r.0.as_slice()).map_err(err)?;
    }
    wtr.flush().map_err(|e| NetError::Csv(e.to_string()))
}

/// Reads feature vectors, mapping columns by header name (any column order).
pub fn read_features_csv<R: io::Read>(r: R) -> Result<Vec<FeatureVector>, NetError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(|e| NetError::Csv(e.to_string()))?.clone();
    let mut map = [usize::MAX; N_FEATURES];
    for (col, h) in headers.iter().enumerate() {
        let idx = feature_index(h).ok_or_else(|| NetError::Csv(format!("unknown column '{h}'")))?;
        map[idx] = col;
    }
    if let Some(i) = map.iter().position(|&c| c == usize::MAX) {
        return Err(NetError::Csv(format!("missing column '{}'", FEATURE_NAMES[i])));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| NetError::Csv(e.to_string()))?;
        let mut f = [0.0; N_FEATURES];
        for (i, &col) in map.iter().enumerate() {
            let field = rec.get(col).unwrap_or("");
            f[i] = field.parse().map_err(|_| {
                NetError::Csv(format!("row {}: column '{}': bad number '{field}'", line + 2, FEATURE_NAMES[i]))
            })?;
        }
        out.push(FeatureVector(f));
    }
    Ok(out)
}
