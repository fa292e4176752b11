//! Per-route market-share models.
//!
//! Both model families score each carrier on a route and normalize the scores
//! with a softmax across the carriers present:
//!
//! * multi-logit: `score = w . z` over a configurable feature subset;
//! * residual MLP: `h1 = relu(z W0 + b0)`, `h(i+1) = h(i) + relu(h(i) Wi + bi)`,
//!   `score = w . h(l)`.
//!
//! `z` is the feature vector standardized with a per-route scaler that is
//! frozen at training time.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Shape, Tape, Tensor, Var};
use crate::netfeat::{FeatureVector, N_FEATURES};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("route '{0}' has no observations")]
    EmptyPanel(String),
    #[error("route '{route}' month '{month}': {count} carrier(s), need at least 2")]
    TooFewCarriers { route: String, month: String, count: usize },
    #[error("route '{route}' month '{month}': shares sum to {sum}")]
    NotSimplex { route: String, month: String, sum: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("loss became NaN at epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("need at least 2 months for cross-validation, got {0}")]
    TooFewMonths(usize),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    MultiLogit,
    Mlp { layers: usize, width: usize },
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            Architecture::MultiLogit => Ok(()),
            Architecture::Mlp { layers, width } if layers >= 2 && width >= 1 => Ok(()),
            Architecture::Mlp { layers, width } => Err(ModelError::Config(format!(
                "mlp needs layers >= 2 and width >= 1, got l={layers} d={width}"
            ))),
        }
    }

    /// Layer/width grid searched by cross-validation.
    pub fn default_grid() -> Vec<Architecture> {
        let mut grid = Vec::new();
        for layers in [3, 4, 5] {
            for width in [16, 32] {
                grid.push(Architecture::Mlp { layers, width });
            }
        }
        grid
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::MultiLogit => write!(f, "multilogit"),
            Architecture::Mlp { layers, width } => write!(f, "mlp(l={layers},d={width})"),
        }
    }
}

/// Named feature subsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Frequency, delay and safety (indices 1..=8).
    Model1,
    /// Model1 plus price, aircraft size and seat availability (0..=10).
    Model2,
    /// All 19 features including the network ones.
    All,
    Custom(Vec<usize>),
}

impl FeatureSet {
    pub fn indices(&self) -> Vec<usize> {
        match self {
            FeatureSet::Model1 => (1..=8).collect(),
            FeatureSet::Model2 => (0..=10).collect(),
            FeatureSet::All => (0..N_FEATURES).collect(),
            FeatureSet::Custom(v) => v.clone(),
        }
    }
}

/// Per-feature standardization, always 19 wide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity() -> Self {
        Scaler {
            mean: vec![0.0; N_FEATURES],
            std: vec![1.0; N_FEATURES],
        }
    }

    /// Fits mean/std over `rows`. Returns the scaler and the indices whose
    /// spread is numerically zero; those get `std = 1`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> (Scaler, Vec<usize>) {
        let rows: Vec<&FeatureVector> = rows.into_iter().collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; N_FEATURES];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.0.iter()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; N_FEATURES];
        for r in &rows {
            for j in 0..N_FEATURES {
                var[j] += (r.0[j] - mean[j]).powi(2) / n;
            }
        }
        let mut constant = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let s = v.sqrt();
                if s <= 1e-12 * mean[j].abs().max(1.0) {
                    constant.push(j);
                    1.0
                } else {
                    s
                }
            })
            .collect();
        (Scaler { mean, std }, constant)
    }

    pub fn apply(&self, f: &FeatureVector) -> [f64; N_FEATURES] {
        let mut z = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            z[j] = (f.0[j] - self.mean[j]) / self.std[j];
        }
        z
    }
}

/// Dense layer, weights row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Layer {
        Layer {
            rows,
            cols,
            weights: xavier(rows, cols, rng),
            bias: vec![0.0; cols],
        }
    }
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameters {
    MultiLogit { weights: Vec<f64> },
    Mlp {
        input: Layer,
        hidden: Vec<Layer>,
        output: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareModel {
    pub version: u32,
    pub route: String,
    pub arch: Architecture,
    pub feature_subset: Vec<usize>,
    pub scaler: Scaler,
    pub parameters: Parameters,
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    mean: Var,
    std: Vec<f64>,
    subset: Vec<usize>,
    params: BoundParams,
}

#[derive(Clone, Debug)]
enum BoundParams {
    MultiLogit {
        w: Var,
    },
    Mlp {
        w0: Var,
        b0: Var,
        hidden: Vec<(Var, Var)>,
        out: Var,
    },
}

impl BoundModel {
    /// Parameter handles in [`ShareModel::flat_params`] order.
    pub fn vars(&self) -> Vec<Var> {
        match &self.params {
            BoundParams::MultiLogit { w } => vec![*w],
            BoundParams::Mlp { w0, b0, hidden, out } => {
                let mut v = vec![*w0, *b0];
                for (w, b) in hidden {
                    v.push(*w);
                    v.push(*b);
                }
                v.push(*out);
                v
            }
        }
    }
}

impl ShareModel {
    /// Randomly initialized model (Xavier-uniform weights, zero biases).
    pub fn init(
        route: impl Into<String>,
        arch: Architecture,
        feature_subset: Vec<usize>,
        scaler: Scaler,
        seed: u64,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = feature_subset.len();
        let parameters = match arch {
            Architecture::MultiLogit => Parameters::MultiLogit {
                weights: xavier(p, 1, &mut rng),
            },
            Architecture::Mlp { layers, width } => Parameters::Mlp {
                input: Layer::xavier(p, width, &mut rng),
                hidden: (1..layers).map(|_| Layer::xavier(width, width, &mut rng)).collect(),
                output: xavier(width, 1, &mut rng),
            },
        };
        let m = ShareModel {
            version: MODEL_FORMAT_VERSION,
            route: route.into(),
            arch,
            feature_subset,
            scaler,
            parameters,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::Invalid(s));
        if self.version != MODEL_FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        self.arch.validate()?;
        if self.scaler.mean.len() != N_FEATURES || self.scaler.std.len() != N_FEATURES {
            return bad("scaler must have 19 entries".into());
        }
        if self.scaler.std.iter().any(|&s| !(s > 0.0)) {
            return bad("scaler std must be positive".into());
        }
        if self.feature_subset.is_empty() || self.feature_subset.iter().any(|&i| i >= N_FEATURES) {
            return bad(format!("feature subset {:?} out of range", self.feature_subset));
        }
        let p = self.feature_subset.len();
        match (&self.arch, &self.parameters) {
            (Architecture::MultiLogit, Parameters::MultiLogit { weights }) => {
                if weights.len() != p {
                    return bad(format!("{} weights for {p} features", weights.len()));
                }
            }
            (Architecture::Mlp { layers, width }, Parameters::Mlp { input, hidden, output }) => {
                let d = *width;
                let layer_ok = |l: &Layer, r: usize| {
                    l.rows == r && l.cols == d && l.weights.len() == r * d && l.bias.len() == d
                };
                if !layer_ok(input, p) || hidden.len() != layers - 1 || !hidden.iter().all(|l| layer_ok(l, d)) || output.len() != d {
                    return bad("mlp parameter shapes inconsistent".into());
                }
            }
            _ => return bad("parameters do not match architecture".into()),
        }
        Ok(())
    }

    /// All parameters as tensors in binding order.
    pub fn flat_params(&self) -> Vec<Tensor> {
        let t = |r: usize, c: usize, v: &Vec<f64>| Tensor::new(r, c, v.clone()).expect("validated shape");
        match &self.parameters {
            Parameters::MultiLogit { weights } => vec![t(weights.len(), 1, weights)],
            Parameters::Mlp { input, hidden, output } => {
                let mut v = vec![t(input.rows, input.cols, &input.weights), t(1, input.cols, &input.bias)];
                for l in hidden {
                    v.push(t(l.rows, l.cols, &l.weights));
                    v.push(t(1, l.cols, &l.bias));
                }
                v.push(t(output.len(), 1, output));
                v
            }
        }
    }

    fn set_flat_params(&mut self, flat: &[Vec<f64>]) {
        match &mut self.parameters {
            Parameters::MultiLogit { weights } => weights.copy_from_slice(&flat[0]),
            Parameters::Mlp { input, hidden, output } => {
                input.weights.copy_from_slice(&flat[0]);
                input.bias.copy_from_slice(&flat[1]);
                for (k, l) in hidden.iter_mut().enumerate() {
                    l.weights.copy_from_slice(&flat[2 + 2 * k]);
                    l.bias.copy_from_slice(&flat[3 + 2 * k]);
                }
                output.copy_from_slice(&flat[flat.len() - 1]);
            }
        }
    }

    /// Records the parameters on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut put = |t: Tensor| if trainable { tape.var(t) } else { tape.constant(t) };
        let flat = self.flat_params();
        let mut it = flat.into_iter();
        let params = match &self.parameters {
            Parameters::MultiLogit { .. } => BoundParams::MultiLogit { w: put(it.next().unwrap()) },
            Parameters::Mlp { hidden, .. } => {
                let w0 = put(it.next().unwrap());
                let b0 = put(it.next().unwrap());
                let hidden = hidden
                    .iter()
                    .map(|_| {
                        let w = put(it.next().unwrap());
                        let b = put(it.next().unwrap());
                        (w, b)
                    })
                    .collect();
                let out = put(it.next().unwrap());
                BoundParams::Mlp { w0, b0, hidden, out }
            }
        };
        let mean = tape.constant(Tensor::row(self.scaler.mean.clone()));
        BoundModel {
            mean,
            std: self.scaler.std.clone(),
            subset: self.feature_subset.clone(),
            params,
        }
    }

    /// Scores for each row of a raw `n x 19` feature matrix, as `n x 1`.
    pub fn scores(tape: &mut Tape, bound: &BoundModel, features: Var) -> Result<Var, AdError> {
        let s = tape.shape(features);
        if s.cols != N_FEATURES {
            return Err(AdError::ShapeMismatch {
                op: "scores",
                lhs: s,
                rhs: Shape::new(s.rows, N_FEATURES),
            });
        }
        let n = s.rows;
        let centered = tape.sub(features, bound.mean)?;
        let inv_std = tape.constant(Tensor::row(bound.std.iter().map(|s| 1.0 / s).collect()));
        let z = tape.mul(centered, inv_std)?;
        let p = bound.subset.len();
        let index: Vec<usize> = (0..n)
            .flat_map(|r| bound.subset.iter().map(move |&j| r * N_FEATURES + j))
            .collect();
        let zs = tape.gather(z, &index, Shape::new(n, p))?;
        match &bound.params {
            BoundParams::MultiLogit { w } => tape.matmul(zs, *w),
            BoundParams::Mlp { w0, b0, hidden, out } => {
                let pre = tape.matmul(zs, *w0)?;
                let pre = tape.add(pre, *b0)?;
                let mut h = tape.relu(pre)?;
                for (w, b) in hidden {
                    let pre = tape.matmul(h, *w)?;
                    let pre = tape.add(pre, *b)?;
                    let act = tape.relu(pre)?;
                    h = tape.add(h, act)?;
                }
                tape.matmul(h, *out)
            }
        }
    }

    /// Score of a single carrier's feature vector.
    pub fn score_value(&self, f: &FeatureVector) -> f64 {
        let z = self.scaler.apply(f);
        let zs: Vec<f64> = self.feature_subset.iter().map(|&j| z[j]).collect();
        match &self.parameters {
            Parameters::MultiLogit { weights } => zs.iter().zip(weights).map(|(a, b)| a * b).sum(),
            Parameters::Mlp { input, hidden, output } => {
                let dense = |x: &[f64], l: &Layer| -> Vec<f64> {
                    (0..l.cols)
                        .map(|c| {
                            let s: f64 = (0..l.rows).map(|r| x[r] * l.weights[r * l.cols + c]).sum();
                            (s + l.bias[c]).max(0.0)
                        })
                        .collect()
                };
                let mut h = dense(&zs, input);
                for l in hidden {
                    let a = dense(&h, l);
                    for (hv, av) in h.iter_mut().zip(a) {
                        *hv += av;
                    }
                }
                h.iter().zip(output).map(|(a, b)| a * b).sum()
            }
        }
    }

    /// Shares of the carriers described by `features` on this route.
    pub fn predict_shares(&self, features: &[FeatureVector]) -> Result<Vec<f64>, ModelError> {
        if features.is_empty() {
            return Err(ModelError::Dimension("no carriers".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(feature_matrix(features));
        let s = ShareModel::scores(&mut tape, &bound, x)?;
        let groups = vec![0; features.len()];
        let m = grouped_softmax(&mut tape, s, &groups, 1)?;
        Ok(tape.value(m).data().to_vec())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: ShareModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        ShareModel::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn feature_matrix(features: &[FeatureVector]) -> Tensor {
    let data = features.iter().flat_map(|f| f.0).collect();
    Tensor::new(features.len(), N_FEATURES, data).expect("19 columns")
}

/// Softmax of `scores` (`n x 1`) within each group.
///
/// Each group is shifted by its current maximum before exponentiation; the
/// shift is a constant and softmax is shift-invariant, so gradients are exact.
pub fn grouped_softmax(tape: &mut Tape, scores: Var, groups: &[usize], n_groups: usize) -> Result<Var, AdError> {
    let n = groups.len();
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (&g, &s) in groups.iter().zip(tape.value(scores).data()) {
        max[g] = max[g].max(s);
    }
    let shift = tape.constant(Tensor::column(groups.iter().map(|&g| max[g]).collect()));
    let shifted = tape.sub(scores, shift)?;
    let e = tape.exp(shifted)?;
    let denom = tape.scatter(e, groups, Shape::new(n_groups, 1))?;
    let back = tape.gather(denom, groups, Shape::new(n, 1))?;
    tape.div(e, back)
}

/// Learning schedule and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_ratio: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decay_ratio: 0.96,
            decay_every: 100,
            epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning_rate must be > 0".into()));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio <= 1.0) {
            return Err(ModelError::Config("decay_ratio must be in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(ModelError::Config("decay_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_ratio.powi((epoch / self.decay_every) as i32)
    }
}

/// One period of one route: every carrier present with its features and share.
#[derive(Clone, Debug, PartialEq)]
pub struct MonthSample {
    pub month: String,
    pub carriers: Vec<String>,
    pub features: Vec<FeatureVector>,
    pub shares: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteData {
    pub route: String,
    pub months: Vec<MonthSample>,
}

impl RouteData {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.months.is_empty() {
            return Err(ModelError::EmptyPanel(self.route.clone()));
        }
        for m in &self.months {
            if m.features.len() != m.shares.len() || m.carriers.len() != m.shares.len() {
                return Err(ModelError::Dimension(format!(
                    "month '{}': {} carriers, {} feature rows, {} shares",
                    m.month,
                    m.carriers.len(),
                    m.features.len(),
                    m.shares.len()
                )));
            }
            if m.shares.len() < 2 {
                return Err(ModelError::TooFewCarriers {
                    route: self.route.clone(),
                    month: m.month.clone(),
                    count: m.shares.len(),
                });
            }
            let sum: f64 = m.shares.iter().sum();
            if !((sum - 1.0).abs() <= 1e-6) {
                return Err(ModelError::NotSimplex {
                    route: self.route.clone(),
                    month: m.month.clone(),
                    sum,
                });
            }
        }
        Ok(())
    }

    /// Months at the given positions.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> RouteData {
        RouteData {
            route: self.route.clone(),
            months: self
                .months
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, m)| m.clone())
                .collect(),
        }
    }
}

struct Stacked {
    x: Tensor,
    y: Tensor,
    groups: Vec<usize>,
    n_groups: usize,
}

fn stack(data: &RouteData) -> Stacked {
    let mut feats = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for (g, m) in data.months.iter().enumerate() {
        feats.extend_from_slice(&m.features);
        y.extend_from_slice(&m.shares);
        groups.extend(std::iter::repeat_n(g, m.shares.len()));
    }
    Stacked {
        x: feature_matrix(&feats),
        y: Tensor::column(y),
        groups,
        n_groups: data.months.len(),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ShareModel,
    /// Mean squared error after each epoch's forward pass.
    pub losses: Vec<f64>,
    /// Features dropped because they were constant in the training data.
    pub dropped: Vec<usize>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Vec<f64>]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            for i in 0..p.len() {
                self.m[k][i] = Self::B1 * self.m[k][i] + (1.0 - Self::B1) * g[i];
                self.v[k][i] = Self::B2 * self.v[k][i] + (1.0 - Self::B2) * g[i] * g[i];
                let mh = self.m[k][i] / c1;
                let vh = self.v[k][i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

/// Fits a model to a route's panel by full-batch Adam on the share MSE.
pub fn train(
    data: &RouteData,
    arch: &Architecture,
    subset: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    data.validate()?;
    cfg.validate()?;
    let rows = data.months.iter().flat_map(|m| m.features.iter());
    let (scaler, constant) = Scaler::fit(rows);
    let dropped: Vec<usize> = subset.iter().copied().filter(|j| constant.contains(j)).collect();
    if !dropped.is_empty() {
        log::info!("route {}: dropping constant features {:?}", data.route, dropped);
    }
    let active: Vec<usize> = subset.iter().copied().filter(|j| !constant.contains(j)).collect();
    if active.is_empty() {
        return Err(ModelError::Config(format!(
            "route {}: every selected feature is constant",
            data.route
        )));
    }
    let mut model = ShareModel::init(data.route.clone(), arch.clone(), active, scaler, cfg.seed)?;
    let st = stack(data);
    let n = st.y.data().len() as f64;

    let mut params: Vec<Vec<f64>> = model.flat_params().into_iter().map(Tensor::into_data).collect();
    let mut adam = Adam::new(&params);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        model.set_flat_params(&params);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(st.x.clone());
        let s = ShareModel::scores(&mut tape, &bound, x)?;
        let m = grouped_softmax(&mut tape, s, &st.groups, st.n_groups)?;
        let y = tape.constant(st.y.clone());
        let diff = tape.sub(m, y)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, 1.0 / n)?;
        let lv = tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(ModelError::NanLoss { epoch });
        }
        losses.push(lv);
        let grads = tape.gradient(loss, &bound.vars())?;
        adam.step(&mut params, &grads, cfg.rate_at(epoch));
    }
    model.set_flat_params(&params);
    Ok(TrainOutcome {
        model,
        losses,
        dropped,
    })
}

/// Predicted and observed shares for every (month, carrier) row.
pub fn predictions(model: &ShareModel, data: &RouteData) -> Result<Vec<(f64, f64)>, ModelError> {
    let mut out = Vec::new();
    for m in &data.months {
        let p = model.predict_shares(&m.features)?;
        out.extend(p.into_iter().zip(m.shares.iter().copied()));
    }
    Ok(out)
}

pub fn rmse(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    (pairs.iter().map(|(p, o)| (p - o).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
}

/// Coefficient of determination of predictions against observations.
pub fn r_squared(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    let ss_tot: f64 = pairs.iter().map(|(_, o)| (o - mean).powi(2)).sum();
    let ss_res: f64 = pairs.iter().map(|(p, o)| (p - o).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// RMSE of the constant `1/K` prediction.
pub fn uniform_rmse(data: &RouteData) -> f64 {
    let pairs: Vec<(f64, f64)> = data
        .months
        .iter()
        .flat_map(|m| {
            let u = 1.0 / m.shares.len() as f64;
            m.shares.iter().map(move |&s| (u, s))
        })
        .collect();
    rmse(&pairs)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchScore {
    pub arch: Architecture,
    pub fold_rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub route: String,
    pub folds: usize,
    pub scores: Vec<ArchScore>,
    pub best: Architecture,
    pub median_rmse: f64,
    pub mean_rmse: f64,
    pub r2: f64,
}

/// Leave-one-month-out selection over `grid`; the winner is refit on every month.
pub fn cross_validate(
    data: &RouteData,
    grid: &[Architecture],
    subset: &[usize],
    cfg: &TrainConfig,
) -> Result<(ShareModel, CvReport), ModelError> {
    data.validate()?;
    let n = data.months.len();
    if n < 2 {
        return Err(ModelError::TooFewMonths(n));
    }
    if grid.is_empty() {
        return Err(ModelError::Config("empty architecture grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut pooled = Vec::with_capacity(grid.len());
    for arch in grid {
        let mut fold_rmse = Vec::with_capacity(n);
        let mut pairs_all = Vec::new();
        for fold in 0..n {
            let train_set = data.select(|i| i != fold);
            let held = data.select(|i| i == fold);
            let fit = train(&train_set, arch, subset, cfg)?;
            let pairs = predictions(&fit.model, &held)?;
            fold_rmse.push(rmse(&pairs));
            pairs_all.extend(pairs);
        }
        let mean_rmse = fold_rmse.iter().sum::<f64>() / n as f64;
        scores.push(ArchScore {
            arch: arch.clone(),
            fold_rmse,
            mean_rmse,
        });
        pooled.push(pairs_all);
    }
    let best_idx = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_rmse.total_cmp(&b.1.mean_rmse))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let best = scores[best_idx].clone();
    let model = train(data, &best.arch, subset, cfg)?.model;
    let report = CvReport {
        route: data.route.clone(),
        folds: n,
        median_rmse: median(&best.fold_rmse),
        mean_rmse: best.mean_rmse,
        r2: r_squared(&pooled[best_idx]),
        best: best.arch,
        scores,
    };
    Ok((model, report))
}
