use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use skyreach::aga::{AgaConfig, AgaError, Calibration};
use skyreach::baselines::{BaselineError, BruteForceConfig, GreedyConfig};
use skyreach::data::{self, GroundTruth, ProblemOptions, SynthConfig, GROUND_TRUTH_FILE};
use skyreach::netfeat::PageRankConfig;
use skyreach::objective::{model_path, InfluenceProblem, ProblemFile};
use skyreach::report::{self, BenchmarkRow, MethodConfig, RunError, RunReport};
use skyreach::sharemodel::{self, Architecture, FeatureSet, RouteData, ShareModel, TrainConfig};

use crate::{
    BenchmarkArgs, Cli, Command, GenDataArgs, MakeProblemArgs, MethodArgs, OptimizeArgs, PredictArgs, TrainArgs,
};

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const BENCHMARK_FILE: &str = "benchmark.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const PROBLEM_FILE: &str = "problem.json";

/// Bad flags, unreadable inputs or invalid configuration (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(UsageError(format!("{:#}", e.into())))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        2
    } else {
        1
    }
}

/// Configuration problems inside a run count as usage errors.
fn classify(e: RunError) -> anyhow::Error {
    match e {
        RunError::Aga(AgaError::Config(_) | AgaError::MissingObserved(_)) | RunError::Baseline(BaselineError::Config(_)) => {
            usage(e)
        }
        other => other.into(),
    }
}

struct Global {
    seed: u64,
    out: PathBuf,
    deterministic: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage(anyhow!("--threads must be >= 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let g = Global {
        seed: cli.seed.unwrap_or(0),
        out: cli.out,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&g, a, cli.seed),
        Command::Train(a) => train(&g, a),
        Command::Predict(a) => predict(&g, a),
        Command::MakeProblem(a) => make_problem(&g, a),
        Command::Optimize(a) => optimize(&g, a),
        Command::Benchmark(a) => benchmark(&g, a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(g: &Global, a: GenDataArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(usage)?;
            serde_json::from_str::<SynthConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(usage)?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.airports {
        cfg.n_airports = v;
    }
    if let Some(v) = a.routes {
        cfg.n_routes = v;
    }
    if let Some(v) = a.carriers {
        cfg.n_carriers = v;
    }
    if let Some(v) = a.months {
        cfg.n_months = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;

    let (panel, truth) = data::generate_market(&cfg)?;
    create_out(&g.out)?;
    data::save_panel(&panel, &g.out)?;
    truth.save(&g.out.join(GROUND_TRUTH_FILE))?;

    // a ready-to-run problem for the first carrier over the hidden models
    let carrier = panel.carriers().into_iter().next().ok_or_else(|| anyhow!("no carriers"))?;
    let mut problem = data::build_problem(&panel, &ProblemOptions::new(carrier))?;
    problem.models = problem
        .routes
        .iter()
        .map(|r| (r.id.clone(), truth.models[&r.id].clone()))
        .collect();
    problem.save(&g.out.join(PROBLEM_FILE))?;

    println!(
        "wrote {} airports, {} routes, {} observations to {}",
        panel.airports.len(),
        panel.routes.len(),
        panel.observations.len(),
        g.out.display()
    );
    Ok(())
}

fn load_panel(dir: &Path) -> Result<data::MarketPanel> {
    if !dir.is_dir() {
        return Err(usage(anyhow!("panel directory {} does not exist", dir.display())));
    }
    data::load_panel(dir).map_err(usage)
}

#[derive(Serialize)]
struct RouteSummary {
    route: String,
    arch: Architecture,
    months: usize,
    rmse: f64,
    r2: f64,
    uniform_rmse: f64,
    dropped_features: Vec<usize>,
}

#[derive(Serialize)]
struct TrainSummary {
    evaluation: String,
    features: Vec<usize>,
    config: TrainConfig,
    median_rmse: f64,
    mean_rmse: f64,
    median_r2: f64,
    mean_r2: f64,
    median_uniform_rmse: f64,
    routes: Vec<RouteSummary>,
}

fn parse_features(s: &str) -> Result<FeatureSet> {
    match s {
        "model1" => Ok(FeatureSet::Model1),
        "model2" => Ok(FeatureSet::Model2),
        "all" => Ok(FeatureSet::All),
        other => Err(usage(anyhow!("unknown feature set '{other}' (valid: model1, model2, all)"))),
    }
}

enum ArchChoice {
    Fixed(Architecture),
    CrossValidate,
}

fn fit_route(
    d: &RouteData,
    arch: &ArchChoice,
    subset: &[usize],
    cfg: &TrainConfig,
    holdout: usize,
) -> Result<(ShareModel, RouteSummary)> {
    let n = d.months.len();
    match arch {
        ArchChoice::CrossValidate => {
            let (model, rep) = sharemodel::cross_validate(d, &Architecture::default_grid(), subset, cfg)
                .with_context(|| format!("route {}", d.route))?;
            let summary = RouteSummary {
                route: d.route.clone(),
                arch: rep.best.clone(),
                months: n,
                rmse: rep.mean_rmse,
                r2: rep.r2,
                uniform_rmse: sharemodel::uniform_rmse(d),
                dropped_features: Vec::new(),
            };
            Ok((model, summary))
        }
        ArchChoice::Fixed(a) => {
            let eval_set = if holdout > 0 {
                if n <= holdout {
                    return Err(usage(anyhow!(
                        "route {} has {n} usable months, cannot hold out {holdout}",
                        d.route
                    )));
                }
                let fit = sharemodel::train(&d.select(|i| i < n - holdout), a, subset, cfg)?;
                Some((fit.model, d.select(|i| i >= n - holdout)))
            } else {
                None
            };
            let full = sharemodel::train(d, a, subset, cfg).with_context(|| format!("route {}", d.route))?;
            let (eval_model, eval_data) = match &eval_set {
                Some((m, held)) => (m, held),
                None => (&full.model, d),
            };
            let pairs = sharemodel::predictions(eval_model, eval_data)?;
            let summary = RouteSummary {
                route: d.route.clone(),
                arch: a.clone(),
                months: n,
                rmse: sharemodel::rmse(&pairs),
                r2: sharemodel::r_squared(&pairs),
                uniform_rmse: sharemodel::uniform_rmse(eval_data),
                dropped_features: full.dropped,
            };
            Ok((full.model, summary))
        }
    }
}

fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let panel = load_panel(&a.panel)?;
    let arch = match a.arch.as_str() {
        "multilogit" => ArchChoice::Fixed(Architecture::MultiLogit),
        "mlp" => ArchChoice::Fixed(Architecture::Mlp {
            layers: a.layers,
            width: a.width,
        }),
        "cv" => ArchChoice::CrossValidate,
        other => return Err(usage(anyhow!("unknown architecture '{other}' (valid: multilogit, mlp, cv)"))),
    };
    if let ArchChoice::Fixed(arch) = &arch {
        arch.validate().map_err(usage)?;
    }
    let subset = parse_features(&a.features)?.indices();
    let cfg = TrainConfig {
        learning_rate: a.lr,
        decay_ratio: a.decay_ratio,
        decay_every: a.decay_every,
        epochs: a.epochs,
        seed: g.seed,
    };
    cfg.validate().map_err(usage)?;

    let mut sets = panel.route_data(&PageRankConfig::default())?;
    if let Some(only) = &a.routes {
        for r in only {
            if !sets.iter().any(|d| &d.route == r) {
                return Err(usage(anyhow!("route '{r}' has no training data")));
            }
        }
        sets.retain(|d| only.contains(&d.route));
    }
    if sets.is_empty() {
        return Err(usage(anyhow!("panel has no route with competing carriers")));
    }

    info!("training {} routes", sets.len());
    let fitted: Vec<(ShareModel, RouteSummary)> = sets
        .par_iter()
        .map(|d| fit_route(d, &arch, &subset, &cfg, a.holdout))
        .collect::<Result<_>>()?;

    let models_dir = a.models.unwrap_or_else(|| g.out.join("models"));
    create_out(&models_dir)?;
    for (m, _) in &fitted {
        m.save(&model_path(&models_dir, &m.route))?;
    }
    let routes: Vec<RouteSummary> = fitted.into_iter().map(|(_, s)| s).collect();
    let col = |f: fn(&RouteSummary) -> f64| routes.iter().map(f).collect::<Vec<f64>>();
    let (rm, r2, un) = (col(|s| s.rmse), col(|s| s.r2), col(|s| s.uniform_rmse));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = TrainSummary {
        evaluation: match (&arch, a.holdout) {
            (ArchChoice::CrossValidate, _) => "leave-one-month-out".into(),
            (_, 0) => "in-sample".into(),
            (_, h) => format!("last {h} month(s) held out"),
        },
        features: subset,
        config: cfg,
        median_rmse: sharemodel::median(&rm),
        mean_rmse: mean(&rm),
        median_r2: sharemodel::median(&r2),
        mean_r2: mean(&r2),
        median_uniform_rmse: sharemodel::median(&un),
        routes,
    };
    create_out(&g.out)?;
    write_json(&g.out.join(TRAIN_SUMMARY_FILE), &summary)?;
    println!(
        "{} routes ({}): RMSE median {:.6} mean {:.6}; R2 median {:.4} mean {:.4}; uniform RMSE median {:.6}",
        summary.routes.len(),
        summary.evaluation,
        summary.median_rmse,
        summary.mean_rmse,
        summary.median_r2,
        summary.mean_r2,
        summary.median_uniform_rmse
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    month: &'a str,
    route_id: &'a str,
    carrier_id: &'a str,
    share: f64,
    predicted: f64,
}

fn predict(g: &Global, a: PredictArgs) -> Result<()> {
    let panel = load_panel(&a.panel)?;
    let models_dir = a.models.unwrap_or_else(|| g.out.join("models"));
    if !models_dir.is_dir() {
        return Err(usage(anyhow!("model directory {} does not exist", models_dir.display())));
    }
    let sets = panel.route_data(&PageRankConfig::default())?;
    create_out(&g.out)?;
    let path = g.out.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut pairs = Vec::new();
    let mut missing = 0;
    for d in &sets {
        let p = model_path(&models_dir, &d.route);
        if !p.exists() {
            missing += 1;
            continue;
        }
        let model = ShareModel::load(&p).map_err(usage)?;
        for m in &d.months {
            if a.month.as_ref().is_some_and(|want| *want != m.month) {
                continue;
            }
            let pred = model.predict_shares(&m.features)?;
            for ((c, &s), &p) in m.carriers.iter().zip(&m.shares).zip(&pred) {
                w.serialize(PredictionRow {
                    month: &m.month,
                    route_id: &d.route,
                    carrier_id: c,
                    share: s,
                    predicted: p,
                })?;
                pairs.push((p, s));
            }
        }
    }
    w.flush()?;
    if pairs.is_empty() {
        return Err(usage(anyhow!("no predictions: no matching models or months")));
    }
    if missing > 0 {
        log::warn!("{missing} routes have no model file");
    }
    println!(
        "{} predictions, RMSE {:.6}, written to {}",
        pairs.len(),
        sharemodel::rmse(&pairs),
        path.display()
    );
    Ok(())
}

fn make_problem(g: &Global, a: MakeProblemArgs) -> Result<()> {
    let panel = load_panel(&a.panel)?;
    let carrier = match a.carrier {
        Some(c) => c,
        None => panel.carriers().into_iter().next().ok_or_else(|| usage(anyhow!("panel has no carriers")))?,
    };
    let opts = ProblemOptions {
        carrier,
        month: a.month,
        routes: a.routes,
        budget: a.budget,
        budget_scale: a.budget_scale,
    };
    let mut file = data::build_problem(&panel, &opts).map_err(usage)?;
    if let Some(dir) = &a.models {
        let dir = std::path::absolute(dir)?;
        file.model_dir = Some(dir.to_string_lossy().into_owned());
        file.resolve_models(Path::new("."), None).map_err(usage)?;
    } else if let Some(p) = &a.ground_truth {
        let truth = GroundTruth::load(p).map_err(usage)?;
        for r in &file.routes {
            let m = truth
                .models
                .get(&r.id)
                .ok_or_else(|| usage(anyhow!("ground truth has no model for route {}", r.id)))?;
            file.models.insert(r.id.clone(), m.clone());
        }
    }
    let path = a.output.unwrap_or_else(|| g.out.join(PROBLEM_FILE));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    file.save(&path)?;
    println!(
        "problem for {} in {}: {} decision routes, budget {:.2}, written to {}",
        file.carrier,
        file.month,
        file.routes.len(),
        file.budget,
        path.display()
    );
    Ok(())
}

fn load_problem(path: &Path, models: Option<&Path>) -> Result<InfluenceProblem> {
    let file = ProblemFile::load(path).map_err(usage)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolved = file.resolve_models(base, models).map_err(usage)?;
    file.build(&resolved).map_err(usage)
}

fn method_config(g: &Global, a: &MethodArgs) -> MethodConfig {
    let aga = AgaConfig {
        gamma: a.gamma.0.unwrap_or(AgaConfig::default().gamma),
        epsilon: a.epsilon.0.unwrap_or(AgaConfig::default().epsilon),
        min_epochs: a.min_epochs,
        max_epochs: a.max_epochs,
        init: a.init,
        seed: g.seed,
        ..AgaConfig::default()
    };
    let calibration = match (a.gamma.0, a.epsilon.0) {
        (Some(_), Some(_)) => None,
        (gamma, epsilon) => Some(Calibration {
            gamma,
            epsilon,
            ..Calibration::default()
        }),
    };
    MethodConfig {
        aga,
        calibration,
        greedy: GreedyConfig { alpha: a.alpha },
        brute: BruteForceConfig {
            alpha: a.alpha,
            batch_size: a.batch_size,
            route_limit: a.route_limit,
            max_points: a.max_points,
        },
    }
}

fn optimize(g: &Global, a: OptimizeArgs) -> Result<()> {
    let problem = load_problem(&a.problem, a.models.as_deref())?;
    let cfg = method_config(g, &a.method_args);
    let run = report::run_method(&problem, a.method, &cfg).map_err(classify)?;
    let mut rep = RunReport::new(&problem, &run)?;
    let mut trace = run.trace;
    if g.deterministic {
        rep.zero_times();
        trace.zero_times();
    }
    create_out(&g.out)?;
    fs::write(g.out.join(REPORT_FILE), rep.to_json()?)?;
    let trace_path = g.out.join(TRACE_FILE);
    trace.write_csv(fs::File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?)?;
    println!(
        "{}: objective {:.3} ({:.3} at full scale), cost {:.2} of {:.2}, feasible {}, {:.1} ms",
        rep.method, rep.objective, rep.objective_scaled, rep.total_cost, rep.budget, rep.feasible, rep.runtime_ms
    );
    Ok(())
}

fn benchmark(g: &Global, a: BenchmarkArgs) -> Result<()> {
    if a.reps == 0 {
        return Err(usage(anyhow!("--reps must be >= 1")));
    }
    let cfg = method_config(g, &a.method_args);
    let mut problems = BTreeMap::new();
    let mut order = Vec::new();
    for p in &a.problems {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = if problems.contains_key(&name) {
            p.display().to_string()
        } else {
            name
        };
        problems.insert(name.clone(), load_problem(p, a.models.as_deref())?);
        order.push(name);
    }
    let mut rows = Vec::new();
    for name in &order {
        let problem = &problems[name];
        for &method in &a.methods {
            for rep in 0..a.reps {
                let run = report::run_method(problem, method, &cfg)
                    .map_err(classify)
                    .with_context(|| format!("{method} on {name}"))?;
                let mut r = RunReport::new(problem, &run)?;
                if g.deterministic {
                    r.zero_times();
                }
                info!("{name} {method} rep {rep}: {:.3} in {:.1} ms", r.objective, r.runtime_ms);
                rows.push(BenchmarkRow::from_report(name, rep, &r));
            }
        }
    }
    create_out(&g.out)?;
    let path = g.out.join(BENCHMARK_FILE);
    report::write_benchmark_csv(fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?, &rows)?;
    println!("{:<20} {:<14} {:>4} {:>14} {:>14} {:>9} {:>12}", "problem", "method", "rep", "objective", "cost", "feasible", "runtime_ms");
    for r in &rows {
        println!(
            "{:<20} {:<14} {:>4} {:>14.3} {:>14.2} {:>9} {:>12.1}",
            r.problem, r.method, r.repetition, r.objective, r.total_cost, r.feasible, r.runtime_ms
        );
    }
    Ok(())
}
