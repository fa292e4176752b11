//! Budget-constrained market-influence optimization over learned airline
//! market-share models.
//!
//! The pipeline: a carrier's schedule (a frequency matrix over airports)
//! feeds differentiable network features ([`netfeat`]), per-route share
//! models ([`sharemodel`]) turn features into market shares, and
//! [`objective`] sums demand-weighted shares into the carrier's influence.
//! [`aga`] maximizes that influence under a budget by projected gradient
//! ascent with an adaptive penalty weight; [`baselines`] provides greedy and
//! exhaustive reference optimizers. [`data`] handles panels and a synthetic
//! market generator, and [`report`] the run/benchmark outputs.

pub mod autodiff;
pub mod netfeat;
pub mod sharemodel;
pub mod objective;
pub mod trace;
pub mod aga;
pub mod baselines;
pub mod data;
pub mod report;

pub use autodiff::{Tape, Tensor, Var};
pub use netfeat::{FeatureVector, FrequencyMatrix, Network, StaticFeatures};
pub use sharemodel::{Architecture, ShareModel, TrainConfig};
pub use objective::{InfluenceProblem, PenaltyKind, ProblemFile};
pub use aga::{AgaConfig, AgaResult, Calibration, InitScheme};
pub use baselines::{BaselineResult, BruteForceConfig, GreedyConfig};
pub use data::{MarketPanel, SynthConfig, SynthProblemConfig};
pub use report::{Method, MethodConfig, RunReport};
