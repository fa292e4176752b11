//! Fixtures shared by the benchmarks.

use skyreach::data::{synthetic_problem, BudgetRule, SynthConfig, SynthProblemConfig};
use skyreach::InfluenceProblem;

/// Problem over a generated market with every route a decision route and the
/// budget equal to the carrier's observed spend.
pub fn market_problem(n_airports: usize, n_routes: usize, decision_routes: Option<usize>) -> InfluenceProblem {
    synthetic_problem(&SynthProblemConfig {
        market: SynthConfig {
            n_airports,
            n_routes,
            n_months: 3,
            seed: 1,
            ..SynthConfig::default()
        },
        decision_routes,
        budget: BudgetRule::ObservedSpend(1.0),
    })
    .expect("benchmark fixture")
}
