use proptest::prelude::*;
use skyreach::aga::{
    ascend, beta_update, corrective_direction, initialize, optimize, AgaConfig, Calibration, InitScheme,
};
use skyreach::baselines::{brute_force_optimize, greedy_optimize, BruteForceConfig, GreedyConfig};
use skyreach::data::{synthetic_problem, BudgetRule, SynthConfig, SynthProblemConfig};
use skyreach::objective::{InfluenceProblem, PenaltyKind};

fn problem(seed: u64, routes: usize, budget: BudgetRule) -> InfluenceProblem {
    synthetic_problem(&SynthProblemConfig {
        market: SynthConfig {
            n_airports: 6,
            n_routes: 10,
            n_months: 3,
            seed,
            ..SynthConfig::default()
        },
        decision_routes: Some(routes),
        budget,
    })
    .unwrap()
}

fn calibrated(p: &InfluenceProblem, penalty: PenaltyKind, init: InitScheme, seed: u64) -> AgaConfig {
    let cfg = AgaConfig {
        penalty,
        init,
        seed,
        ..AgaConfig::default()
    };
    Calibration::default().apply(p, &cfg).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradients() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3..1e3f64, n),
            prop::collection::vec(prop_oneof![1 => Just(0.0), 5 => -1e3..1e3f64], n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// With β from the update rule, the step direction lowers the overrun at
    /// exactly `c ε |c'|²`.
    #[test]
    fn beta_rule_descends((go, gc) in gradients(), c in 1e-6..1e3f64, eps in 1e-6..1e2f64) {
        let norm2 = dot(&gc, &gc);
        prop_assume!(norm2 > 1e-6);
        let beta = beta_update(&go, &gc, c, eps).unwrap();
        let d: Vec<f64> = go.iter().zip(&gc).map(|(o, p)| o - beta * p).collect();
        let rate = dot(&gc, &d);
        let want = -c * eps * norm2;
        prop_assert!(rate < 0.0);
        prop_assert!((rate - want).abs() <= 1e-9 * (dot(&go, &go).sqrt() * norm2.sqrt() + want.abs()), "{rate} vs {want}");
    }

    /// Freezing bound coordinates keeps the same overrun decrease on the free set.
    #[test]
    fn box_aware_beta_keeps_the_descent_rate(
        (go, gc) in gradients(),
        c in 1e-3..1e2f64,
        eps in 1e-3..1e1f64,
        at_bound in prop::collection::vec(0u8..3, 8),
    ) {
        let n = go.len();
        let norm2 = dot(&gc, &gc);
        prop_assume!(norm2 > 1e-6);
        let bounds = vec![(0.0, 10.0); n];
        let x: Vec<f64> = (0..n).map(|i| [0.0, 5.0, 10.0][at_bound[i] as usize]).collect();
        let (d, _) = corrective_direction(&x, &bounds, &go, &gc, c, eps, true).unwrap();
        for i in 0..n {
            prop_assert!(!(x[i] <= 0.0 && d[i] < 0.0) && !(x[i] >= 10.0 && d[i] > 0.0), "pushes out at {i}");
        }
        if d.iter().any(|&v| v != 0.0) {
            let rate = dot(&gc, &d);
            let want = -c * eps * norm2;
            prop_assert!((rate - want).abs() <= 1e-8 * (dot(&go, &go).sqrt() * norm2.sqrt() + want.abs()), "{rate} vs {want}");
        }
    }

    #[test]
    fn rounding_down_never_raises_cost(seed in 0u64..200, frac in prop::collection::vec(0.0..1.0f64, 4)) {
        let p = problem(seed, 4, BudgetRule::ObservedSpend(1.0));
        let x: Vec<f64> = p.routes().iter().zip(&frac).map(|(r, f)| f * r.f_max).collect();
        let floored: Vec<f64> = x.iter().map(|v| v.floor()).collect();
        prop_assert!(p.total_cost(&floored) <= p.total_cost(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_is_feasible_and_integral(seed in 0u64..10_000, scale in 0.3..1.5f64, relu in any::<bool>(), init in 0usize..3) {
        let p = problem(seed, 5, BudgetRule::ObservedSpend(scale));
        let penalty = if relu { PenaltyKind::Relu } else { PenaltyKind::Lagrangian };
        let init = [InitScheme::Zero, InitScheme::Real, InitScheme::Random][init];
        let r = optimize(&p, &calibrated(&p, penalty, init, seed)).unwrap();
        prop_assert!(p.is_feasible(&r.schedule));
        prop_assert!(r.schedule.iter().all(|v| v.fract() == 0.0));
        prop_assert!(r.total_cost <= p.budget());
    }
}

#[test]
fn identical_runs_are_identical() {
    let p = problem(21, 4, BudgetRule::ObservedSpend(0.8));
    for init in [InitScheme::Zero, InitScheme::Random] {
        let cfg = calibrated(&p, PenaltyKind::Relu, init, 5);
        let mut a = optimize(&p, &cfg).unwrap();
        let mut b = optimize(&p, &cfg).unwrap();
        a.relaxed.trace.zero_times();
        b.relaxed.trace.zero_times();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.relaxed.x, b.relaxed.x);
        assert_eq!(a.relaxed.trace, b.relaxed.trace);
    }
}

#[test]
fn unconstrained_small_steps_never_lose_influence() {
    // Budget far above anything affordable: beta stays 0 every epoch. Starting
    // from the observed schedule keeps every row's out-weight positive, away
    // from the jump in PageRank at an empty row.
    let p = problem(6, 4, BudgetRule::CapacityFraction(10.0));
    let base = calibrated(&p, PenaltyKind::Relu, InitScheme::Real, 0);
    let cfg = AgaConfig {
        gamma: base.gamma * 1e-3,
        min_epochs: 300,
        max_epochs: 300,
        ..base
    };
    let start = initialize(&p, InitScheme::Real, 0).unwrap();
    let out = ascend(&p, &start, &cfg).unwrap();
    let recs = &out.trace.records;
    assert!(recs.iter().all(|r| r.beta == 0.0));
    for w in recs.windows(2) {
        assert!(w[1].objective >= w[0].objective - 1e-9 * w[0].objective.abs(), "{w:?}");
    }
    assert!(recs.last().unwrap().objective > recs[0].objective);
}

#[test]
fn zero_budget_returns_the_empty_schedule() {
    let p = problem(9, 3, BudgetRule::Absolute(0.0));
    for penalty in [PenaltyKind::Relu, PenaltyKind::Lagrangian] {
        let cfg = AgaConfig {
            penalty,
            gamma: 0.5,
            epsilon: 1e-6,
            min_epochs: 20,
            max_epochs: 200,
            ..AgaConfig::default()
        };
        let r = optimize(&p, &cfg).unwrap();
        assert_eq!(r.schedule, vec![0.0; 3]);
        assert_eq!(r.objective, p.influence(&[0.0; 3]).unwrap());
    }
}

#[test]
fn starting_schedules() {
    let p = problem(12, 4, BudgetRule::ObservedSpend(1.0));
    let zero = initialize(&p, InitScheme::Zero, 0).unwrap();
    assert_eq!(p.cost_overrun(&zero), -p.budget());
    let real = initialize(&p, InitScheme::Real, 0).unwrap();
    assert!(p.cost_overrun(&real) <= 1e-9 * p.budget());
    let a = initialize(&p, InitScheme::Random, 77).unwrap();
    let b = initialize(&p, InitScheme::Random, 77).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, initialize(&p, InitScheme::Random, 78).unwrap());
    assert!(p.routes().iter().zip(&a).all(|(r, &v)| (0.0..=0.1 * r.f_max).contains(&v)));
}

#[test]
fn exhaustive_search_bounds_the_other_methods() {
    for seed in 0..4 {
        let p = problem(100 + seed, 3, BudgetRule::ObservedSpend(1.0));
        let brute = brute_force_optimize(&p, &BruteForceConfig::default()).unwrap();
        let greedy = greedy_optimize(&p, &GreedyConfig { alpha: 1 }).unwrap();
        assert!(greedy.objective <= brute.objective);
        for (penalty, init) in [(PenaltyKind::Relu, InitScheme::Real), (PenaltyKind::Lagrangian, InitScheme::Zero)] {
            let aga = optimize(&p, &calibrated(&p, penalty, init, seed)).unwrap();
            assert!(p.is_feasible(&aga.schedule));
            assert!(aga.objective <= brute.objective, "seed {seed}: aga {} brute {}", aga.objective, brute.objective);
        }
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let p = problem(1, 3, BudgetRule::ObservedSpend(1.0));
    for cfg in [
        AgaConfig { gamma: 0.0, ..AgaConfig::default() },
        AgaConfig { epsilon: f64::NAN, ..AgaConfig::default() },
        AgaConfig { min_epochs: 10, max_epochs: 5, ..AgaConfig::default() },
    ] {
        assert!(optimize(&p, &cfg).is_err());
    }
    let bad = Calibration { gamma: Some(-1.0), ..Calibration::default() };
    assert!(bad.apply(&p, &AgaConfig::default()).is_err());
}
