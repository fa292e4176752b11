use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use skyreach::data::{generate_market, load_panel, save_panel, DataError, MarketPanel, SynthConfig};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_airports: 6,
        n_routes: 9,
        n_months: 4,
        seed,
        ..SynthConfig::default()
    }
}

fn panel(seed: u64) -> MarketPanel {
    generate_market(&small(seed)).unwrap().0
}

#[test]
fn panel_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = panel(11);
    save_panel(&p, dir.path()).unwrap();
    let back = load_panel(dir.path()).unwrap();
    assert_eq!(back, p);
    for (a, b) in back.observations.iter().zip(&p.observations) {
        assert_eq!(a.share.to_bits(), b.share.to_bits());
        assert_eq!(a.demand.to_bits(), b.demand.to_bits());
        assert_eq!(a.unit_cost.to_bits(), b.unit_cost.to_bits());
    }
}

#[test]
fn shares_off_the_simplex_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = panel(2);
    let (route, month) = (p.observations[0].route_id.clone(), p.observations[0].month.clone());
    for o in p.observations.iter_mut().filter(|o| o.route_id == route && o.month == month) {
        o.share *= 0.8;
    }
    assert!(matches!(p.validate(), Err(DataError::Simplex { .. })));
    save_panel(&p, dir.path()).unwrap();
    let err = load_panel(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&route) && err.contains(&month), "{err}");
}

#[test]
fn empty_route_table_is_an_empty_market() {
    let mut p = panel(3);
    p.routes.clear();
    assert!(matches!(p.validate(), Err(DataError::EmptyMarket(_))));
}

#[test]
fn fixed_seed_is_bit_identical() {
    let (a, ta) = generate_market(&small(42)).unwrap();
    let (b, tb) = generate_market(&small(42)).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&ta.models).unwrap(), serde_json::to_string(&tb.models).unwrap());
    assert_ne!(a, generate_market(&small(43)).unwrap().0);
}

#[test]
fn invalid_generator_settings_are_rejected() {
    for cfg in [
        SynthConfig { n_airports: 1, ..small(0) },
        SynthConfig { n_routes: 0, ..small(0) },
        SynthConfig { noise_std: -0.1, ..small(0) },
        SynthConfig { sample_fraction: 0.0, ..small(0) },
    ] {
        assert!(generate_market(&cfg).is_err(), "{cfg:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_panels_are_consistent(seed in any::<u64>(), airports in 3usize..9, extra in 0usize..6, months in 1usize..4, noise in 0.0..0.1f64) {
        let cfg = SynthConfig {
            n_airports: airports,
            n_routes: (airports - 1 + extra).min(airports * (airports - 1)),
            n_months: months,
            noise_std: noise,
            seed,
            ..SynthConfig::default()
        };
        let p = generate_market(&cfg).unwrap().0;
        prop_assert!(p.validate().is_ok());

        let mut sums: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        for o in &p.observations {
            *sums.entry((&o.route_id, &o.month)).or_default() += o.share;
        }
        prop_assert_eq!(sums.len(), cfg.n_routes * months);
        for s in sums.values() {
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }

        let airports: BTreeSet<&str> = p.airports.iter().map(|a| a.airport_id.as_str()).collect();
        let routes: BTreeSet<&str> = p.routes.iter().map(|r| r.route_id.as_str()).collect();
        for r in &p.routes {
            prop_assert!(airports.contains(r.src_airport.as_str()) && airports.contains(r.dst_airport.as_str()));
            prop_assert!(r.src_airport != r.dst_airport);
        }
        for o in &p.observations {
            prop_assert!(routes.contains(o.route_id.as_str()));
            prop_assert!(o.freq >= 0.0 && o.share >= 0.0 && o.demand >= 0.0 && o.unit_cost >= 0.0);
        }
    }
}
