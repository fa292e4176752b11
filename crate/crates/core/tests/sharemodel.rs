use proptest::prelude::*;
use skyreach::autodiff::{Tape, Tensor};
use skyreach::data::{generate_market, HiddenModel, SynthConfig};
use skyreach::netfeat::{FeatureVector, PageRankConfig, N_FEATURES};
use skyreach::sharemodel::{
    cross_validate, grouped_softmax, median, predictions, rmse, train, uniform_rmse, Architecture, MonthSample,
    RouteData, Scaler, ShareModel, TrainConfig,
};

fn architecture() -> impl Strategy<Value = Architecture> {
    prop_oneof![
        Just(Architecture::MultiLogit),
        (2usize..=5, 1usize..=24).prop_map(|(layers, width)| Architecture::Mlp { layers, width }),
    ]
}

fn feature_vector() -> impl Strategy<Value = FeatureVector> {
    prop::array::uniform19(-50.0..50.0f64).prop_map(FeatureVector)
}

fn month(name: &str, feats: &[[f64; 3]], shares: &[f64]) -> MonthSample {
    MonthSample {
        month: name.into(),
        carriers: (0..feats.len()).map(|k| format!("c{k}")).collect(),
        features: feats
            .iter()
            .map(|f| {
                let mut v = [0.0; N_FEATURES];
                v[0] = f[0];
                v[1] = f[1];
                v[9] = f[2];
                FeatureVector(v)
            })
            .collect(),
        shares: shares.to_vec(),
    }
}

fn synthetic_routes(cfg: &SynthConfig) -> Vec<RouteData> {
    let (panel, _) = generate_market(cfg).unwrap();
    panel.route_data(&PageRankConfig::default()).unwrap()
}

fn fast(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn shares_lie_on_the_simplex(
        arch in architecture(),
        seed in any::<u64>(),
        feats in prop::collection::vec(feature_vector(), 1..6),
    ) {
        let model = ShareModel::init("r", arch, (0..N_FEATURES).collect(), Scaler::identity(), seed).unwrap();
        let s = model.predict_shares(&feats).unwrap();
        prop_assert!(s.iter().all(|&x| x >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn softmax_ignores_a_common_shift(scores in prop::collection::vec(-20.0..20.0f64, 2..8), shift in -100.0..100.0f64) {
        let n = scores.len();
        let groups = vec![0; n];
        let shares = |s: Vec<f64>| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::column(s));
            let m = grouped_softmax(&mut t, v, &groups, 1).unwrap();
            t.value(m).data().to_vec()
        };
        let a = shares(scores.clone());
        let b = shares(scores.iter().map(|x| x + shift).collect());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn noiseless_multilogit_is_recovered() {
    let cfg = SynthConfig {
        n_airports: 6,
        n_routes: 6,
        n_months: 24,
        seed: 3,
        ..SynthConfig::default()
    };
    let mut errs = Vec::new();
    for d in synthetic_routes(&cfg) {
        let n = d.months.len();
        let fit = train(&d.select(|i| i + 1 < n), &Architecture::MultiLogit, &(0..N_FEATURES).collect::<Vec<_>>(), &TrainConfig {
            learning_rate: 3e-2,
            epochs: 3000,
            ..TrainConfig::default()
        })
        .unwrap();
        errs.push(rmse(&predictions(&fit.model, &d.select(|i| i + 1 == n)).unwrap()));
    }
    assert!(median(&errs) <= 1e-3, "{errs:?}");
}

#[test]
fn constant_share_panel_converges_to_the_constant() {
    let feats = [[1.0, 3.0, 0.5], [2.0, 1.0, -0.5], [0.0, 2.0, 0.0]];
    let months: Vec<MonthSample> = (0..5).map(|m| month(&format!("m{m}"), &feats, &[0.5, 0.3, 0.2])).collect();
    let data = RouteData { route: "r".into(), months };
    let fit = train(&data, &Architecture::MultiLogit, &[0, 1, 9], &fast(3000)).unwrap();
    let e = rmse(&predictions(&fit.model, &data).unwrap());
    assert!(e <= 1e-4, "{e}");
}

#[test]
fn training_loss_does_not_rise_over_any_hundred_epochs() {
    let cfg = SynthConfig {
        n_airports: 5,
        n_routes: 4,
        n_months: 12,
        seed: 8,
        ..SynthConfig::default()
    };
    let subset: Vec<usize> = (0..N_FEATURES).collect();
    for arch in [Architecture::MultiLogit, Architecture::Mlp { layers: 3, width: 16 }] {
        for d in synthetic_routes(&cfg) {
            let losses = train(&d, &arch, &subset, &fast(1500)).unwrap().losses;
            for t in 0..losses.len() - 100 {
                // Below 1e-20 the loss is rounding noise.
                assert!(
                    losses[t + 100] <= losses[t] * 1.01 + 1e-20,
                    "{arch} route {} epoch {t}: {} -> {}",
                    d.route,
                    losses[t],
                    losses[t + 100]
                );
            }
        }
    }
}

#[test]
fn mlp_beats_uniform_shares_on_twenty_routes() {
    let cfg = SynthConfig {
        n_airports: 10,
        n_routes: 20,
        n_months: 24,
        hidden_model: HiddenModel::Mlp { layers: 3, width: 16 },
        seed: 5,
        ..SynthConfig::default()
    };
    let subset: Vec<usize> = (0..N_FEATURES).collect();
    let (mut fitted, mut uniform) = (Vec::new(), Vec::new());
    for d in synthetic_routes(&cfg) {
        let n = d.months.len();
        let held = d.select(|i| i + 4 >= n);
        let fit = train(&d.select(|i| i + 4 < n), &Architecture::Mlp { layers: 3, width: 16 }, &subset, &fast(500)).unwrap();
        fitted.push(rmse(&predictions(&fit.model, &held).unwrap()));
        uniform.push(uniform_rmse(&held));
    }
    assert!(median(&fitted) < median(&uniform), "{} vs {}", median(&fitted), median(&uniform));
}

#[test]
fn two_months_give_two_folds() {
    let feats = [[1.0, 3.0, 0.5], [2.0, 1.0, -0.5]];
    let data = RouteData {
        route: "r".into(),
        months: vec![month("a", &feats, &[0.7, 0.3]), month("b", &[[0.0, 1.0, 2.0], [1.0, 0.0, 1.0]], &[0.4, 0.6])],
    };
    let (_, report) = cross_validate(&data, &[Architecture::MultiLogit], &[0, 1, 9], &fast(50)).unwrap();
    assert_eq!(report.folds, 2);
    assert_eq!(report.scores[0].fold_rmse.len(), 2);
}

#[test]
fn identical_months_give_identical_folds() {
    let feats = [[1.0, 3.0, 0.5], [2.0, 1.0, -0.5], [0.0, 2.0, 1.0]];
    let data = RouteData {
        route: "r".into(),
        months: (0..4).map(|m| month(&format!("m{m}"), &feats, &[0.2, 0.5, 0.3])).collect(),
    };
    let grid = [Architecture::MultiLogit, Architecture::Mlp { layers: 2, width: 4 }];
    let (_, report) = cross_validate(&data, &grid, &[0, 1, 9], &fast(100)).unwrap();
    for s in &report.scores {
        assert!(s.fold_rmse.iter().all(|&e| e == s.fold_rmse[0]), "{s:?}");
    }
}

#[test]
fn selected_architecture_has_the_lowest_validation_error() {
    let cfg = SynthConfig {
        n_airports: 6,
        n_routes: 10,
        n_months: 4,
        seed: 2,
        ..SynthConfig::default()
    };
    let grid = [
        Architecture::MultiLogit,
        Architecture::Mlp { layers: 2, width: 4 },
        Architecture::Mlp { layers: 3, width: 8 },
    ];
    for d in synthetic_routes(&cfg) {
        let (_, report) = cross_validate(&d, &grid, &(0..N_FEATURES).collect::<Vec<_>>(), &fast(60)).unwrap();
        let best = report.scores.iter().find(|s| s.arch == report.best).unwrap();
        for s in &report.scores {
            assert!(best.mean_rmse <= s.mean_rmse);
        }
    }
}

#[test]
fn model_subsets() {
    use skyreach::sharemodel::FeatureSet;
    assert_eq!(FeatureSet::Model1.indices(), (1..=8).collect::<Vec<_>>());
    assert_eq!(FeatureSet::Model2.indices(), (0..=10).collect::<Vec<_>>());
    assert_eq!(FeatureSet::All.indices().len(), N_FEATURES);
}

#[test]
fn saved_model_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = ShareModel::init("r", Architecture::Mlp { layers: 3, width: 6 }, vec![0, 1, 5, 18], Scaler::identity(), 7).unwrap();
    m.save(&path).unwrap();
    let back = ShareModel::load(&path).unwrap();
    let f = [FeatureVector([0.3; N_FEATURES]), FeatureVector([-1.1; N_FEATURES])];
    assert_eq!(m.predict_shares(&f).unwrap(), back.predict_shares(&f).unwrap());
}
