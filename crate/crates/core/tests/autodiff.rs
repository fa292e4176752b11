use proptest::prelude::*;
use skyreach::autodiff::{Shape, Tape, Tensor, Var};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

type Build = fn(&mut Tape, &[Var]) -> Var;

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// entry contributes to the gradient.
fn project(t: &mut Tape, y: Var) -> Var {
    let s = t.shape(y);
    let w: Vec<f64> = (0..s.len()).map(|k| 0.3 + 0.17 * ((k * 7 % 11) as f64) - 0.8).collect();
    let w = t.constant(Tensor::new(s.rows, s.cols, w).unwrap());
    let p = t.mul(y, w).unwrap();
    t.sum(p).unwrap()
}

fn eval(build: Build, inputs: &[Tensor]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.var(x.clone())).collect();
    let y = build(&mut t, &vars);
    let out = project(&mut t, y);
    t.scalar_value(out)
}

/// Worst relative error between reverse-mode and central differences.
fn fd_error(build: Build, inputs: &[Tensor]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.var(x.clone())).collect();
    let y = build(&mut t, &vars);
    let out = project(&mut t, y);
    let grads = t.gradient(out, &vars).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.data().len() {
            let bumped = |d: f64| {
                let mut xs = inputs.to_vec();
                let mut data = xs[k].data().to_vec();
                data[i] += d;
                xs[k] = Tensor::new(x.rows(), x.cols(), data).unwrap();
                eval(build, &xs)
            };
            let fd = (bumped(H) - bumped(-H)) / (2.0 * H);
            let ad = grads[k].data()[i];
            worst = worst.max((fd - ad).abs() / fd.abs().max(ad.abs()).max(1.0));
        }
    }
    worst
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

fn away_from(x: &Tensor, kinks: &[f64]) -> bool {
    x.data().iter().all(|v| kinks.iter().all(|k| (v - k).abs() > 1e-6 + H))
}

const ELEMENTWISE: [(&str, Build); 8] = [
    ("add", |t, v| t.add(v[0], v[1]).unwrap()),
    ("sub", |t, v| t.sub(v[0], v[1]).unwrap()),
    ("mul", |t, v| t.mul(v[0], v[1]).unwrap()),
    ("scale", |t, v| t.scale(v[0], -1.7).unwrap()),
    ("neg", |t, v| t.neg(v[0]).unwrap()),
    ("exp", |t, v| t.exp(v[0]).unwrap()),
    ("row_sum", |t, v| t.row_sum(v[0]).unwrap()),
    ("col_sum", |t, v| t.col_sum(v[0]).unwrap()),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_and_reductions(a in matrix(2, 3, -2.0, 2.0), b in matrix(2, 3, -2.0, 2.0)) {
        for (name, op) in ELEMENTWISE {
            let e = fd_error(op, &[a.clone(), b.clone()]);
            prop_assert!(e <= REL_TOL, "{name}: {e}");
        }
    }

    #[test]
    fn broadcasting(a in matrix(3, 2, -2.0, 2.0), row in matrix(1, 2, -2.0, 2.0), col in matrix(3, 1, -2.0, 2.0)) {
        let ops: [Build; 3] = [
            |t, v| t.add(v[0], v[1]).unwrap(),
            |t, v| t.mul(v[0], v[1]).unwrap(),
            |t, v| t.sub(v[0], v[2]).unwrap(),
        ];
        for op in ops {
            prop_assert!(fd_error(op, &[a.clone(), row.clone(), col.clone()]) <= REL_TOL);
        }
    }

    #[test]
    fn division(a in matrix(2, 3, -2.0, 2.0), b in matrix(2, 3, 0.5, 2.0)) {
        let e = fd_error(|t, v| t.div(v[0], v[1]).unwrap(), &[a, b]);
        prop_assert!(e <= REL_TOL, "{e}");
    }

    #[test]
    fn logarithm(a in matrix(2, 3, 0.1, 2.0)) {
        let e = fd_error(|t, v| t.log(v[0]).unwrap(), &[a]);
        prop_assert!(e <= REL_TOL, "{e}");
    }

    #[test]
    fn relu_off_the_kink(a in matrix(2, 3, -2.0, 2.0)) {
        prop_assume!(away_from(&a, &[0.0]));
        let e = fd_error(|t, v| t.relu(v[0]).unwrap(), &[a]);
        prop_assert!(e <= REL_TOL, "{e}");
    }

    #[test]
    fn clip_off_the_bounds(a in matrix(2, 3, -2.0, 2.0)) {
        prop_assume!(away_from(&a, &[-1.0, 1.0]));
        let e = fd_error(|t, v| t.clip_through(v[0], -1.0, 1.0).unwrap(), &[a]);
        prop_assert!(e <= REL_TOL, "{e}");
    }

    #[test]
    fn matrix_product(a in matrix(2, 3, -2.0, 2.0), b in matrix(3, 4, -2.0, 2.0)) {
        let e = fd_error(|t, v| t.matmul(v[0], v[1]).unwrap(), &[a, b]);
        prop_assert!(e <= REL_TOL, "{e}");
    }

    #[test]
    fn indexing_and_stacking(a in matrix(2, 3, -2.0, 2.0), b in matrix(1, 3, -2.0, 2.0)) {
        let ops: [Build; 4] = [
            |t, v| t.gather(v[0], &[5, 0, 0, 3], Shape::new(2, 2)).unwrap(),
            |t, v| t.scatter(v[0], &[0, 7, 7, 2, 3, 8], Shape::new(3, 3)).unwrap(),
            |t, v| t.stack(&[v[0], v[1], v[0]]).unwrap(),
            |t, v| t.sum(v[0]).unwrap(),
        ];
        for op in ops {
            prop_assert!(fd_error(op, &[a.clone(), b.clone()]) <= REL_TOL);
        }
    }

    #[test]
    fn composite_softmax(a in matrix(4, 1, -2.0, 2.0)) {
        let e = fd_error(
            |t, v| {
                let e = t.exp(v[0]).unwrap();
                let z = t.sum(e).unwrap();
                t.div(e, z).unwrap()
            },
            &[a],
        );
        prop_assert!(e <= REL_TOL, "{e}");
    }

    #[test]
    fn constants_have_zero_gradient(a in matrix(2, 2, -2.0, 2.0), c in matrix(2, 2, -2.0, 2.0)) {
        let mut t = Tape::new();
        let x = t.var(a);
        let k = t.constant(c);
        let y = t.mul(x, k).unwrap();
        let y = t.exp(y).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.gradient(s, &[k]).unwrap().remove(0);
        prop_assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn boundary_subgradients_are_zero() {
    for (x, lo, hi, want, grad) in [(5.0, 0.0, 10.0, 5.0, 1.0), (-2.0, 0.0, 10.0, 0.0, 0.0), (10.0, 0.0, 10.0, 10.0, 0.0)] {
        let mut t = Tape::new();
        let v = t.var(Tensor::scalar(x));
        let y = t.clip_through(v, lo, hi).unwrap();
        assert_eq!(t.scalar_value(y), want);
        assert_eq!(t.gradient(y, &[v]).unwrap()[0].item(), grad);
    }
    let mut t = Tape::new();
    let v = t.var(Tensor::scalar(0.0));
    let y = t.relu(v).unwrap();
    assert_eq!(t.gradient(y, &[v]).unwrap()[0].item(), 0.0);
}
