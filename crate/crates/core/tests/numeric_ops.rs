//! Finite-difference checks for every differentiable primitive.

use avalign::autograd::{ConvSpec, Graph, Padding, Var};
use avalign::gradcheck::{check_parameters, finite_difference_check};
use avalign::params::ParamStore;
use avalign::rng::Rng;
use avalign::tensor::Tensor;
use avalign::Result;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
}

/// Random weighted sum so that every output coordinate matters.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(shape: &[usize], f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>) -> f64 {
    let x = random(shape, 11);
    finite_difference_check(|g, x| {
        let y = f(g, x)?;
        project(g, y, 99)
    }, &x, 1e-5)
    .unwrap()
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let other = random(if tb { &[2, 4] } else { &[4, 2] }, 3);
        let xs: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let err = check(xs, |g, x| {
            let b = g.input(other.clone());
            g.matmul_t(x, b, ta, tb)
        });
        assert!(err < TOL, "lhs ta={ta} tb={tb}: {err}");

        let lhs = random(xs, 4);
        let err = check(if tb { &[2, 4] } else { &[4, 2] }, |g, x| {
            let a = g.input(lhs.clone());
            g.matmul_t(a, x, ta, tb)
        });
        assert!(err < TOL, "rhs ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn elementwise_ops() {
    let other = random(&[3, 5], 8);
    let binary: [(&str, fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(b, a)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, op) in binary {
        let err = check(&[3, 5], |g, x| {
            let o = g.input(other.clone());
            op(g, x, o)
        });
        assert!(err < TOL, "{name}: {err}");
    }
    let err = check(&[3, 5], |g, x| g.mul(x, x));
    assert!(err < TOL, "mul self: {err}");
    let err = check(&[3, 5], |g, x| Ok(g.scale(x, -0.7)));
    assert!(err < TOL, "scale: {err}");
    let err = check(&[3, 5], |g, x| Ok(g.relu(x)));
    assert!(err < TOL, "relu: {err}");
    let err = check(&[3, 5], |g, x| Ok(g.sigmoid(x)));
    assert!(err < TOL, "sigmoid: {err}");
    let err = check(&[3, 5], |g, x| Ok(g.square(x)));
    assert!(err < TOL, "square: {err}");
    let err = check(&[3, 5], |g, x| {
        let s = g.sigmoid(x);
        Ok(g.log(s))
    });
    assert!(err < TOL, "log: {err}");
}

#[test]
fn row_broadcast_and_reductions() {
    let bias = random(&[5], 2);
    let err = check(&[3, 5], |g, x| {
        let b = g.input(bias.clone());
        g.add_row(x, b)
    });
    assert!(err < TOL, "add_row x: {err}");
    let base = random(&[3, 5], 2);
    let err = check(&[5], |g, b| {
        let x = g.input(base.clone());
        g.add_row(x, b)
    });
    assert!(err < TOL, "add_row bias: {err}");

    let x = random(&[4, 3], 1);
    let err = finite_difference_check(|g, x| {
        let s = g.square(x);
        Ok(g.mean(s))
    }, &x, 1e-5)
    .unwrap();
    assert!(err < TOL, "mean: {err}");
}

#[test]
fn softmax_family() {
    let err = check(&[3, 4], |g, x| g.softmax_rows(x, None));
    assert!(err < TOL, "softmax: {err}");
    let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4).collect();
    let err = check(&[3, 4], |g, x| g.softmax_rows(x, Some(&mask)));
    assert!(err < TOL, "masked softmax: {err}");
    let err = check(&[3, 4], |g, x| Ok(g.log_softmax_rows(x)));
    assert!(err < TOL, "log_softmax: {err}");
}

#[test]
fn masked_softmax_zeroes_disallowed_entries() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = g.input(random(&[2, 3], 0));
    let mask = [true, false, true, false, false, true];
    let y = g.softmax_rows(x, Some(&mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    assert_eq!(v[4], 0.0);
    assert!((v[5] - 1.0).abs() < 1e-15);
    assert!(g.softmax_rows(x, Some(&[false; 6])).is_err());
}

#[test]
fn layer_norm_all_inputs() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(4);
    let gain = store.add("ln.gain", Tensor::from_fn(vec![5], |_| rng.uniform(0.5, 1.5)));
    let bias = store.add("ln.bias", Tensor::from_fn(vec![5], |_| rng.uniform(-0.5, 0.5)));
    let x = random(&[3, 5], 6);
    let w = random(&[3, 5], 7);
    let report = check_parameters(
        &store,
        |g| {
            let xv = g.input(x.clone());
            let (gv, bv) = (g.param(gain), g.param(bias));
            let y = g.layer_norm(xv, gv, bv, 1e-5)?;
            let wv = g.input(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.iter().all(|r| r.max_rel_error < TOL), "{report:?}");

    let gt = store.get(gain).clone();
    let bt = store.get(bias).clone();
    let err = check(&[3, 5], |g, x| {
        let (gv, bv) = (g.input(gt.clone()), g.input(bt.clone()));
        g.layer_norm(x, gv, bv, 1e-5)
    });
    assert!(err < TOL, "layer_norm x: {err}");
}

#[test]
fn conv2d_geometries() {
    let cases = [
        (ConvSpec { kernel: 3, stride: 1, padding: Padding::Same }, [2, 5, 5, 2], [5, 5]),
        (ConvSpec { kernel: 3, stride: 2, padding: Padding::Same }, [1, 6, 6, 2], [3, 3]),
        (ConvSpec { kernel: 3, stride: 2, padding: Padding::Same }, [1, 5, 5, 2], [3, 3]),
        (ConvSpec { kernel: 1, stride: 2, padding: Padding::Same }, [1, 5, 5, 2], [3, 3]),
        (ConvSpec { kernel: 3, stride: 1, padding: Padding::Valid }, [1, 3, 3, 2], [1, 1]),
    ];
    for (spec, xs, out_hw) in cases {
        let wt = random(&[spec.kernel, spec.kernel, 2, 3], 21);
        let err = check(&xs, |g, x| {
            let w = g.input(wt.clone());
            let y = g.conv2d(x, w, spec)?;
            assert_eq!(&g.shape(y)[1..3], &out_hw);
            Ok(y)
        });
        assert!(err < TOL, "conv x {spec:?}: {err}");

        let xt = random(&xs, 22);
        let err = check(&[spec.kernel, spec.kernel, 2, 3], |g, w| {
            let x = g.input(xt.clone());
            g.conv2d(x, w, spec)
        });
        assert!(err < TOL, "conv w {spec:?}: {err}");
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let spec = ConvSpec { kernel: 3, stride: 2, padding: Padding::Same };
    let x = random(&[1, 5, 5, 2], 1);
    let w = random(&[3, 3, 2, 1], 2);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv2d(xv, wv, spec).unwrap();
    // Same padding for 5 -> 3 at stride 2 pads one row/column on each side.
    for oy in 0..3 {
        for ox in 0..3 {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    if !(0..5).contains(&iy) || !(0..5).contains(&ix) {
                        continue;
                    }
                    for c in 0..2 {
                        acc += x.at(&[0, iy as usize, ix as usize, c]) * w.at(&[ky, kx, c, 0]);
                    }
                }
            }
            assert!((g.value(y).at(&[0, oy, ox, 0]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_plumbing_ops() {
    let err = check(&[2, 6], |g, x| g.reshape(x, &[3, 4]));
    assert!(err < TOL, "reshape: {err}");
    let err = check(&[3, 5], |g, x| g.slice_cols(x, 1, 3));
    assert!(err < TOL, "slice: {err}");
    let other = random(&[3, 2], 5);
    let err = check(&[3, 5], |g, x| {
        let o = g.input(other.clone());
        let c = g.concat_cols(o, x)?;
        g.concat_cols(c, x)
    });
    assert!(err < TOL, "concat: {err}");
    let err = check(&[4, 3], |g, table| g.gather_rows(table, &[2, 0, 2, 3]));
    assert!(err < TOL, "gather: {err}");
}

#[test]
fn nll_gradient_and_padding() {
    let x = random(&[3, 4], 9);
    let targets = [Some(1), None, Some(3)];
    let err = finite_difference_check(|g, x| {
        let lp = g.log_softmax_rows(x);
        g.nll(lp, &targets)
    }, &x, 1e-5)
    .unwrap();
    assert!(err < TOL, "nll: {err}");

    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let xv = g.input(x);
    let lp = g.log_softmax_rows(xv);
    assert!(g.nll(lp, &[None, None, None]).is_err());
}

#[test]
fn dropout_train_and_eval() {
    let store = ParamStore::<f64>::new();
    let x = Tensor::full(vec![20_000], 1.0);

    let mut g = Graph::eval(&store);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.1);
    assert_eq!(g.value(y), &x, "eval-mode dropout is the identity");

    let mut g = Graph::train(&store, Rng::new(3));
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.1);
    let vals = g.value(y).data();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "inverted scaling keeps the mean: {mean}");
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));

    // Masks are fixed by the seed, so the function is differentiable.
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", random(&[4, 3], 1));
    let report = check_parameters(
        &store,
        |g| {
            let wv = g.param(w);
            let d = g.dropout(wv, 0.5);
            let s = g.square(d);
            Ok(g.sum(s))
        },
        1e-5,
        Some(17),
    )
    .unwrap();
    assert!(report[0].max_rel_error < TOL);
}

#[test]
fn same_seed_same_forward_bits() {
    let store = ParamStore::<f32>::new();
    let run = || {
        let mut g = Graph::train(&store, Rng::new(5));
        let x = g.input(Tensor::full(vec![64], 2.0f32));
        let y = g.dropout(x, 0.3);
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn nonfinite_values_name_the_op() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = g.input(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let _ = g.log(x);
    assert_eq!(g.first_nonfinite(), Some("log"));
    assert!(g.ensure_finite().unwrap_err().to_string().contains("log"));
}
