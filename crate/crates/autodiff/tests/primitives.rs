use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsrpn_autodiff::{
    forward_backward, grad_check, grad_check_many, AutodiffError, Graph, Result, Tensor, Var,
};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const POINTS: usize = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_unary(
    name: &str,
    shape: &[usize],
    lo: f64,
    hi: f64,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for point in 0..POINTS {
        let x = random(&mut rng, shape, lo, hi);
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, 11)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{name} point {point}: relative error {err:e}");
    }
}

fn check_many(
    name: &str,
    shapes: &[(&[usize], f64, f64)],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 104729);
    for point in 0..POINTS {
        let inputs: Vec<_> = shapes
            .iter()
            .map(|(s, lo, hi)| random(&mut rng, s, *lo, *hi))
            .collect();
        let report = grad_check_many(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, 13)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(
            report.max_relative_error <= TOL,
            "{name} point {point}: {report:?}"
        );
    }
}

#[test]
fn square_value_and_gradient() {
    let (v, g) = forward_backward(|g, x| g.mul(x[0], x[0]), &[Tensor::scalar(3.0)]).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g[0].data(), &[6.0]);
}

#[test]
fn sigmoid_at_zero() {
    let (v, g) = forward_backward(|g, x| Ok(g.sigmoid(x[0])), &[Tensor::scalar(0.0)]).unwrap();
    assert_eq!(v, 0.5);
    assert_eq!(g[0].data(), &[0.25]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let x = Tensor::from_f64(&[5], &[0.3, -1.2, 4.0, 0.0, 2.5]).unwrap();
    let (v, g) = forward_backward(
        |g, x| {
            let s = g.softmax(x[0])?;
            Ok(g.sum(s))
        },
        &[x],
    )
    .unwrap();
    assert!((v - 1.0).abs() < 1e-15);
    assert!(g[0].data().iter().all(|d| d.abs() < 1e-15));
}

#[test]
fn constant_program_checks_to_zero() {
    let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
    let err = grad_check(|g, _| Ok(g.scalar(4.0)), &x, EPS).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn elementwise_unary_primitives() {
    check_unary("exp", &[3, 4], -2.0, 2.0, |g, x| Ok(g.exp(x)));
    check_unary("log", &[3, 4], 0.1, 3.0, |g, x| Ok(g.log(x)));
    check_unary("sigmoid", &[3, 4], -6.0, 6.0, |g, x| Ok(g.sigmoid(x)));
    check_unary("tanh", &[3, 4], -3.0, 3.0, |g, x| Ok(g.tanh(x)));
    check_unary("gelu", &[3, 4], -3.0, 3.0, |g, x| Ok(g.gelu(x)));
    check_unary("relu", &[3, 4], 0.05, 2.0, |g, x| Ok(g.relu(x)));
    check_unary("relu_neg", &[3, 4], -2.0, -0.05, |g, x| Ok(g.relu(x)));
    check_unary("abs", &[3, 4], 0.05, 2.0, |g, x| Ok(g.abs(x)));
    check_unary("neg_abs", &[3, 4], -2.0, -0.05, |g, x| Ok(g.abs(x)));
    check_unary("powf", &[3, 4], 0.1, 2.0, |g, x| g.powf(x, 2.7));
    check_unary("neg", &[2, 2], -1.0, 1.0, |g, x| Ok(g.neg(x)));
    check_unary("scale", &[2, 2], -1.0, 1.0, |g, x| Ok(g.scale(x, -2.5)));
    check_unary("add_scalar", &[2, 2], -1.0, 1.0, |g, x| {
        Ok(g.add_scalar(x, 0.7))
    });
    check_unary(
        "clamp",
        &[3, 4],
        -0.9,
        0.9,
        |g, x| Ok(g.clamp(x, -1.0, 1.0)),
    );
}

#[test]
fn binary_broadcast_primitives() {
    let a: &[usize] = &[2, 3, 4];
    let row: &[usize] = &[4];
    let col: &[usize] = &[2, 1, 4];
    let mid: &[usize] = &[3, 1];
    check_many("add", &[(a, -1.0, 1.0), (a, -1.0, 1.0)], |g, v| {
        g.add(v[0], v[1])
    });
    check_many("add_row", &[(a, -1.0, 1.0), (row, -1.0, 1.0)], |g, v| {
        g.add(v[0], v[1])
    });
    check_many("sub_col", &[(a, -1.0, 1.0), (col, -1.0, 1.0)], |g, v| {
        g.sub(v[0], v[1])
    });
    check_many("mul_mid", &[(mid, -1.0, 1.0), (a, -1.0, 1.0)], |g, v| {
        g.mul(v[0], v[1])
    });
    check_many("mul_scalar", &[(a, -1.0, 1.0), (&[], -1.0, 1.0)], |g, v| {
        g.mul(v[0], v[1])
    });
    check_many("div", &[(a, -1.0, 1.0), (col, 0.5, 2.0)], |g, v| {
        g.div(v[0], v[1])
    });
}

#[test]
fn matrix_primitives() {
    check_many(
        "matmul",
        &[(&[2, 3, 4], -1.0, 1.0), (&[4, 5], -1.0, 1.0)],
        |g, v| g.matmul(v[0], v[1]),
    );
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check_many("bmm", &[(sa, -1.0, 1.0), (sb, -1.0, 1.0)], move |g, v| {
            g.bmm(v[0], v[1], ta, tb)
        });
    }
}

#[test]
fn row_normalizations() {
    check_unary("softmax", &[3, 5], -3.0, 3.0, |g, x| g.softmax(x));
    check_unary("log_softmax", &[3, 5], -3.0, 3.0, |g, x| g.log_softmax(x));
    check_unary("layer_norm", &[3, 6], -2.0, 2.0, |g, x| {
        g.layer_norm(x, 1e-5)
    });
    check_unary("l2_normalize", &[3, 4], -2.0, 2.0, |g, x| g.l2_normalize(x));
}

#[test]
fn reductions() {
    check_unary("sum", &[3, 4], -1.0, 1.0, |g, x| Ok(g.sum(x)));
    check_unary("mean", &[3, 4], -1.0, 1.0, |g, x| Ok(g.mean(x)));
    check_unary("sum_axis", &[2, 3, 4], -1.0, 1.0, |g, x| {
        g.sum_axis(x, 1, false)
    });
    check_unary("mean_axis", &[2, 3, 4], -1.0, 1.0, |g, x| {
        g.mean_axis(x, 2, true)
    });
    check_unary("prod_axis", &[2, 3, 4], 0.1, 1.5, |g, x| {
        g.prod_axis(x, 1, false)
    });
    check_unary("logsumexp_axis", &[2, 3, 4], -3.0, 3.0, |g, x| {
        g.logsumexp_axis(x, 2, false)
    });
    check_unary("normalize_sum", &[2, 3, 4], 0.1, 1.0, |g, x| {
        g.normalize_sum(x, 1)
    });
}

#[test]
fn shape_primitives() {
    check_unary("reshape", &[2, 6], -1.0, 1.0, |g, x| g.reshape(x, &[3, 4]));
    check_unary("permute", &[2, 3, 4], -1.0, 1.0, |g, x| {
        g.permute(x, &[2, 0, 1])
    });
    check_unary("narrow", &[2, 5, 3], -1.0, 1.0, |g, x| g.narrow(x, 1, 1, 3));
    check_many(
        "concat",
        &[(&[2, 2, 3], -1.0, 1.0), (&[2, 1, 3], -1.0, 1.0)],
        |g, v| g.concat(&[v[0], v[1]], 1),
    );
}

#[test]
fn convolution_and_pooling() {
    check_many(
        "conv2d",
        &[(&[2, 6, 6, 2], -1.0, 1.0), (&[3, 3, 2, 3], -1.0, 1.0)],
        |g, v| g.conv2d(v[0], v[1], 2, 1),
    );
    check_many(
        "conv2d_patchify",
        &[(&[1, 8, 8, 1], -1.0, 1.0), (&[4, 4, 1, 2], -1.0, 1.0)],
        |g, v| g.conv2d(v[0], v[1], 4, 0),
    );
    check_unary("avg_pool2d", &[2, 4, 6, 3], -1.0, 1.0, |g, x| {
        g.avg_pool2d(x, 2)
    });
}

#[test]
fn prod_axis_gradient_is_exact_with_zeros() {
    let x = Tensor::from_f64(&[3], &[0.0, 2.0, 3.0]).unwrap();
    let (v, g) = forward_backward(|g, x| g.prod_axis(x[0], 0, false), &[x]).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(g[0].data(), &[6.0, 0.0, 0.0]);
}

#[test]
fn linearity_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let s = g.sigmoid(x);
        let e = g.mul(s, x)?;
        Ok(g.sum(e))
    };
    let h = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let t = g.softmax(x)?;
        let l = g.log(t);
        Ok(g.sum(l))
    };
    for _ in 0..20 {
        let x = random(&mut rng, &[6], -2.0, 2.0);
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (_, gf) = forward_backward(|g, v| f(g, v[0]), &[x.clone()]).unwrap();
        let (_, gh) = forward_backward(|g, v| h(g, v[0]), &[x.clone()]).unwrap();
        let (_, gc) = forward_backward(
            |g, v| {
                let fv = f(g, v[0])?;
                let hv = h(g, v[0])?;
                let fa = g.scale(fv, a);
                let hb = g.scale(hv, b);
                g.add(fa, hb)
            },
            &[x],
        )
        .unwrap();
        for i in 0..6 {
            let expected = a * gf[0].data()[i] + b * gh[0].data()[i];
            assert!((gc[0].data()[i] - expected).abs() <= 1e-10);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 8, 8, 3], -1.0, 1.0);
    let w = random(&mut rng, &[3, 3, 3, 4], -1.0, 1.0);
    let run = || {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let c = g.conv2d(xv, wv, 2, 1).unwrap();
        let s = g.softmax(c).unwrap();
        let gl = g.gelu(s);
        let out = g.value(gl).clone();
        let loss = g.sum(gl);
        let grads = g.backward(loss).unwrap();
        (out, grads.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}

#[test]
fn second_backward_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(
        g.backward(y).unwrap_err(),
        AutodiffError::BackwardAlreadyRun
    );
}

#[test]
fn non_scalar_output_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(
        g.backward(x),
        Err(AutodiffError::NonScalarOutput(s)) if s == vec![2]
    ));
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "add",
            lhs: vec![2, 3],
            rhs: vec![4]
        }
    );
    assert!(err.to_string().contains("add"));
    let err = g.matmul(a, a).unwrap_err();
    assert!(matches!(
        err,
        AutodiffError::ShapeMismatch { op: "matmul", .. }
    ));
}

#[test]
fn non_finite_probe_is_reported() {
    let x = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
    let err = grad_check(
        |g, v| {
            let one = g.scalar(1.0);
            let shifted = g.add_scalar(v, -1e-6);
            let inv = g.div(one, shifted)?;
            let e = g.exp(inv);
            Ok(g.sum(e))
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert!(
        matches!(err, AutodiffError::NonFinite { input: 0, .. }),
        "{err:?}"
    );
}

#[test]
fn invalid_eps_is_rejected() {
    let x = Tensor::scalar(1.0);
    assert!(grad_check(|g, v| Ok(g.exp(v)), &x, 0.5).is_err());
    assert!(grad_check(|g, v| Ok(g.exp(v)), &x, 0.0).is_err());
}

#[test]
fn division_clamps_denominator() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(0.0));
    let q = g.div(a, b).unwrap();
    assert_eq!(g.value(q).item(), Some(1e12));
    let l = g.log(b);
    assert!((g.value(l).item().unwrap() - (1e-12f64).ln()).abs() < 1e-12);
}

#[test]
fn f32_graph_matches_f64_closely() {
    let mut g32 = Graph::<f32>::new();
    let x32 = g32.param(Tensor::from_f64(&[4], &[0.1, -0.4, 2.0, 0.7]).unwrap());
    let s = g32.softmax(x32).unwrap();
    let l = g32.log(s);
    let y = g32.sum(l);
    let grads = g32.backward(y).unwrap();
    let (v, g64) = forward_backward(
        |g, x| {
            let s = g.softmax(x[0])?;
            let l = g.log(s);
            Ok(g.sum(l))
        },
        &[Tensor::from_f64(&[4], &[0.1, -0.4, 2.0, 0.7]).unwrap()],
    )
    .unwrap();
    assert!((g32.value(y).item().unwrap() as f64 - v).abs() < 1e-5);
    for (a, b) in grads.get(x32).unwrap().data().iter().zip(g64[0].data()) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}
