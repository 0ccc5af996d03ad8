use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Backward vs central differences for a scalar function of one input tensor.
fn check_unary<F>(input: Tensor, build: F) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let y = build(&mut g, x);
    let grads = g.backward(y).unwrap();
    let analytic = grads.get(x).unwrap().data().to_vec();
    let numeric = finite_difference(
        |probe| {
            let mut g = Graph::new();
            let x = g.constant(t(input.shape(), probe));
            let y = build(&mut g, x);
            g.value(y).item()
        },
        input.data(),
        1e-5,
    );
    max_relative_error(&analytic, &numeric, 1e-6)
}

/// Projects an arbitrary tensor onto a scalar with non-uniform weights so
/// every output coordinate contributes a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Var {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = t(&shape, &(0..n).map(|i| 0.3 + 0.17 * i as f64).collect::<Vec<_>>());
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_example() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(g.shape(c), &[2, 1]);
}

#[test]
fn relu_and_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = g.softmax(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    let big = g.constant(Tensor::vector(vec![1e4]));
    assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
}

#[test]
fn backward_of_squared_norm() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(w, w).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn cross_entropy_gradient_is_p_minus_y() {
    let mut g = Graph::new();
    let z = g.variable(t(&[1, 2], &[0.0, 0.0]));
    let l = cross_entropy(&mut g, z, &[0]).unwrap();
    let grads = g.backward(l).unwrap();
    let gz = grads.get(z).unwrap().data();
    assert!((gz[0] + 0.5).abs() < 1e-15 && (gz[1] - 0.5).abs() < 1e-15);
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = cross_entropy(&mut g, z, &[0]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let z = g.constant(t(&[1, 2], &[10.0, -10.0]));
    let l = cross_entropy(&mut g, z, &[0]).unwrap();
    // -log(1 / (1 + e^-20)) = log1p(e^-20)
    let expected = (-20.0f64).exp().ln_1p();
    assert!((g.value(l).item() - expected).abs() < 1e-6 * expected);
    assert!((expected - 2.06e-9).abs() < 1e-11);

    let one = g.constant(t(&[1, 3], &[0.3, -1.2, 2.0]));
    let two = g.constant(t(&[2, 3], &[0.3, -1.2, 2.0, 0.3, -1.2, 2.0]));
    let l1 = cross_entropy(&mut g, one, &[1]).unwrap();
    let l2 = cross_entropy(&mut g, two, &[1, 1]).unwrap();
    assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-15);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
    assert!(matches!(cross_entropy(&mut g, z, &[2]), Err(Error::Usage(_))));
}

#[test]
fn non_scalar_root_is_usage_error() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let positive = a.map(|v| v.abs() + 0.5);
    let cases: Vec<(&str, Tensor, Box<dyn Fn(&mut Graph, Var) -> Var>)> = vec![
        ("matmul", a.clone(), {
            let b = random(&mut rng, &[4, 2]);
            Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.matmul(x, b).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("matmul-rhs", random(&mut rng, &[4, 2]), {
            let lhs = a.clone();
            Box::new(move |g, x| {
                let l = g.constant(lhs.clone());
                let y = g.matmul(l, x).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("transpose", a.clone(), Box::new(|g, x| {
            let y = g.transpose(x).unwrap();
            weighted_sum(g, y)
        })),
        ("add", a.clone(), Box::new(|g, x| {
            let y = g.add(x, x).unwrap();
            weighted_sum(g, y)
        })),
        ("sub", a.clone(), {
            let other = random(&mut rng, &[3, 4]);
            Box::new(move |g, x| {
                let o = g.constant(other.clone());
                let y = g.sub(o, x).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("mul", a.clone(), Box::new(|g, x| {
            let y = g.mul(x, x).unwrap();
            weighted_sum(g, y)
        })),
        ("div", positive.clone(), Box::new(|g, x| {
            let s = g.affine(x, 2.0, 1.0).unwrap();
            let y = g.div(s, x).unwrap();
            weighted_sum(g, y)
        })),
        ("relu", a.clone(), Box::new(|g, x| {
            let y = g.relu(x).unwrap();
            weighted_sum(g, y)
        })),
        ("sigmoid", a.clone(), Box::new(|g, x| {
            let y = g.sigmoid(x).unwrap();
            weighted_sum(g, y)
        })),
        ("exp", a.clone(), Box::new(|g, x| {
            let y = g.exp(x).unwrap();
            weighted_sum(g, y)
        })),
        ("log", positive.clone(), Box::new(|g, x| {
            let y = g.log(x).unwrap();
            weighted_sum(g, y)
        })),
        ("sqrt", positive.clone(), Box::new(|g, x| {
            let y = g.sqrt(x).unwrap();
            weighted_sum(g, y)
        })),
        ("abs-diff", a.clone(), {
            let other = random(&mut rng, &[3, 4]);
            Box::new(move |g, x| {
                let o = g.constant(other.clone());
                let y = g.abs_diff(x, o).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("softmax", a.clone(), Box::new(|g, x| {
            let y = g.softmax(x).unwrap();
            weighted_sum(g, y)
        })),
        ("log_softmax", a.clone(), Box::new(|g, x| {
            let y = g.log_softmax(x).unwrap();
            weighted_sum(g, y)
        })),
        ("sum", a.clone(), Box::new(|g, x| {
            let s = g.sum(x).unwrap();
            g.mul(s, s).unwrap()
        })),
        ("mean", a.clone(), Box::new(|g, x| {
            let sq = g.mul(x, x).unwrap();
            g.mean(sq).unwrap()
        })),
        ("sum_to_axis", a.clone(), Box::new(|g, x| {
            let y = g.sum_to_axis(x, 1).unwrap();
            let y = g.mul(y, y).unwrap();
            weighted_sum(g, y)
        })),
        ("broadcast_axis", Tensor::vector(vec![0.2, -0.7, 1.1]), Box::new(|g, x| {
            let y = g.broadcast_axis(x, 0, &[3, 2]).unwrap();
            let y = g.mul(y, y).unwrap();
            weighted_sum(g, y)
        })),
        ("reshape", a.clone(), Box::new(|g, x| {
            let y = g.reshape(x, &[2, 6]).unwrap();
            let y = g.sigmoid(y).unwrap();
            weighted_sum(g, y)
        })),
        ("slice_axis", a.clone(), Box::new(|g, x| {
            let y = g.slice_axis(x, 1, 1, 2).unwrap();
            let y = g.mul(y, y).unwrap();
            weighted_sum(g, y)
        })),
        ("pad_axis", a.clone(), Box::new(|g, x| {
            let y = g.pad_axis(x, 0, 1, 5).unwrap();
            let y = g.exp(y).unwrap();
            weighted_sum(g, y)
        })),
        ("concat", a.clone(), Box::new(|g, x| {
            let sq = g.mul(x, x).unwrap();
            let y = g.concat(&[x, sq], 1).unwrap();
            weighted_sum(g, y)
        })),
        ("conv2d-input", random(&mut rng, &[2, 2, 5, 5]), {
            let w = random(&mut rng, &[3, 2, 3, 3]);
            Box::new(move |g, x| {
                let w = g.constant(w.clone());
                let geom = ConvGeometry { stride: 2, padding: 1 };
                let y = g.conv2d(x, w, geom).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("conv2d-kernel", random(&mut rng, &[3, 2, 3, 3]), {
            let input = random(&mut rng, &[2, 2, 5, 5]);
            Box::new(move |g, w| {
                let x = g.constant(input.clone());
                let geom = ConvGeometry { stride: 1, padding: 2 };
                let y = g.conv2d(x, w, geom).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("conv2d_input_grad", random(&mut rng, &[1, 3, 3, 3]), {
            let w = random(&mut rng, &[3, 2, 3, 3]);
            Box::new(move |g, up| {
                let w = g.constant(w.clone());
                let geom = ConvGeometry { stride: 2, padding: 1 };
                let y = g.conv2d_input_grad(up, w, geom, (5, 5)).unwrap();
                weighted_sum(g, y)
            })
        }),
        ("conv2d_weight_grad", random(&mut rng, &[1, 2, 5, 5]), {
            let up = random(&mut rng, &[1, 3, 3, 3]);
            Box::new(move |g, x| {
                let up = g.constant(up.clone());
                let geom = ConvGeometry { stride: 2, padding: 1 };
                let y = g.conv2d_weight_grad(x, up, geom, (3, 3)).unwrap();
                weighted_sum(g, y)
            })
        }),
    ];
    for (name, input, build) in cases {
        let err = check_unary(input, build);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

/// Second-order: differentiate a function of a gradient.
#[test]
fn gradient_of_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w1 = random(&mut rng, &[4, 3]);
    let w2 = random(&mut rng, &[3, 2]);
    let target = random(&mut rng, &[4, 3]);
    let x0 = random(&mut rng, &[1, 4]);
    let build = |g: &mut Graph, x: Var, create: bool| -> (Var, Var) {
        let p1 = g.variable(w1.clone());
        let p2 = g.variable(w2.clone());
        let h = g.matmul(x, p1).unwrap();
        let h = g.sigmoid(h).unwrap();
        let z = g.matmul(h, p2).unwrap();
        let loss = cross_entropy(g, z, &[1]).unwrap();
        let gw = g.grad(loss, &[p1], create).unwrap()[0];
        let tgt = g.constant(target.clone());
        let d = g.sub(gw, tgt).unwrap();
        let d2 = g.mul(d, d).unwrap();
        (g.sum(d2).unwrap(), p1)
    };
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let (obj, _) = build(&mut g, x, true);
    let analytic = g.grad(obj, &[x], false).unwrap()[0];
    let analytic = g.value(analytic).data().to_vec();
    let numeric = finite_difference(
        |probe| {
            let mut g = Graph::new();
            let x = g.constant(t(&[1, 4], probe));
            let (obj, _) = build(&mut g, x, false);
            g.value(obj).item()
        },
        x0.data(),
        1e-5,
    );
    assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
}

#[test]
fn second_order_through_conv_and_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&mut rng, &[2, 1, 3, 3]);
    let x0 = random(&mut rng, &[1, 1, 4, 4]);
    let geom = ConvGeometry { stride: 1, padding: 1 };
    let build = |g: &mut Graph, x: Var, create: bool| {
        let k = g.variable(w.clone());
        let y = g.conv2d(x, k, geom).unwrap();
        let y = g.sigmoid(y).unwrap();
        let y = g.relu(y).unwrap();
        let l = weighted_sum(g, y);
        let gk = g.grad(l, &[k], create).unwrap()[0];
        let sq = g.mul(gk, gk).unwrap();
        g.sum(sq).unwrap()
    };
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let obj = build(&mut g, x, true);
    let a = g.grad(obj, &[x], false).unwrap()[0];
    let analytic = g.value(a).data().to_vec();
    let numeric = finite_difference(
        |p| {
            let mut g = Graph::new();
            let x = g.constant(t(&[1, 1, 4, 4], p));
            let o = build(&mut g, x, false);
            g.value(o).item()
        },
        x0.data(),
        1e-5,
    );
    assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::vector(vec![1.5, -2.0]));
    let a = g.sum(w).unwrap();
    let b = g.sum(w).unwrap();
    let l = g.add(a, b).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0]);

    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![1.0, 1.0]));
    for _ in 0..2 {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        let s = g.sum(bound[0]).unwrap();
        let grads = g.backward(s).unwrap();
        store.accumulate(&bound, &grads).unwrap();
    }
    assert_eq!(store.grads().unwrap()[0].data(), &[2.0, 2.0]);
    store.zero_grads();
    assert!(store.grads().is_err());
}

#[test]
fn unreachable_target_gets_zero_gradient() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::vector(vec![1.0]));
    let b = g.variable(Tensor::vector(vec![2.0, 3.0]));
    let l = g.mul(a, a).unwrap();
    let gs = g.grad(l, &[a, b], false).unwrap();
    assert_eq!(g.value(gs[0]).data(), &[2.0]);
    assert_eq!(g.value(gs[1]).data(), &[0.0, 0.0]);
}

#[test]
fn flatten_layout_and_roundtrip() {
    let mut store = ParamStore::new();
    store.add("w0", Tensor::zeros(&[2, 3]));
    store.add("b0", Tensor::zeros(&[3]));
    assert!(matches!(store.flatten_grads(), Err(Error::Usage(m)) if m.contains("w0")));
    store
        .set_grads(vec![
            t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            Tensor::vector(vec![7.0, 8.0, 9.0]),
        ])
        .unwrap();
    let cap = store.flatten_grads().unwrap();
    assert_eq!(cap.len(), 9);
    let layout: Vec<_> = cap.layout.iter().map(|e| (e.name.as_str(), e.offset, e.len)).collect();
    assert_eq!(layout, vec![("w0", 0, 6), ("b0", 6, 3)]);
    let again = store.flatten_grads().unwrap();
    let bits = |c: &GradientCapture| c.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&cap), bits(&again));
    assert_eq!(cap.unflatten().unwrap(), store.grads().unwrap());
}

#[test]
fn adam_first_step_and_fixed_point() {
    let mut adam = Adam::new(AdamConfig::with_lr(0.01));
    let mut p = vec![Tensor::vector(vec![1.0])];
    adam.step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
    assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
    assert_eq!(adam.steps(), 1);

    let before = p.clone();
    let m_before = adam.first_moments()[0][0];
    adam.step(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
    assert!(adam.first_moments()[0][0].abs() < m_before.abs());
    // Non-zero momentum still moves the parameter; a fresh optimizer with zero grads does not.
    let mut fresh = Adam::new(AdamConfig::with_lr(0.01));
    let mut q = before.clone();
    fresh.step(&mut q, &[Tensor::vector(vec![0.0])]).unwrap();
    assert_eq!(q, before);
    assert_eq!(fresh.first_moments()[0][0], 0.0);
}

#[test]
fn adam_length_mismatch() {
    let mut adam = Adam::new(AdamConfig::default());
    let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
    assert!(adam.step(&mut p, &[Tensor::vector(vec![1.0])]).is_err());
    assert!(adam.step(&mut p, &[]).is_err());
}

#[test]
fn adam_minimizes_shifted_quadratic() {
    // Oracle: the same recurrence written out directly.
    let (mut w_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for step in 1..=200 {
        let g = 2.0 * (w_ref - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(step));
        let vh = v / (1.0 - 0.999f64.powi(step));
        w_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    let mut adam = Adam::new(AdamConfig::with_lr(0.1));
    let mut w = vec![0.0];
    for _ in 0..200 {
        let g = vec![2.0 * (w[0] - 3.0)];
        adam.step_flat(&mut w, &g).unwrap();
    }
    assert_eq!(w[0].to_bits(), w_ref.to_bits());
    assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
}

fn quadratic(x: &[f64]) -> crate::error::Result<(f64, Vec<f64>)> {
    Ok((0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()))
}

#[test]
fn lbfgs_solves_quadratic() {
    let mut opt = Lbfgs::new(LbfgsConfig::default());
    let mut x = vec![3.0, -4.0, 1.5, 10.0];
    for _ in 0..20 {
        opt.step(&mut x, quadratic).unwrap();
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "norm {norm}");
}

#[test]
fn lbfgs_scalar_shifted_quadratic() {
    let mut opt = Lbfgs::new(LbfgsConfig::default());
    let mut w = vec![0.0];
    for _ in 0..20 {
        opt.step(&mut w, |x| Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)])))
            .unwrap();
    }
    assert!((w[0] - 3.0).abs() < 1e-8);
}

#[test]
fn lbfgs_history_bound_and_first_direction() {
    let opt = Lbfgs::new(LbfgsConfig {
        history: 1,
        ..LbfgsConfig::default()
    });
    let g = [0.5, -2.0, 1.0];
    // Empty two-loop recursion: steepest descent.
    assert_eq!(opt.direction(&g), vec![-0.5, 2.0, -1.0]);

    let mut opt = opt;
    let mut x = vec![1.0, 2.0, -3.0];
    let scaled = |x: &[f64]| {
        let w = [1.0, 4.0, 9.0];
        let f = x.iter().zip(w).map(|(v, w)| 0.5 * w * v * v).sum();
        Ok((f, x.iter().zip(w).map(|(v, w)| w * v).collect()))
    };
    for _ in 0..5 {
        opt.step(&mut x, scaled).unwrap();
        assert!(opt.history_len() <= 1);
    }
}

#[test]
fn lbfgs_reports_failed_line_search() {
    let mut opt = Lbfgs::new(LbfgsConfig::default());
    let mut x = vec![1.0];
    // Gradient points the wrong way: no step can satisfy Armijo.
    let step = opt.step(&mut x, |x| Ok((x[0], vec![-1.0]))).unwrap();
    assert!(step.line_search_failed);
    assert_eq!(x, vec![1.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 4], &v));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let l = cross_entropy(&mut g, x, &[0, 3, 1]).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, &[2, 3]);
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let x = g.variable(x0.clone());
            let s = g.sigmoid(x).unwrap();
            let l1 = g.sum(s).unwrap();
            let sq = g.mul(x, x).unwrap();
            let l2 = g.sum(sq).unwrap();
            let l1 = g.scale(l1, ca).unwrap();
            let l2 = g.scale(l2, cb).unwrap();
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap().get(x).unwrap().clone()
        };
        let combined = grad_of(a, b);
        let (g1, g2) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..6 {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moves_against_first_moment(grads in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        let mut p = vec![0.0];
        for g in grads {
            let before = p[0];
            adam.step_flat(&mut p, &[g]).unwrap();
            let m = adam.first_moments()[0][0];
            let v = adam.second_moments()[0][0];
            let delta = p[0] - before;
            if v > 0.0 && m != 0.0 {
                prop_assert_eq!(delta.signum(), -m.signum());
            }
        }
    }
}
