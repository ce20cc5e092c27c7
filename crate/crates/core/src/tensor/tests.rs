use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval1(f: impl FnOnce(&mut Graph<'_, f64>) -> crate::Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, x: Var) -> crate::Result<Var> {
    let n = g.value(x).numel();
    let shape = g.shape(x).to_vec();
    let w = Tensor::new(&shape, (0..n).map(|i| 0.3 + ((i * 7) % 11) as f64 * 0.17).collect())?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

const TOL: f64 = 1e-3;

#[test]
fn elementwise_examples() {
    let r = eval1(|g| {
        let a = g.constant(t(&[3], &[1., 1., 1.]));
        let b = g.constant(t(&[3], &[4., 5., 6.]));
        g.mul(a, b)
    });
    assert_eq!(r.data(), &[4., 5., 6.]);
    let r = eval1(|g| {
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[0., 0.]));
        g.add(a, b)
    });
    assert_eq!(r.data(), &[1., 2.]);
    let r = eval1(|g| {
        let a = g.constant(t(&[2], &[2., 3.]));
        let b = g.constant(t(&[2], &[4., 5.]));
        g.mul(a, b)
    });
    assert_eq!(r.data(), &[8., 15.]);
}

#[test]
fn elementwise_broadcast_and_mismatch() {
    let r = eval1(|g| {
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2], &[10., 20.]));
        g.add(a, b)
    });
    assert_eq!(r.data(), &[11., 22., 13., 24.]);
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t(&[3], &[1., 2., 3.]));
    assert!(matches!(g.sub(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_examples() {
    let r = eval1(|g| {
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        g.matmul(i, m)
    });
    assert_eq!(r.data(), &[1., 2., 3., 4.]);
    let r = eval1(|g| {
        let a = g.constant(t(&[1, 2], &[1., 0.]));
        let b = g.constant(t(&[2, 1], &[5., 7.]));
        g.matmul(a, b)
    });
    assert_eq!((r.shape(), r.data()), (&[1usize, 1][..], &[5.][..]));
    let r = eval1(|g| {
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        g.matmul(a, b)
    });
    assert_eq!(r.data(), &[3., 7.]);
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_examples() {
    let input = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let r = eval1(|g| {
        let x = g.constant(input.clone());
        let k = g.constant(t(&[1, 1, 1, 1], &[1.]));
        let b = g.constant(t(&[1], &[0.]));
        g.conv2d(x, k, b, 0)
    });
    assert_eq!(r.data(), input.data());

    let r = eval1(|g| {
        let x = g.constant(Tensor::zeros(&[2, 3, 3]));
        let k = g.constant(t(&[1, 2, 3, 3], &[0.7; 18]));
        let b = g.constant(t(&[1], &[0.5]));
        g.conv2d(x, k, b, 1)
    });
    assert!(r.data().iter().all(|&v| v == 0.5));

    // Hand-counted sliding window: center sees 9 ones, corners see 4.
    let r = eval1(|g| {
        let x = g.constant(Tensor::ones(&[1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(t(&[1], &[0.]));
        g.conv2d(x, k, b, 1)
    });
    assert_eq!(r.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
}

#[test]
fn conv2d_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 3]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, k, b, 1), Err(Error::Dimension(_))));
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, k, b, 0), Err(Error::Contract(_))));
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, cout, h, w, k) = (3, 2, 5, 7, 5);
    let x = random(&[cin, h, w], &mut rng);
    let kern = random(&[cout, cin, k, k], &mut rng);
    let bias = random(&[cout], &mut rng);
    let r = eval1(|g| {
        let (a, b, c) = (
            g.constant(x.clone()),
            g.constant(kern.clone()),
            g.constant(bias.clone()),
        );
        g.conv2d(a, b, c, 2)
    });
    let p = 2isize;
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += kern.data()[((co * cin + ci) * k + ky) * k + kx]
                                * x.data()[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                assert_abs_diff_eq!(r.data()[(co * h + y) * w + xx], acc, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn upsample_examples() {
    let r = eval1(|g| {
        let x = g.constant(Tensor::full(&[2, 3, 2], 0.7));
        g.upsample2x(x)
    });
    assert_eq!(r.shape(), &[2, 6, 4]);
    assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let r = eval1(|g| {
        let x = g.constant(t(&[1, 1, 1], &[3.5]));
        g.upsample2x(x)
    });
    assert_eq!(r.data(), &[3.5; 4]);
    // Half-pixel centers: outputs sample the input at -0.25, 0.25, 0.75, 1.25.
    let r = eval1(|g| {
        let x = g.constant(t(&[1, 1, 2], &[0., 1.]));
        g.upsample2x(x)
    });
    assert_eq!(r.shape(), &[1, 2, 4]);
    for row in r.data().chunks(4) {
        assert_eq!(row, &[0., 0.25, 0.75, 1.]);
    }
}

#[test]
fn activation_examples() {
    let r = eval1(|g| {
        let x = g.constant(t(&[1], &[0.]));
        g.sigmoid(x)
    });
    assert_eq!(r.data(), &[0.5]);
    let r = eval1(|g| {
        let x = g.constant(t(&[2], &[-1., 2.]));
        g.relu(x)
    });
    assert_eq!(r.data(), &[0., 2.]);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[3], vec![40.0, 1e4, -1e4]).unwrap());
    let y = g.sigmoid(x).unwrap();
    for &v in g.value(y).data() {
        assert!(v > 0.0 && v < 1.0, "{v}");
    }
    let e = g.exp(x).unwrap();
    assert!(g.value(e).is_finite());
}

#[test]
fn grid_sample_examples() {
    // [D=2, 2, 3] plane; node (1, 2) holds (5, 11).
    let plane = t(&[2, 2, 3], &[0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11.]);
    let r = eval1(|g| {
        let p = g.constant(plane.clone());
        g.grid_sample(p, t(&[1, 2], &[1.0, 1.0]))
    });
    assert_eq!(r.data(), &[5., 11.]);
    let r = eval1(|g| {
        let p = g.constant(Tensor::full(&[3, 4, 4], 2.5));
        g.grid_sample(p, t(&[3, 2], &[0.1, 0.9, 0.33, 0.5, -2.0, 7.0]))
    });
    assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    let r = eval1(|g| {
        let p = g.constant(t(&[1, 2, 2], &[0., 1., 2., 3.]));
        g.grid_sample(p, t(&[1, 2], &[0.5, 0.5]))
    });
    assert_abs_diff_eq!(r.data()[0], 1.5, epsilon = 1e-15);
    // Out of range clamps to the boundary node.
    let r = eval1(|g| {
        let p = g.constant(t(&[1, 2, 2], &[0., 1., 2., 3.]));
        g.grid_sample(p, t(&[1, 2], &[5.0, -3.0]))
    });
    assert_eq!(r.data(), &[2.]);
}

#[test]
fn concat_examples() {
    let r = eval1(|g| {
        let a = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        g.concat(&[a, b], 0)
    });
    assert_eq!((r.shape(), r.data()), (&[4usize, 1][..], &[1., 2., 3., 4.][..]));
    let r = eval1(|g| {
        let a = g.constant(t(&[2], &[1., 2.]));
        g.concat(&[a], 0)
    });
    assert_eq!(r.data(), &[1., 2.]);
    let r = eval1(|g| {
        let a = g.constant(Tensor::zeros(&[1, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3]));
        g.concat(&[a, b], 1)
    });
    assert_eq!(r.shape(), &[1, 5]);
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 2]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.concat(&[a, b], 1), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(t(&[1], &[3.]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[6.]);

    let mut g = Graph::new();
    let a = g.variable(t(&[3], &[1., 2., 3.]));
    let b = g.variable(t(&[3], &[4., 5., 6.]));
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(a).unwrap(), &[1., 1., 1.]);
    assert_eq!(grads.wrt(b).unwrap(), &[1., 1., 1.]);

    let mut g = Graph::<f64>::new();
    let a = g.variable(t(&[2], &[1., 2.]));
    assert!(matches!(g.backward(a), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    // loss = sum(x) + sum(2x) + sum(x*x): d/dx = 1 + 2 + 2x.
    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[0.5, -1.5]));
    let s1 = g.sum(x).unwrap();
    let x2 = g.scale(x, 2.0).unwrap();
    let s2 = g.sum(x2).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s3 = g.sum(sq).unwrap();
    let a = g.add(s1, s2).unwrap();
    let loss = g.add(a, s3).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[4.0, 0.0]);
}

#[test]
fn param_check_sums_repeated_bindings() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", t(&[3], &[0.3, -0.7, 1.1])).unwrap();
    let build = |g: &mut Graph<'_, f64>| {
        let a = g.param(w);
        let b = g.param(w);
        let p = g.mul(a, b)?;
        let e = g.exp(a)?;
        let s = g.add(p, e)?;
        g.sum(s)
    };
    let r = super::gradcheck::check_params(&store, &[w], DEFAULT_STEP, 3, build).unwrap();
    assert!(r.max_relative_error() < 1e-7, "{r:?}");
}

#[test]
fn gradcheck_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let step = DEFAULT_STEP;
    let mut cases: Vec<(&str, f64)> = Vec::new();

    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
        let ins = [random(&[3, 4], &mut rng), random(&[4], &mut rng)];
        let r = check(&ins, step, |g, v| {
            let y = g.binary(kind, v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap();
        cases.push(("binary", r.max_relative_error()));
    }
    let ins = [random(&[3, 5], &mut rng), random(&[5, 2], &mut rng)];
    let r = check(&ins, step, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y)
    })
    .unwrap();
    cases.push(("matmul", r.max_relative_error()));

    for k in [1, 3, 5] {
        let ins = [
            random(&[2, 4, 5], &mut rng),
            random(&[3, 2, k, k], &mut rng),
            random(&[3], &mut rng),
        ];
        let r = check(&ins, step, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], (k - 1) / 2)?;
            weighted_sum(g, y)
        })
        .unwrap();
        cases.push(("conv2d", r.max_relative_error()));
    }
    let ins = [random(&[2, 3, 4], &mut rng)];
    let r = check(&ins, step, |g, v| {
        let y = g.upsample2x(v[0])?;
        weighted_sum(g, y)
    })
    .unwrap();
    cases.push(("upsample2x", r.max_relative_error()));

    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Exponential] {
        let ins = [random(&[10], &mut rng)];
        let r = check(&ins, step, |g, v| {
            let y = g.activation(kind, v[0])?;
            weighted_sum(g, y)
        })
        .unwrap();
        cases.push(("activation", r.max_relative_error()));
    }
    let coords = random(&[7, 2], &mut rng);
    let coords = Tensor::new(&[7, 2], coords.data().iter().map(|v| v.abs()).collect()).unwrap();
    let ins = [random(&[3, 4, 5], &mut rng)];
    let r = check(&ins, step, |g, v| {
        let y = g.grid_sample(v[0], coords.clone())?;
        weighted_sum(g, y)
    })
    .unwrap();
    cases.push(("grid_sample", r.max_relative_error()));

    let ins = [random(&[2, 3], &mut rng), random(&[2, 2], &mut rng)];
    let r = check(&ins, step, |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, y)
    })
    .unwrap();
    cases.push(("concat", r.max_relative_error()));

    let ins = [random(&[4, 3], &mut rng)];
    let r = check(&ins, step, |g, v| {
        let s = g.slice_rows(v[0], 1, 3)?;
        let tr = g.transpose(s)?;
        let rs = g.reshape(tr, &[6])?;
        let m = g.mean(rs)?;
        let w = weighted_sum(g, rs)?;
        g.mul(m, w)
    })
    .unwrap();
    cases.push(("slice/transpose/reshape/mean", r.max_relative_error()));

    let target = random(&[2, 2], &mut rng);
    let ins = [random(&[2, 2], &mut rng)];
    let r = check(&ins, step, |g, v| g.mse(v[0], &target)).unwrap();
    cases.push(("mse", r.max_relative_error()));

    for (name, err) in cases {
        assert!(err < TOL, "{name}: relative error {err}");
    }
}

#[test]
fn adam_examples() {
    // First step moves each coordinate by ~lr against the gradient sign.
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("p", t(&[3], &[1., 1., 1.])).unwrap();
    let mut state = AdamState::new(&store, 1e-3);
    store.get_mut(id).grad = Some(vec![0.5, -2.0, 0.0]);
    adam_step(&mut store, &mut state).unwrap();
    let v = store.value(id).data();
    assert_abs_diff_eq!(v[0], 1.0 - 1e-3, epsilon = 1e-9);
    assert_abs_diff_eq!(v[1], 1.0 + 1e-3, epsilon = 1e-9);
    assert_eq!(v[2], 1.0);
    assert!(store.get(id).grad.is_none());
    assert_eq!(state.step_count, 1);

    // Missing gradient is a contract error.
    assert!(matches!(adam_step(&mut store, &mut state), Err(Error::Contract(_))));

    // Frozen parameters are skipped.
    store.set_requires_grad(id, false);
    adam_step(&mut store, &mut state).unwrap();
    assert_eq!(store.value(id).data()[2], 1.0);
}

#[test]
fn adam_quadratic_matches_scalar_oracle() {
    // Independent scalar Adam run (beta 0.9/0.999, eps 1e-8, lr 0.1, 100 steps
    // on (x-5)^2 from 0) lands at 5.03900403122392.
    const ORACLE: f64 = 5.039_004_031_223_92;
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", t(&[1], &[0.])).unwrap();
    let mut state = AdamState::new(&store, 0.1);
    for _ in 0..100 {
        let grads = {
            let mut g = Graph::with_params(&store);
            let x = g.param(id);
            let five = g.constant(t(&[1], &[5.]));
            let d = g.sub(x, five).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        adam_step(&mut store, &mut state).unwrap();
    }
    let x = store.value(id).data()[0];
    assert_abs_diff_eq!(x, ORACLE, epsilon = 1e-9);
    assert!((x - 5.0).abs() < 0.5);
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[1], &[f64::MAX]));
    assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::<f32>::new(&[0, 4], vec![]).unwrap().numel(), 0);
}

proptest! {
    #[test]
    fn activations_stay_in_range(xs in prop::collection::vec(-200.0f32..200.0, 1..64)) {
        let n = xs.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[n], xs).unwrap());
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(g.value(r).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn upsample_preserves_constants(c in -5.0f64..5.0, h in 1usize..6, w in 1usize..6) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, h, w], c));
        let y = g.upsample2x(x).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 6, 6], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::<f64>::new();
            let (a, b, c) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(Tensor::zeros(&[4])));
            let y = g.conv2d(a, b, c, 1).unwrap();
            let y = g.upsample2x(y).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
