use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn check(report: GradCheckReport) {
    assert!(report.passed(), "{report}");
}

#[test]
fn conv1d_identity_filter() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1., 2., 3.]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![1.]]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.; 3]));
    let out = g.conv1d_valid(x, w, b).unwrap();
    assert_eq!(g.value(out).data(), &[1., 2., 3.]);
}

#[test]
fn conv1d_difference_filter() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1., 2., 3.]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![1., -1.]]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.; 2]));
    let out = g.conv1d_valid(x, w, b).unwrap();
    assert_eq!(g.value(out).data(), &[-1., -1.]);
}

#[test]
fn conv1d_output_length_is_t_minus_h_plus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[4, 30]));
    let w = g.constant(random(&mut rng, &[4, 5]));
    let b = g.constant(Tensor::vector(vec![0.; 26]));
    let out = g.conv1d_valid(x, w, b).unwrap();
    assert_eq!(g.value(out).numel(), 26);
}

#[test]
fn conv1d_rejects_short_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1., 2.]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![1., 1., 1.]]).unwrap());
    let b = g.constant(Tensor::vector(vec![]));
    assert!(matches!(g.conv1d_valid(x, w, b), Err(Error::Shape(_))));
}

#[test]
fn conv1d_is_linear_in_input_and_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x1, x2) = (random(&mut rng, &[3, 7]), random(&mut rng, &[3, 7]));
    let (w1, w2) = (random(&mut rng, &[3, 3]), random(&mut rng, &[3, 3]));
    let zero_b = Tensor::vector(vec![0.; 5]);
    let conv = |x: &Tensor, w: &Tensor| {
        let mut g = Graph::inference();
        let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(zero_b.clone()));
        let o = g.conv1d_valid(x, w, b).unwrap();
        g.value(o).data().to_vec()
    };
    let combine = |a: &Tensor, b: &Tensor, ca: f64, cb: f64| {
        let data = a.data().iter().zip(b.data()).map(|(p, q)| ca * p + cb * q).collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    };
    let lhs = conv(&combine(&x1, &x2, 2.0, -0.5), &w1);
    let rhs: Vec<f64> = conv(&x1, &w1).iter().zip(conv(&x2, &w1)).map(|(p, q)| 2.0 * p - 0.5 * q).collect();
    assert_close(&lhs, &rhs, 1e-12);
    let lhs = conv(&x1, &combine(&w1, &w2, 1.5, 3.0));
    let rhs: Vec<f64> = conv(&x1, &w1).iter().zip(conv(&x1, &w2)).map(|(p, q)| 1.5 * p + 3.0 * q).collect();
    assert_close(&lhs, &rhs, 1e-12);
}

#[test]
fn max_over_time_examples() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![1., 2., 3.]));
    let (m, idx) = g.max_over_time(v).unwrap();
    assert_eq!((g.value(m).item(), idx), (3.0, 2));

    let v = g.constant(Tensor::vector(vec![5.]));
    let (m, idx) = g.max_over_time(v).unwrap();
    assert_eq!((g.value(m).item(), idx), (5.0, 0));

    let empty = g.constant(Tensor::vector(vec![]));
    assert!(matches!(g.max_over_time(empty), Err(Error::Shape(_))));
}

#[test]
fn max_over_time_ties_route_gradient_to_first_index() {
    let mut g = Graph::new();
    let v = g.variable(Tensor::vector(vec![2., 2.]));
    let (m, idx) = g.max_over_time(v).unwrap();
    assert_eq!((g.value(m).item(), idx), (2.0, 0));
    g.backward(m).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn max_over_time_gradient_is_zero_off_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t = random(&mut rng, &[9]);
        let mut g = Graph::new();
        let v = g.variable(t);
        let (m, idx) = g.max_over_time(v).unwrap();
        let y = g.scale(m, 3.0);
        g.backward(y).unwrap();
        for (i, gi) in g.grad(v).unwrap().data().iter().enumerate() {
            assert_eq!(*gi, if i == idx { 3.0 } else { 0.0 });
        }
    }
}

#[test]
fn softmax_temperature_examples() {
    let p = softmax_rows(&Tensor::vector(vec![2., 1.]), 1.0).unwrap();
    assert_close(p.data(), &[0.73106, 0.26894], 1e-5);
    let e2 = 2f64.exp();
    let e1 = 1f64.exp();
    assert!((p.data()[0] - e2 / (e2 + e1)).abs() < 1e-15);

    let p = softmax_rows(&Tensor::vector(vec![2., 1.]), 1e3).unwrap();
    assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-12);

    for temp in [0.1, 1.0, 37.0] {
        let p = softmax_rows(&Tensor::vector(vec![0.7; 3]), temp).unwrap();
        assert_close(p.data(), &[1. / 3.; 3], 1e-15);
    }
}

#[test]
fn softmax_temperature_rejects_nonpositive() {
    for temp in [0.0, -1.0, f64::NAN] {
        assert!(matches!(
            softmax_rows(&Tensor::vector(vec![1., 2.]), temp),
            Err(Error::Domain(_))
        ));
    }
}

#[test]
fn grad_check_square() {
    let report = grad_check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), EPS, TOL).unwrap();
    assert!((report.analytic[0] - 6.0).abs() < 1e-12);
    assert!((report.numeric[0] - 6.0).abs() < 1e-8);
    check(report);
}

#[test]
fn grad_check_flags_corrupted_backward() {
    // cube with a wrong derivative 2x instead of 3x²
    let cube = |g: &mut Graph, x: Var| -> crate::error::Result<Var> {
        let y = g.map(x, |v| v * v * v, |x, _| 2.0 * x);
        Ok(g.sum(y))
    };
    let report = grad_check(cube, &Tensor::vector(vec![0.5, 2.0]), EPS, TOL).unwrap();
    assert!(!report.passed());
    assert_eq!(report.worst_coordinate, 1);
    assert!(report.to_string().contains("coordinate 1"));
}

#[test]
fn grad_check_reports_nonfinite_objective() {
    let r = grad_check(|g, x| Ok(g.log_clamped(x, 0.0)), &Tensor::scalar(0.0), EPS, TOL);
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn grad_check_conv_max_tanh_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = random(&mut rng, &[2, 5]);
    let w0 = random(&mut rng, &[2, 3]);
    let b0 = random(&mut rng, &[3]);
    let f = |g: &mut Graph, x: Var| {
        let w = g.constant(w0.clone());
        let b = g.constant(b0.clone());
        let c = g.conv1d_valid(x, w, b)?;
        let (m, _) = g.max_over_time(c)?;
        Ok(g.tanh(m))
    };
    check(grad_check(f, &x0, EPS, TOL).unwrap());
    let fw = |g: &mut Graph, w: Var| {
        let x = g.constant(x0.clone());
        let b = g.constant(b0.clone());
        let c = g.conv1d_valid(x, w, b)?;
        let (m, _) = g.max_over_time(c)?;
        Ok(g.tanh(m))
    };
    check(grad_check(fw, &w0, EPS, TOL).unwrap());
}

/// Weighted sum `Σ wᵢ yᵢ` with fixed random weights, turning any output
/// into a scalar with a generic upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> crate::error::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let c = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);

    type Case = Box<dyn Fn(&mut Graph, Var) -> crate::error::Result<Var>>;
    let (b_, c_) = (b.clone(), c.clone());
    let cases: Vec<(&str, Tensor, Case)> = vec![
        ("matmul", a.clone(), Box::new(move |g, x| {
            let bb = g.constant(b_.clone());
            let y = g.matmul(x, bb)?;
            project(g, y, 10)
        })),
        ("matmul_rhs", b.clone(), {
            let a = a.clone();
            Box::new(move |g, x| {
                let aa = g.constant(a.clone());
                let y = g.matmul(aa, x)?;
                project(g, y, 11)
            })
        }),
        ("add", a.clone(), {
            let c = c_.clone();
            Box::new(move |g, x| {
                let cc = g.constant(c.clone());
                let y = g.add(x, cc)?;
                let y = g.mul(y, y)?;
                project(g, y, 12)
            })
        }),
        ("sub", a.clone(), {
            let c = c_.clone();
            Box::new(move |g, x| {
                let cc = g.constant(c.clone());
                let y = g.sub(cc, x)?;
                let y = g.mul(y, y)?;
                project(g, y, 13)
            })
        }),
        ("mul", a.clone(), {
            let c = c_.clone();
            Box::new(move |g, x| {
                let cc = g.constant(c.clone());
                let y = g.mul(x, cc)?;
                project(g, y, 14)
            })
        }),
        ("add_row", row.clone(), {
            let a = a.clone();
            Box::new(move |g, r| {
                let aa = g.constant(a.clone());
                let y = g.add_row(aa, r)?;
                let y = g.tanh(y);
                project(g, y, 15)
            })
        }),
        ("tanh", a.clone(), Box::new(|g, x| {
            let y = g.tanh(x);
            project(g, y, 16)
        })),
        ("sigmoid", a.clone(), Box::new(|g, x| {
            let y = g.sigmoid(x);
            project(g, y, 17)
        })),
        ("exp", a.clone(), Box::new(|g, x| {
            let y = g.exp(x);
            project(g, y, 18)
        })),
        ("log", a.map(|v| v.abs() + 0.5), Box::new(|g, x| {
            let y = g.log_clamped(x, 1e-7);
            project(g, y, 19)
        })),
        ("softmax_temperature", a.clone(), Box::new(|g, x| {
            let y = g.softmax_temperature(x, 2.5)?;
            project(g, y, 20)
        })),
        ("l2_norm", a.clone(), Box::new(|g, x| Ok(g.l2_norm(x)))),
        ("transpose", a.clone(), Box::new(|g, x| {
            let y = g.transpose(x)?;
            project(g, y, 21)
        })),
        ("slice_concat", a.clone(), Box::new(|g, x| {
            let l = g.slice_cols(x, 0, 1)?;
            let r = g.slice_cols(x, 1, 3)?;
            let y = g.concat_cols(&[r, l, r])?;
            let y = g.concat_rows(&[y, y])?;
            let y = g.tanh(y);
            project(g, y, 22)
        })),
        ("mean_rows", a.clone(), Box::new(|g, x| {
            let y = g.mean_rows(x)?;
            let y = g.mul(y, y)?;
            let s = g.mean(y);
            Ok(g.add_scalar(s, 1.0))
        })),
        ("segment_max", random(&mut rng, &[6, 3]), Box::new(|g, x| {
            let y = g.segment_max(x, 3)?;
            project(g, y, 23)
        })),
        ("im2col_stack", random(&mut rng, &[2, 3]), Box::new(|g, x| {
            let s1 = g.tanh(x);
            let s2 = g.scale(x, -0.7);
            let s3 = g.sigmoid(x);
            let st = g.stack_steps(&[s1, s2, s3, s1])?;
            let y = g.im2col(st, 2)?;
            project(g, y, 24)
        })),
        ("gather", random(&mut rng, &[5, 3]), Box::new(|g, x| {
            let y = g.gather_rows(x, &[4, 0, 4, 2])?;
            let y = g.tanh(y);
            project(g, y, 25)
        })),
        ("pairwise_sq_dist", random(&mut rng, &[3, 2]), {
            let other = random(&mut rng, &[4, 2]);
            Box::new(move |g, x| {
                let o = g.constant(other.clone());
                let d = g.pairwise_sq_dist(x, o)?;
                let e = g.pairwise_sq_dist(x, x)?;
                let s = project(g, d, 26)?;
                let t = project(g, e, 27)?;
                g.add(s, t)
            })
        }),
        ("inverse_trace", {
            let m = random(&mut rng, &[3, 3]);
            let mut spd = m.matmul(&m.transpose().unwrap()).unwrap();
            for i in 0..3 {
                spd.data_mut()[i * 3 + i] += 1.0;
            }
            spd
        }, Box::new(|g, x| {
            let inv = g.inverse(x)?;
            let t = g.trace(inv)?;
            let p = project(g, inv, 28)?;
            g.add(t, p)
        })),
        ("cross_entropy", a.clone(), Box::new(|g, x| {
            g.cross_entropy(x, &[Some(1), None, Some(3)])
        })),
        ("reshape", a.clone(), Box::new(|g, x| {
            let y = g.reshape(x, vec![2, 6])?;
            let y = g.sigmoid(y);
            project(g, y, 29)
        })),
        ("conv1d_bias", random(&mut rng, &[4]), {
            let x = random(&mut rng, &[2, 6]);
            let w = random(&mut rng, &[2, 3]);
            Box::new(move |g, b| {
                let xx = g.constant(x.clone());
                let ww = g.constant(w.clone());
                let y = g.conv1d_valid(xx, ww, b)?;
                let y = g.tanh(y);
                project(g, y, 30)
            })
        }),
    ];
    for (name, theta, f) in cases {
        let report = grad_check(|g, x| f(g, x), &theta, EPS, TOL).unwrap();
        assert!(report.passed(), "{name}: {report}");
    }
}

#[test]
fn gradient_accumulates_over_multiple_consumers() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.5]));
    let a = g.scale(x, 2.0);
    let b = g.scale(x, 3.0);
    let c = g.add(a, b).unwrap();
    let d = g.add(c, x).unwrap();
    let s = g.sum(d);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
}

#[test]
fn inverse_of_singular_matrix_is_numerical_error() {
    let t = Tensor::from_rows(&[vec![1., 2.], vec![2., 4.]]).unwrap();
    assert!(matches!(invert(&t), Err(Error::Numerical(_))));
    let t = Tensor::from_rows(&[vec![4., 1.], vec![2., 3.]]).unwrap();
    let i = invert(&t).unwrap();
    assert_close(t.matmul(&i).unwrap().data(), Tensor::identity(2).data(), 1e-14);
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut params = std::collections::BTreeMap::new();
    params.insert("disc.w".to_string(), Tensor::vector(vec![2.0]));
    params.insert("gen.w".to_string(), Tensor::vector(vec![3.0]));
    let mut g = Graph::new();
    g.freeze_prefix("disc.");
    let d = g.bind(&params, "disc.w").unwrap();
    let w = g.bind(&params, "gen.w").unwrap();
    let p = g.mul(d, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let grads = g.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads["gen.w"].data(), &[2.0]);
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            temp in 0.01f64..100.0,
            rot in 0usize..12,
        ) {
            let p = softmax_rows(&Tensor::vector(v.clone()), temp).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            let k = rot % v.len();
            let mut rv = v.clone();
            rv.rotate_left(k);
            let rp = softmax_rows(&Tensor::vector(rv), temp).unwrap();
            let mut expect = p.data().to_vec();
            expect.rotate_left(k);
            for (a, b) in rp.data().iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
