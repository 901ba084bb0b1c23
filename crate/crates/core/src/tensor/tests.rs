use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values kept at least `margin` away from zero so that relu kinks
/// stay outside the finite-difference stencil.
fn away_from_zero(shape: &[usize], margin: f64, seed: u64) -> Tensor {
    let mut x = Tensor::uniform(shape, 1.0, &mut rng(seed));
    for v in x.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
    x
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut g = Graph::new();
    let a = Tensor::uniform(&[3, 5], 1.0, &mut rng(1));
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, 1, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn same_padding_with_stride_two_halves_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[2, 3, 7, 8]));
    let w = g.constant(Tensor::ones(&[4, 3, 3, 3]));
    let y = g.conv2d(x, w, 2, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 4]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    assert!(matches!(
        g.conv2d(a, b, 1, Padding::Valid),
        Err(Error::Shape { op: "conv2d", .. })
    ));
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1.0, 0.0, 0.0, 3.0, 4.0, 0.0]));
    let y = g.l2_normalize(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 0.6, 0.8, 0.0]);

    let x = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.l2_normalize(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
}

#[test]
fn l2_normalize_gives_unit_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[100, 7], 3.0, &mut rng(9)));
    let y = g.l2_normalize(x).unwrap();
    for row in g.value(y).data().chunks(7) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn l2_normalize_rejects_zero_row() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    assert!(matches!(
        g.l2_normalize(x),
        Err(Error::Degenerate { op: "l2_normalize", .. })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -2.0, 5.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn unused_leaf_gets_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_input_accumulates() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[3.0, -1.0]));
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, -2.0]);
}

#[test]
fn grad_check_exact_for_linear() {
    let p = Tensor::randn(&[6], 1.0, &mut rng(3));
    let err = grad_check(
        |g, x| {
            let y = g.scale(x, 2.0);
            Ok(g.sum(y))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "err {err}");
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let p = Tensor::randn(&[4, 5], 1.0, &mut rng(4));
    let targets = [Some(0), Some(3), None, Some(4)];
    let err = grad_check(|g, x| g.cross_entropy(x, &targets), &p, 1e-5).unwrap();
    assert!(err < 1e-4, "err {err}");
}

#[test]
fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[10, 9], 4.0, &mut rng(5)));
    let s = g.softmax(x);
    let ls = g.log_softmax(x);
    for (srow, lrow) in g.value(s).data().chunks(9).zip(g.value(ls).data().chunks(9)) {
        assert!((srow.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in srow.iter().zip(lrow) {
            assert!((a.ln() - b).abs() < 1e-9);
        }
    }
}

#[test]
fn matmul_is_associative() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng(6)));
    let b = g.constant(Tensor::randn(&[4, 5], 1.0, &mut rng(7)));
    let c = g.constant(Tensor::randn(&[5, 2], 1.0, &mut rng(8)));
    let ab = g.matmul(a, b).unwrap();
    let left = g.matmul(ab, c).unwrap();
    let bc = g.matmul(b, c).unwrap();
    let right = g.matmul(a, bc).unwrap();
    assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-9);
}

#[test]
fn recorded_ops_are_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng(11)));
        let w = g.param(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng(12)));
        let y = g.conv2d(x, w, 2, Padding::Same).unwrap();
        let y = g.relu(y);
        let p = g.mean_pool(y).unwrap();
        let s = g.softmax(p);
        let l = g.sum(s);
        let l = g.scale(l, 0.5);
        g.backward(l).unwrap();
        (g.value(p).clone(), g.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

#[test]
fn non_grad_inputs_record_no_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 2]));
    let b = g.add(a, a).unwrap();
    assert!(!g.requires_grad(b));
}

/// Scalar probe: weighted sum with fixed pseudo-random weights, so that
/// every output coordinate gets a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, Error> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut rng(seed ^ 0xABCD));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var, u64) -> Result<Var, Error>>);

/// Every differentiable op, wrapped as a function of a single input.
fn op_cases() -> Vec<OpCase> {
    fn c(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng(seed.wrapping_mul(31).wrapping_add(7)))
    }
    vec![
        ("matmul_lhs", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[4, 2]));
            g.matmul(x, b)
        })),
        ("matmul_rhs_t", vec![5, 4], Box::new(|g, x, s| {
            let a = g.constant(c(s, &[3, 4]));
            g.matmul_nt(a, x)
        })),
        ("bmm_ta", vec![2, 4, 3], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[2, 4, 5]));
            g.matmul_ex(x, b, true, false)
        })),
        ("conv2d_input", vec![2, 2, 5, 5], Box::new(|g, x, s| {
            let w = g.constant(c(s, &[3, 2, 3, 3]));
            g.conv2d(x, w, 2, Padding::Same)
        })),
        ("conv2d_weight", vec![3, 2, 3, 3], Box::new(|g, w, s| {
            let x = g.constant(c(s, &[2, 2, 6, 5]));
            g.conv2d(x, w, 1, Padding::Valid)
        })),
        ("conv_transpose_input", vec![2, 3, 3, 3], Box::new(|g, x, s| {
            let w = g.constant(c(s, &[3, 2, 4, 4]));
            g.conv_transpose2d(x, w, 2, 1)
        })),
        ("conv_transpose_weight", vec![3, 2, 4, 4], Box::new(|g, w, s| {
            let x = g.constant(c(s, &[2, 3, 3, 3]));
            g.conv_transpose2d(x, w, 2, 1)
        })),
        ("add_bias", vec![4], Box::new(|g, b, s| {
            let x = g.constant(c(s, &[2, 4, 3]));
            g.add_bias(x, b, 1)
        })),
        ("relu", vec![3, 4], Box::new(|g, x, _| Ok(g.relu(x)))),
        ("sigmoid", vec![3, 4], Box::new(|g, x, _| Ok(g.sigmoid(x)))),
        ("tanh", vec![3, 4], Box::new(|g, x, _| Ok(g.tanh(x)))),
        ("add", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[3, 4]));
            g.add(x, b)
        })),
        ("sub", vec![3, 4], Box::new(|g, x, s| {
            let a = g.constant(c(s, &[3, 4]));
            g.sub(a, x)
        })),
        ("mul", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[3, 4]));
            g.mul(x, b)
        })),
        ("scale", vec![5], Box::new(|g, x, _| Ok(g.scale(x, -1.7)))),
        ("add_scalar", vec![5], Box::new(|g, x, _| Ok(g.add_scalar(x, 0.3)))),
        ("mean", vec![3, 4], Box::new(|g, x, _| Ok(g.mean(x)))),
        ("sum_last", vec![3, 4], Box::new(|g, x, _| Ok(g.sum_last(x)))),
        ("mean_pool", vec![2, 3, 3, 2], Box::new(|g, x, _| g.mean_pool(x))),
        ("reshape", vec![3, 4], Box::new(|g, x, _| g.reshape(x, &[2, 6]))),
        ("permute", vec![2, 3, 4], Box::new(|g, x, _| g.permute(x, &[2, 0, 1]))),
        ("concat", vec![2, 3], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[2, 2]));
            g.concat(&[b, x, x], 1)
        })),
        ("narrow", vec![3, 5], Box::new(|g, x, _| g.narrow(x, 1, 1, 3))),
        ("gather_rows", vec![4, 3], Box::new(|g, x, _| g.gather_rows(x, &[2, 0, 2, 3]))),
        ("select_per_row", vec![3, 4], Box::new(|g, x, _| g.select_per_row(x, &[1, 3, 0]))),
        ("softmax", vec![3, 5], Box::new(|g, x, _| Ok(g.softmax(x)))),
        ("log_softmax", vec![3, 5], Box::new(|g, x, _| Ok(g.log_softmax(x)))),
        ("cross_entropy", vec![4, 6], Box::new(|g, x, _| {
            g.cross_entropy(x, &[Some(1), None, Some(5), Some(0)])
        })),
        ("l2_normalize", vec![4, 3], Box::new(|g, x, _| g.l2_normalize(x))),
        ("similarity", vec![4, 3], Box::new(|g, x, _| g.similarity(x, x))),
        ("layer_norm_input", vec![3, 5], Box::new(|g, x, s| {
            let gamma = g.constant(c(s, &[5]));
            let beta = g.constant(c(s + 1, &[5]));
            g.layer_norm(x, gamma, beta)
        })),
        ("layer_norm_gain", vec![5], Box::new(|g, gamma, s| {
            let x = g.constant(c(s, &[3, 5]));
            let beta = g.constant(c(s + 1, &[5]));
            g.layer_norm(x, gamma, beta)
        })),
        ("mse", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[3, 4]));
            g.mse(x, b)
        })),
        ("bce_with_logits", vec![3, 4], Box::new(|g, x, s| {
            let mut t = c(s, &[3, 4]);
            t.data_mut().iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
            g.bce_with_logits(x, &t)
        })),
    ]
}

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for (name, shape, f) in op_cases() {
        for seed in 0..20u64 {
            let point = away_from_zero(&shape, 1e-3, seed * 101 + 1);
            let err = grad_check(
                |g, x| {
                    let y = f(g, x, seed)?;
                    if g.value(y).numel() == 1 {
                        Ok(y)
                    } else {
                        probe(g, y, seed)
                    }
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
        }
    }
}
