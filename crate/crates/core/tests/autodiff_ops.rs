use emoagg::autodiff::{gradient_check, Graph, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn dropout_gradient_in_train_mode() {
    // the mask depends on the graph, so build it explicitly per evaluation
    let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
    let mut g = Graph::new(Mode::Train { seed: 3, step: 9 });
    let xv = g.param(x.clone());
    let y = g.dropout(xv, 0.5, 1, 0).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let gx = grads.get(xv).unwrap();
    let yv = g.value(y).data().to_vec();
    for (i, &gi) in gx.iter().enumerate() {
        assert!(gi == 0.0 || gi == 2.0);
        assert!((yv[i] - x.data()[i] * gi).abs() < 1e-15);
    }
    let mut g2 = Graph::new(Mode::Train { seed: 3, step: 9 });
    let xv2 = g2.constant(x.clone());
    let y2 = g2.dropout(xv2, 0.5, 1, 0).unwrap();
    assert_eq!(g2.value(y2).data(), &yv[..], "mask is counter-based");
    let mut g3 = Graph::new(Mode::Eval);
    let xv3 = g3.constant(x.clone());
    let y3 = g3.dropout(xv3, 0.5, 1, 0).unwrap();
    assert_eq!(g3.value(y3), &x);
}

#[test]
fn primitive_examples() {
    let mut g = Graph::default();
    let z = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(z, 1).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::row(vec![1.0, 3.0]));
    let one = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let ln = g.layer_norm(x, one, zero).unwrap();
    assert_eq!(g.value(ln).data(), &[-1.0, 1.0]);
    let c = g.constant(Tensor::scalar(0.0));
    let sg = g.sigmoid(c);
    assert_eq!(g.value(sg).item(), 0.5);
}

#[test]
fn backward_examples() {
    let mut g = Graph::default();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);

    let mut g = Graph::default();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0]));
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.tensor(x).data(), &[0.0, 0.0]);

    // reuse accumulates
    let mut g = Graph::default();
    let x = g.param(Tensor::vector(vec![3.0]));
    let y = g.mul(x, x).unwrap();
    let y2 = g.add(y, x).unwrap();
    let loss = g.sum(y2);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[7.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::default();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::default();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(&[4]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[4]"), "{err}");
}

#[test]
fn sum_of_squares_check_is_tight() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[6], -3.0, 3.0);
        let err = gradient_check(|g, x| { let s = g.square(x); Ok(g.sum(s)) }, &x, H).unwrap();
        assert!(err < 1e-6);
    }
}

#[test]
fn forward_is_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new(Mode::Train { seed: 1, step: 2 });
        let x = g.constant(rand_tensor(&mut rng, &[5, 3], -1.0, 1.0));
        let w = g.constant(rand_tensor(&mut rng, &[3, 3, 4], -1.0, 1.0));
        let b = g.constant(rand_tensor(&mut rng, &[4], -1.0, 1.0));
        let y = g.conv1d(x, w, b, 1).unwrap();
        let y = g.dropout(y, 0.3, 0, 0).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = vals.len();
        let mut g = Graph::default();
        let x = g.constant(Tensor::new(vec![1, n], vals).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let p = g.value(s).data();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // along axis 0 of the transposed layout
        let t = g.transpose(x).unwrap();
        let s0 = g.softmax(t, 0).unwrap();
        prop_assert!((g.value(s0).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_standardizes_rows(vals in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let d = vals.len();
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-2);
        let mut g = Graph::default();
        let x = g.constant(Tensor::new(vec![1, d], vals).unwrap());
        let one = g.constant(Tensor::full(&[d], 1.0));
        let zero = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(x, one, zero).unwrap();
        let y = g.value(y).data();
        let mean = y.iter().sum::<f64>() / d as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-7);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_constant_row_is_finite() {
    let mut g = Graph::default();
    let x = g.param(Tensor::row(vec![2.0; 4]));
    let one = g.constant(Tensor::full(&[4], 1.0));
    let zero = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, one, zero).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_empty_axis_errors() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.softmax(x, 5).is_err());
}
