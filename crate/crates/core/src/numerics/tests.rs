use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

/// Reduces a tensor to a scalar with non-uniform weights so that every
/// output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var, crate::Error> {
    let n = g.value(v).len();
    let w = g.constant(Tensor::new(g.shape(v).to_vec(), (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect())?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::eye(2));
    let b = g.constant(Tensor::new([2, 2], vec![1.5, -2.0, 0.25, 7.0]).unwrap());
    let out = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(out), g.value(b));

    let a = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = g.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([3, 4]));
    let b = g.constant(Tensor::zeros([3, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = named(vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 2], &mut rng)]);
    gradient_check(
        &params,
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn batched_matmul_variants_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = named(vec![
        rand_tensor(&[2, 3, 4], &mut rng),
        rand_tensor(&[2, 4, 5], &mut rng),
        rand_tensor(&[2, 6, 5], &mut rng),
        rand_tensor(&[4, 5], &mut rng),
    ]);
    gradient_check(
        &params,
        |g, v| {
            let c = g.matmul(v[0], v[1])?; // 2×3×5
            let d = g.matmul_nt(c, v[2])?; // 2×3×6
            let e = g.matmul_nt(c, v[3])?; // 2×3×4 with shared rhs
            let s1 = weighted_sum(g, d)?;
            let s2 = weighted_sum(g, e)?;
            g.add(s1, s2)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn softmax_examples() {
    let t = softmax_rows(&Tensor::new([1, 1], vec![3.0f64]).unwrap());
    assert_eq!(t.data(), &[1.0]);
    let t = softmax_rows(&Tensor::new([1, 4], vec![2.5f64; 4]).unwrap());
    assert!(t.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let t = softmax_rows(&Tensor::new([1, 2], vec![0.0f64, 3f64.ln()]).unwrap());
    assert!((t.data()[0] - 0.25).abs() < 1e-12 && (t.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_large_inputs_are_finite() {
    let t = softmax_rows(&Tensor::new([1, 3], vec![1e4f32, 1e4 - 1.0, -1e4]).unwrap());
    assert!(t.all_finite());
    assert!((t.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
    // Φ(1) = ½(1 + erf(1/√2)) = 0.8413447460685429
    assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-6);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = named(vec![
        rand_tensor(&[2, 3, 4], &mut rng),
        rand_tensor(&[3, 4], &mut rng),
        rand_tensor(&[2, 3, 4], &mut rng),
    ]);
    gradient_check(
        &params,
        |g, v| {
            let a = g.add_broadcast(v[0], v[1])?;
            let b = g.gelu(a);
            let c = g.mul(b, v[2])?;
            let d = g.sub(c, v[0])?;
            let e = g.scale(d, 1.7);
            let f = g.softmax_rows(e)?;
            weighted_sum(g, f)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn head_reshapes_and_concat_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = named(vec![
        rand_tensor(&[2, 3, 6], &mut rng),
        rand_tensor(&[4, 2], &mut rng),
        rand_tensor(&[4, 3], &mut rng),
    ]);
    gradient_check(
        &params,
        |g, v| {
            let s = g.split_heads(v[0], 3)?; // 2×3×3×2
            let s = g.gelu(s);
            let m = g.merge_heads(s)?;
            let r = g.reshape(m, &[6, 6])?;
            let c = g.concat_last(&[v[1], v[2]])?; // 4×5
            let a = weighted_sum(g, r)?;
            let b = weighted_sum(g, c)?;
            let ab = g.mul(a, b)?;
            Ok(ab)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn split_merge_round_trip() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([2, 3, 8], |i| i as f64));
    let s = g.split_heads(x, 4).unwrap();
    assert_eq!(g.shape(s), &[2, 4, 3, 2]);
    // head 1, time 2 of batch 0 holds features 2..4 of row (0, 2)
    assert_eq!(g.value(s).at(&[0, 1, 2, 0]), (2 * 8 + 2) as f64);
    let m = g.merge_heads(s).unwrap();
    assert_eq!(g.value(m), g.value(x));
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([2, 5, 3], 4.2));
    let gain = g.constant(Tensor::ones([3]));
    let bias = g.constant(Tensor::zeros([3]));
    let (y, stats) = g.batch_norm(x, gain, bias, NormMode::Training, NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
    assert_eq!(stats.unwrap().count, 10);
}

#[test]
fn batch_norm_training_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([4, 16, 3], |i| rng.random_range(-3.0..5.0) * (1 + i % 3) as f64));
    let gain = g.constant(Tensor::ones([3]));
    let bias = g.constant(Tensor::zeros([3]));
    let (y, _) = g.batch_norm(x, gain, bias, NormMode::Training, NORM_EPS).unwrap();
    let y = g.value(y).data();
    for j in 0..3 {
        let col: Vec<f64> = y.iter().skip(j).step_by(3).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batch_norm_needs_two_rows_in_training() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 1, 3]));
    let gain = g.constant(Tensor::ones([3]));
    let bias = g.constant(Tensor::zeros([3]));
    assert!(g.batch_norm(x, gain, bias, NormMode::Training, NORM_EPS).is_err());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = named(vec![
        rand_tensor(&[2, 4, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ]);
    gradient_check(
        &params,
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Training, NORM_EPS)?;
            weighted_sum(g, y)
        },
        1e-4,
    )
    .unwrap();
    let mean = [0.1, -0.2, 0.3];
    let var = [1.5, 0.5, 2.0];
    gradient_check(
        &params,
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Inference { mean: &mean, var: &var }, NORM_EPS)?;
            weighted_sum(g, y)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn dropout_identity_cases_and_rate_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones([10]));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn dropout_zero_fraction_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones([1_000_000]));
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let data = g.value(y).data();
    let zeros = data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64;
    assert!((zeros - 0.5).abs() < 0.002, "zero fraction {zeros}");
    assert!(data.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn masked_mse_examples() {
    let mut g = Graph::<f64>::new();
    let pred = g.param(Tensor::new([2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap());
    let target = Tensor::new([2, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap();
    let loss = g.masked_mse(pred, &target, Rc::new(vec![false, true, false, false])).unwrap();
    assert_eq!(g.value(loss).item(), 4.0);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(pred).unwrap().data(), &[0.0, 4.0, 0.0, 0.0]);
    assert!(g.masked_mse(pred, &target, Rc::new(vec![false; 4])).is_err());
}

#[test]
fn reused_tensor_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = g.add(x, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn sum_of_params_has_unit_gradient() {
    let params = named(vec![Tensor::from_fn([3, 2], |i| i as f64), Tensor::from_fn([4], |i| -(i as f64))]);
    let report = gradient_check(
        &params,
        |g, v| {
            let a = g.sum(v[0]);
            let b = g.sum(v[1]);
            g.add(a, b)
        },
        1e-4,
    )
    .unwrap();
    for e in &report.entries {
        assert!(e.max_rel_error < 1e-9, "{e:?}");
    }
}

#[test]
fn corrupted_backward_rule_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = vec![
        ("clean".to_string(), rand_tensor(&[4], &mut rng)),
        ("square".to_string(), rand_tensor(&[4], &mut rng)),
    ];
    let err = gradient_check(
        &params,
        |g, v| {
            // d(x²)/dx deliberately mis-stated as 3x.
            let sq = g.map(v[1], |x| x * x, |x| 3.0 * x);
            let a = g.sum(sq);
            let b = g.sum(v[0]);
            g.add(a, b)
        },
        1e-4,
    )
    .unwrap_err();
    match err {
        crate::Error::GradCheck { tensor, .. } => assert_eq!(tensor, "square"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn no_gradient_for_constants() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::ones([2]));
    let p = g.param(Tensor::ones([2]));
    let s = g.mul(c, p).unwrap();
    let s = g.sum(s);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        row in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let a = softmax_rows(&Tensor::new([1, n], row.clone()).unwrap());
        let b = softmax_rows(&Tensor::new([1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn tensor_rejects_inconsistent_shape(dims in proptest::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::<f32>::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(dims, vec![0.0; n + extra]).is_err());
    }
}
