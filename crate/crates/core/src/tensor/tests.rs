use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect()
}

/// Central-difference check of `f` at `x`, where `f` maps a tracked input to
/// a scalar. Returns the norm-wise relative error between analytic and
/// numeric gradients.
fn grad_error(x: &[f64], shape: &[usize], f: impl Fn(&Tensor<f64>) -> Tensor<f64>) -> f64 {
    let input = Tensor::param(x.to_vec(), shape).unwrap();
    f(&input).backward().unwrap();
    let analytic = input.grad().unwrap();

    let h = 1e-4;
    let eval = |v: Vec<f64>| f(&Tensor::from_vec(v, shape).unwrap()).item();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (eval(plus) - eval(minus)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
        .max(1e-8);
    diff / scale
}

/// Weighted sum with fixed random weights so every output element matters.
fn weighted(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, t.shape(), -1.0, 1.0);
    t.mul(&t64(&w, t.shape())).unwrap().sum()
}

#[test]
fn matmul_identity_and_hand_product() {
    let eye = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    assert_eq!(eye.matmul(&eye).unwrap().data(), eye.data());

    let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let ones = t64(&[1.0, 1.0], &[2, 1]);
    let p = a.matmul(&ones).unwrap();
    assert_eq!(p.shape(), &[2, 1]);
    assert_eq!(p.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn elementwise_definitions() {
    let x = t64(&[-1.0, 0.0, 2.0], &[3]);
    assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(t64(&[-10.0], &[1]).leaky_relu(0.1).data(), &[-1.0]);
    assert_eq!(x.neg().data(), &[1.0, -0.0, -2.0]);
    assert_eq!(x.scale(3.0).data(), &[-3.0, 0.0, 6.0]);
    let two = Tensor::scalar(2.0);
    assert_eq!(x.mul(&two).unwrap().data(), &[-2.0, 0.0, 4.0]);
    assert_eq!(two.sub(&x).unwrap().data(), &[3.0, 2.0, 0.0]);
}

#[test]
fn log_rejects_non_positive() {
    let x = t64(&[1.0, 0.0], &[2]);
    assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
    assert!(t64(&[-1.0], &[1]).log().is_err());
}

#[test]
fn elementwise_rejects_incompatible_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 2]);
    let b = Tensor::<f64>::zeros(&[4]);
    assert!(a.add(&b).is_err());
}

#[test]
fn reductions() {
    let x = t64(&[2.0, 4.0], &[1, 2]);
    let m = x.mean_axis(1).unwrap();
    assert_eq!(m.shape(), &[1]);
    assert_eq!(m.data(), &[3.0]);
    let ones = t64(&[1.0; 9], &[3, 3]);
    assert_eq!(ones.sum().item(), 9.0);
    assert_eq!(ones.sum_axis(0).unwrap().data(), &[3.0, 3.0, 3.0]);
    let y = t64(&[1.0, 5.0, 3.0, 7.0, 2.0, 0.0], &[2, 3]);
    assert_eq!(y.max_axis(1).unwrap().data(), &[5.0, 7.0]);
    assert_eq!(y.max_axis(0).unwrap().data(), &[7.0, 5.0, 3.0]);
    assert!(matches!(
        y.sum_axis(2),
        Err(TensorError::Axis { axis: 2, rank: 2, .. })
    ));
}

#[test]
fn cross_entropy_values() {
    let uniform = t64(&[0.3; 5], &[1, 5]);
    let loss = uniform.cross_entropy(&[2]).unwrap().item();
    assert!((loss - 5f64.ln()).abs() < 1e-12);

    // -ln(e^10 / (e^10 + 1)) = ln(1 + e^-10)
    let expected = (-10f64).exp().ln_1p();
    let loss = t64(&[10.0, 0.0], &[1, 2]).cross_entropy(&[0]).unwrap().item();
    assert!((loss - expected).abs() < 1e-15);
    assert!((loss - 4.54e-5).abs() < 1e-7);

    let err = uniform.cross_entropy(&[5]).unwrap_err();
    assert_eq!(err, TensorError::Index { label: 5, classes: 5 });
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let x = Tensor::<f32>::from_vec(vec![1000.0, -1000.0, 0.0], &[1, 3]).unwrap();
    let loss = x.cross_entropy(&[0]).unwrap().item();
    assert!(loss.is_finite() && loss.abs() < 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = t64(&random(&mut rng, &[4, 6], -30.0, 30.0), &[4, 6]);
    let p = x.softmax().unwrap();
    for row in p.data().chunks(6) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let err = x.scale(2.0).backward().unwrap_err();
    assert!(matches!(err, TensorError::Contract(_)));
}

#[test]
fn backward_twice_doubles_leaf_gradients() {
    let x = Tensor::<f64>::param(vec![0.5, -1.5, 2.0], &[3]).unwrap();
    let loss = x.exp().mul(&x).unwrap().sum();
    loss.backward().unwrap();
    let once = x.grad().unwrap();
    loss.backward().unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * a);
    }
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn shared_subexpression_accumulates() {
    // d/dx (x*x + x) = 2x + 1
    let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
    x.mul(&x).unwrap().add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![7.0]);
}

#[test]
fn untracked_ops_build_no_graph() {
    let x = Tensor::<f32>::zeros(&[2, 2]);
    let y = x.matmul(&x).unwrap().relu();
    assert!(y.is_leaf() && !y.is_tracked());
}

#[test]
fn exp_derivative_at_one_is_e() {
    let err = grad_error(&[1.0], &[1], |x| x.exp().sum());
    assert!(err < 1e-4);
    let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
    x.exp().sum().backward().unwrap();
    assert!((x.grad().unwrap()[0] - std::f64::consts::E).abs() < 1e-4);
}

#[test]
fn finite_difference_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20u64 {
        let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let x = random(&mut rng, &shape, -2.0, 2.0);
        let pos = random(&mut rng, &shape, 0.3, 2.0);
        let cases: Vec<(&str, f64)> = vec![
            ("relu", grad_error(&x, &shape, |t| weighted(&t.relu(), trial))),
            ("leaky", grad_error(&x, &shape, |t| weighted(&t.leaky_relu(0.1), trial))),
            ("exp", grad_error(&x, &shape, |t| weighted(&t.exp(), trial))),
            ("log", grad_error(&pos, &shape, |t| weighted(&t.log().unwrap(), trial))),
            ("neg", grad_error(&x, &shape, |t| weighted(&t.neg(), trial))),
            ("scale", grad_error(&x, &shape, |t| weighted(&t.scale(-1.7), trial))),
            ("transpose", grad_error(&x, &shape, |t| weighted(&t.transpose().unwrap(), trial))),
            ("sum0", grad_error(&x, &shape, |t| weighted(&t.sum_axis(0).unwrap(), trial))),
            ("mean1", grad_error(&x, &shape, |t| weighted(&t.mean_axis(1).unwrap(), trial))),
            ("max1", grad_error(&x, &shape, |t| weighted(&t.max_axis(1).unwrap(), trial))),
            ("mean", grad_error(&x, &shape, |t| t.mean())),
            ("softmax", grad_error(&x, &shape, |t| weighted(&t.softmax().unwrap(), trial))),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "{name} trial {trial}: rel error {err}");
        }
    }
}

#[test]
fn finite_difference_normalize_rows() {
    // A single column normalizes to ±1 with a vanishing gradient, which makes
    // a relative error meaningless, so rows have at least two entries.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..20u64 {
        let shape = [rng.gen_range(1..=4), rng.gen_range(2..=4)];
        let x = random(&mut rng, &shape, -2.0, 2.0);
        let err = grad_error(&x, &shape, |t| weighted(&t.normalize_rows(1e-12).unwrap(), trial));
        assert!(err < 1e-4, "trial {trial}: rel error {err}");
    }
}

#[test]
fn finite_difference_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20u64 {
        let (m, k, n) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let a = random(&mut rng, &[m, k], -1.5, 1.5);
        let b = t64(&random(&mut rng, &[k, n], -1.5, 1.5), &[k, n]);
        let same = t64(&random(&mut rng, &[m, k], -1.5, 1.5), &[m, k]);
        let s = Tensor::scalar(rng.gen_range(-2.0..2.0));
        let bias = t64(&random(&mut rng, &[k], -1.0, 1.0), &[k]);
        let other = t64(&random(&mut rng, &[n, k], -1.5, 1.5), &[n, k]);
        let cases: Vec<(&str, f64)> = vec![
            ("matmul_a", grad_error(&a, &[m, k], |t| weighted(&t.matmul(&b).unwrap(), trial))),
            ("matmul_b", grad_error(b.data(), &[k, n], |t| {
                weighted(&same.matmul(t).unwrap(), trial)
            })),
            ("add", grad_error(&a, &[m, k], |t| weighted(&t.add(&same).unwrap(), trial))),
            ("sub", grad_error(&a, &[m, k], |t| weighted(&same.sub(t).unwrap(), trial))),
            ("mul", grad_error(&a, &[m, k], |t| weighted(&t.mul(&same).unwrap(), trial))),
            ("mul_scalar_lhs", grad_error(s.data(), &[1], |t| weighted(&t.mul(&same).unwrap(), trial))),
            ("mul_by_scalar", grad_error(&a, &[m, k], |t| weighted(&t.mul(&s).unwrap(), trial))),
            ("add_row_x", grad_error(&a, &[m, k], |t| weighted(&t.add_row(&bias).unwrap(), trial))),
            ("add_row_b", grad_error(bias.data(), &[k], |t| weighted(&same.add_row(t).unwrap(), trial))),
            ("sqdist_q", grad_error(&a, &[m, k], |t| weighted(&t.sq_distances(&other).unwrap(), trial))),
            ("sqdist_w", grad_error(other.data(), &[n, k], |t| {
                weighted(&same.sq_distances(t).unwrap(), trial)
            })),
            ("slice", grad_error(&a, &[m, k], |t| weighted(&t.slice_rows(m / 2, m).unwrap(), trial))),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "{name} trial {trial}: rel error {err}");
        }
    }
}

#[test]
fn finite_difference_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let (b, c) = (rng.gen_range(1..=4), rng.gen_range(2..=4));
        let x = random(&mut rng, &[b, c], -3.0, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let err = grad_error(&x, &[b, c], |t| t.cross_entropy(&labels).unwrap());
        assert!(err < 1e-4, "trial {trial}: rel error {err}");
    }
}

#[test]
fn cross_entropy_gradient_closed_form() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0], &[2, 3]).unwrap();
    x.cross_entropy(&[1, 2]).unwrap().backward().unwrap();
    let g = x.grad().unwrap();
    let p = x.softmax_values().unwrap();
    let expected: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let hit = (i == 1) || (i == 5);
            (v - if hit { 1.0 } else { 0.0 }) / 2.0
        })
        .collect();
    for (a, b) in g.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_row_normalization_is_finite() {
    let x = Tensor::<f64>::param(vec![0.0, 0.0, 3.0, 4.0], &[2, 2]).unwrap();
    let y = x.normalize_rows(1e-12).unwrap();
    assert_eq!(&y.data()[..2], &[0.0, 0.0]);
    assert!((y.data()[2] - 0.6).abs() < 1e-12);
    weighted(&y, 1).backward().unwrap();
    assert!(x.grad().unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn argmax_ties_resolve_low() {
    let x = t64(&[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], &[2, 3]);
    assert_eq!(x.argmax_rows().unwrap(), vec![0, 1]);
}

#[test]
fn empty_batch_matmul() {
    let x = Tensor::<f32>::from_vec(vec![], &[0, 3]).unwrap();
    let w = Tensor::<f32>::zeros(&[3, 2]);
    let y = x.matmul(&w).unwrap();
    assert_eq!(y.shape(), &[0, 2]);
}

mod props {
    use proptest::prelude::*;

    use super::super::Tensor;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            rows in 1usize..5,
            cols in 1usize..7,
            seed in any::<u64>(),
            scale in 0.01f64..100.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let p = Tensor::from_vec(data, &[rows, cols]).unwrap().softmax().unwrap();
            for row in p.data().chunks(cols) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn forward_is_bitwise_deterministic(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run = || {
                let x = Tensor::from_vec(a.clone(), &[3, 4]).unwrap();
                let y = Tensor::from_vec(b.clone(), &[4, 3]).unwrap();
                x.matmul(&y).unwrap().leaky_relu(0.1).softmax().unwrap()
            };
            let (r1, r2) = (run(), run());
            prop_assert!(r1.data().iter().zip(r2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

