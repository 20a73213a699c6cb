use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct quadruple loop, independent of the im2col path.
fn conv_oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let (ci, h, w) = input.dims3().unwrap();
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data()[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = x as isize + kx as isize - p;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kv = kernel.data()[((o * ci + c) * k + ky) * k + kx];
                            acc += kv * input.at3(c, sy as usize, sx as usize);
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn run_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let i = g.leaf(input.clone(), false);
    let k = g.leaf(kernel.clone(), false);
    let b = g.leaf(bias.clone(), false);
    let out = g.conv2d(i, k, b, kernel.shape()[2] / 2).unwrap();
    g.value(out).clone()
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[1, 5, 6], &mut rng);
    let out = run_conv(
        &input,
        &Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
        &Tensor::zeros(&[1]),
    );
    assert_eq!(out, input);
}

#[test]
fn conv_impulse_response() {
    let mut input = Tensor::<f64>::zeros(&[1, 5, 5]);
    input.data_mut()[2 * 5 + 2] = 1.0;
    let out = run_conv(&input, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]));
    for y in 0..5 {
        for x in 0..5 {
            let expect = if (1..=3).contains(&y) && (1..=3).contains(&x) {
                1.0
            } else {
                0.0
            };
            assert_eq!(out.at3(0, y, x), expect);
        }
    }
    // corner impulse is clipped by the border
    let mut input = Tensor::<f64>::zeros(&[1, 5, 5]);
    input.data_mut()[0] = 1.0;
    let out = run_conv(&input, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]));
    assert_eq!(out.sum(), 4.0);
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // two independent inputs of the 2x3x7x7 batch
    for _ in 0..2 {
        let input = random(&[3, 7, 7], &mut rng);
        let kernel = random(&[4, 3, 3, 3], &mut rng);
        let bias = random(&[4], &mut rng);
        let fast = run_conv(&input, &kernel, &bias);
        let slow = conv_oracle(&input, &kernel, &bias);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // f32 path too
        let mut g = Graph::<f32>::new();
        let i = g.leaf(input.cast(), false);
        let k = g.leaf(kernel.cast(), false);
        let b = g.leaf(bias.cast(), false);
        let out = g.conv2d(i, k, b, 1).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut g = Graph::<f32>::new();
    let i = g.leaf(Tensor::zeros(&[2, 4, 4]), false);
    let k = g.leaf(Tensor::zeros(&[3, 3, 3, 3]), false);
    let b = g.leaf(Tensor::zeros(&[3]), false);
    assert!(g.conv2d(i, k, b, 1).is_err());
    let k2 = g.leaf(Tensor::zeros(&[3, 2, 4, 4]), false);
    assert!(g.conv2d(i, k2, b, 1).is_err());
    let k3 = g.leaf(Tensor::zeros(&[3, 2, 3, 3]), false);
    assert!(g.conv2d(i, k3, b, 0).is_err());
    assert!(g.conv2d(i, k3, b, 1).is_ok());
}

#[test]
fn relu_forward_and_dead_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(r).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full(&[4], -0.5), true);
    let r = g.relu(x).unwrap();
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    let s = g.sum(r).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

fn away_from_kinks(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 1e-2 { v.signum() * 0.05 + v } else { v })
}

#[test]
fn relu_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = away_from_kinks(random(&[2, 3, 3], &mut rng));
    let w = random(&[2, 3, 3], &mut rng);
    let err = grad_check(
        |g, x| {
            let r = g.relu(x)?;
            g.weighted_sum(r, w.clone())
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t: Tensor<f32> = random(&[3, 4, 4], &mut rng).map(|v| v * 5.0).cast();
    let s = softmax_channels(&t).unwrap();
    for p in 0..16 {
        let total: f32 = (0..3).map(|c| s.data()[c * 16 + p]).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

fn ce_oracle(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

#[test]
fn pixel_ce_cases() {
    // confident and correct
    let mut g = Graph::<f32>::new();
    let z = g.leaf(Tensor::new(vec![2, 1, 1], vec![100.0, 0.0]).unwrap(), false);
    let ce = g.pixel_cross_entropy(z, &[0]).unwrap();
    assert_eq!(g.value(ce).data(), &[0.0]);

    // uniform
    let z = g.leaf(Tensor::zeros(&[5, 2, 2]), false);
    let ce = g.pixel_cross_entropy(z, &[0, 1, 2, 4]).unwrap();
    for v in g.value(ce).data() {
        assert!((v - 5f32.ln()).abs() < 1e-6);
    }

    // out-of-range label
    assert!(matches!(
        g.pixel_cross_entropy(z, &[0, 1, 2, 5]),
        Err(crate::Error::Input(_))
    ));

    // random against scalar log-sum-exp
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[4, 3, 3], &mut rng).map(|v| v * 4.0);
    let labels: Vec<u16> = (0..9).map(|_| rng.gen_range(0..4)).collect();
    let mut g = Graph::<f64>::new();
    let z = g.leaf(logits.clone(), false);
    let ce = g.pixel_cross_entropy(z, &labels).unwrap();
    for p in 0..9 {
        let col: Vec<f64> = (0..4).map(|c| logits.data()[c * 9 + p]).collect();
        let expect = ce_oracle(&col, labels[p] as usize);
        assert!((g.value(ce).data()[p] - expect).abs() < 1e-5);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full(&[2, 3], 0.7), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert_eq!(g.grad(s).unwrap().data(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full(&[2, 3], 0.7), true);
    let r = g.relu(x).unwrap();
    assert!(matches!(g.backward(r), Err(crate::Error::Contract(_))));
}

#[test]
fn mean_ce_gradient_is_softmax_minus_onehot() {
    // 2 classes, 2x2 image
    let logits = Tensor::<f64>::new(vec![2, 2, 2], vec![0.3, -1.2, 2.0, 0.0, -0.4, 0.5, 1.0, 0.0]).unwrap();
    let labels = [0u16, 1, 1, 0];
    let mut g = Graph::<f64>::new();
    let z = g.leaf(logits.clone(), true);
    let ce = g.pixel_cross_entropy(z, &labels).unwrap();
    let m = g.mean(ce).unwrap();
    g.backward(m).unwrap();
    let grad = g.grad(z).unwrap().data().to_vec();
    for p in 0..4 {
        let (a, b) = (logits.data()[p], logits.data()[4 + p]);
        let pa = 1.0 / (1.0 + (b - a).exp());
        let probs = [pa, 1.0 - pa];
        for c in 0..2 {
            let onehot = if labels[p] as usize == c { 1.0 } else { 0.0 };
            let expect = (probs[c] - onehot) / 4.0;
            assert!((grad[c * 4 + p] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn composite_conv_relu_ce_kernel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random(&[2, 5, 5], &mut rng);
    let kernel = random(&[3, 2, 3, 3], &mut rng);
    let bias = random(&[3], &mut rng).map(|v| v * 0.1);
    let labels: Vec<u16> = (0..25).map(|_| rng.gen_range(0..3)).collect();
    let f = |g: &mut Graph<f64>, k: NodeId| {
        let i = g.leaf(input.clone(), false);
        let b = g.leaf(bias.clone(), false);
        let c = g.conv2d(i, k, b, 1)?;
        let r = g.relu(c)?;
        let ce = g.pixel_cross_entropy(r, &labels)?;
        g.mean(ce)
    };
    let err = grad_check(f, &kernel, 1e-3).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn grad_check_exact_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[3, 4], &mut rng);
    let err = grad_check(
        |g, x| {
            let s = g.square(x)?;
            g.sum(s)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_flags_wrong_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[3, 4], &mut rng).map(|v| v + v.signum() * 0.2);
    let err = grad_check(
        |g, x| {
            let s = g.broken_square(x)?;
            g.sum(s)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err > 1e-1, "{err}");
}

#[test]
fn grad_check_rejects_nonpositive_step() {
    let x = Tensor::<f64>::zeros(&[2]);
    assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![f32::INFINITY, 0.0]).unwrap(), false);
    assert!(matches!(g.relu(x), Err(crate::Error::NonFinite(_))));
}

fn conv_graph(
    input: &Tensor<f32>,
    kernel: &Tensor<f32>,
    bias: &Tensor<f32>,
    labels: &[u16],
) -> (Graph<f32>, NodeId, NodeId) {
    let mut g = Graph::new();
    let i = g.leaf(input.clone(), true);
    let k = g.leaf(kernel.clone(), true);
    let b = g.leaf(bias.clone(), false);
    let c = g.conv2d(i, k, b, kernel.shape()[2] / 2).unwrap();
    let r = g.relu(c).unwrap();
    let ce = g.pixel_cross_entropy(r, labels).unwrap();
    let m = g.mean(ce).unwrap();
    (g, i, m)
}

#[test]
fn backward_twice_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let input: Tensor<f32> = random(&[3, 8, 8], &mut rng).cast();
    let kernel: Tensor<f32> = random(&[4, 3, 5, 5], &mut rng).cast();
    let bias: Tensor<f32> = random(&[4], &mut rng).cast();
    let labels: Vec<u16> = (0..64).map(|_| rng.gen_range(0..4)).collect();
    let (mut g, i, m) = conv_graph(&input, &kernel, &bias, &labels);
    g.backward(m).unwrap();
    let first = g.grad(i).unwrap().clone();
    g.zero_grad();
    g.backward(m).unwrap();
    assert_eq!(g.grad(i).unwrap().data(), first.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_oracle_property(
        c_in in 1usize..4, c_out in 1usize..4, h in 1usize..9, w in 1usize..9,
        half in 0usize..3, seed in any::<u64>()
    ) {
        let k = 2 * half + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random(&[c_in, h, w], &mut rng);
        let kernel = random(&[c_out, c_in, k, k], &mut rng);
        let bias = random(&[c_out], &mut rng);
        let fast = run_conv(&input, &kernel, &bias);
        let slow = conv_oracle(&input, &kernel, &bias);
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_gradients_property(
        c_in in 1usize..3, c_out in 1usize..3, h in 2usize..7, w in 2usize..7,
        half in 0usize..2, seed in any::<u64>()
    ) {
        let k = 2 * half + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random(&[c_in, h, w], &mut rng);
        let kernel = random(&[c_out, c_in, k, k], &mut rng);
        let bias = random(&[c_out], &mut rng);
        let probe = random(&[c_out, h, w], &mut rng);
        let wrt_input = grad_check(|g, x| {
            let kk = g.leaf(kernel.clone(), false);
            let b = g.leaf(bias.clone(), false);
            let c = g.conv2d(x, kk, b, half)?;
            g.weighted_sum(c, probe.clone())
        }, &input, 1e-3).unwrap();
        prop_assert!(wrt_input < 1e-3);
        let wrt_bias = grad_check(|g, b| {
            let i = g.leaf(input.clone(), false);
            let kk = g.leaf(kernel.clone(), false);
            let c = g.conv2d(i, kk, b, half)?;
            g.weighted_sum(c, probe.clone())
        }, &bias, 1e-3).unwrap();
        prop_assert!(wrt_bias < 1e-3);
    }

    #[test]
    fn softmax_and_ce_gradients_property(m in 2usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[m, h, w], &mut rng).map(|v| 3.0 * v);
        let probe = random(&[m, h, w], &mut rng);
        let labels: Vec<u16> = (0..h * w).map(|_| rng.gen_range(0..m as u16)).collect();
        let e1 = grad_check(|g, z| {
            let s = g.softmax_channels(z)?;
            g.weighted_sum(s, probe.clone())
        }, &logits, 1e-3).unwrap();
        prop_assert!(e1 < 1e-3);
        let e2 = grad_check(|g, z| {
            let ce = g.pixel_cross_entropy(z, &labels)?;
            g.mean(ce)
        }, &logits, 1e-3).unwrap();
        prop_assert!(e2 < 1e-3);
    }

    #[test]
    fn softmax_is_a_distribution(m in 2usize..6, scale in 1.0f32..1000.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::from_fn(&[m, 3, 3], |_| rng.gen_range(-scale..scale));
        let s = softmax_channels(&t).unwrap();
        for p in 0..9 {
            let mut total = 0.0f32;
            for c in 0..m {
                let v = s.data()[c * 9 + p];
                prop_assert!((0.0..=1.0).contains(&v));
                total += v;
            }
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
