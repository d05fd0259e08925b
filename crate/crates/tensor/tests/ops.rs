use prnn_tensor::{func, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let m = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let b = tape.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[11.0]);
    assert_eq!(tape.shape(p), vec![1, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(e @ TensorError::Shape { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

fn naive_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = kernel.shape()[3];
    let at = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            input.data()[(y as usize * w + x as usize) * cin + c]
        }
    };
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            for co in 0..cout {
                let mut s = bias.data()[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for ci in 0..cin {
                            let k = kernel.data()[((ky * 3 + kx) * cin + ci) * cout + co];
                            s += k * at(y as isize + ky as isize - 1, x as isize + kx as isize - 1, ci);
                        }
                    }
                }
                out[(y * w + x) * cout + co] = s;
            }
        }
    }
    out
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[5, 4, 1], &mut rng);
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    k.data_mut()[4] = 1.0;
    let tape = Tape::new();
    let (x, kv, b) = (
        tape.constant(input.clone()),
        tape.constant(k),
        tape.constant(Tensor::zeros(&[1])),
    );
    let y = tape.conv2d_same(x, kv, b).unwrap();
    assert_eq!(*tape.value(y), input);
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3, 3, 2], 7.0));
    let k = tape.constant(Tensor::zeros(&[3, 3, 2, 3]));
    let b = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
    let y = tape.conv2d_same(x, k, b).unwrap();
    assert_eq!(tape.shape(y), vec![3, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (cin, cout) in [(1, 1), (1, 3), (2, 4)] {
            let input = random(&[5, 5, cin], &mut rng);
            let kernel = random(&[3, 3, cin, cout], &mut rng);
            let bias = random(&[cout], &mut rng);
            let tape = Tape::new();
            let y = tape
                .conv2d_same(
                    tape.constant(input.clone()),
                    tape.constant(kernel.clone()),
                    tape.constant(bias.clone()),
                )
                .unwrap();
            let oracle = naive_conv(&input, &kernel, &bias);
            for (a, b) in tape.value(y).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn conv_channel_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 4, 2]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.conv2d_same(x, k, b), Err(TensorError::Shape { .. })));
}

#[test]
fn conv_batched_equals_per_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frames = random(&[3, 4, 4, 2], &mut rng);
    let kernel = random(&[3, 3, 2, 3], &mut rng);
    let bias = random(&[3], &mut rng);
    let tape = Tape::new();
    let (k, b) = (tape.constant(kernel), tape.constant(bias));
    let all = tape.conv2d_same(tape.constant(frames.clone()), k, b).unwrap();
    let all = tape.value(all).clone();
    for f in 0..3 {
        let one = Tensor::new(&[4, 4, 2], frames.data()[f * 32..(f + 1) * 32].to_vec()).unwrap();
        let y = tape.conv2d_same(tape.constant(one), k, b).unwrap();
        assert_eq!(tape.value(y).data(), &all.data()[f * 48..(f + 1) * 48]);
    }
}

#[test]
fn maxpool_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let x = tape.constant(Tensor::full(&[5, 3, 2], -0.25));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.shape(y), vec![3, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == -0.25));
}

#[test]
fn maxpool_routes_gradient_to_argmax_only() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 2, 1], vec![1.0, 5.0, 5.0, 2.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn activations() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, -3.0, 3.0]));
    assert_eq!(tape.value(tape.tanh(x)).data()[0], 0.0);
    assert_eq!(tape.value(tape.sigmoid(x)).data()[0], 0.5);
    assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 0.0, 3.0]);
}

#[test]
fn softmax_shift_invariance_and_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let k = rng.gen_range(1..12);
        let y: Vec<f64> = (0..k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let c = rng.gen_range(-100.0..100.0);
        let p = func::softmax(&y);
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let q = func::softmax(&shifted);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_on_tape_rejects_non_simplex() {
    let tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
    assert!(tape.cross_entropy(&Tensor::vector(vec![0.6, 0.6]), p).is_err());
    assert!(tape.cross_entropy(&Tensor::vector(vec![1.0, 0.0, 0.0]), p).is_err());
}

#[test]
fn backward_visits_in_reverse_order() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let w = tape.leaf(Tensor::matrix(&[&[0.5], &[-1.0]]).unwrap());
    let h = tape.matmul(a, w).unwrap();
    let t = tape.tanh(h);
    let m = tape.mul(t, t).unwrap();
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    let order = g.visit_order();
    assert_eq!(order, &[s.id(), m.id(), t.id(), h.id()]);
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(g.get(a).unwrap().shape(), &[1, 2]);
    assert_eq!(g.get(w).unwrap().shape(), &[2, 1]);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    let s = tape.sum(tape.mul(c, x).unwrap());
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn cross_entropy_minimized_at_one_hot_target(k in 2usize..8, g in 0usize..8, logits in prop::collection::vec(-5.0f64..5.0, 8)) {
        let g = g % k;
        let t = func::one_hot(k, g);
        let p = func::softmax(&logits[..k]);
        let at_target = func::cross_entropy(&t, &t).unwrap();
        prop_assert!(func::cross_entropy(&t, &p).unwrap() >= at_target);
    }

    #[test]
    fn forward_replay_is_bit_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 6, 6, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let run = || {
            let tape = Tape::new();
            let y = tape.conv2d_same(tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(Tensor::zeros(&[3]))).unwrap();
            let y = tape.maxpool2(tape.relu(y)).unwrap();
            let v = tape.value(y).clone();
            v
        };
        prop_assert_eq!(run(), run());
    }
}
