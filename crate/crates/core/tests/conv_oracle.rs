// SPDX-License-Identifier: MIT OR Apache-2.0

use csae_core::conv::{conv2d, conv_out_extent};
use csae_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive(input: &Tensor<f64>, kernels: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (kernels.shape()[0], kernels.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let at = |c: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            input.data()[(c * h + y as usize) * w + x as usize]
        }
    };
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            acc += kernels.data()[((o * cin + c) * k + ky) * k + kx] * at(c, y, x);
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[cout, ho, wo], out).unwrap()
}

#[test]
fn im2col_conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut cases = 0;
    while cases < 50 {
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..3);
        let h = rng.random_range(1..13);
        let w = rng.random_range(1..13);
        if conv_out_extent(h, k, stride, pad).is_err() || conv_out_extent(w, k, stride, pad).is_err() {
            continue;
        }
        let input = Tensor::from_fn(&[cin, h, w], |_| rng.random_range(-1.0..1.0));
        let kernels = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-1.0..1.0));
        let fast = conv2d(&input, &kernels, stride, pad).unwrap();
        let slow = naive(&input, &kernels, stride, pad);
        assert_eq!(fast.shape(), slow.shape(), "case {cases}: cin {cin} cout {cout} k {k} s {stride} p {pad} {h}x{w}");
        let diff = fast.max_abs_diff(&slow);
        assert!(diff <= 1e-6, "case {cases}: max diff {diff:e}");

        // batched tape op agrees with the single-image kernel
        let mut tape = Tape::new();
        let x = tape.constant(input.clone().reshape(&[1, cin, h, w]).unwrap());
        let kv = tape.constant(kernels.clone());
        let y = tape.conv2d(x, kv, stride, pad).unwrap();
        let batched = tape.value(y).clone().reshape(slow.shape()).unwrap();
        assert!(batched.max_abs_diff(&slow) <= 1e-6, "case {cases}: tape conv differs");
        cases += 1;
    }
}

#[test]
fn f32_conv_matches_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..10 {
        let input = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0));
        let kernels = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-0.5..0.5));
        let fast = conv2d(&input.cast::<f32>(), &kernels.cast::<f32>(), 1, 1).unwrap().cast::<f64>();
        assert!(fast.max_abs_diff(&naive(&input, &kernels, 1, 1)) <= 1e-5);
    }
}
