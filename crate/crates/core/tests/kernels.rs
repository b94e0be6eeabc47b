use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metaprune::{Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

/// Direct convolution; `groups == channels` gives the depthwise case.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let ins: Vec<usize> = if depthwise { vec![o] } else { (0..c).collect() };
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for (wi, &i) in ins.iter().enumerate() {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let (iy, ix) = ((y * stride + dy) as isize - pad as isize, (xo * stride + dx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, i, iy as usize, ix as usize]) * w.at(&[o, wi, dy, dx]);
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let (a, b) = (randn(&[m, k], seed), randn(&[k, n], seed ^ 1));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(va, vb).unwrap();
        prop_assert!(max_diff(tape.value(y).data(), &naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c in 1usize..5, co in 1usize..5, k in 1usize..4,
        h in 3usize..9, w in 3usize..9, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let x = randn(&[n, c, h, w], seed);
        let wt = randn(&[co, c, k, k], seed ^ 1);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let y = tape.conv2d(vx, vw, stride, pad).unwrap();
        prop_assert!(max_diff(tape.value(y).data(), &naive_conv(&x, &wt, stride, pad, false)) < 1e-12);
    }

    #[test]
    fn depthwise_matches_direct_loops(
        n in 1usize..3, c in 1usize..6, k in 1usize..4,
        h in 3usize..9, w in 3usize..9, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let x = randn(&[n, c, h, w], seed);
        let wt = randn(&[c, 1, k, k], seed ^ 1);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let y = tape.depthwise_conv2d(vx, vw, stride, pad).unwrap();
        prop_assert!(max_diff(tape.value(y).data(), &naive_conv(&x, &wt, stride, pad, true)) < 1e-12);
    }
}
