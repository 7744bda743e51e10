use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsynth_tensor::{Conv2dSpec, Graph};

fn direct_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = ArrayD::zeros(IxDyn(&[b, o, oh, ow]));
    for n in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let sy = (y * stride + i) as isize - pad as isize;
                                let sx = (xx * stride + j) as isize - pad as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += x[[n, ic, sy as usize, sx as usize]] * w[[oc, ic, i, j]];
                                }
                            }
                        }
                    }
                    out[[n, oc, y, xx]] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_direct_sum(
        seed in 0u64..10_000,
        b in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[b, c, h, w]), || rng.random_range(-1.0..1.0));
        let wt = ArrayD::from_shape_simple_fn(IxDyn(&[o, c, k, k]), || rng.random_range(-1.0..1.0));
        let g = Graph::new();
        let got = g.constant(x.clone()).conv2d(g.constant(wt.clone()), Conv2dSpec::new(stride, pad)).value();
        let want = direct_conv(&x, &wt, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
