use ndarray::{s, Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsynth::metrics::{
    depth_metrics, image_metrics, psnr, ssim, DepthRange, EvalReport, SampleRecord,
};
use viewsynth::networks::vgg::{Lpips, Vgg16, LPIPS_TAPS};
use viewsynth::Error;

fn image(seed: u64, h: usize, w: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: [f64; 3] = [
        rng.random_range(0.2..0.9),
        rng.random_range(0.2..0.9),
        rng.random_range(0.0..6.0),
    ];
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        0.5 + 0.3 * (f[0] * x as f64 + f[2] + c as f64).sin() * (f[1] * y as f64).cos()
            + rng.random_range(-0.05..0.05)
    })
}

fn flip(a: &Array3<f64>) -> Array3<f64> {
    a.slice(s![.., .., ..;-1]).to_owned()
}

// Direct SSIM: Gaussian 11x11 sigma 1.5 over valid windows, per-channel mean.
fn ssim_oracle(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (c, h, w) = a.dim();
    let k = 11usize.min(h.min(w) - (1 - h.min(w) % 2));
    let r = (k / 2) as f64;
    let mut g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        let (p, q) = (a[[ch, y + i, x + j]], b[[ch, y + i, x + j]]);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1.0;
            }
        }
        total += acc / n;
    }
    total / c as f64
}

#[test]
fn ssim_matches_direct_computation() {
    for seed in 0..4 {
        let a = image(seed, 20, 24);
        let b = image(seed + 100, 20, 24);
        let got = ssim(a.view(), b.view()).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn ssim_identity_is_one() {
    let a = image(3, 16, 16);
    assert!((ssim(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_of_known_mse() {
    let a = Array3::from_elem((3, 8, 8), 0.5);
    let b = Array3::from_elem((3, 8, 8), 0.6);
    assert!((psnr(a.view(), b.view()).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(a.view(), a.view()).unwrap(), f64::INFINITY);
    let m = image_metrics(a.view(), b.view(), None).unwrap();
    assert!((m.l1 - 0.1).abs() < 1e-12);
    assert!(m.lpips.is_none());
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Array3::<f64>::zeros((3, 8, 8));
    let b = Array3::<f64>::zeros((3, 8, 9));
    assert!(matches!(ssim(a.view(), b.view()), Err(Error::Shape { .. })));
}

#[test]
fn depth_metrics_match_hand_values() {
    let gt = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 4.0, 5.0]).unwrap();
    let pred = Array2::from_shape_vec((1, 4), vec![1.0, 2.4, 3.0, 100.0]).unwrap();
    let mask = Array2::from_shape_vec((1, 4), vec![true, true, true, false]).unwrap();
    let m = depth_metrics(pred.view(), gt.view(), mask.view()).unwrap();
    let abs_rel = (0.0 + 0.4 / 2.0 + 1.0 / 4.0) / 3.0;
    let sq_rel = (0.0 + 0.16 / 2.0 + 1.0 / 4.0) / 3.0;
    let rmse = ((0.16 + 1.0) / 3.0f64).sqrt();
    let d = [0.0, (1.2f64).ln(), (0.75f64).ln()];
    let mean = d.iter().sum::<f64>() / 3.0;
    let msq = d.iter().map(|v| v * v).sum::<f64>() / 3.0;
    assert!((m.abs_rel - abs_rel).abs() < 1e-12);
    assert!((m.sq_rel - sq_rel).abs() < 1e-12);
    assert!((m.rmse - rmse).abs() < 1e-12);
    assert!((m.rmse_log - msq.sqrt()).abs() < 1e-12);
    assert!((m.silog - 100.0 * (msq - mean * mean).sqrt()).abs() < 1e-9);
    // ratios 1, 1.2, 1.333
    assert!((m.delta1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.delta2, 1.0);
    assert_eq!(m.delta3, 1.0);
}

#[test]
fn empty_mask_and_bad_depth_are_errors() {
    let d = Array2::from_elem((2, 2), 1.0);
    let none = Array2::from_elem((2, 2), false);
    assert!(matches!(
        depth_metrics(d.view(), d.view(), none.view()),
        Err(Error::EmptyMask)
    ));
    let z = Array2::from_elem((2, 2), 0.0);
    let all = Array2::from_elem((2, 2), true);
    assert!(depth_metrics(z.view(), d.view(), all.view()).is_err());
}

#[test]
fn kitti_range_clamps_and_masks() {
    let gt = Array2::from_shape_vec((1, 3), vec![0.0, 10.0, 90.0]).unwrap();
    let pred = Array2::from_shape_vec((1, 3), vec![0.0, 200.0, 5.0]).unwrap();
    let (p, m) = DepthRange::KITTI.prepare(pred.view(), gt.view());
    assert_eq!(
        m.iter().copied().collect::<Vec<_>>(),
        vec![false, true, false]
    );
    assert_eq!(p[[0, 1]], 80.0);
    assert_eq!(p[[0, 0]], 1e-3);
}

#[test]
fn report_means_and_infinite_psnr() {
    let a = Array3::from_elem((3, 8, 8), 0.5);
    let b = Array3::from_elem((3, 8, 8), 0.6);
    let rec = |id: &str, x: &Array3<f64>| SampleRecord {
        id: id.into(),
        image: Some(image_metrics(x.view(), a.view(), None).unwrap()),
        depth: None,
    };
    let r = EvalReport::new("t", vec![rec("a", &a), rec("b", &b)]);
    let agg = r.aggregate.image.unwrap();
    assert!((agg.l1 - 0.05).abs() < 1e-12);
    assert!((agg.psnr - 20.0).abs() < 1e-9);
    assert!(r.aggregate.depth.is_none());
    let json = r.to_json();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.samples[0].image.unwrap().psnr, f64::INFINITY);
    assert!(r.to_table().contains("AbsRel"));
}

fn random_lpips(seed: u64) -> Lpips {
    let net = Vgg16::<f64>::random(seed, 16, LPIPS_TAPS[4]);
    let lin = LPIPS_TAPS
        .iter()
        .map(|&t| vec![1.0; net.channels_at(t)])
        .collect();
    Lpips::from_parts(net, lin).unwrap()
}

#[test]
fn lpips_grows_with_noise() {
    let net = random_lpips(0);
    let a = image(1, 32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0..1.0));
    let dist = |amp: f64| {
        let b = (&a + &(&noise * amp)).mapv(|v| v.clamp(0.0, 1.0));
        image_metrics(b.view(), a.view(), Some(&net))
            .unwrap()
            .lpips
            .unwrap()
    };
    assert!(dist(0.0).abs() < 1e-12);
    let d: Vec<f64> = [0.02, 0.1, 0.3].iter().map(|&v| dist(v)).collect();
    assert!(d[0] > 0.0 && d[0] < d[1] && d[1] < d[2], "{d:?}");
}

#[test]
fn lpips_rejects_wrong_lin_width() {
    let net = Vgg16::<f64>::random(0, 16, LPIPS_TAPS[4]);
    assert!(Lpips::from_parts(net, vec![vec![1.0; 3]; 5]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn image_metrics_flip_invariant(seed in 0u64..1000) {
        let a = image(seed, 16, 20);
        let b = image(seed + 1, 16, 20);
        let m = image_metrics(a.view(), b.view(), None).unwrap();
        let f = image_metrics(flip(&a).view(), flip(&b).view(), None).unwrap();
        prop_assert!((m.l1 - f.l1).abs() < 1e-12);
        prop_assert!((m.psnr - f.psnr).abs() < 1e-9);
        prop_assert!((m.ssim - f.ssim).abs() < 1e-9);
        let t = image_metrics(b.view(), a.view(), None).unwrap();
        prop_assert!((m.ssim - t.ssim).abs() < 1e-12);
        prop_assert!(m.ssim <= 1.0 + 1e-12);
    }

    #[test]
    fn depth_metric_scale_laws(seed in 0u64..1000, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Array2::from_shape_fn((6, 7), |_| rng.random_range(1.0..20.0));
        let pred = Array2::from_shape_fn((6, 7), |_| rng.random_range(1.0..20.0));
        let mask = Array2::from_shape_fn((6, 7), |_| rng.random::<f64>() < 0.7);
        prop_assume!(mask.iter().any(|&m| m));
        let m = depth_metrics(pred.view(), gt.view(), mask.view()).unwrap();
        let scaled = depth_metrics((&pred * c).view(), (&gt * c).view(), mask.view()).unwrap();
        prop_assert!((m.abs_rel - scaled.abs_rel).abs() < 1e-9);
        prop_assert!((m.sq_rel * c - scaled.sq_rel).abs() < 1e-9 * (1.0 + scaled.sq_rel));
        prop_assert!((m.rmse * c - scaled.rmse).abs() < 1e-9 * (1.0 + scaled.rmse));
        prop_assert!((m.rmse_log - scaled.rmse_log).abs() < 1e-9);
        prop_assert_eq!(m.delta1, scaled.delta1);
        // Scaling only the prediction leaves the scale-invariant error unchanged.
        let only = depth_metrics((&pred * c).view(), gt.view(), mask.view()).unwrap();
        prop_assert!((m.silog - only.silog).abs() < 1e-7);
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        let flipped = depth_metrics(
            pred.slice(s![.., ..;-1]), gt.slice(s![.., ..;-1]), mask.slice(s![.., ..;-1]),
        ).unwrap();
        prop_assert!((m.abs_rel - flipped.abs_rel).abs() < 1e-12);
    }

    #[test]
    fn psnr_shift_law(v in 0.001f64..0.3) {
        let a = Array3::from_elem((3, 4, 4), 0.2);
        let b = Array3::from_elem((3, 4, 4), 0.2 + v);
        let want = -20.0 * v.log10();
        prop_assert!((psnr(a.view(), b.view()).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn ssim_drops_under_noise() {
    let a = image(7, 24, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prev = (0..3).fold(1.0, |prev, k| {
        let amp = 0.05 * (k + 1) as f64;
        let b = a.mapv(|v| v + rng.random_range(-amp..amp));
        let s = ssim(a.view(), b.view()).unwrap();
        assert!(s < prev);
        s
    });
    assert!(prev > 0.0);
    let _ = a.index_axis(Axis(0), 0);
}
