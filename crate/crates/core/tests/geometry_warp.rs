use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use proptest::prelude::*;
use viewsynth::geometry::{project_pixels, transform_latent, transform_latent_var};
use viewsynth::warp::{forward_warp, forward_warp_array, inverse_warp, inverse_warp_array};
use viewsynth::{CameraIntrinsics, Graph, LatentCode, PixelGrid, Pose};
use viewsynth_tensor::gradcheck::{check, GradCheckConfig};

fn pose_strategy() -> impl Strategy<Value = Pose<f64>> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.0f64..0.5,
        prop::array::uniform3(-0.5f64..0.5),
    )
        .prop_filter("non-degenerate axis", |(a, _, _)| {
            a.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
        .prop_map(|(axis, angle, t)| Pose::from_axis_angle(axis, angle, t))
}

fn texture(c: usize, h: usize, w: usize, phase: f64) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        0.5 + 0.3 * (0.7 * x as f64 + 0.4 * y as f64 + phase + ch as f64).sin()
    })
}

fn as4(a: &Array3<f64>) -> Array4<f64> {
    let (c, h, w) = a.dim();
    a.clone().into_shape_with_order((1, c, h, w)).unwrap()
}

fn depth4(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Array4<f64> {
    Array4::from_shape_fn((1, 1, h, w), |(_, _, y, x)| f(y, x))
}

#[test]
fn identity_latent_transform_is_exact() {
    let z = LatentCode::new(Array2::from_shape_fn((64, 3), |(i, j)| {
        (i as f64 * 0.37 - j as f64).sin() * 3.0
    }))
    .unwrap();
    assert_eq!(transform_latent(&z, &Pose::identity()), z);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_projection_returns_grid(
        depth in prop::collection::vec(1e-3f64..200.0, 12 * 16),
        f in 5.0f64..60.0,
        c in 0.0f64..15.0,
    ) {
        let k = CameraIntrinsics::new(f, f * 1.1, c, c * 0.7).unwrap();
        let depth = Array2::from_shape_vec((12, 16), depth).unwrap();
        let p = project_pixels(PixelGrid::new(16, 12), depth.view(), &k, &Pose::identity()).unwrap();
        for ((y, x), &d) in depth.indexed_iter() {
            prop_assert!(p.mask[[y, x]]);
            prop_assert_eq!(p.coords[[y, x, 0]], x as f64);
            prop_assert_eq!(p.coords[[y, x, 1]], y as f64);
            prop_assert_eq!(p.depth[[y, x]], d);
        }
    }

    #[test]
    fn latent_transform_is_rigid(pose in pose_strategy(), pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..20)) {
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let z = LatentCode::from_flat(&flat).unwrap();
        let zt = transform_latent(&z, &pose);
        let (a, b) = (z.points(), zt.points());
        for i in 0..a.nrows() {
            for j in 0..i {
                let d = |m: &ndarray::ArrayView2<f64>| (0..3).map(|c| (m[[i, c]] - m[[j, c]]).powi(2)).sum::<f64>().sqrt();
                prop_assert!((d(&a) - d(&b)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batched_latent_transform_matches_rowwise(pose in pose_strategy(), seed in 0u64..1000) {
        let z = Array2::from_shape_fn((7, 3), |(i, j)| ((seed + i as u64 * 3 + j as u64) as f64 * 0.61).sin());
        let g = Graph::new();
        let v = g.constant(z.clone().into_shape_with_order((1, 7, 3)).unwrap().into_dyn());
        let out = transform_latent_var(v, &[pose]).value();
        let want = transform_latent(&LatentCode::new(z).unwrap(), &pose);
        for (a, b) in out.iter().zip(want.points().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_scale_consistent(pose in pose_strategy(), lambda in 0.2f64..5.0, d0 in 1.0f64..4.0) {
        let k = CameraIntrinsics::from_fov(10, 8, 60.0);
        let depth = Array2::from_shape_fn((8, 10), |(y, x)| d0 + 0.1 * x as f64 + 0.05 * y as f64);
        let scaled = Pose { translation: pose.translation.map(|t| t * lambda), ..pose };
        let a = project_pixels(PixelGrid::new(10, 8), depth.view(), &k, &pose).unwrap();
        let b = project_pixels(PixelGrid::new(10, 8), depth.mapv(|d| d * lambda).view(), &k, &scaled).unwrap();
        prop_assert_eq!(&a.mask, &b.mask);
        for y in 0..8 {
            for x in 0..10 {
                if a.mask[[y, x]] {
                    for c in 0..2 {
                        prop_assert!((a.coords[[y, x, c]] - b.coords[[y, x, c]]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn warps_are_identity_under_identity_pose(phase in 0.0f64..6.0, d in 0.5f64..20.0) {
        let src = as4(&texture(3, 9, 11, phase));
        let depth = depth4(9, 11, |y, x| d + 0.01 * (x + y) as f64);
        let k = CameraIntrinsics::from_fov(11, 9, 55.0);
        for r in [
            inverse_warp_array(&src, &depth, &k, &Pose::identity()).unwrap(),
            forward_warp_array(&src, &depth, &k, &Pose::identity()).unwrap(),
        ] {
            prop_assert!(r.valid_mask.iter().all(|&m| m == 1.0));
            for (a, b) in r.warped.iter().zip(src.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masks_are_binary_and_gate_values(pose in pose_strategy(), phase in 0.0f64..6.0) {
        let src = as4(&texture(2, 10, 10, phase));
        let depth = depth4(10, 10, |y, x| 1.5 + 0.2 * ((x as f64) * 0.5).sin() + 0.02 * y as f64);
        let k = CameraIntrinsics::from_fov(10, 10, 60.0);
        for r in [
            inverse_warp_array(&src, &depth, &k, &pose).unwrap(),
            forward_warp_array(&src, &depth, &k, &pose).unwrap(),
        ] {
            for y in 0..10 {
                for x in 0..10 {
                    let m = r.valid_mask[[0, 0, y, x]];
                    prop_assert!(m == 0.0 || m == 1.0);
                    if m == 0.0 {
                        prop_assert!(r.warped[[0, 0, y, x]] == 0.0 && r.warped[[0, 1, y, x]] == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn plane_round_trip(shift in -3i32..=3, vshift in -2i32..=2, d in 1.0f64..6.0, phase in 0.0f64..6.0) {
        let (h, w) = (12, 14);
        let k = CameraIntrinsics::new(10.0, 10.0, 6.5, 5.5).unwrap();
        // integer pixel shifts keep bilinear resampling exact
        let t = [shift as f64 * d / k.fx, vshift as f64 * d / k.fy, 0.0];
        let b_from_a = Pose::from_translation(t);
        let src = as4(&texture(3, h, w, phase));
        let plane = depth4(h, w, |_, _| d);
        let b = inverse_warp_array(&src, &plane, &k, &b_from_a.inverse()).unwrap();
        let back = inverse_warp_array(&b.warped, &plane, &k, &b_from_a).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (by, bx) = (y as i32 + vshift, x as i32 + shift);
                let interior = back.valid_mask[[0, 0, y, x]] == 1.0
                    && (0..h as i32).contains(&by)
                    && (0..w as i32).contains(&bx)
                    && b.valid_mask[[0, 0, by as usize, bx as usize]] == 1.0;
                if interior {
                    for c in 0..3 {
                        prop_assert!((back.warped[[0, c, y, x]] - src[[0, c, y, x]]).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn splatting_conserves_mass(shift in -3i32..=3, vshift in -3i32..=3, d in 1.0f64..6.0, phase in 0.0f64..6.0) {
        let (h, w) = (10, 12);
        let k = CameraIntrinsics::new(8.0, 8.0, 5.5, 4.5).unwrap();
        let pose = Pose::from_translation([shift as f64 * d / k.fx, vshift as f64 * d / k.fy, 0.0]);
        let src = as4(&texture(1, h, w, phase));
        let r = forward_warp_array(&src, &depth4(h, w, |_, _| d), &k, &pose).unwrap();
        let landed: f64 = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| {
                let (ty, tx) = (y as i32 + vshift, x as i32 + shift);
                (0..h as i32).contains(&ty) && (0..w as i32).contains(&tx)
            })
            .map(|(y, x)| src[[0, 0, y, x]])
            .sum();
        let warped: f64 = r.warped.iter().zip(r.valid_mask.iter()).map(|(v, m)| v * m).sum();
        prop_assert!((warped - landed).abs() < 1e-5, "{} vs {}", warped, landed);
    }
}

#[test]
fn inverse_warp_depth_gradient() {
    let k = CameraIntrinsics::from_fov(8, 8, 60.0);
    let pose = Pose::from_axis_angle([0.2, 1.0, 0.1], 0.08, [0.15, -0.05, 0.05]);
    let src = texture(2, 8, 8, 0.3)
        .into_shape_with_order((1, 2, 8, 8))
        .unwrap()
        .into_dyn();
    let depth: ArrayD<f64> = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |i| {
        2.0 + 0.1 * ((i[2] + 2 * i[3]) as f64 * 0.4).sin()
    });
    let weights = ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |i| {
        ((i[1] * 64 + i[2] * 8 + i[3]) as f64 * 0.77).cos()
    });
    let r = check(
        &[src, depth],
        |g, x| {
            let w = g.constant(weights.clone());
            (inverse_warp(x[0], x[1], &[k], &[pose]).unwrap().warped * w).sum()
        },
        GradCheckConfig::default(),
    );
    assert!(r.pass_fraction() >= 0.95, "{r:?}");
}

#[test]
fn forward_warp_source_gradient() {
    let k = CameraIntrinsics::from_fov(8, 8, 60.0);
    let pose = Pose::from_axis_angle([0.0, 1.0, 0.0], 0.05, [0.1, 0.0, 0.0]);
    let src = texture(2, 8, 8, 1.1)
        .into_shape_with_order((1, 2, 8, 8))
        .unwrap()
        .into_dyn();
    let depth = Array4::from_elem((1, 1, 8, 8), 3.0).into_dyn();
    let weights = ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |i| {
        ((i[1] * 64 + i[2] * 8 + i[3]) as f64 * 0.31).sin()
    });
    let r = check(
        &[src],
        |g, x| {
            let d = g.constant(depth.clone());
            let w = g.constant(weights.clone());
            (forward_warp(x[0], d, &[k], &[pose]).unwrap().warped * w).sum()
        },
        GradCheckConfig::default(),
    );
    assert!(r.pass_fraction() >= 0.95, "{r:?}");
}

#[test]
fn latent_transform_gradient() {
    let pose = Pose::from_axis_angle([1.0, 2.0, -0.5], 0.7, [0.3, 0.1, -0.2]);
    let z = ArrayD::from_shape_fn(IxDyn(&[1, 8, 3]), |i| {
        ((i[1] * 3 + i[2]) as f64 * 0.9).sin()
    });
    let w = ArrayD::from_shape_fn(IxDyn(&[1, 8, 3]), |i| {
        ((i[1] * 3 + i[2]) as f64 * 0.4).cos()
    });
    let r = check(
        &[z],
        |g, x| (transform_latent_var(x[0], &[pose]) * g.constant(w.clone())).sum(),
        GradCheckConfig::default(),
    );
    assert_eq!(r.pass_fraction(), 1.0, "{r:?}");
}
