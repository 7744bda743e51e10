//! Brute-force reference warps used by `warp-check` and the test suites.
//!
//! Everything here goes through explicit homogeneous matrices and visits
//! every source pixel for every target pixel, so it shares no sampling or
//! splatting code with [`crate::warp`].

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{project_pixels, CameraIntrinsics, PixelGrid, Pose, MIN_DEPTH};
use crate::warp::{forward_warp_array, inverse_warp_array, MIN_SPLAT_WEIGHT};
use crate::Result;

type M3 = [[f64; 3]; 3];
type M4 = [[f64; 4]; 4];

fn inv3(m: &M3) -> M3 {
    let c =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * c(1, 2, 1, 2) - m[0][1] * c(1, 2, 0, 2) + m[0][2] * c(1, 2, 0, 1);
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    adj.map(|row| row.map(|v| v / det))
}

fn mul3(m: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mul4(m: &M4, v: [f64; 4]) -> [f64; 4] {
    [0, 1, 2, 3].map(|i| (0..4).map(|j| m[i][j] * v[j]).sum())
}

fn tent(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Where pixel `(x, y)` at `depth` lands: `(u, v, z)` in the other camera.
pub fn project(
    x: f64,
    y: f64,
    depth: f64,
    k: &CameraIntrinsics<f64>,
    pose: &Pose<f64>,
) -> Option<(f64, f64, f64)> {
    if !(depth > 0.0) {
        return None;
    }
    let km = k.to_matrix();
    let ray = mul3(&inv3(&km), [x, y, 1.0]);
    let d = depth.max(MIN_DEPTH);
    let q = mul4(
        &pose.to_matrix4(),
        [ray[0] * d, ray[1] * d, ray[2] * d, 1.0],
    );
    if !(q[2] > MIN_DEPTH) {
        return None;
    }
    let h = mul3(&km, [q[0], q[1], q[2]]);
    Some((h[0] / h[2], h[1] / h[2], q[2]))
}

fn inside(u: f64, v: f64, w: usize, h: usize) -> bool {
    u > -1.0 && u < w as f64 && v > -1.0 && v < h as f64
}

/// Inverse warp of `src` (`[c, h, w]`) by target depth. Returns the warped
/// image and its validity mask.
pub fn inverse_warp(
    src: &Array3<f64>,
    depth_t: &Array2<f64>,
    k: &CameraIntrinsics<f64>,
    t_to_s: &Pose<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, h, w));
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let Some((u, v, _)) = project(x as f64, y as f64, depth_t[[y, x]], k, t_to_s) else {
                continue;
            };
            if !inside(u, v, w, h) {
                continue;
            }
            mask[[y, x]] = 1.0;
            for sy in 0..h {
                for sx in 0..w {
                    let wt = tent(u - sx as f64) * tent(v - sy as f64);
                    if wt > 0.0 {
                        for ch in 0..c {
                            out[[ch, y, x]] += wt * src[[ch, sy, sx]];
                        }
                    }
                }
            }
        }
    }
    (out, mask)
}

/// Forward warp of `src` by source depth: each target pixel takes the
/// nearest source point whose splat weight on it is at least the threshold,
/// earliest in raster order on ties.
pub fn forward_warp(
    src: &Array3<f64>,
    depth_s: &Array2<f64>,
    k: &CameraIntrinsics<f64>,
    s_to_t: &Pose<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (c, h, w) = src.dim();
    let landed: Vec<Option<(f64, f64, f64)>> = (0..h * w)
        .map(|q| {
            project(
                (q % w) as f64,
                (q / w) as f64,
                depth_s[[q / w, q % w]],
                k,
                s_to_t,
            )
            .filter(|&(u, v, _)| inside(u, v, w, h))
        })
        .collect();
    let mut out = Array3::zeros((c, h, w));
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, usize)> = None;
            for (q, l) in landed.iter().enumerate() {
                let Some((u, v, z)) = *l else { continue };
                if tent(u - x as f64) * tent(v - y as f64) < MIN_SPLAT_WEIGHT {
                    continue;
                }
                if best.is_none_or(|(bz, _)| z < bz) {
                    best = Some((z, q));
                }
            }
            if let Some((_, q)) = best {
                mask[[y, x]] = 1.0;
                for ch in 0..c {
                    out[[ch, y, x]] = src[[ch, q / w, q % w]];
                }
            }
        }
    }
    (out, mask)
}

/// One random warp problem.
#[derive(Debug, Clone)]
pub struct WarpCase {
    pub src: Array3<f64>,
    pub depth: Array2<f64>,
    pub k: CameraIntrinsics<f64>,
    pub pose: Pose<f64>,
}

/// Random texture, smooth depth in `[2, 6]`, rotation below `max_rot_deg`
/// about a random axis and translation below 0.3 per axis.
pub fn random_case(rng: &mut impl Rng, size: usize, max_rot_deg: f64) -> WarpCase {
    let src = Array3::from_shape_fn((3, size, size), |_| rng.random::<f64>());
    let (a, fx, fy, ph) = (
        rng.random_range(0.3..1.5),
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
        rng.random_range(0.0..6.3),
    );
    let base = rng.random_range(2.0 + a..6.0 - a);
    let depth = Array2::from_shape_fn((size, size), |(y, x)| {
        base + a * (fx * x as f64 + ph).sin() * (fy * y as f64).cos()
    });
    let k = CameraIntrinsics::from_fov(size, size, rng.random_range(45.0..75.0));
    let axis: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
    let angle = rng.random::<f64>() * max_rot_deg.to_radians();
    let t = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
    WarpCase {
        src,
        depth,
        k,
        pose: Pose::from_axis_angle(axis, angle, t),
    }
}

/// Largest deviations of one case.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CaseDeviation {
    pub inverse: f64,
    pub forward: f64,
    pub projection: f64,
    /// Pixels whose validity differs from the oracle.
    pub mask_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarpCheckReport {
    pub seed: u64,
    pub cases: Vec<CaseDeviation>,
    pub max: CaseDeviation,
}

impl WarpCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max.inverse < tol
            && self.max.forward < tol
            && self.max.projection < tol
            && self.max.mask_mismatches == 0
    }
}

fn max_abs(a: impl Iterator<Item = f64>) -> f64 {
    a.fold(0.0, f64::max)
}

/// Compares the production warps and projection against the oracles on one
/// case.
pub fn check_case(case: &WarpCase) -> Result<CaseDeviation> {
    let (c, h, w) = case.src.dim();
    let src4: Array4<f64> = case
        .src
        .clone()
        .into_shape_with_order((1, c, h, w))
        .unwrap();
    let dep4: Array4<f64> = case
        .depth
        .clone()
        .into_shape_with_order((1, 1, h, w))
        .unwrap();
    let mut dev = CaseDeviation::default();
    let pairs = [
        (
            inverse_warp_array(&src4, &dep4, &case.k, &case.pose)?,
            inverse_warp(&case.src, &case.depth, &case.k, &case.pose),
        ),
        (
            forward_warp_array(&src4, &dep4, &case.k, &case.pose)?,
            forward_warp(&case.src, &case.depth, &case.k, &case.pose),
        ),
    ];
    for (i, (got, (want, want_mask))) in pairs.into_iter().enumerate() {
        let d = max_abs(
            got.warped
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs()),
        );
        if i == 0 {
            dev.inverse = d;
        } else {
            dev.forward = d;
        }
        dev.mask_mismatches += got
            .valid_mask
            .iter()
            .zip(want_mask.iter())
            .filter(|(a, b)| a != b)
            .count();
    }
    let proj = project_pixels(PixelGrid::new(w, h), case.depth.view(), &case.k, &case.pose)?;
    for y in 0..h {
        for x in 0..w {
            let want = project(x as f64, y as f64, case.depth[[y, x]], &case.k, &case.pose);
            let Some((u, v, z)) = want else {
                dev.mask_mismatches += proj.mask[[y, x]] as usize;
                continue;
            };
            dev.projection = dev.projection.max((proj.depth[[y, x]] - z).abs());
            if proj.mask[[y, x]] {
                dev.projection = dev
                    .projection
                    .max((proj.coords[[y, x, 0]] - u).abs())
                    .max((proj.coords[[y, x, 1]] - v).abs());
            }
        }
    }
    Ok(dev)
}

/// Runs `cases` random `size` x `size` problems drawn from `seed`.
pub fn warp_check(
    seed: u64,
    cases: usize,
    size: usize,
    max_rot_deg: f64,
) -> Result<WarpCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(cases);
    let mut max = CaseDeviation::default();
    for _ in 0..cases {
        let d = check_case(&random_case(&mut rng, size, max_rot_deg))?;
        max.inverse = max.inverse.max(d.inverse);
        max.forward = max.forward.max(d.forward);
        max.projection = max.projection.max(d.projection);
        max.mask_mismatches += d.mask_mismatches;
        all.push(d);
    }
    Ok(WarpCheckReport {
        seed,
        cases: all,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_matrix() {
        let m = [[2.0, 0.0, 1.0], [0.0, 3.0, 2.0], [0.0, 0.0, 1.0]];
        let i = inv3(&m);
        let p = mul3(&m, mul3(&i, [0.3, -1.0, 2.0]));
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_pose_reproduces_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let case = random_case(&mut rng, 8, 10.0);
        let id = Pose::identity();
        let (inv, m) = inverse_warp(&case.src, &case.depth, &case.k, &id);
        assert!(m.iter().all(|&v| v == 1.0));
        assert!(inv
            .iter()
            .zip(case.src.iter())
            .all(|(a, b)| (a - b).abs() < 1e-9));
        let (fwd, _) = forward_warp(&case.src, &case.depth, &case.k, &id);
        assert_eq!(fwd, case.src);
    }

    #[test]
    fn small_check_passes() {
        let r = warp_check(1, 3, 12, 15.0).unwrap();
        assert!(r.passed(1e-5), "{:?}", r.max);
    }
}
