//! Differentiable inverse (bilinear sampling) and direct (z-buffered
//! splatting) warping of images and feature maps.

use ndarray::{Array4, ArrayD, IxDyn};
use viewsynth_tensor::{Element, Graph, Var};

use crate::geometry::{CameraIntrinsics, Pose, MIN_DEPTH};
use crate::{Error, Result};

/// Splats whose bilinear weight is below this do not claim a target pixel.
pub const MIN_SPLAT_WEIGHT: f64 = 1e-3;

/// Warp output on the tape. `mask` is `[b, 1, h, w]` with values in {0, 1}
/// and `warped` is zero wherever the mask is zero.
pub struct WarpOutput<'g, T: Element> {
    pub warped: Var<'g, T>,
    pub mask: ArrayD<T>,
}

impl<'g, T: Element> WarpOutput<'g, T> {
    /// Wraps an unwarped map with an all-valid mask.
    pub fn unmasked(features: Var<'g, T>) -> Self {
        let s = features.shape();
        Self {
            warped: features,
            mask: ArrayD::from_elem(IxDyn(&[s[0], 1, s[2], s[3]]), T::one()),
        }
    }
}

/// Plain-array warp result.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult<T> {
    pub warped: Array4<T>,
    pub valid_mask: Array4<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    Forward,
    Inverse,
}

fn pick<X>(items: &[X], b: usize) -> &X {
    if items.len() == 1 {
        &items[0]
    } else {
        &items[b]
    }
}

fn check_batch<X>(op: &'static str, what: &str, items: &[X], batch: usize) -> Result<()> {
    if items.len() == 1 || items.len() == batch {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{} {what} for batch of {batch}", items.len()),
        ))
    }
}

fn dims(op: &'static str, src: &[usize], depth: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if src.len() != 4 || depth.len() != 4 || depth[1] != 1 {
        return Err(Error::shape(
            op,
            format!("expected [b,c,h,w] source and [b,1,h,w] depth, got {src:?} / {depth:?}"),
        ));
    }
    if src[0] != depth[0] || src[2] != depth[2] || src[3] != depth[3] {
        return Err(Error::shape(
            op,
            format!("source {src:?} and depth {depth:?} resolutions differ"),
        ));
    }
    Ok((src[0], src[1], src[2], src[3]))
}

/// Where a target pixel samples the source, with the derivative of the
/// sample position with respect to the pixel's depth.
#[derive(Clone, Copy)]
struct Sample<T> {
    u: T,
    v: T,
    du_dd: T,
    dv_dd: T,
}

fn locate<T: Element>(
    u: usize,
    v: usize,
    depth: T,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    width: usize,
    height: usize,
) -> Option<Sample<T>> {
    if !(depth > T::zero()) {
        return None;
    }
    let eps = T::of(MIN_DEPTH);
    let clamped = depth < eps;
    let d = depth.max(eps);
    let a = [
        (T::of(u as f64) - k.cx) / k.fx,
        (T::of(v as f64) - k.cy) / k.fy,
        T::one(),
    ];
    let rot = &pose.rotation;
    let r = [
        rot[0][0] * a[0] + rot[0][1] * a[1] + rot[0][2],
        rot[1][0] * a[0] + rot[1][1] * a[1] + rot[1][2],
        rot[2][0] * a[0] + rot[2][1] * a[1] + rot[2][2],
    ];
    let t = &pose.translation;
    let p = [d * r[0] + t[0], d * r[1] + t[1], d * r[2] + t[2]];
    if !(p[2] > eps) {
        return None;
    }
    let su = k.fx * p[0] / p[2] + k.cx;
    let sv = k.fy * p[1] / p[2] + k.cy;
    let (w, h) = (T::of(width as f64), T::of(height as f64));
    if !(su > -T::one() && su < w && sv > -T::one() && sv < h) {
        return None;
    }
    let z2 = p[2] * p[2];
    let (du_dd, dv_dd) = if clamped {
        (T::zero(), T::zero())
    } else {
        (
            k.fx * (r[0] * p[2] - p[0] * r[2]) / z2,
            k.fy * (r[1] * p[2] - p[1] * r[2]) / z2,
        )
    };
    Some(Sample {
        u: su,
        v: sv,
        du_dd,
        dv_dd,
    })
}

/// The four bilinear taps `(x, y, weight)` around a continuous coordinate.
fn bilinear_taps<T: Element>(u: T, v: T) -> [(isize, isize, T); 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0.to_isize().unwrap(), y0.to_isize().unwrap());
    let one = T::one();
    [
        (x0, y0, (one - fx) * (one - fy)),
        (x0 + 1, y0, fx * (one - fy)),
        (x0, y0 + 1, (one - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

fn in_bounds(x: isize, y: isize, w: usize, h: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

/// Inverse (backward) warping: every target pixel is back-projected with
/// `depth_t`, moved into the source camera by `t_to_s`, and `src` is
/// bilinearly sampled there with zero padding. Differentiable with respect
/// to `src` and `depth_t`.
///
/// `ks` and `t_to_s` hold one entry per batch element, or a single entry
/// shared by the whole batch.
pub fn inverse_warp<'g, T: Element>(
    src: Var<'g, T>,
    depth_t: Var<'g, T>,
    ks: &[CameraIntrinsics<T>],
    t_to_s: &[Pose<T>],
) -> Result<WarpOutput<'g, T>> {
    let sv = src.value();
    let dv = depth_t.value();
    let (b, c, h, w) = dims("inverse_warp", sv.shape(), dv.shape())?;
    check_batch("inverse_warp", "intrinsics", ks, b)?;
    check_batch("inverse_warp", "poses", t_to_s, b)?;
    let src_a = sv.as_standard_layout().into_owned();
    let dep_a = dv.as_standard_layout().into_owned();
    let ss = src_a.as_slice().unwrap();
    let ds = dep_a.as_slice().unwrap();
    let plane = h * w;

    let mut samples: Vec<Option<Sample<T>>> = Vec::with_capacity(b * plane);
    let mut out = vec![T::zero(); b * c * plane];
    let mut mask = vec![T::zero(); b * plane];
    for bi in 0..b {
        let (k, pose) = (pick(ks, bi), pick(t_to_s, bi));
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let s = locate(x, y, ds[bi * plane + pix], k, pose, w, h);
                if let Some(s) = s {
                    mask[bi * plane + pix] = T::one();
                    for (tx, ty, wt) in bilinear_taps(s.u, s.v) {
                        if !in_bounds(tx, ty, w, h) {
                            continue;
                        }
                        let off = ty as usize * w + tx as usize;
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            out[base + pix] = out[base + pix] + wt * ss[base + off];
                        }
                    }
                }
                samples.push(s);
            }
        }
    }
    let warped = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap();
    let mask = ArrayD::from_shape_vec(IxDyn(&[b, 1, h, w]), mask).unwrap();
    let need_src = src.requires_grad();
    let need_depth = depth_t.requires_grad();
    let warped = src.graph().record(&[src, depth_t], warped, move |g| {
        let g = g.as_standard_layout();
        let gs = g.as_slice().unwrap();
        let ss = src_a.as_slice().unwrap();
        let mut dsrc = vec![T::zero(); b * c * plane];
        let mut ddepth = vec![T::zero(); b * plane];
        for bi in 0..b {
            for pix in 0..plane {
                let Some(s) = samples[bi * plane + pix] else {
                    continue;
                };
                let x0 = s.u.floor();
                let y0 = s.v.floor();
                let (fx, fy) = (s.u - x0, s.v - y0);
                let (x0, y0) = (x0.to_isize().unwrap(), y0.to_isize().unwrap());
                let taps = bilinear_taps(s.u, s.v);
                let mut dd = T::zero();
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    let gv = gs[base + pix];
                    if gv == T::zero() {
                        continue;
                    }
                    if need_src {
                        for &(tx, ty, wt) in &taps {
                            if in_bounds(tx, ty, w, h) {
                                let off = base + ty as usize * w + tx as usize;
                                dsrc[off] = dsrc[off] + gv * wt;
                            }
                        }
                    }
                    if need_depth {
                        let at = |dx: isize, dy: isize| {
                            let (tx, ty) = (x0 + dx, y0 + dy);
                            if in_bounds(tx, ty, w, h) {
                                ss[base + ty as usize * w + tx as usize]
                            } else {
                                T::zero()
                            }
                        };
                        let (s00, s01, s10, s11) = (at(0, 0), at(1, 0), at(0, 1), at(1, 1));
                        let one = T::one();
                        let d_du = (one - fy) * (s01 - s00) + fy * (s11 - s10);
                        let d_dv = (one - fx) * (s10 - s00) + fx * (s11 - s01);
                        dd = dd + gv * (d_du * s.du_dd + d_dv * s.dv_dd);
                    }
                }
                ddepth[bi * plane + pix] = dd;
            }
        }
        vec![
            need_src.then(|| ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dsrc).unwrap()),
            need_depth.then(|| ArrayD::from_shape_vec(IxDyn(&[b, 1, h, w]), ddepth).unwrap()),
        ]
    });
    Ok(WarpOutput { warped, mask })
}

/// Direct (forward) warping: every source pixel is moved into the target
/// camera by `s_to_t` and splatted onto its four bilinear neighbours.
/// Each target pixel keeps the splat with the smallest target-frame depth
/// (first in raster order on ties) and takes that source pixel's value.
/// Pixels that receive no splat are holes: value 0, mask 0.
///
/// Differentiable with respect to `src`; the splat pattern is piecewise
/// constant in depth, so no gradient flows into `depth_s`.
pub fn forward_warp<'g, T: Element>(
    src: Var<'g, T>,
    depth_s: Var<'g, T>,
    ks: &[CameraIntrinsics<T>],
    s_to_t: &[Pose<T>],
) -> Result<WarpOutput<'g, T>> {
    let sv = src.value();
    let dv = depth_s.value();
    let (b, c, h, w) = dims("forward_warp", sv.shape(), dv.shape())?;
    check_batch("forward_warp", "intrinsics", ks, b)?;
    check_batch("forward_warp", "poses", s_to_t, b)?;
    let src_a = sv.as_standard_layout();
    let dep_a = dv.as_standard_layout();
    let ss = src_a.as_slice().unwrap();
    let ds = dep_a.as_slice().unwrap();
    let plane = h * w;
    let min_w = T::of(MIN_SPLAT_WEIGHT);

    // winner[bi * plane + target] = source pixel index
    let mut winner: Vec<Option<usize>> = vec![None; b * plane];
    for bi in 0..b {
        let (k, pose) = (pick(ks, bi), pick(s_to_t, bi));
        let mut zbuf = vec![T::infinity(); plane];
        for y in 0..h {
            for x in 0..w {
                let q = y * w + x;
                let d = ds[bi * plane + q];
                let Some((u, v, z)) =
                    crate::geometry::reproject_point(T::of(x as f64), T::of(y as f64), d, k, pose)
                else {
                    continue;
                };
                if !(u > -T::one() && u < T::of(w as f64) && v > -T::one() && v < T::of(h as f64)) {
                    continue;
                }
                for (tx, ty, wt) in bilinear_taps(u, v) {
                    if wt < min_w || !in_bounds(tx, ty, w, h) {
                        continue;
                    }
                    let p = ty as usize * w + tx as usize;
                    if z < zbuf[p] {
                        zbuf[p] = z;
                        winner[bi * plane + p] = Some(q);
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); b * c * plane];
    let mut mask = vec![T::zero(); b * plane];
    for bi in 0..b {
        for p in 0..plane {
            if let Some(q) = winner[bi * plane + p] {
                mask[bi * plane + p] = T::one();
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    out[base + p] = ss[base + q];
                }
            }
        }
    }
    let warped = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap();
    let mask = ArrayD::from_shape_vec(IxDyn(&[b, 1, h, w]), mask).unwrap();
    let warped = src.graph().record(&[src, depth_s], warped, move |g| {
        let g = g.as_standard_layout();
        let gs = g.as_slice().unwrap();
        let mut dsrc = vec![T::zero(); b * c * plane];
        for bi in 0..b {
            for p in 0..plane {
                if let Some(q) = winner[bi * plane + p] {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        dsrc[base + q] = dsrc[base + q] + gs[base + p];
                    }
                }
            }
        }
        vec![
            Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dsrc).unwrap()),
            None,
        ]
    });
    Ok(WarpOutput { warped, mask })
}

/// Warps every pyramid level independently. Level `i` of `features` must
/// share its resolution with level `i` of `depths`; intrinsics given for
/// `full_width` are divided by each level's downsample factor.
pub fn warp_pyramid<'g, T: Element>(
    features: &[Var<'g, T>],
    depths: &[Var<'g, T>],
    ks: &[CameraIntrinsics<T>],
    full_width: usize,
    poses: &[Pose<T>],
    mode: WarpMode,
) -> Result<Vec<WarpOutput<'g, T>>> {
    if features.len() != depths.len() {
        return Err(Error::Config(format!(
            "pyramid level mismatch: {} feature levels, {} depth levels",
            features.len(),
            depths.len()
        )));
    }
    features
        .iter()
        .zip(depths)
        .map(|(&f, &d)| {
            let fw = f.shape()[3];
            let factor = full_width as f64 / fw as f64;
            let kl: Vec<_> = ks.iter().map(|k| k.downscaled(factor)).collect();
            match mode {
                WarpMode::Forward => forward_warp(f, d, &kl, poses),
                WarpMode::Inverse => inverse_warp(f, d, &kl, poses),
            }
        })
        .collect()
}

fn run_array<T: Element>(
    src: &Array4<T>,
    depth: &Array4<T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    mode: WarpMode,
) -> Result<WarpResult<T>> {
    let g = Graph::new();
    let s = g.constant(src.clone().into_dyn());
    let d = g.constant(depth.clone().into_dyn());
    let out = match mode {
        WarpMode::Forward => {
            forward_warp(s, d, std::slice::from_ref(k), std::slice::from_ref(pose))?
        }
        WarpMode::Inverse => {
            inverse_warp(s, d, std::slice::from_ref(k), std::slice::from_ref(pose))?
        }
    };
    let to4 = |a: ArrayD<T>| a.into_dimensionality::<ndarray::Ix4>().unwrap();
    Ok(WarpResult {
        warped: to4((*out.warped.value()).clone()),
        valid_mask: to4(out.mask),
    })
}

/// Array convenience wrapper around [`inverse_warp`].
pub fn inverse_warp_array<T: Element>(
    src: &Array4<T>,
    depth_t: &Array4<T>,
    k: &CameraIntrinsics<T>,
    t_to_s: &Pose<T>,
) -> Result<WarpResult<T>> {
    run_array(src, depth_t, k, t_to_s, WarpMode::Inverse)
}

/// Array convenience wrapper around [`forward_warp`].
pub fn forward_warp_array<T: Element>(
    src: &Array4<T>,
    depth_s: &Array4<T>,
    k: &CameraIntrinsics<T>,
    s_to_t: &Pose<T>,
) -> Result<WarpResult<T>> {
    run_array(src, depth_s, k, s_to_t, WarpMode::Forward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_k() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    fn ramp(c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| (ch * 100 + y * 10 + x) as f64)
    }

    #[test]
    fn inverse_identity_returns_source() {
        let src = ramp(2, 5, 6);
        let depth = Array4::from_elem((1, 1, 5, 6), 3.0);
        let k = CameraIntrinsics::new(4.0, 4.0, 2.5, 2.0).unwrap();
        let r = inverse_warp_array(&src, &depth, &k, &Pose::identity()).unwrap();
        assert!(r.valid_mask.iter().all(|&m| m == 1.0));
        for (a, b) in r.warped.iter().zip(src.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_unit_shift_moves_left() {
        let src = ramp(1, 4, 5);
        let depth = Array4::from_elem((1, 1, 4, 5), 1.0);
        let r = inverse_warp_array(
            &src,
            &depth,
            &unit_k(),
            &Pose::from_translation([1.0, 0.0, 0.0]),
        )
        .unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!((r.warped[[0, 0, y, x]] - src[[0, 0, y, x + 1]]).abs() < 1e-12);
            }
            // the last column samples at x = 5: one tap inside is impossible, so masked
            assert_eq!(r.valid_mask[[0, 0, y, 4]], 0.0);
            assert_eq!(r.warped[[0, 0, y, 4]], 0.0);
        }
    }

    #[test]
    fn forward_identity_and_occlusion() {
        let src = ramp(3, 4, 4);
        let depth = Array4::from_elem((1, 1, 4, 4), 2.0);
        let k = CameraIntrinsics::new(3.0, 3.0, 1.5, 1.5).unwrap();
        let r = forward_warp_array(&src, &depth, &k, &Pose::identity()).unwrap();
        assert_eq!(r.warped, src);
        assert!(r.valid_mask.iter().all(|&m| m == 1.0));

        // pixels (0,0) depth 1 and (1,0) depth 2 both land on target (1,0)
        // after their respective shifts; the nearer one wins.
        let src = Array4::from_shape_fn((1, 1, 1, 3), |(_, _, _, x)| [10.0, 20.0, 30.0][x]);
        let mut depth = Array4::from_elem((1, 1, 1, 3), 1.0);
        depth[[0, 0, 0, 1]] = 2.0;
        // target u = u_s + 1/depth with fx = 1, t = (1,0,0)... use unit k
        let r = forward_warp_array(
            &src,
            &depth,
            &unit_k(),
            &Pose::from_translation([1.0, 0.0, 0.0]),
        )
        .unwrap();
        // source 0 (depth 1) -> u = 0 + 1/1 = 1; source 1 (depth 2) -> u = (1*2 + 1)/2 = 1.5,
        // splats onto 1 and 2 with weight 0.5 each; z of source 0 is 1 < 2.
        assert_eq!(r.warped[[0, 0, 0, 1]], 10.0);
        assert_eq!(r.warped[[0, 0, 0, 2]], 20.0);
        assert_eq!(r.valid_mask[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn forward_out_of_bounds_leaves_hole() {
        let src = Array4::from_elem((1, 1, 1, 2), 5.0);
        let mut depth = Array4::from_elem((1, 1, 1, 2), 1.0);
        depth[[0, 0, 0, 1]] = 1.0;
        let r = forward_warp_array(
            &src,
            &depth,
            &unit_k(),
            &Pose::from_translation([5.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!(r.warped.iter().all(|&v| v == 0.0));
        assert!(r.valid_mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_level_mismatch_is_config_error() {
        let g = Graph::<f64>::new();
        let f = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        let err = warp_pyramid(
            &[f, f],
            &[f],
            &[unit_k()],
            4,
            &[Pose::identity()],
            WarpMode::Inverse,
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Config(_)));
    }
}
