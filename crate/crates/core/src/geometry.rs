//! Pinhole camera, rigid transforms, pixel reprojection and the rigid
//! transformation of latent point codes.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};
use viewsynth_tensor::{Element, Var};

use crate::{Error, Result};

/// Depths below this are clamped before back-projection.
pub const MIN_DEPTH: f64 = 1e-4;

/// Coordinate written for pixels whose projection is invalid. It lies far
/// outside any image, so samplers treat it as out of bounds.
pub const INVALID_COORD: f64 = -1.0e6;

/// Pinhole projection parameters, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Element> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) || !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics of a `width x height` image with the given horizontal
    /// field of view and the principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx: T::of(f),
            fy: T::of(f),
            cx: T::of((width as f64 - 1.0) / 2.0),
            cy: T::of((height as f64 - 1.0) / 2.0),
        }
    }

    /// Intrinsics for an image block-averaged by `factor`. Pixel centres
    /// map as `u' = (u + 0.5) / factor - 0.5`.
    pub fn downscaled(&self, factor: f64) -> Self {
        self.rescaled(1.0 / factor, 1.0 / factor)
    }

    /// Intrinsics after resizing an image by independent factors in x and y
    /// (half-pixel alignment, as in bilinear resizing).
    pub fn rescaled(&self, sx: f64, sy: f64) -> Self {
        let half = T::of(0.5);
        Self {
            fx: self.fx * T::of(sx),
            fy: self.fy * T::of(sy),
            cx: (self.cx + half) * T::of(sx) - half,
            cy: (self.cy + half) * T::of(sy) - half,
        }
    }

    /// Intrinsics after cropping `left` columns and `top` rows.
    pub fn cropped(&self, left: f64, top: f64) -> Self {
        Self {
            cx: self.cx - T::of(left),
            cy: self.cy - T::of(top),
            ..*self
        }
    }

    pub fn project(&self, p: [T; 3]) -> [T; 2] {
        [
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ]
    }

    /// Camera-frame point seen at pixel `(u, v)` with the given depth.
    pub fn back_project(&self, u: T, v: T, depth: T) -> [T; 3] {
        [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ]
    }

    pub fn to_matrix(&self) -> [[T; 3]; 3] {
        let (z, o) = (T::zero(), T::one());
        [[self.fx, z, self.cx], [z, self.fy, self.cy], [z, z, o]]
    }

    pub fn from_matrix(m: [[T; 3]; 3]) -> Result<Self> {
        Self::new(m[0][0], m[1][1], m[0][2], m[1][2])
    }

    pub fn cast<U: Element>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::of(self.fx.to_f64_lossy()),
            fy: U::of(self.fy.to_f64_lossy()),
            cx: U::of(self.cx.to_f64_lossy()),
            cy: U::of(self.cy.to_f64_lossy()),
        }
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

fn mat_mul<T: Element>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec<T: Element>(a: &[[T; 3]; 3], v: &[T; 3]) -> [T; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose<T: Element>(a: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn orthonormality_tolerance<T: Element>() -> T {
    T::of(1e-6).max(T::epsilon() * T::of(64.0))
}

impl<T: Element> Pose<T> {
    pub fn identity() -> Self {
        let (z, o) = (T::zero(), T::one());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Validated constructor: `R Rᵀ = I` and `det R = 1` within tolerance.
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(t: [T; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians about the unit `axis` (Rodrigues).
    pub fn from_axis_angle(axis: [T; 3], angle: T, translation: [T; 3]) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let v = T::one() - c;
        Self {
            rotation: [
                [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
                [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
                [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
            ],
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = self
            .rotation
            .iter()
            .flatten()
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let tol = orthonormality_tolerance::<T>();
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        for (i, row) in rrt.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expect = if i == j { T::one() } else { T::zero() };
                if (v - expect).abs() > tol {
                    return Err(Error::InvalidPose(format!(
                        "rotation not orthonormal: (R Rᵀ)[{i}][{j}] = {v}"
                    )));
                }
            }
        }
        let det = self.determinant();
        if (det - T::one()).abs() > tol {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    pub fn determinant(&self) -> T {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = mat_vec(&self.rotation, &p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &Pose<T>) -> Pose<T> {
        let rotation = mat_mul(&self.rotation, &first.rotation);
        let rt = mat_vec(&self.rotation, &first.translation);
        Pose {
            rotation,
            translation: [
                rt[0] + self.translation[0],
                rt[1] + self.translation[1],
                rt[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Pose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn translation_norm(&self) -> T {
        let t = &self.translation;
        (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> T {
        let r = &self.rotation;
        let c = (r[0][0] + r[1][1] + r[2][2] - T::one()) / T::of(2.0);
        c.max(-T::one()).min(T::one()).acos()
    }

    pub fn to_matrix4(&self) -> [[T; 4]; 4] {
        let (z, o) = (T::zero(), T::one());
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [z, z, z, o],
        ]
    }

    /// Reads the upper 3x4 block of a homogeneous matrix.
    pub fn from_matrix4(m: [[T; 4]; 4]) -> Result<Self> {
        Self::new(
            [
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ],
            [m[0][3], m[1][3], m[2][3]],
        )
    }

    pub fn cast<U: Element>(&self) -> Pose<U> {
        let c = |v: T| U::of(v.to_f64_lossy());
        Pose {
            rotation: self.rotation.map(|row| row.map(c)),
            translation: self.translation.map(c),
        }
    }
}

/// `T2 ∘ T1`.
pub fn compose<T: Element>(t2: &Pose<T>, t1: &Pose<T>) -> Pose<T> {
    t2.compose(t1)
}

pub fn invert<T: Element>(t: &Pose<T>) -> Pose<T> {
    t.inverse()
}

/// Latent embedding viewed as `N` points in an abstract 3-space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    points: Array2<T>,
}

impl<T: Element> LatentCode<T> {
    pub fn new(points: Array2<T>) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::shape(
                "LatentCode",
                format!("expected N x 3 points, got {:?}", points.shape()),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self { points })
    }

    /// Reshapes a flat embedding of width `3 N`.
    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by 3",
                flat.len()
            )));
        }
        Self::new(Array2::from_shape_vec((flat.len() / 3, 3), flat.to_vec()).unwrap())
    }

    pub fn points(&self) -> ArrayView2<'_, T> {
        self.points.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Applies the rigid transform to every latent point: `z Rᵀ + t`.
pub fn transform_latent<T: Element>(z: &LatentCode<T>, pose: &Pose<T>) -> LatentCode<T> {
    let mut out = z.points.clone();
    for mut row in out.rows_mut() {
        let p = pose.apply([row[0], row[1], row[2]]);
        row[0] = p[0];
        row[1] = p[1];
        row[2] = p[2];
    }
    LatentCode { points: out }
}

/// Batched differentiable latent transform over `[b, n, 3]` codes with one
/// pose per batch element.
pub fn transform_latent_var<'g, T: Element>(z: Var<'g, T>, poses: &[Pose<T>]) -> Var<'g, T> {
    let zv = z.value();
    let s = zv.shape().to_vec();
    assert!(
        s.len() == 3 && s[2] == 3 && s[0] == poses.len(),
        "transform_latent_var expects [b, n, 3] with b poses, got {s:?} and {} poses",
        poses.len()
    );
    let zc = zv.as_standard_layout();
    let zs = zc.as_slice().unwrap();
    let mut out = vec![T::zero(); zs.len()];
    for (b, pose) in poses.iter().enumerate() {
        for n in 0..s[1] {
            let i = (b * s[1] + n) * 3;
            let p = pose.apply([zs[i], zs[i + 1], zs[i + 2]]);
            out[i..i + 3].copy_from_slice(&p);
        }
    }
    let rotations: Vec<[[T; 3]; 3]> = poses.iter().map(|p| p.rotation).collect();
    let y = ArrayD::from_shape_vec(IxDyn(&s), out).unwrap();
    z.graph().record(&[z], y, move |g| {
        let g = g.as_standard_layout();
        let gs = g.as_slice().unwrap();
        let mut dz = vec![T::zero(); gs.len()];
        for (b, r) in rotations.iter().enumerate() {
            let rt = transpose(r);
            for n in 0..s[1] {
                let i = (b * s[1] + n) * 3;
                let d = mat_vec(&rt, &[gs[i], gs[i + 1], gs[i + 2]]);
                dz[i..i + 3].copy_from_slice(&d);
            }
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(&s), dz).unwrap())]
    })
}

/// Image lattice of integer pixel centres `(u, v)`, `u` in `0..width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    /// Homogeneous coordinates in raster order.
    pub fn homogeneous<T: Element>(&self) -> impl Iterator<Item = [T; 3]> + '_ {
        (0..self.height).flat_map(move |v| {
            (0..self.width).map(move |u| [T::of(u as f64), T::of(v as f64), T::one()])
        })
    }
}

/// Output of [`project_pixels`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    /// `[h, w, 2]` target coordinates `(u, v)`; [`INVALID_COORD`] where masked.
    pub coords: Array3<T>,
    /// Depth of each transformed point in the target frame.
    pub depth: Array2<T>,
    pub mask: Array2<bool>,
}

/// Where pixel `(u, v)` of camera `a` with depth `d` lands in camera `b`,
/// along with its depth there. `None` for non-positive input depth or a
/// point behind camera `b`.
pub fn reproject_point<T: Element>(
    u: T,
    v: T,
    depth: T,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
) -> Option<(T, T, T)> {
    if !(depth > T::zero()) {
        return None;
    }
    let d = depth.max(T::of(MIN_DEPTH));
    if pose.is_identity() {
        return (d > T::of(MIN_DEPTH)).then_some((u, v, d));
    }
    let p = pose.apply(k.back_project(u, v, d));
    if !(p[2] > T::of(MIN_DEPTH)) {
        return None;
    }
    let [pu, pv] = k.project(p);
    Some((pu, pv, p[2]))
}

/// Back-projects every pixel of `grid` with `depth`, applies `pose` and
/// reprojects with `k`. Pixels whose transformed point is behind the camera
/// or lands outside `[0, w-1] x [0, h-1]` are masked.
pub fn project_pixels<T: Element>(
    grid: PixelGrid,
    depth: ArrayView2<'_, T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
) -> Result<Projection<T>> {
    if depth.dim() != (grid.height, grid.width) {
        return Err(Error::shape(
            "project_pixels",
            format!(
                "depth {:?} vs grid {}x{}",
                depth.shape(),
                grid.height,
                grid.width
            ),
        ));
    }
    let (h, w) = (grid.height, grid.width);
    let mut coords = Array3::from_elem((h, w, 2), T::of(INVALID_COORD));
    let mut zmap = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), false);
    let (wmax, hmax) = (T::of((w - 1) as f64), T::of((h - 1) as f64));
    for v in 0..h {
        for u in 0..w {
            let Some((pu, pv, z)) =
                reproject_point(T::of(u as f64), T::of(v as f64), depth[[v, u]], k, pose)
            else {
                continue;
            };
            zmap[[v, u]] = z;
            if pu >= T::zero() && pu <= wmax && pv >= T::zero() && pv <= hmax {
                coords[[v, u, 0]] = pu;
                coords[[v, u, 1]] = pv;
                mask[[v, u]] = true;
            }
        }
    }
    Ok(Projection {
        coords,
        depth: zmap,
        mask,
    })
}

fn parse_numbers(path: &Path, text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("not a number: `{tok}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((i + 1, nums));
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses one pose: a 4x4 (or 3x4) row-major matrix, whitespace separated,
/// on any number of lines.
pub fn parse_pose<T: Element>(path: &Path, text: &str) -> Result<Pose<T>> {
    let rows = parse_numbers(path, text)?;
    let last_line = rows.last().map(|r| r.0).unwrap_or(1);
    let flat: Vec<f64> = rows.into_iter().flat_map(|(_, r)| r).collect();
    if flat.len() != 16 && flat.len() != 12 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: last_line,
            msg: format!("expected 12 or 16 numbers, found {}", flat.len()),
        });
    }
    if flat.len() == 16 {
        let bottom = &flat[12..];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: last_line,
                msg: format!("last row must be 0 0 0 1, found {bottom:?}"),
            });
        }
    }
    pose_from_row_major(&flat).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: last_line,
        msg: e.to_string(),
    })
}

fn pose_from_row_major<T: Element>(flat: &[f64]) -> Result<Pose<T>> {
    let m = |r: usize, c: usize| T::of(flat[r * 4 + c]);
    Pose::new(
        [
            [m(0, 0), m(0, 1), m(0, 2)],
            [m(1, 0), m(1, 1), m(1, 2)],
            [m(2, 0), m(2, 1), m(2, 2)],
        ],
        [m(0, 3), m(1, 3), m(2, 3)],
    )
}

pub fn read_pose<T: Element>(path: &Path) -> Result<Pose<T>> {
    parse_pose(path, &read_text(path)?)
}

/// One pose per line, 12 (3x4) or 16 (4x4) numbers each, as in odometry
/// trajectory exports.
pub fn read_pose_sequence<T: Element>(path: &Path) -> Result<Vec<Pose<T>>> {
    parse_numbers(path, &read_text(path)?)?
        .into_iter()
        .map(|(line, nums)| {
            if nums.len() != 12 && nums.len() != 16 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected 12 or 16 numbers, found {}", nums.len()),
                });
            }
            pose_from_row_major(&nums).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn format_pose<T: Element>(pose: &Pose<T>) -> String {
    pose.to_matrix4()
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| format!("{:.12e}", v.to_f64_lossy()))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn write_pose<T: Element>(path: &Path, pose: &Pose<T>) -> Result<()> {
    std::fs::write(path, format_pose(pose)).map_err(|e| Error::io(path, e))
}

/// Parses a 3x3 row-major intrinsics matrix.
pub fn parse_intrinsics<T: Element>(path: &Path, text: &str) -> Result<CameraIntrinsics<T>> {
    let rows = parse_numbers(path, text)?;
    let last_line = rows.last().map(|r| r.0).unwrap_or(1);
    let flat: Vec<f64> = rows.into_iter().flat_map(|(_, r)| r).collect();
    if flat.len() != 9 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: last_line,
            msg: format!("expected 9 numbers, found {}", flat.len()),
        });
    }
    let m = |r: usize, c: usize| T::of(flat[r * 3 + c]);
    CameraIntrinsics::from_matrix([
        [m(0, 0), m(0, 1), m(0, 2)],
        [m(1, 0), m(1, 1), m(1, 2)],
        [m(2, 0), m(2, 1), m(2, 2)],
    ])
    .map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: last_line,
        msg: e.to_string(),
    })
}

pub fn read_intrinsics<T: Element>(path: &Path) -> Result<CameraIntrinsics<T>> {
    parse_intrinsics(path, &read_text(path)?)
}

pub fn write_intrinsics<T: Element>(path: &Path, k: &CameraIntrinsics<T>) -> Result<()> {
    let text = k
        .to_matrix()
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| format!("{:.12e}", v.to_f64_lossy()))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::FRAC_PI_2;

    fn rot_z(angle: f64) -> Pose<f64> {
        Pose::from_axis_angle([0.0, 0.0, 1.0], angle, [0.0; 3])
    }

    #[test]
    fn latent_identity_and_quarter_turn() {
        let z = LatentCode::new(array![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(transform_latent(&z, &Pose::identity()), z);
        let out = transform_latent(&z, &rot_z(FRAC_PI_2));
        let p = out.points();
        assert!((p[[0, 0]] - 0.0).abs() < 1e-15);
        assert!((p[[0, 1]] - 1.0).abs() < 1e-15);
        assert!(p[[0, 2]].abs() < 1e-15);
    }

    #[test]
    fn from_flat_requires_multiple_of_three() {
        assert!(matches!(
            LatentCode::<f32>::from_flat(&[1.0, 2.0]),
            Err(Error::Config(_))
        ));
        assert_eq!(LatentCode::<f32>::from_flat(&[0.0; 9]).unwrap().len(), 3);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let shift = Pose::from_translation([1.0, 0.0, 0.0]);
        let (u, v, _) = reproject_point(0.0, 0.0, 1.0, &k, &shift).unwrap();
        assert_eq!((u, v), (1.0, 0.0));
        let forward = Pose::from_translation([0.0, 0.0, -1.0]);
        let (u, v, z) = reproject_point(2.0, 2.0, 2.0, &k, &forward).unwrap();
        assert_eq!((u, v, z), (4.0, 4.0, 1.0));
    }

    #[test]
    fn non_positive_depth_is_masked() {
        let k = CameraIntrinsics::new(2.0, 2.0, 1.5, 1.5).unwrap();
        let mut depth = Array2::from_elem((4, 4), 1.0);
        depth[[1, 1]] = 0.0;
        depth[[2, 2]] = -3.0;
        let p = project_pixels(PixelGrid::new(4, 4), depth.view(), &k, &Pose::identity()).unwrap();
        assert!(!p.mask[[1, 1]] && !p.mask[[2, 2]]);
        assert_eq!(p.coords[[1, 1, 0]], INVALID_COORD);
        assert!(p.coords.iter().all(|c| c.is_finite()));
        assert_eq!(p.mask.iter().filter(|&&m| m).count(), 14);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let r = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Pose::new(r, [0.0; 3]).is_err());
        let flip = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Pose::new(flip, [0.0; 3]).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_text_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("viewsynth-geom-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pose.txt");
        let pose = Pose::from_axis_angle([0.3, 1.0, -0.2], 0.4, [0.1, -2.0, 3.5]);
        write_pose(&path, &pose).unwrap();
        let back: Pose<f64> = read_pose(&path).unwrap();
        for (a, b) in back
            .to_matrix4()
            .iter()
            .flatten()
            .zip(pose.to_matrix4().iter().flatten())
        {
            assert!((a - b).abs() < 1e-11);
        }
        let err = parse_pose::<f64>(&path, "1 0 0 0\n0 1 0 0\n0 0 x 0\n0 0 0 1\n").unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        let err = parse_pose::<f64>(&path, "1 0 0 0\n0 1 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let k = CameraIntrinsics::new(100.0, 90.0, 32.0, 30.0).unwrap();
        let kp = dir.join("k.txt");
        write_intrinsics(&kp, &k).unwrap();
        assert_eq!(read_intrinsics::<f64>(&kp).unwrap(), k);
        std::fs::remove_dir_all(&dir).ok();
    }
}
