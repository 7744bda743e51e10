//! Procedural ray-cast scenes with exact depth for both views.
//!
//! Surfaces carry smooth world-space textures (a few low-frequency
//! sinusoids), so reprojection with the true depth reproduces a view up to
//! resampling error. The source camera sits at the world origin looking
//! down `+z` with `+y` pointing down.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{relative_pose, SamplePair};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::{Element, Error, Result};

const HIT_EPS: f64 = 1e-9;
/// Minimum distance between a camera centre and any surface.
pub const MIN_CLEARANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub k: [f64; 3],
    pub phase: f64,
    pub amp: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Texture {
    pub fn flat(rgb: [f64; 3]) -> Self {
        Self {
            base: rgb,
            waves: Vec::new(),
        }
    }

    /// `waves` sinusoids with spatial frequency in `[min_freq, max_freq]`
    /// rad per scene unit.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        waves: usize,
        min_freq: f64,
        max_freq: f64,
    ) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.3..0.7));
        let waves = (0..waves)
            .map(|_| {
                let dir = random_unit(rng);
                let f = rng.random_range(min_freq..=max_freq);
                Wave {
                    k: dir.map(|d| d * f),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: [0; 3].map(|_| rng.random_range(0.04..0.1)),
                }
            })
            .collect();
        Self { base, waves }
    }

    pub fn color(&self, p: [f64; 3]) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (dot(w.k, p) + w.phase).sin();
            for ch in 0..3 {
                c[ch] += w.amp[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane `normal · x = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    /// Box rotated by `yaw` radians about the vertical axis.
    Cuboid {
        center: [f64; 3],
        half: [f64; 3],
        yaw: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub shape: Shape,
    pub texture: Texture,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n = dot(v, v).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn yaw_inv(yaw: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] - s * v[2], v[1], s * v[0] + c * v[2]]
}

impl Shape {
    /// Smallest ray parameter `t > 0` with `o + t d` on the surface.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Plane { normal, offset } => {
                let den = dot(normal, d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - dot(normal, o)) / den;
                (t > HIT_EPS).then_some(t)
            }
            Shape::Cuboid { center, half, yaw } => {
                let o = yaw_inv(yaw, sub(o, center));
                let d = yaw_inv(yaw, d);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[i] - o[i]) / d[i];
                    let b = (half[i] - o[i]) / d[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 || t1 <= HIT_EPS {
                    return None;
                }
                Some(if t0 > HIT_EPS { t0 } else { t1 })
            }
        }
    }

    /// Distance from `p` to the surface, negative inside a cuboid.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Plane { normal, offset } => {
                (dot(normal, p) - offset) / dot(normal, normal).sqrt()
            }
            Shape::Cuboid { center, half, yaw } => {
                let q = yaw_inv(yaw, sub(p, center));
                let d = [0, 1, 2].map(|i| q[i].abs() - half[i]);
                let outside = d.map(|v| v.max(0.0));
                let inside = d[0].max(d[1]).max(d[2]).min(0.0);
                dot(outside, outside).sqrt() + inside
            }
        }
    }
}

/// A complete scene and its two cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics<f64>,
    pub surfaces: Vec<Surface>,
    pub world_from_source: Pose<f64>,
    pub world_from_target: Pose<f64>,
    /// Colour samples per pixel along each axis.
    pub supersample: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::Config(
                "scene needs a positive size and supersampling".into(),
            ));
        }
        if self.surfaces.is_empty() {
            return Err(Error::Config("scene has no surfaces".into()));
        }
        for (name, cam) in [
            ("source", &self.world_from_source),
            ("target", &self.world_from_target),
        ] {
            cam.validate()?;
            let c = cam.translation;
            for (i, s) in self.surfaces.iter().enumerate() {
                let d = s.shape.signed_distance(c);
                let bad = match s.shape {
                    Shape::Plane { .. } => d.abs() < MIN_CLEARANCE,
                    Shape::Cuboid { .. } => d < MIN_CLEARANCE,
                };
                if bad {
                    return Err(Error::Config(format!(
                        "{name} camera at {c:?} is inside or too close to surface {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Camera-frame depth and surface index seen through pixel `(u, v)`.
    pub fn cast(&self, world_from_cam: &Pose<f64>, u: f64, v: f64) -> Option<(f64, usize)> {
        let k = &self.intrinsics;
        let ray_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        let r = &world_from_cam.rotation;
        let d = [0, 1, 2].map(|i| dot(r[i], ray_cam));
        let o = world_from_cam.translation;
        self.surfaces
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.shape.intersect(o, d).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn shade(&self, world_from_cam: &Pose<f64>, u: f64, v: f64) -> Option<[f64; 3]> {
        let (t, i) = self.cast(world_from_cam, u, v)?;
        let k = &self.intrinsics;
        let p = world_from_cam.apply([(u - k.cx) / k.fx * t, (v - k.cy) / k.fy * t, t]);
        Some(self.surfaces[i].texture.color(p))
    }

    /// Renders `[3, h, w]` colour and `[h, w]` depth; errors when a pixel
    /// sees no surface.
    pub fn render(&self, world_from_cam: &Pose<f64>) -> Result<(Array3<f64>, Array2<f64>)> {
        let (h, w, s) = (self.height, self.width, self.supersample);
        let mut rgb = Array3::zeros((3, h, w));
        let mut depth = Array2::zeros((h, w));
        let offsets: Vec<f64> = (0..s).map(|i| (i as f64 + 0.5) / s as f64 - 0.5).collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64, y as f64);
                let miss = || Error::Config(format!("pixel ({x}, {y}) sees no surface"));
                depth[[y, x]] = self.cast(world_from_cam, u, v).ok_or_else(miss)?.0;
                let mut acc = [0.0; 3];
                for &dy in &offsets {
                    for &dx in &offsets {
                        let c = self
                            .shade(world_from_cam, u + dx, v + dy)
                            .ok_or_else(miss)?;
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    rgb[[ch, y, x]] = acc[ch] / (s * s) as f64;
                }
            }
        }
        Ok((rgb, depth))
    }

    /// Renders both views into a pair with ground-truth depth.
    pub fn render_pair<T: Element>(&self, id: impl Into<String>) -> Result<SamplePair<T>> {
        self.validate()?;
        let (src, ds) = self.render(&self.world_from_source)?;
        let (tgt, dt) = self.render(&self.world_from_target)?;
        let cast3 = |a: Array3<f64>| a.mapv(T::of);
        let cast2 = |a: Array2<f64>| a.mapv(T::of);
        Ok(SamplePair {
            id: id.into(),
            source: cast3(src),
            target: cast3(tgt),
            pose_s_to_t: relative_pose(&self.world_from_source, &self.world_from_target).cast(),
            intrinsics: self.intrinsics.cast(),
            depth_s: Some(cast2(ds)),
            depth_t: Some(cast2(dt)),
        })
    }
}

/// Parameters of the random scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Bound on the target camera's offset from the source camera.
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub boxes: usize,
    /// Range of the back wall's depth.
    pub wall_depth: [f64; 2],
    /// Range of the floor's distance below the cameras.
    pub floor_drop: [f64; 2],
    /// Range of box-centre depths.
    pub box_depth: [f64; 2],
    pub texture_waves: usize,
    /// Texture frequency range in rad per scene unit.
    pub texture_freq: [f64; 2],
    pub supersample: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            hfov_deg: 60.0,
            max_translation: 0.2,
            max_rotation_deg: 4.0,
            boxes: 2,
            wall_depth: [5.0, 7.0],
            floor_drop: [0.9, 1.3],
            box_depth: [2.0, 3.5],
            texture_waves: 3,
            texture_freq: [1.5, 5.0],
            supersample: 3,
        }
    }
}

/// Draws a random scene. The target camera is redrawn until it clears
/// every surface.
pub fn random_scene(cfg: &SyntheticConfig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = |rng: &mut ChaCha8Rng| {
        Texture::random(
            rng,
            cfg.texture_waves,
            cfg.texture_freq[0],
            cfg.texture_freq[1],
        )
    };
    let mut surfaces = Vec::new();
    let wall_z = rng.random_range(cfg.wall_depth[0]..=cfg.wall_depth[1]);
    let tilt = [rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1)];
    let n = [tilt[0], tilt[1], 1.0];
    let nn = dot(n, n).sqrt();
    let normal = n.map(|v| v / nn);
    surfaces.push(Surface {
        shape: Shape::Plane {
            normal,
            offset: normal[2] * wall_z,
        },
        texture: tex(&mut rng),
    });
    let floor = rng.random_range(cfg.floor_drop[0]..=cfg.floor_drop[1]);
    surfaces.push(Surface {
        shape: Shape::Plane {
            normal: [0.0, 1.0, 0.0],
            offset: floor,
        },
        texture: tex(&mut rng),
    });
    for _ in 0..cfg.boxes {
        let half = [
            rng.random_range(0.2..0.45),
            rng.random_range(0.2..0.5),
            rng.random_range(0.2..0.45),
        ];
        let z = rng.random_range(cfg.box_depth[0]..=cfg.box_depth[1]);
        let x = rng.random_range(-0.5..0.5) * z * 0.6;
        surfaces.push(Surface {
            shape: Shape::Cuboid {
                center: [x, floor - half[1], z],
                half,
                yaw: rng.random_range(-0.6..0.6),
            },
            texture: tex(&mut rng),
        });
    }
    let intrinsics = CameraIntrinsics::from_fov(cfg.width, cfg.height, cfg.hfov_deg);
    let mut spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        intrinsics,
        surfaces,
        world_from_source: Pose::identity(),
        world_from_target: Pose::identity(),
        supersample: cfg.supersample,
    };
    for _ in 0..100 {
        let dir = random_unit(&mut rng);
        let r = rng.random_range(0.3..=1.0) * cfg.max_translation;
        let axis = random_unit(&mut rng);
        let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
        spec.world_from_target = Pose::from_axis_angle(axis, angle, dir.map(|d| d * r));
        if spec.validate().is_ok() {
            break;
        }
    }
    spec
}

/// One random scene rendered as a pair with ground-truth depth.
pub fn generate_synthetic_scene<T: Element>(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<SamplePair<T>> {
    random_scene(cfg, seed).render_pair(format!("synth_{seed:06}"))
}

/// `n` scenes with seeds `seed, seed + 1, ...`.
pub fn generate_pairs<T: Element>(
    cfg: &SyntheticConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SamplePair<T>>> {
    (0..n as u64)
        .map(|i| generate_synthetic_scene(cfg, seed + i))
        .collect()
}
