//! ShapeNet render folders: `<root>/<category>/<model>/<az>_<el>.png`,
//! optionally with a `<az>_<el>.txt` camera-to-world pose beside each render
//! and `train.txt` / `test.txt` model lists in the category directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{read_rgb, resize_bilinear};
use super::{
    relative_pose, sample_shapenet_partner, split_indices, PairPolicy, PairSource, SamplePair,
    ViewAngle,
};
use crate::geometry::{read_pose, CameraIntrinsics, Pose};
use crate::{Element, Error, Result};

pub const RENDERS_PER_MODEL: usize = 72;
pub const DEFAULT_FOV_DEG: f64 = 50.0;
/// Camera distance from the object centre when poses are derived from the
/// view angles.
pub const DEFAULT_CAMERA_DISTANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Chairs,
    Cars,
}

impl Category {
    /// Directory names accepted for the category: plain name or synset id.
    pub fn dir_names(self) -> [&'static str; 2] {
        match self {
            Category::Chairs => ["chairs", "03001627"],
            Category::Cars => ["cars", "02958343"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Camera-to-world pose of a camera on a sphere around the origin looking
/// at it, with world `+y` pointing down (elevation lifts the camera).
pub fn orbit_pose(view: ViewAngle, distance: f64) -> Pose<f64> {
    let (az, el) = (
        (view.azimuth as f64).to_radians(),
        (view.elevation as f64).to_radians(),
    );
    let c = [
        distance * el.cos() * az.sin(),
        -distance * el.sin(),
        -distance * el.cos() * az.cos(),
    ];
    let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    let f = c.map(|v| -v / n);
    let down = [0.0, 1.0, 0.0];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let x = cross(down, f);
    let xn = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let x = x.map(|v| v / xn);
    let y = cross(f, x);
    Pose {
        rotation: [[x[0], y[0], f[0]], [x[1], y[1], f[1]], [x[2], y[2], f[2]]],
        translation: c,
    }
}

fn parse_view(path: &Path) -> Option<ViewAngle> {
    let stem = path.file_stem()?.to_str()?;
    let (a, e) = stem.split_once('_')?;
    Some(ViewAngle {
        azimuth: a.parse::<i32>().ok()?.rem_euclid(360),
        elevation: e.parse().ok()?,
    })
}

struct ModelEntry {
    id: String,
    dir: PathBuf,
    views: BTreeMap<ViewAngle, PathBuf>,
}

pub struct ShapeNetDataset {
    models: Vec<ModelEntry>,
    samples: Vec<(usize, ViewAngle)>,
    width: usize,
    height: usize,
    policy: PairPolicy,
    camera_distance: f64,
}

impl ShapeNetDataset {
    /// Indexes one category split. Without `train.txt` / `test.txt` a
    /// deterministic 90/10 model-level split is used.
    pub fn open(
        root: &Path,
        category: Category,
        split: Split,
        width: usize,
        height: usize,
        policy: PairPolicy,
    ) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "ShapeNet root {} does not exist",
                root.display()
            )));
        }
        let cat_dir = category
            .dir_names()
            .iter()
            .map(|n| root.join(n))
            .find(|p| p.is_dir())
            .ok_or_else(|| {
                Error::Data(format!(
                    "no {category:?} directory under {}",
                    root.display()
                ))
            })?;
        let mut ids: Vec<String> = std::fs::read_dir(&cat_dir)
            .map_err(|e| Error::io(&cat_dir, e))?
            .flatten()
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .collect();
        ids.sort();
        let list = cat_dir.join(match split {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        });
        let chosen: Vec<String> = if list.is_file() {
            let text = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && ids.iter().any(|i| i == l))
                .map(str::to_string)
                .collect()
        } else {
            let (train, test) = split_indices(ids.len(), 0.1, 0);
            let pick = if split == Split::Train { train } else { test };
            pick.into_iter().map(|i| ids[i].clone()).collect()
        };
        let mut models = Vec::new();
        let mut samples = Vec::new();
        for id in chosen {
            let dir = cat_dir.join(&id);
            let mut views = BTreeMap::new();
            for e in std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .flatten()
            {
                let p = e.path();
                if p.extension().is_some_and(|x| x == "png") {
                    if let Some(v) = parse_view(&p) {
                        views.insert(v, p);
                    }
                }
            }
            if views.len() != RENDERS_PER_MODEL {
                log::warn!(
                    "model {id}: {} renders, expected {RENDERS_PER_MODEL}",
                    views.len()
                );
            }
            let m = models.len();
            samples.extend(views.keys().map(|&v| (m, v)));
            models.push(ModelEntry { id, dir, views });
        }
        Ok(Self {
            models,
            samples,
            width,
            height,
            policy,
            camera_distance: DEFAULT_CAMERA_DISTANCE,
        })
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn renders_of(&self, model: usize) -> usize {
        self.models[model].views.len()
    }

    fn pose_of(&self, m: &ModelEntry, v: ViewAngle) -> Result<Pose<f64>> {
        let txt = m.views[&v].with_extension("txt");
        if txt.is_file() {
            read_pose(&txt)
        } else {
            Ok(orbit_pose(v, self.camera_distance))
        }
    }

    fn intrinsics(&self, m: &ModelEntry) -> Result<CameraIntrinsics<f64>> {
        let p = m.dir.parent().map(|d| d.join("intrinsics.txt"));
        match p.filter(|p| p.is_file()) {
            Some(p) => crate::geometry::read_intrinsics(&p),
            None => Ok(CameraIntrinsics::from_fov(
                self.width,
                self.height,
                DEFAULT_FOV_DEG,
            )),
        }
    }

    fn load<T: Element>(&self, path: &Path) -> Result<ndarray::Array3<T>> {
        let img: ndarray::Array3<f64> = read_rgb(path)?;
        Ok(resize_bilinear(img.view(), self.height, self.width).mapv(T::of))
    }
}

impl<T: Element> PairSource<T> for ShapeNetDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn pair(&self, index: usize, seed: u64) -> Result<Option<SamplePair<T>>> {
        let Some(&(mi, src)) = self.samples.get(index) else {
            return Ok(None);
        };
        let m = &self.models[mi];
        let available: Vec<ViewAngle> = m.views.keys().copied().collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let Some(tgt) = sample_shapenet_partner(&self.policy, src, &available, &mut rng) else {
            log::warn!("model {}: no partner for view {src:?}", m.id);
            return Ok(None);
        };
        Ok(Some(SamplePair {
            id: format!(
                "{}_{}_{}_{}_{}",
                m.id, src.azimuth, src.elevation, tgt.azimuth, tgt.elevation
            ),
            source: self.load(&m.views[&src])?,
            target: self.load(&m.views[&tgt])?,
            pose_s_to_t: relative_pose(&self.pose_of(m, src)?, &self.pose_of(m, tgt)?).cast(),
            intrinsics: self.intrinsics(m)?.cast(),
            depth_s: None,
            depth_t: None,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_cameras_look_at_origin() {
        for (a, e) in [(0, 0), (40, 20), (-30, 10), (180, 30)] {
            let p = orbit_pose(
                ViewAngle {
                    azimuth: a,
                    elevation: e,
                },
                2.0,
            );
            p.validate().unwrap();
            let o = p.inverse().apply([0.0; 3]);
            assert!(o[0].abs() < 1e-12 && o[1].abs() < 1e-12 && (o[2] - 2.0).abs() < 1e-12);
        }
        let above = orbit_pose(
            ViewAngle {
                azimuth: 0,
                elevation: 30,
            },
            2.0,
        );
        assert!(above.translation[1] < 0.0);
    }

    #[test]
    fn azimuth_step_is_a_yaw() {
        let a = orbit_pose(
            ViewAngle {
                azimuth: 0,
                elevation: 0,
            },
            2.0,
        );
        let b = orbit_pose(
            ViewAngle {
                azimuth: 30,
                elevation: 0,
            },
            2.0,
        );
        assert!((relative_pose(&a, &b).rotation_angle() - 30f64.to_radians()).abs() < 1e-12);
    }
}
