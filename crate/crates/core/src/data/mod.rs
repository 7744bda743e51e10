//! Sample pairs, pair-sampling policies, dataset loaders and the synthetic
//! scene generator.

pub mod io;
pub mod kitti;
pub mod shapenet;
pub mod synthetic;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::{Element, Error, Result};

/// A source/target image pair with the relative pose between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair<T> {
    pub id: String,
    /// `[3, h, w]` in `[0, 1]`.
    pub source: Array3<T>,
    pub target: Array3<T>,
    /// Maps source-camera coordinates to target-camera coordinates.
    pub pose_s_to_t: Pose<T>,
    pub intrinsics: CameraIntrinsics<T>,
    /// Ground-truth depth, `0` where unknown.
    pub depth_s: Option<Array2<T>>,
    pub depth_t: Option<Array2<T>>,
}

impl<T: Element> SamplePair<T> {
    pub fn height(&self) -> usize {
        self.source.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.source.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.source.shape();
        if s[0] != 3 || self.target.shape() != s {
            return Err(Error::Data(format!(
                "{}: image shapes {:?} / {:?}",
                self.id,
                s,
                self.target.shape()
            )));
        }
        self.pose_s_to_t.validate()?;
        for d in [&self.depth_s, &self.depth_t].into_iter().flatten() {
            if d.shape() != &s[1..] {
                return Err(Error::Data(format!(
                    "{}: depth shape {:?}",
                    self.id,
                    d.shape()
                )));
            }
            if d.iter().any(|v| !v.is_finite() || *v < T::zero()) {
                return Err(Error::Data(format!(
                    "{}: negative or non-finite depth",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// The same pair seen in the other direction.
    pub fn reversed(&self) -> Self {
        Self {
            id: format!("{}-rev", self.id),
            source: self.target.clone(),
            target: self.source.clone(),
            pose_s_to_t: self.pose_s_to_t.inverse(),
            intrinsics: self.intrinsics,
            depth_s: self.depth_t.clone(),
            depth_t: self.depth_s.clone(),
        }
    }
}

/// Relative pose between two absolute camera-to-world poses:
/// `T_s→t = invert(T_world_t) ∘ T_world_s`.
pub fn relative_pose<T: Element>(world_from_s: &Pose<T>, world_from_t: &Pose<T>) -> Pose<T> {
    world_from_t.inverse().compose(world_from_s)
}

/// How a target view is chosen for a given source view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairPolicy {
    /// Azimuth offset drawn from `-max..=max` in `step` increments; target
    /// elevation drawn freely from the rendered elevations in
    /// `[0, max_elevation]`.
    ShapeNet {
        max_azimuth_deg: i32,
        step_deg: i32,
        max_elevation_deg: i32,
    },
    /// Target frame within `window` frames of the source (never the same
    /// frame), excluding pairs that moved less than `min_translation`.
    Kitti { window: usize, min_translation: f64 },
}

impl PairPolicy {
    pub const SHAPENET: PairPolicy = PairPolicy::ShapeNet {
        max_azimuth_deg: 40,
        step_deg: 10,
        max_elevation_deg: 40,
    };
    pub const KITTI: PairPolicy = PairPolicy::Kitti {
        window: 7,
        min_translation: 0.5,
    };

    /// Azimuth offsets a ShapeNet policy may produce.
    pub fn azimuth_offsets(&self) -> Vec<i32> {
        match *self {
            PairPolicy::ShapeNet {
                max_azimuth_deg,
                step_deg,
                ..
            } => (-max_azimuth_deg / step_deg..=max_azimuth_deg / step_deg)
                .map(|k| k * step_deg)
                .collect(),
            PairPolicy::Kitti { .. } => Vec::new(),
        }
    }
}

/// A rendered view of an object: azimuth and elevation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewAngle {
    pub azimuth: i32,
    pub elevation: i32,
}

/// Picks a partner view for `source` among `available` under a ShapeNet
/// policy. `None` when no rendered view fits the window.
pub fn sample_shapenet_partner<R: Rng + ?Sized>(
    policy: &PairPolicy,
    source: ViewAngle,
    available: &[ViewAngle],
    rng: &mut R,
) -> Option<ViewAngle> {
    let PairPolicy::ShapeNet {
        max_elevation_deg, ..
    } = *policy
    else {
        return None;
    };
    let candidates: Vec<ViewAngle> = policy
        .azimuth_offsets()
        .into_iter()
        .flat_map(|d| {
            let az = (source.azimuth + d).rem_euclid(360);
            available
                .iter()
                .copied()
                .filter(move |v| v.azimuth == az && (0..=max_elevation_deg).contains(&v.elevation))
        })
        .filter(|v| *v != source)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())])
}

/// Picks a partner frame for `source` in a sequence of camera-to-world
/// poses under a KITTI policy.
pub fn sample_kitti_partner<T: Element, R: Rng + ?Sized>(
    policy: &PairPolicy,
    source: usize,
    world_from_cam: &[Pose<T>],
    rng: &mut R,
) -> Option<usize> {
    let PairPolicy::Kitti {
        window,
        min_translation,
    } = *policy
    else {
        return None;
    };
    let lo = source.saturating_sub(window);
    let hi = (source + window).min(world_from_cam.len().saturating_sub(1));
    let candidates: Vec<usize> = (lo..=hi)
        .filter(|&t| t != source)
        .filter(|&t| {
            relative_pose(&world_from_cam[source], &world_from_cam[t])
                .translation_norm()
                .to_f64_lossy()
                >= min_translation
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())])
}

/// Random access to sample pairs.
pub trait PairSource<T: Element> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair number `index`. Partner choice, where the dataset has one, is
    /// drawn from `seed`. `None` means the sample has no valid partner and is
    /// skipped.
    fn pair(&self, index: usize, seed: u64) -> Result<Option<SamplePair<T>>>;
}

/// Fixed list of pairs held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryPairs<T> {
    pub pairs: Vec<SamplePair<T>>,
}

impl<T: Element> PairSource<T> for InMemoryPairs<T> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, index: usize, _seed: u64) -> Result<Option<SamplePair<T>>> {
        Ok(self.pairs.get(index).cloned())
    }
}

/// Deterministic shuffled split of `n` items into `(train, held_out)` with
/// `held_out_fraction` of them (at least one when `n > 1`) held out.
pub fn split_indices(n: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut k = (n as f64 * held_out_fraction).round() as usize;
    if n > 1 && held_out_fraction > 0.0 {
        k = k.clamp(1, n - 1);
    }
    let held = idx.split_off(n - k.min(n));
    let mut train = idx;
    train.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    (train, held)
}

/// Datasets a run can be pointed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    ShapenetChairs,
    ShapenetCars,
    Kitti,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Synthetic,
        DatasetKind::ShapenetChairs,
        DatasetKind::ShapenetCars,
        DatasetKind::Kitti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::ShapenetChairs => "shapenet-chairs",
            DatasetKind::ShapenetCars => "shapenet-cars",
            DatasetKind::Kitti => "kitti",
        }
    }

    /// Opens the train or test side of the dataset at `root`, producing
    /// `width` x `height` pairs. Synthetic data is read from `root` when
    /// given (as written by [`io::write_pairs`]) and generated otherwise.
    pub fn open<T: Element>(
        self,
        root: Option<&std::path::Path>,
        test: bool,
        width: usize,
        height: usize,
        synthetic: (&synthetic::SyntheticConfig, usize, u64),
    ) -> Result<Box<dyn PairSource<T>>> {
        let need_root = || {
            root.ok_or_else(|| {
                Error::Config(format!("dataset `{}` needs a data root", self.name()))
            })
        };
        Ok(match self {
            DatasetKind::Synthetic => match root {
                Some(r) => Box::new(io::read_pairs::<T>(r)?),
                None => {
                    let (cfg, n, seed) = synthetic;
                    let cfg = synthetic::SyntheticConfig {
                        width,
                        height,
                        ..cfg.clone()
                    };
                    Box::new(InMemoryPairs {
                        pairs: synthetic::generate_pairs(&cfg, n, seed)?,
                    })
                }
            },
            DatasetKind::ShapenetChairs | DatasetKind::ShapenetCars => {
                let cat = if self == DatasetKind::ShapenetChairs {
                    shapenet::Category::Chairs
                } else {
                    shapenet::Category::Cars
                };
                let split = if test {
                    shapenet::Split::Test
                } else {
                    shapenet::Split::Train
                };
                Box::new(shapenet::ShapeNetDataset::open(
                    need_root()?,
                    cat,
                    split,
                    width,
                    height,
                    PairPolicy::SHAPENET,
                )?)
            }
            DatasetKind::Kitti => {
                let split = if test {
                    kitti::KittiSplit::EigenTestNvs
                } else {
                    kitti::KittiSplit::EigenTrain
                };
                Box::new(kitti::KittiDataset::open(
                    need_root()?,
                    split,
                    width,
                    height,
                    PairPolicy::KITTI,
                )?)
            }
        })
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{s}`")))
    }
}
