//! KITTI raw (synced + rectified) loader with oxts poses and LiDAR depth.
//!
//! Layout under the root:
//! `<date>/calib_{cam_to_cam,velo_to_cam,imu_to_velo}.txt`,
//! `<date>/<drive>/image_02/data/<frame>.png`,
//! `<date>/<drive>/oxts/data/<frame>.txt`,
//! `<date>/<drive>/velodyne_points/data/<frame>.bin`, and split lists in
//! `splits/eigen_{train,test}_files.txt` with lines
//! `<date>/<drive> <frame> l` (or a path to the left colour image).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{center_crop_box, read_rgb, resize_bilinear};
use super::{relative_pose, sample_kitti_partner, PairPolicy, PairSource, SamplePair};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::{Element, Error, Result};

const EARTH_RADIUS: f64 = 6378137.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KittiSplit {
    EigenTrain,
    EigenTestNvs,
}

impl KittiSplit {
    fn file_name(self) -> &'static str {
        match self {
            KittiSplit::EigenTrain => "eigen_train_files.txt",
            KittiSplit::EigenTestNvs => "eigen_test_files.txt",
        }
    }
}

/// Parses `key: v0 v1 ...` calibration lines; non-numeric entries are
/// skipped.
pub fn parse_calib(text: &str) -> HashMap<String, Vec<f64>> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once(':')?;
            let nums: Option<Vec<f64>> = v.split_whitespace().map(|t| t.parse().ok()).collect();
            Some((k.trim().to_string(), nums?))
        })
        .collect()
}

fn rt_pose(r: &[f64], t: &[f64]) -> Result<Pose<f64>> {
    if r.len() != 9 || t.len() != 3 {
        return Err(Error::Data("calibration R/T has the wrong length".into()));
    }
    Pose::new(
        [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
        [t[0], t[1], t[2]],
    )
}

/// Rectified left-colour camera model of one recording day.
#[derive(Debug, Clone)]
pub struct KittiCalib {
    pub intrinsics: CameraIntrinsics<f64>,
    /// Velodyne to rectified camera-2 coordinates.
    pub cam_from_velo: Pose<f64>,
    /// IMU to rectified camera-2 coordinates.
    pub cam_from_imu: Pose<f64>,
}

impl KittiCalib {
    pub fn load(date_dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<HashMap<String, Vec<f64>>> {
            let p = date_dir.join(name);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(parse_calib(&text))
        };
        let cam = read("calib_cam_to_cam.txt")?;
        let velo = read("calib_velo_to_cam.txt")?;
        let imu = read("calib_imu_to_velo.txt")?;
        let missing = |k: &str| {
            Error::Data(format!(
                "{}: calibration key `{k}` missing",
                date_dir.display()
            ))
        };
        let p = cam
            .get("P_rect_02")
            .filter(|v| v.len() == 12)
            .ok_or_else(|| missing("P_rect_02"))?;
        let rr = cam.get("R_rect_00").ok_or_else(|| missing("R_rect_00"))?;
        let intrinsics = CameraIntrinsics::new(p[0], p[5], p[2], p[6])?;
        let tz = p[11];
        let rect = rt_pose(
            rr,
            &[(p[3] - p[2] * tz) / p[0], (p[7] - p[6] * tz) / p[5], tz],
        )?;
        let velo_to_cam0 = rt_pose(
            velo.get("R").ok_or_else(|| missing("R"))?,
            velo.get("T").ok_or_else(|| missing("T"))?,
        )?;
        let imu_to_velo = rt_pose(
            imu.get("R").ok_or_else(|| missing("R"))?,
            imu.get("T").ok_or_else(|| missing("T"))?,
        )?;
        let cam_from_velo = rect.compose(&velo_to_cam0);
        Ok(Self {
            intrinsics,
            cam_from_velo,
            cam_from_imu: cam_from_velo.compose(&imu_to_velo),
        })
    }
}

/// IMU-to-world pose from an oxts record, Mercator-projected with `scale`
/// (`cos` of the reference latitude).
pub fn oxts_to_pose(values: &[f64], scale: f64) -> Result<Pose<f64>> {
    if values.len() < 6 {
        return Err(Error::Data(format!(
            "oxts record has {} values",
            values.len()
        )));
    }
    let (lat, lon, alt, roll, pitch, yaw) = (
        values[0], values[1], values[2], values[3], values[4], values[5],
    );
    let tx = scale * lon.to_radians() * EARTH_RADIUS;
    let ty = scale * EARTH_RADIUS * ((90.0 + lat).to_radians() / 2.0).tan().ln();
    let rx = Pose::from_axis_angle([1.0, 0.0, 0.0], roll, [0.0; 3]);
    let ry = Pose::from_axis_angle([0.0, 1.0, 0.0], pitch, [0.0; 3]);
    let rz = Pose::from_axis_angle([0.0, 0.0, 1.0], yaw, [0.0; 3]);
    let r = rz.compose(&ry).compose(&rx);
    Ok(Pose {
        rotation: r.rotation,
        translation: [tx, ty, alt],
    })
}

fn parse_oxts(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Velodyne points `(x, y, z)` from a `float32 x y z r` binary file.
pub fn read_velodyne(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// Sparse depth image: each point projected to its nearest pixel, keeping
/// the closest point per pixel; `0` elsewhere.
pub fn project_points(
    points: &[[f64; 3]],
    cam_from_velo: &Pose<f64>,
    k: &CameraIntrinsics<f64>,
    height: usize,
    width: usize,
) -> Array2<f64> {
    let mut depth = Array2::zeros((height, width));
    for p in points {
        let c = cam_from_velo.apply(*p);
        if c[2] <= 0.1 {
            continue;
        }
        let [u, v] = k.project(c);
        let (x, y) = (u.round(), v.round());
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            continue;
        }
        let d = &mut depth[[y as usize, x as usize]];
        if *d == 0.0 || c[2] < *d {
            *d = c[2];
        }
    }
    depth
}

#[derive(Debug)]
struct Drive {
    dir: PathBuf,
    calib: KittiCalib,
    /// Frame number -> camera-to-world pose.
    poses: BTreeMap<usize, Pose<f64>>,
}

/// One KITTI split: sources from the split list, partners from the same
/// drive under the pair policy.
pub struct KittiDataset {
    drives: HashMap<String, Drive>,
    samples: Vec<(String, usize)>,
    width: usize,
    height: usize,
    policy: PairPolicy,
}

fn parse_split_line(line: &str) -> Option<(String, usize)> {
    let mut it = line.split_whitespace();
    let first = it.next()?;
    if let Some(idx) = first.find("/image_0") {
        let frame = Path::new(first).file_stem()?.to_str()?.parse().ok()?;
        return Some((first[..idx].to_string(), frame));
    }
    Some((
        first.trim_end_matches('/').to_string(),
        it.next()?.parse().ok()?,
    ))
}

impl KittiDataset {
    /// Indexes the split. A missing root or split list is an error; drives
    /// without calibration or frames without oxts records are skipped with a
    /// warning.
    pub fn open(
        root: &Path,
        split: KittiSplit,
        width: usize,
        height: usize,
        policy: PairPolicy,
    ) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "KITTI root {} does not exist",
                root.display()
            )));
        }
        let list = root.join("splits").join(split.file_name());
        let text = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        let mut drives: HashMap<String, Drive> = HashMap::new();
        let mut bad_drives = Vec::new();
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Some((drive, frame)) = parse_split_line(line) else {
                log::warn!("{}: cannot parse split line `{line}`", list.display());
                continue;
            };
            if bad_drives.contains(&drive) {
                continue;
            }
            if !drives.contains_key(&drive) {
                match Self::load_drive(root, &drive) {
                    Ok(d) => {
                        drives.insert(drive.clone(), d);
                    }
                    Err(e) => {
                        log::warn!("skipping drive {drive}: {e}");
                        bad_drives.push(drive);
                        continue;
                    }
                }
            }
            if drives[&drive].poses.contains_key(&frame) {
                samples.push((drive, frame));
            } else {
                log::warn!("skipping {drive} frame {frame}: no oxts record");
            }
        }
        Ok(Self {
            drives,
            samples,
            width,
            height,
            policy,
        })
    }

    fn load_drive(root: &Path, drive: &str) -> Result<Drive> {
        let dir = root.join(drive);
        let date_dir = dir
            .parent()
            .ok_or_else(|| Error::Data(format!("drive path `{drive}` has no date directory")))?;
        let calib = KittiCalib::load(date_dir)?;
        let oxts_dir = dir.join("oxts").join("data");
        let entries = std::fs::read_dir(&oxts_dir).map_err(|e| Error::io(&oxts_dir, e))?;
        let mut records = BTreeMap::new();
        for e in entries.flatten() {
            let p = e.path();
            let Some(frame) = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            match parse_oxts(&p) {
                Ok(v) if v.len() >= 6 => {
                    records.insert(frame, v);
                }
                _ => log::warn!("skipping malformed oxts record {}", p.display()),
            }
        }
        let scale = records
            .values()
            .next()
            .map(|v| v[0].to_radians().cos())
            .ok_or_else(|| Error::Data(format!("{}: no oxts records", oxts_dir.display())))?;
        let imu_from_cam = calib.cam_from_imu.inverse();
        let poses = records
            .into_iter()
            .map(|(f, v)| Ok((f, oxts_to_pose(&v, scale)?.compose(&imu_from_cam))))
            .collect::<Result<_>>()?;
        Ok(Drive { dir, calib, poses })
    }

    fn frame_path(drive: &Drive, sub: &str, frame: usize, ext: &str) -> PathBuf {
        drive
            .dir
            .join(sub)
            .join("data")
            .join(format!("{frame:010}.{ext}"))
    }

    /// Intrinsics after the centre crop and resize applied to images of
    /// size `h x w`.
    fn output_intrinsics(
        &self,
        k: &CameraIntrinsics<f64>,
        h: usize,
        w: usize,
    ) -> (CameraIntrinsics<f64>, (usize, usize, usize, usize)) {
        let b = center_crop_box(h, w, self.height, self.width);
        let k = k.cropped(b.0 as f64, b.1 as f64).rescaled(
            self.width as f64 / b.2 as f64,
            self.height as f64 / b.3 as f64,
        );
        (k, b)
    }

    fn load_view<T: Element>(
        &self,
        drive: &Drive,
        frame: usize,
    ) -> Result<(ndarray::Array3<T>, CameraIntrinsics<f64>, Option<Array2<T>>)> {
        let img: ndarray::Array3<f64> =
            read_rgb(&Self::frame_path(drive, "image_02", frame, "png"))?;
        let (_, h, w) = img.dim();
        let (k, (l, t, cw, ch)) = self.output_intrinsics(&drive.calib.intrinsics, h, w);
        let crop = img.slice(s![.., t..t + ch, l..l + cw]);
        let out = resize_bilinear(crop, self.height, self.width).mapv(T::of);
        let velo = Self::frame_path(drive, "velodyne_points", frame, "bin");
        let depth = if velo.is_file() {
            let pts = read_velodyne(&velo)?;
            Some(
                project_points(
                    &pts,
                    &drive.calib.cam_from_velo,
                    &k,
                    self.height,
                    self.width,
                )
                .mapv(T::of),
            )
        } else {
            None
        };
        Ok((out, k, depth))
    }
}

impl<T: Element> PairSource<T> for KittiDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn pair(&self, index: usize, seed: u64) -> Result<Option<SamplePair<T>>> {
        let Some((name, frame)) = self.samples.get(index) else {
            return Ok(None);
        };
        let drive = &self.drives[name];
        let frames: Vec<usize> = drive.poses.keys().copied().collect();
        let poses: Vec<Pose<f64>> = drive.poses.values().copied().collect();
        let pos = frames
            .binary_search(frame)
            .expect("indexed frame has a pose");
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let Some(tpos) = sample_kitti_partner(&self.policy, pos, &poses, &mut rng) else {
            log::warn!("{name} frame {frame}: no partner frame within the window");
            return Ok(None);
        };
        let (src, k, ds) = self.load_view::<T>(drive, *frame)?;
        let (tgt, _, dt) = self.load_view::<T>(drive, frames[tpos])?;
        Ok(Some(SamplePair {
            id: format!(
                "{}_{:010}_{:010}",
                name.replace('/', "_"),
                frame,
                frames[tpos]
            ),
            source: src,
            target: tgt,
            pose_s_to_t: relative_pose(&poses[pos], &poses[tpos]).cast(),
            intrinsics: k.cast(),
            depth_s: ds,
            depth_t: dt,
        }))
    }
}
