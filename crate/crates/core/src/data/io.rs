//! Image and depth-map files, and the on-disk layout of synthetic scenes.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use super::{InMemoryPairs, SamplePair};
use crate::geometry::{read_intrinsics, read_pose, write_intrinsics, write_pose};
use crate::{Element, Error, Result};

fn img_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Reads an image as `[3, h, w]` RGB in `[0, 1]`.
pub fn read_rgb<T: Element>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0),
    ))
}

pub fn write_rgb<T: Element>(path: &Path, rgb: ArrayView3<T>) -> Result<()> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(img_err(path, format!("expected 3 channels, got {c}")));
    }
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (rgb[[ch, y as usize, x as usize]]
                .to_f64_lossy()
                .clamp(0.0, 1.0)
                * 255.0)
                .round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| img_err(path, e))
}

/// Reads a 16-bit PNG of depth in millimetres; `0` stays `0` (unknown).
pub fn read_depth_png<T: Element>(path: &Path) -> Result<Array2<T>> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        T::of(img.get_pixel(x as u32, y as u32)[0] as f64 / 1000.0)
    }))
}

/// Writes depth as 16-bit millimetres; values outside `(0, 65.535]` metres
/// are stored as `0`.
pub fn write_depth_png<T: Element>(path: &Path, depth: ArrayView2<T>) -> Result<()> {
    let (h, w) = depth.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mm = (depth[[y as usize, x as usize]].to_f64_lossy() * 1000.0).round();
        Luma([if mm > 0.0 && mm <= 65535.0 {
            mm as u16
        } else {
            0
        }])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| img_err(path, e))
}

/// Colour-mapped inverse depth for viewing.
pub fn write_depth_preview<T: Element>(path: &Path, depth: ArrayView2<T>) -> Result<()> {
    let inv: Vec<f64> = depth
        .iter()
        .map(|d| {
            let d = d.to_f64_lossy();
            if d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        })
        .collect();
    let hi = inv.iter().copied().fold(0.0, f64::max).max(1e-12);
    let (h, w) = depth.dim();
    let rgb = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let t = inv[y * w + x] / hi;
        match c {
            0 => (1.5 * t).min(1.0),
            1 => (1.5 * t - 0.5).clamp(0.0, 1.0),
            _ => (0.6 - t).abs(),
        }
    });
    write_rgb(path, rgb.view())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Bilinear resize of a `[c, h, w]` array (half-pixel centres, clamped
/// borders).
pub fn resize_bilinear<T: Element>(img: ArrayView3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, s: f64, n: usize| {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let (y0, y1, fy) = taps(y, sy, h);
        let (x0, x1, fx) = taps(x, sx, w);
        let v = |yy: usize, xx: usize| img[[ch, yy, xx]].to_f64_lossy();
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        T::of(top * (1.0 - fy) + bot * fy)
    })
}

/// Largest centred window of aspect `out_w / out_h`: `(left, top, w, h)`.
pub fn center_crop_box(
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> (usize, usize, usize, usize) {
    let target = out_w as f64 / out_h as f64;
    if w as f64 / h as f64 > target {
        let cw = ((h as f64 * target).round() as usize).clamp(1, w);
        ((w - cw) / 2, 0, cw, h)
    } else {
        let ch = ((w as f64 / target).round() as usize).clamp(1, h);
        (0, (h - ch) / 2, w, ch)
    }
}

const SOURCE_PNG: &str = "source.png";
const TARGET_PNG: &str = "target.png";
const DEPTH_S_PNG: &str = "depth_source.png";
const DEPTH_T_PNG: &str = "depth_target.png";
const POSE_TXT: &str = "pose_source_to_target.txt";
const INTRINSICS_TXT: &str = "intrinsics.txt";

/// Writes each pair to `<dir>/<id>/` as PNG images, 16-bit millimetre depth
/// and text pose / intrinsics.
pub fn write_pairs<T: Element>(dir: &Path, pairs: &[SamplePair<T>]) -> Result<()> {
    for p in pairs {
        let d = dir.join(&p.id);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write_rgb(&d.join(SOURCE_PNG), p.source.view())?;
        write_rgb(&d.join(TARGET_PNG), p.target.view())?;
        if let Some(ds) = &p.depth_s {
            write_depth_png(&d.join(DEPTH_S_PNG), ds.view())?;
        }
        if let Some(dt) = &p.depth_t {
            write_depth_png(&d.join(DEPTH_T_PNG), dt.view())?;
        }
        write_pose(&d.join(POSE_TXT), &p.pose_s_to_t)?;
        write_intrinsics(&d.join(INTRINSICS_TXT), &p.intrinsics)?;
    }
    Ok(())
}

/// Reads every pair directory under `dir`, sorted by name.
pub fn read_pairs<T: Element>(dir: &Path) -> Result<InMemoryPairs<T>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(POSE_TXT).is_file())
        .collect();
    dirs.sort();
    let mut pairs = Vec::with_capacity(dirs.len());
    for d in dirs {
        let opt_depth = |name: &str| -> Result<Option<Array2<T>>> {
            let p = d.join(name);
            if p.is_file() {
                read_depth_png(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        let pair = SamplePair {
            id: d.file_name().unwrap().to_string_lossy().into_owned(),
            source: read_rgb(&d.join(SOURCE_PNG))?,
            target: read_rgb(&d.join(TARGET_PNG))?,
            pose_s_to_t: read_pose(&d.join(POSE_TXT))?,
            intrinsics: read_intrinsics(&d.join(INTRINSICS_TXT))?,
            depth_s: opt_depth(DEPTH_S_PNG)?,
            depth_t: opt_depth(DEPTH_T_PNG)?,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(InMemoryPairs { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| {
            ((c * 35 + y * 7 + x) % 256) as f64 / 255.0
        });
        let p = dir.path().join("a/b.png");
        write_rgb(&p, rgb.view()).unwrap();
        let back: Array3<f64> = read_rgb(&p).unwrap();
        assert!(back.iter().zip(&rgb).all(|(a, b)| (a - b).abs() < 1e-9));

        let depth = Array2::from_shape_fn((5, 7), |(y, x)| 0.5 + 0.123 * (y * 7 + x) as f64);
        let q = dir.path().join("d.png");
        write_depth_png(&q, depth.view()).unwrap();
        let back: Array2<f64> = read_depth_png(&q).unwrap();
        assert!(back
            .iter()
            .zip(&depth)
            .all(|(a, b)| (a - b).abs() <= 0.0005 + 1e-12));
    }

    #[test]
    fn crop_box() {
        assert_eq!(center_crop_box(375, 1242, 256, 256), (433, 0, 375, 375));
        assert_eq!(center_crop_box(100, 50, 32, 64), (0, 37, 50, 25));
    }

    #[test]
    fn resize_constant_and_identity() {
        let a = Array3::from_elem((3, 9, 13), 0.25);
        assert!(resize_bilinear(a.view(), 4, 4)
            .iter()
            .all(|&v| (v - 0.25f64).abs() < 1e-15));
        let b = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        assert_eq!(resize_bilinear(b.view(), 4, 4), b);
    }
}
