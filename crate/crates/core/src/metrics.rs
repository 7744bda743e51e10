//! Image-quality and depth-accuracy metrics, plus the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize, Serializer};

use crate::{Element, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ser_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn de_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) => s.parse::<f64>().map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub l1: f64,
    pub ssim: f64,
    /// `+inf` for identical inputs.
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub psnr: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub silog: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// A learned perceptual distance network.
pub trait LpipsNetwork {
    /// Distance between two `[3, h, w]` images in `[0, 1]`.
    fn distance(&self, pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> f64;
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn to_f64<T: Element>(a: ArrayView3<T>) -> ndarray::Array3<f64> {
    a.mapv(|v| v.to_f64_lossy())
}

/// L1, SSIM and PSNR of `[c, h, w]` images; LPIPS only when a network is
/// supplied.
pub fn image_metrics<T: Element>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    lpips_net: Option<&dyn LpipsNetwork>,
) -> Result<ImageMetrics> {
    check_same("image_metrics", pred.shape(), gt.shape())?;
    let p = to_f64(pred);
    let g = to_f64(gt);
    let n = p.len().max(1) as f64;
    let l1 = p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mse = p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(ImageMetrics {
        l1,
        ssim: ssim_f64(p.view(), g.view()),
        psnr: psnr_from_mse(mse),
        lpips: lpips_net.map(|net| net.distance(p.view(), g.view())),
    })
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr<T: Element>(pred: ArrayView3<T>, gt: ArrayView3<T>) -> Result<f64> {
    check_same("psnr", pred.shape(), gt.shape())?;
    let n = pred.len().max(1) as f64;
    let mse = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Window size used for an `h x w` image: 11, or the largest odd size that
/// fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w).max(1);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable "valid" filtering with kernel `k`.
fn filter_valid(x: ArrayView2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let s = k.len();
    let (oh, ow) = (h + 1 - s, w + 1 - s);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x0 in 0..ow {
            rows[[y, x0]] = (0..s).map(|i| k[i] * x[[y, x0 + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[[y0, x0]] = (0..s).map(|i| k[i] * rows[[y0 + i, x0]]).sum();
        }
    }
    out
}

fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>, k: &[f64]) -> f64 {
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid((&a * &a).view(), k);
    let bb = filter_valid((&b * &b).view(), k);
    let ab = filter_valid((&a * &b).view(), k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / mu_a.len() as f64
}

fn ssim_f64(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let (c, h, w) = a.dim();
    let k = gaussian_kernel(ssim_window(h, w), SSIM_SIGMA);
    let sum: f64 = (0..c)
        .map(|ch| {
            ssim_channel(
                a.index_axis(ndarray::Axis(0), ch),
                b.index_axis(ndarray::Axis(0), ch),
                &k,
            )
        })
        .sum();
    sum / c as f64
}

/// Gaussian-windowed SSIM over fully contained windows, averaged over
/// channels.
pub fn ssim<T: Element>(pred: ArrayView3<T>, gt: ArrayView3<T>) -> Result<f64> {
    check_same("ssim", pred.shape(), gt.shape())?;
    Ok(ssim_f64(to_f64(pred).view(), to_f64(gt).view()))
}

/// Eigen depth metrics over pixels where `mask` is set.
pub fn depth_metrics<T: Element>(
    pred: ArrayView2<T>,
    gt: ArrayView2<T>,
    mask: ArrayView2<bool>,
) -> Result<DepthMetrics> {
    check_same("depth_metrics", pred.shape(), gt.shape())?;
    check_same("depth_metrics", pred.shape(), mask.shape())?;
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut sle, mut sd, mut sd2) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((p, g), &m) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
        if !m {
            continue;
        }
        let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
        if !(p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite()) {
            return Err(Error::Data(format!(
                "depth metrics need positive finite depths on the mask (pred {p}, gt {g})"
            )));
        }
        n += 1;
        let diff = g - p;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        let d = p.ln() - g.ln();
        sle += d * d;
        sd += d;
        sd2 += d * d;
        let ratio = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    let mean_d = sd / nf;
    Ok(DepthMetrics {
        silog: ((sd2 / nf - mean_d * mean_d).max(0.0)).sqrt() * 100.0,
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (sle / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// Evaluation depth range; predictions are clamped into it and ground truth
/// outside it is masked out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub const KITTI: DepthRange = DepthRange {
        min: 1e-3,
        max: 80.0,
    };

    /// Clamps `pred` into the range and returns it with the validity mask
    /// `min < gt < max`.
    pub fn prepare<T: Element>(
        &self,
        pred: ArrayView2<T>,
        gt: ArrayView2<T>,
    ) -> (Array2<f64>, Array2<bool>) {
        let p = pred.mapv(|v| v.to_f64_lossy().clamp(self.min, self.max));
        let m = gt.mapv(|v| {
            let g = v.to_f64_lossy();
            g > self.min && g < self.max
        });
        (p, m)
    }
}

/// Metrics of one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: Option<ImageMetrics>,
    pub depth: Option<DepthMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub image: Option<ImageMetrics>,
    pub depth: Option<DepthMetrics>,
}

/// Per-sample records and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub samples: Vec<SampleRecord>,
    pub aggregate: Aggregate,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "L1", "SSIM", "PSNR", "LPIPS", "SILog", "AbsRel", "SqRel", "RMSE", "RMSElog", "d1", "d2", "d3",
];

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    /// Aggregates are plain means. PSNR averages the finite values only
    /// (infinite when every sample is an exact match); LPIPS is reported
    /// only when present for every sample.
    pub fn new(name: impl Into<String>, samples: Vec<SampleRecord>) -> Self {
        let imgs: Vec<&ImageMetrics> = samples.iter().filter_map(|s| s.image.as_ref()).collect();
        let deps: Vec<&DepthMetrics> = samples.iter().filter_map(|s| s.depth.as_ref()).collect();
        let image = (!imgs.is_empty()).then(|| ImageMetrics {
            l1: mean(imgs.iter().map(|m| m.l1)).unwrap_or(0.0),
            ssim: mean(imgs.iter().map(|m| m.ssim)).unwrap_or(0.0),
            psnr: mean(imgs.iter().map(|m| m.psnr).filter(|p| p.is_finite()))
                .unwrap_or(f64::INFINITY),
            lpips: if imgs.iter().all(|m| m.lpips.is_some()) {
                mean(imgs.iter().filter_map(|m| m.lpips))
            } else {
                None
            },
        });
        let depth = (!deps.is_empty()).then(|| {
            let f = |g: fn(&DepthMetrics) -> f64| mean(deps.iter().map(|m| g(m))).unwrap_or(0.0);
            DepthMetrics {
                silog: f(|m| m.silog),
                abs_rel: f(|m| m.abs_rel),
                sq_rel: f(|m| m.sq_rel),
                rmse: f(|m| m.rmse),
                rmse_log: f(|m| m.rmse_log),
                delta1: f(|m| m.delta1),
                delta2: f(|m| m.delta2),
                delta3: f(|m| m.delta3),
            }
        });
        Self {
            name: name.into(),
            aggregate: Aggregate {
                count: samples.len(),
                image,
                depth,
            },
            samples,
        }
    }

    fn row(image: Option<&ImageMetrics>, depth: Option<&DepthMetrics>) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let i = image;
        let d = depth;
        vec![
            f(i.map(|m| m.l1)),
            f(i.map(|m| m.ssim)),
            f(i.map(|m| m.psnr)),
            f(i.and_then(|m| m.lpips)),
            f(d.map(|m| m.silog)),
            f(d.map(|m| m.abs_rel)),
            f(d.map(|m| m.sq_rel)),
            f(d.map(|m| m.rmse)),
            f(d.map(|m| m.rmse_log)),
            f(d.map(|m| m.delta1)),
            f(d.map(|m| m.delta2)),
            f(d.map(|m| m.delta3)),
        ]
    }

    /// Fixed-width table: one row per sample, then the mean.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, Vec<String>)> = self
            .samples
            .iter()
            .map(|s| (s.id.clone(), Self::row(s.image.as_ref(), s.depth.as_ref())))
            .collect();
        rows.push((
            "mean".into(),
            Self::row(self.aggregate.image.as_ref(), self.aggregate.depth.as_ref()),
        ));
        let idw = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<idw$}", "sample");
        for c in REPORT_COLUMNS {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
        for (id, cells) in rows {
            let _ = write!(out, "{id:<idw$}");
            for c in cells {
                let _ = write!(out, " {c:>9}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.txt` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
