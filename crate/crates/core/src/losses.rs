//! Training objectives: multi-scale reconstruction, photometric
//! reprojection, perceptual, edge-aware smoothness and depth consistency.

use serde::{Deserialize, Serialize};
use viewsynth_tensor::{Element, Graph, Var};

use crate::warp::WarpOutput;
use crate::{Error, Result};

/// Weights of the five loss terms. Smoothness is weighted once and applied
/// to both the source and the target depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
            delta: 0.1,
            omega: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta, self.omega];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar values of every term of one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub photo: f64,
    pub vgg: f64,
    pub smooth_s: f64,
    pub smooth_t: f64,
    pub skip: f64,
    pub total: f64,
}

impl LossReport {
    /// `α recon + β photo + γ vgg + δ (smooth_s + smooth_t) + ω skip`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.recon
            + w.beta * self.photo
            + w.gamma * self.vgg
            + w.delta * (self.smooth_s + self.smooth_t)
            + w.omega * self.skip
    }
}

/// Frozen feature extractor for the perceptual loss.
pub trait PerceptualExtractor<T: Element> {
    /// Feature maps compared by the loss, for a `[b, 3, h, w]` image in
    /// `[0, 1]`.
    fn features<'g>(&self, graph: &'g Graph<T>, image: Var<'g, T>) -> Vec<Var<'g, T>>;
}

fn hw(v: &Var<'_, impl Element>) -> (usize, usize) {
    let s = v.shape();
    (s[2], s[3])
}

/// Resamples `[b, c, h, w]` to `h x w`: block averaging for integer
/// reduction factors, bilinear otherwise.
pub fn downsample_to<'g, T: Element>(x: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let (sh, sw) = hw(&x);
    if (sh, sw) == (h, w) {
        return x;
    }
    if sh % h == 0 && sw % w == 0 && sh / h == sw / w {
        let mut f = sh / h;
        let mut y = x;
        while f > 1 && f % 2 == 0 {
            y = y.avg_pool(2);
            f /= 2;
        }
        if f > 1 {
            y = y.avg_pool(f);
        }
        y
    } else {
        x.resize_bilinear(h, w)
    }
}

/// Sum over levels of the mean absolute error between each level,
/// bilinearly upsampled to full resolution, and `target`.
pub fn recon_loss<'g, T: Element>(pred: &[Var<'g, T>], target: Var<'g, T>) -> Result<Var<'g, T>> {
    let first = pred
        .first()
        .ok_or_else(|| Error::shape("recon_loss", "empty pyramid"))?;
    let (h, w) = hw(&target);
    if hw(first) != (h, w) {
        return Err(Error::shape(
            "recon_loss",
            format!(
                "level 0 is {:?}, target {:?}",
                first.shape(),
                target.shape()
            ),
        ));
    }
    let terms: Vec<_> = pred
        .iter()
        .map(|&p| (p.resize_bilinear(h, w) - target).abs().mean())
        .collect();
    Ok(sum_vars(&terms))
}

fn sum_vars<'g, T: Element>(terms: &[Var<'g, T>]) -> Var<'g, T> {
    terms[1..].iter().fold(terms[0], |acc, &t| acc + t)
}

/// Mean absolute error restricted to `mask` (`[b, 1, h, w]`, broadcast over
/// channels). Zero when the mask is empty.
pub fn masked_l1<'g, T: Element>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    mask: &ndarray::ArrayD<T>,
) -> Var<'g, T> {
    let g = pred.graph();
    let channels = pred.shape()[1];
    let count = mask.sum() * T::of(channels as f64);
    let m = g.constant(mask.clone());
    let total = ((pred - target).abs() * m).sum();
    if count > T::zero() {
        total.mul_scalar(T::one() / count)
    } else {
        total.mul_scalar(T::zero())
    }
}

/// Sum over levels of the masked mean absolute error between each
/// reprojected level and the target downsampled to that level.
pub fn photometric_loss<'g, T: Element>(
    reprojected: &[WarpOutput<'g, T>],
    target: Var<'g, T>,
) -> Result<Var<'g, T>> {
    if reprojected.is_empty() {
        return Err(Error::shape("photometric_loss", "empty pyramid"));
    }
    let terms: Vec<_> = reprojected
        .iter()
        .map(|r| {
            let (h, w) = hw(&r.warped);
            masked_l1(r.warped, downsample_to(target, h, w), &r.mask)
        })
        .collect();
    Ok(sum_vars(&terms))
}

/// Sum over extractor layers of the mean absolute feature difference.
pub fn perceptual_loss<'g, T: Element>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    extractor: &dyn PerceptualExtractor<T>,
) -> Var<'g, T> {
    let g = pred.graph();
    let fp = extractor.features(g, pred);
    let ft = extractor.features(g, target);
    let terms: Vec<_> = fp
        .iter()
        .zip(&ft)
        .map(|(&a, &b)| (a - b).abs().mean())
        .collect();
    sum_vars(&terms)
}

/// Edge-aware smoothness of a single-channel map `d` (`[b, 1, h, w]`) guided
/// by `image` (`[b, c, h, w]`):
/// `mean |∂x d| exp(-|∂x I|) + mean |∂y d| exp(-|∂y I|)`, where the image
/// gradient magnitude is averaged over channels.
pub fn smoothness_loss<'g, T: Element>(d: Var<'g, T>, image: Var<'g, T>) -> Var<'g, T> {
    let (h, w) = hw(&d);
    let grad =
        |x: Var<'g, T>, axis: usize, n: usize| x.narrow(axis, 1, n) - x.narrow(axis, 0, n - 1);
    let mut terms = Vec::new();
    if w > 1 {
        let dd = grad(d, 3, w).abs();
        let di = grad(image, 3, w).abs().mean_axes(&[1]);
        terms.push((dd * di.neg().exp()).mean());
    }
    if h > 1 {
        let dd = grad(d, 2, h).abs();
        let di = grad(image, 2, h).abs().mean_axes(&[1]);
        terms.push((dd * di.neg().exp()).mean());
    }
    if terms.is_empty() {
        return d.sum().mul_scalar(T::zero());
    }
    sum_vars(&terms)
}

/// Inverse depth divided by its per-sample mean.
pub fn mean_normalized_disparity<'g, T: Element>(depth: Var<'g, T>) -> Var<'g, T> {
    let disp = depth.recip();
    disp / disp.mean_axes(&[1, 2, 3])
}

/// Mean absolute difference of two depth maps.
pub fn depth_consistency_loss<'g, T: Element>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    (a - b).abs().mean()
}

/// Individual loss terms; `None` marks a term that was not computed.
#[derive(Clone, Copy)]
pub struct LossParts<'g, T: Element> {
    pub recon: Option<Var<'g, T>>,
    pub photo: Option<Var<'g, T>>,
    pub vgg: Option<Var<'g, T>>,
    pub smooth_s: Option<Var<'g, T>>,
    pub smooth_t: Option<Var<'g, T>>,
    pub skip: Option<Var<'g, T>>,
}

impl<T: Element> Default for LossParts<'_, T> {
    fn default() -> Self {
        Self {
            recon: None,
            photo: None,
            vgg: None,
            smooth_s: None,
            smooth_t: None,
            skip: None,
        }
    }
}

/// Weighted sum of the parts. Terms with zero weight are left off the tape
/// entirely, so they contribute no gradient.
pub fn total_loss<'g, T: Element>(
    graph: &'g Graph<T>,
    parts: &LossParts<'g, T>,
    w: &LossWeights,
) -> Result<(Var<'g, T>, LossReport)> {
    let named = [
        ("recon", parts.recon, w.alpha),
        ("photo", parts.photo, w.beta),
        ("vgg", parts.vgg, w.gamma),
        ("smooth_s", parts.smooth_s, w.delta),
        ("smooth_t", parts.smooth_t, w.delta),
        ("skip", parts.skip, w.omega),
    ];
    let mut report = LossReport::default();
    let mut total: Option<Var<'g, T>> = None;
    for (name, part, weight) in named {
        let Some(v) = part else { continue };
        let value = v.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}`")));
        }
        match name {
            "recon" => report.recon = value,
            "photo" => report.photo = value,
            "vgg" => report.vgg = value,
            "smooth_s" => report.smooth_s = value,
            "smooth_t" => report.smooth_t = value,
            _ => report.skip = value,
        }
        if weight == 0.0 {
            continue;
        }
        let term = v.mul_scalar(T::of(weight));
        total = Some(match total {
            Some(acc) => acc + term,
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| graph.scalar(T::zero()));
    report.total = total.item().to_f64_lossy();
    Ok((total, report))
}
