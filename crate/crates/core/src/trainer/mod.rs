//! Forward pass, loss assembly, the training loop and evaluation.

mod ablate;
mod config;
mod run;

pub use ablate::{comparison_table, run_variant, VariantRun};
pub use config::{AblationSwitches, LrSchedule, TrainConfig, Variant};
pub use run::{
    evaluate, recalibrate_batch_norm, render, train, EvalOptions, Rendered, StepLog, TrainOutcome,
    Trainer,
};

use ndarray::{Array4, ArrayD, Axis};
use viewsynth_tensor::{Element, Graph, Session, Var};

use crate::data::SamplePair;
use crate::geometry::{transform_latent_var, CameraIntrinsics, Pose};
use crate::losses::{
    depth_consistency_loss, downsample_to, mean_normalized_disparity, perceptual_loss,
    photometric_loss, recon_loss, smoothness_loss, total_loss, LossParts, LossReport, LossWeights,
    PerceptualExtractor,
};
use crate::networks::Model;
use crate::warp::{inverse_warp, warp_pyramid, WarpMode, WarpOutput};
use crate::{Error, Result};

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `[b, 3, h, w]`.
    pub source: ArrayD<T>,
    pub target: ArrayD<T>,
    /// Source-to-target transforms.
    pub poses: Vec<Pose<T>>,
    pub intrinsics: Vec<CameraIntrinsics<T>>,
}

impl<T: Element> Batch<T> {
    pub fn from_pairs(pairs: &[&SamplePair<T>]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        for p in pairs {
            p.validate()?;
            if (p.height(), p.width()) != (h, w) {
                return Err(Error::Data(format!(
                    "{}: {}x{} image in a {w}x{h} batch",
                    p.id,
                    p.width(),
                    p.height()
                )));
            }
        }
        let stack = |f: &dyn Fn(&SamplePair<T>) -> &ndarray::Array3<T>| {
            let mut out = Array4::zeros((pairs.len(), 3, h, w));
            for (mut slot, p) in out.axis_iter_mut(Axis(0)).zip(pairs) {
                slot.assign(f(p));
            }
            out.into_dyn()
        };
        Ok(Self {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            source: stack(&|p| &p.source),
            target: stack(&|p| &p.target),
            poses: pairs.iter().map(|p| p.pose_s_to_t).collect(),
            intrinsics: pairs.iter().map(|p| p.intrinsics).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.source.shape()[3]
    }

    pub fn inverse_poses(&self) -> Vec<Pose<T>> {
        self.poses.iter().map(Pose::inverse).collect()
    }
}

/// What a forward pass should compute beyond the novel view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub inverse_warping: bool,
    /// Encode the target image and decode its depth for the consistency
    /// term. Needs the batch's target.
    pub target_branch: bool,
    /// Let gradients reach the target branch.
    pub target_branch_grad: bool,
}

impl ForwardOptions {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            inverse_warping: config.ablation.inverse_warping,
            target_branch: config.loss.omega > 0.0,
            target_branch_grad: config.skip_target_grad,
        }
    }

    /// Inference only: no target-side encoding.
    pub fn inference(switches: &AblationSwitches) -> Self {
        Self {
            inverse_warping: switches.inverse_warping,
            target_branch: false,
            target_branch_grad: false,
        }
    }
}

/// Everything one forward pass produced.
pub struct ForwardOutputs<'g, T: Element> {
    pub source: Var<'g, T>,
    /// Depth pyramid of the source view, full resolution first.
    pub depth_s: Vec<Var<'g, T>>,
    /// Depth pyramid of the target view; absent without inverse warping.
    pub depth_t: Option<Vec<Var<'g, T>>>,
    /// Novel-view pyramid, full resolution first.
    pub nvs: Vec<Var<'g, T>>,
    /// Full-resolution depth decoded from the encoded target image.
    pub depth_from_target: Option<Var<'g, T>>,
}

fn check_finite<T: Element>(stage: &str, vars: &[Var<'_, T>]) -> Result<()> {
    if vars
        .iter()
        .any(|v| v.value().iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite(stage.to_string()));
    }
    Ok(())
}

/// Depth level for each feature level: feature level `l` (scale
/// `1/2^(l+1)`) pairs with depth level `l + 1`; the coarsest feature level
/// uses the coarsest depth average-pooled once more.
fn feature_depths<'g, T: Element>(depth: &[Var<'g, T>], levels: usize) -> Vec<Var<'g, T>> {
    (0..levels)
        .map(|l| match depth.get(l + 1) {
            Some(&d) => d,
            None => depth[depth.len() - 1].avg_pool(2),
        })
        .collect()
}

/// Runs the network on `batch`. The target images are only read when
/// `opts.target_branch` is set.
pub fn forward<'g, T: Element>(
    sess: &Session<'g, '_, T>,
    model: &Model<T>,
    batch: &Batch<T>,
    opts: ForwardOptions,
) -> Result<ForwardOutputs<'g, T>> {
    let g = sess.graph();
    let source = g.constant(batch.source.clone());
    let ks = &batch.intrinsics;
    let full_w = batch.width();

    let enc = model.encode(sess, source)?;
    check_finite("encoder", &[enc.z])?;
    check_finite("encoder", &enc.features)?;
    let plain: Vec<_> = enc
        .features
        .iter()
        .map(|&f| WarpOutput::unmasked(f))
        .collect();
    let depth_s = model.decode_depth(sess, enc.z, &plain)?;
    check_finite("source depth decoder", &depth_s)?;

    let n = enc.features.len();
    let f_dir = warp_pyramid(
        &enc.features,
        &feature_depths(&depth_s, n),
        ks,
        full_w,
        &batch.poses,
        WarpMode::Forward,
    )?;
    check_finite(
        "forward warp",
        &f_dir.iter().map(|w| w.warped).collect::<Vec<_>>(),
    )?;

    let z_t = transform_latent_var(enc.z, &batch.poses);
    check_finite("latent transform", &[z_t])?;

    let (depth_t, nvs) = if opts.inverse_warping {
        let depth_t = model.decode_depth(sess, z_t, &f_dir)?;
        check_finite("target depth decoder", &depth_t)?;
        let f_inv = warp_pyramid(
            &enc.features,
            &feature_depths(&depth_t, n),
            ks,
            full_w,
            &batch.inverse_poses(),
            WarpMode::Inverse,
        )?;
        check_finite(
            "inverse warp",
            &f_inv.iter().map(|w| w.warped).collect::<Vec<_>>(),
        )?;
        let nvs = model.decode_nvs(sess, z_t, &f_inv)?;
        (Some(depth_t), nvs)
    } else {
        (None, model.decode_nvs(sess, z_t, &f_dir)?)
    };
    check_finite("view synthesis decoder", &nvs)?;

    let depth_from_target = match (&depth_t, opts.target_branch) {
        (Some(_), true) => {
            let target = g.constant(batch.target.clone());
            let et = model.encode(sess, target)?;
            let plain_t: Vec<_> = et
                .features
                .iter()
                .map(|&f| WarpOutput::unmasked(f))
                .collect();
            let d = model.decode_depth(sess, et.z, &plain_t)?[0];
            check_finite("target-image depth", &[d])?;
            Some(if opts.target_branch_grad {
                d
            } else {
                d.detach()
            })
        }
        _ => None,
    };

    Ok(ForwardOutputs {
        source,
        depth_s,
        depth_t,
        nvs,
        depth_from_target,
    })
}

/// `sum_i 2^-i smoothness(disparity(depth[i]), image at level i)`.
fn pyramid_smoothness<'g, T: Element>(depth: &[Var<'g, T>], image: Var<'g, T>) -> Var<'g, T> {
    let terms: Vec<_> = depth
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let s = d.shape();
            let img = downsample_to(image, s[2], s[3]);
            smoothness_loss(mean_normalized_disparity(d), img)
                .mul_scalar(T::of(0.5f64.powi(i as i32)))
        })
        .collect();
    terms[1..].iter().fold(terms[0], |acc, &t| acc + t)
}

/// Reprojects `image` (downsampled to each level) into the view that
/// `depth` belongs to. `pose` maps that view's camera into `image`'s camera.
fn reproject<'g, T: Element>(
    image: Var<'g, T>,
    depth: &[Var<'g, T>],
    ks: &[CameraIntrinsics<T>],
    full_w: usize,
    poses: &[Pose<T>],
) -> Result<Vec<WarpOutput<'g, T>>> {
    depth
        .iter()
        .map(|&d| {
            let s = d.shape();
            let kl: Vec<_> = ks
                .iter()
                .map(|k| k.downscaled(full_w as f64 / s[3] as f64))
                .collect();
            inverse_warp(downsample_to(image, s[2], s[3]), d, &kl, poses)
        })
        .collect()
}

/// Assembles the weighted objective. Terms with zero weight that are
/// expensive to evaluate are skipped; the rest are reported even when they do
/// not contribute.
pub fn compute_losses<'g, T: Element>(
    graph: &'g Graph<T>,
    out: &ForwardOutputs<'g, T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    extractor: Option<&dyn PerceptualExtractor<T>>,
) -> Result<(Var<'g, T>, LossReport)> {
    let target = graph.constant(batch.target.clone());
    let full_w = batch.width();
    let mut parts = LossParts::default();
    parts.recon = Some(recon_loss(&out.nvs, target)?);
    if weights.gamma > 0.0 {
        let ex = extractor.ok_or(Error::MissingExtractor(weights.gamma))?;
        parts.vgg = Some(perceptual_loss(out.nvs[0], target, ex));
    }
    parts.smooth_s = Some(pyramid_smoothness(&out.depth_s, out.source));
    match &out.depth_t {
        Some(depth_t) => {
            let warps = reproject(
                out.source,
                depth_t,
                &batch.intrinsics,
                full_w,
                &batch.inverse_poses(),
            )?;
            parts.photo = Some(photometric_loss(&warps, target)?);
            parts.smooth_t = Some(pyramid_smoothness(depth_t, target));
            if let Some(dt) = out.depth_from_target {
                parts.skip = Some(depth_consistency_loss(dt, depth_t[0]));
            }
        }
        None => {
            let warps = reproject(
                target,
                &out.depth_s,
                &batch.intrinsics,
                full_w,
                &batch.poses,
            )?;
            parts.photo = Some(photometric_loss(&warps, out.source)?);
        }
    }
    total_loss(graph, &parts, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_pairs, SyntheticConfig};
    use crate::networks::ModelConfig;
    use viewsynth_tensor::Mode;

    fn setup() -> (Model<f64>, Batch<f64>) {
        let cfg = SyntheticConfig {
            width: 32,
            height: 32,
            supersample: 1,
            ..Default::default()
        };
        let pairs = generate_pairs::<f64>(&cfg, 2, 3).unwrap();
        let refs: Vec<_> = pairs.iter().collect();
        let model = Model::new(ModelConfig::small(32, 32), 1).unwrap();
        (model, Batch::from_pairs(&refs).unwrap())
    }

    #[test]
    fn forward_shapes() {
        let (model, batch) = setup();
        let g = Graph::new();
        let sess = Session::new(&g, &model.store, Mode::Eval);
        let full = AblationSwitches::default();
        let opts = ForwardOptions {
            target_branch: true,
            ..ForwardOptions::inference(&full)
        };
        let out = forward(&sess, &model, &batch, opts).unwrap();
        assert_eq!(out.nvs.len(), 5);
        assert_eq!(out.nvs[0].shape(), vec![2, 3, 32, 32]);
        assert_eq!(out.depth_t.as_ref().unwrap()[4].shape(), vec![2, 1, 2, 2]);
        assert_eq!(out.depth_from_target.unwrap().shape(), vec![2, 1, 32, 32]);
        let (_, rep) = compute_losses(
            &g,
            &out,
            &batch,
            &LossWeights {
                gamma: 0.0,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!(rep.total.is_finite() && rep.photo > 0.0 && rep.skip > 0.0);
    }

    #[test]
    fn without_inverse_warping() {
        let (model, batch) = setup();
        let g = Graph::new();
        let sess = Session::new(&g, &model.store, Mode::Eval);
        let sw = AblationSwitches {
            inverse_warping: false,
            ..Default::default()
        };
        let out = forward(&sess, &model, &batch, ForwardOptions::inference(&sw)).unwrap();
        assert!(out.depth_t.is_none() && out.depth_from_target.is_none());
        let w = LossWeights {
            gamma: 0.0,
            ..Default::default()
        };
        let (_, rep) = compute_losses(&g, &out, &batch, &w, None).unwrap();
        assert_eq!((rep.smooth_t, rep.skip), (0.0, 0.0));
        assert!(rep.photo > 0.0);
    }

    #[test]
    fn perceptual_needs_extractor() {
        let (model, batch) = setup();
        let g = Graph::new();
        let sess = Session::new(&g, &model.store, Mode::Eval);
        let out = forward(
            &sess,
            &model,
            &batch,
            ForwardOptions::inference(&AblationSwitches::default()),
        )
        .unwrap();
        let e = compute_losses(&g, &out, &batch, &LossWeights::default(), None)
            .err()
            .unwrap();
        assert!(matches!(e, Error::MissingExtractor(_)));
    }

    #[test]
    fn batch_rejects_mixed_sizes() {
        let (_, _) = setup();
        let a = generate_pairs::<f64>(
            &SyntheticConfig {
                width: 32,
                height: 32,
                supersample: 1,
                ..Default::default()
            },
            1,
            0,
        )
        .unwrap();
        let b = generate_pairs::<f64>(
            &SyntheticConfig {
                width: 64,
                height: 32,
                supersample: 1,
                ..Default::default()
            },
            1,
            0,
        )
        .unwrap();
        assert!(Batch::from_pairs(&[&a[0], &b[0]]).is_err());
        assert!(Batch::<f64>::from_pairs(&[]).is_err());
    }
}
