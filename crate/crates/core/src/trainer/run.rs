use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use viewsynth_tensor::{Adam, AdamConfig, Element, Graph, Mode, Session};

use super::{compute_losses, forward, AblationSwitches, Batch, ForwardOptions, TrainConfig};
use crate::data::{split_indices, PairSource};
use crate::losses::{LossReport, PerceptualExtractor};
use crate::metrics::{
    depth_metrics, image_metrics, DepthRange, EvalReport, LpipsNetwork, SampleRecord,
};
use crate::networks::Model;
use crate::{Error, Result};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
    pub seconds: f64,
}

/// Owns the optimizer state for a model being trained.
pub struct Trainer<'e, T: Element> {
    pub config: TrainConfig,
    pub model: Model<T>,
    adam: Adam<T>,
    extractor: Option<&'e dyn PerceptualExtractor<T>>,
    step: u64,
}

impl<'e, T: Element> Trainer<'e, T> {
    /// Fails when the configuration is invalid, when the model's skip
    /// switches disagree with it, or when the perceptual term is weighted but
    /// no extractor is given.
    pub fn new(
        config: TrainConfig,
        model: Model<T>,
        extractor: Option<&'e dyn PerceptualExtractor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let want = config.effective_model();
        if (want.depth_skips, want.nvs_skips) != (model.config.depth_skips, model.config.nvs_skips)
        {
            return Err(Error::Config(
                "model skip connections disagree with the ablation switches".into(),
            ));
        }
        if config.loss.gamma > 0.0 && extractor.is_none() {
            return Err(Error::MissingExtractor(config.loss.gamma));
        }
        let adam = Adam::new(AdamConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
        });
        Ok(Self {
            config,
            model,
            adam,
            extractor,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer update. On a non-finite loss or gradient the model is
    /// left untouched.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let lr = self.config.lr_at(self.step);
        let g = Graph::new();
        let sess = Session::new(&g, &self.model.store, Mode::Train);
        let out = forward(&sess, &self.model, batch, ForwardOptions::new(&self.config))?;
        let (total, report) = compute_losses(&g, &out, batch, &self.config.loss, self.extractor)?;
        let mut grads = g.backward(total);
        let pg = sess.param_grads(&mut grads);
        for (id, grad) in &pg {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    self.model.store.name(*id)
                )));
            }
        }
        let bn = sess.take_bn_updates();
        drop(sess);
        self.adam.step(&mut self.model.store, &pg, lr);
        self.model
            .store
            .apply_bn_updates(&bn, T::of(self.config.bn_momentum));
        self.step += 1;
        Ok(report)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Evaluation of the final model on the validation pairs.
    pub report: Option<EvalReport>,
    pub best_val_ssim: Option<f64>,
}

fn open_log(dir: &Path) -> Result<File> {
    let path = dir.join("train_log.jsonl");
    OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))
}

/// Trains `trainer.model` on `data`. With `out_dir`, writes the JSONL log,
/// checkpoints (`step_<k>`, `last`, `best`, `final`) and the final
/// validation report there. On a non-finite loss the current weights are
/// saved as `last_good` and the error is returned.
pub fn train<T: Element>(
    trainer: &mut Trainer<'_, T>,
    data: &dyn PairSource<T>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    if data.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Data(
            "validation split left no training pairs".into(),
        ));
    }
    if cfg.loss.gamma == 0.0 {
        log::warn!("perceptual loss disabled (gamma = 0)");
    }
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            std::fs::write(d.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(d, e))?;
            Some(open_log(d)?)
        }
        None => None,
    };
    let ckpt = |name: &str| out_dir.map(|d| d.join(format!("{name}.safetensors")));
    let save = |model: &Model<T>, path: Option<PathBuf>, step: u64| -> Result<()> {
        match path {
            Some(p) => model.save(
                &p,
                &[("step", step.to_string()), ("train_config", cfg.to_toml())],
            ),
            None => Ok(()),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::new();
    let mut best: Option<f64> = None;
    let start = Instant::now();

    while trainer.steps_taken() < cfg.steps {
        let step = trainer.steps_taken();
        let mut pairs = Vec::with_capacity(cfg.batch_size);
        let mut attempts = 0;
        while pairs.len() < cfg.batch_size {
            if order.is_empty() {
                order = train_idx.clone();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let pair_seed = cfg.seed ^ (step << 20) ^ idx as u64;
            if let Some(p) = data.pair(idx, pair_seed)? {
                pairs.push(p);
            }
            attempts += 1;
            if attempts > 10 * (train_idx.len() + cfg.batch_size) {
                return Err(Error::Data("no usable training pairs".into()));
            }
        }
        let refs: Vec<_> = pairs.iter().collect();
        let batch = Batch::from_pairs(&refs)?;
        let lr = cfg.lr_at(step);
        let report = match trainer.train_step(&batch) {
            Err(e @ Error::NonFinite(_)) => {
                log::error!("step {step}: {e}; saving last_good");
                save(&trainer.model, ckpt("last_good"), step)?;
                return Err(e);
            }
            r => r?,
        };
        let entry = StepLog {
            step,
            lr,
            loss: report,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("log serializes");
            writeln!(f, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "step {step} lr {lr:.3e} total {:.5} recon {:.5} photo {:.5} vgg {:.5} smooth {:.5}/{:.5} skip {:.5}",
                report.total,
                report.recon,
                report.photo,
                report.vgg,
                report.smooth_s,
                report.smooth_t,
                report.skip
            );
        }
        logs.push(entry);

        let done = trainer.steps_taken();
        let at_ckpt = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        let at_val = if cfg.validate_every > 0 {
            done % cfg.validate_every == 0
        } else {
            at_ckpt
        };
        if at_ckpt {
            save(&trainer.model, ckpt(&format!("step_{done}")), done)?;
            save(&trainer.model, ckpt("last"), done)?;
        }
        if at_val && !val_idx.is_empty() && done < cfg.steps {
            let ssim = validate(trainer, data, &train_idx, &val_idx)?;
            if best.is_none_or(|b| ssim > b) {
                best = Some(ssim);
                save(&trainer.model, ckpt("best"), done)?;
            }
        }
    }

    let report = if val_idx.is_empty() {
        None
    } else {
        if cfg.recalibrate_bn {
            recalibrate_batch_norm(
                &mut trainer.model,
                data,
                &train_idx,
                cfg.batch_size,
                cfg.seed,
            )?;
        }
        let r = evaluate(
            &trainer.model,
            data,
            &val_idx,
            &EvalOptions::new("validation", cfg.ablation),
        )?;
        if let Some(ssim) = r.aggregate.image.map(|m| m.ssim) {
            if best.is_none_or(|b| ssim > b) {
                best = Some(ssim);
                save(&trainer.model, ckpt("best"), cfg.steps)?;
            }
        }
        if let Some(d) = out_dir {
            r.write(d, "report")?;
        }
        Some(r)
    };
    save(&trainer.model, ckpt("final"), cfg.steps)?;
    save(&trainer.model, ckpt("last"), cfg.steps)?;
    Ok(TrainOutcome {
        logs,
        train_indices: train_idx,
        val_indices: val_idx,
        report,
        best_val_ssim: best,
    })
}

/// Validation SSIM. Batch-norm recalibration runs on a copy of the running
/// statistics, which are restored afterwards so training is unaffected.
fn validate<T: Element>(
    trainer: &mut Trainer<'_, T>,
    data: &dyn PairSource<T>,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<f64> {
    let cfg = trainer.config.clone();
    let saved: Vec<_> = if cfg.recalibrate_bn {
        let store = &trainer.model.store;
        let ids: Vec<_> = store.ids().filter(|&id| !store.is_trainable(id)).collect();
        let snap = ids.iter().map(|&id| (id, store.get(id).clone())).collect();
        recalibrate_batch_norm(
            &mut trainer.model,
            data,
            train_idx,
            cfg.batch_size,
            cfg.seed,
        )?;
        snap
    } else {
        Vec::new()
    };
    let r = evaluate(
        &trainer.model,
        data,
        val_idx,
        &EvalOptions::new("validation", cfg.ablation),
    )?;
    for (id, v) in saved {
        trainer.model.store.set(id, v);
    }
    Ok(r.aggregate.image.map_or(0.0, |m| m.ssim))
}

/// Replaces the batch-norm running statistics with their average over
/// batches of the given pairs' source images (Precise-BN). Weights are not
/// touched.
pub fn recalibrate_batch_norm<T: Element>(
    model: &mut Model<T>,
    data: &dyn PairSource<T>,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let batch_size = batch_size.max(1);
    let mut pairs = Vec::new();
    for &i in indices {
        if let Some(p) = data.pair(i, seed ^ i as u64)? {
            pairs.push(p);
        }
    }
    for (k, chunk) in pairs.chunks(batch_size).enumerate() {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::from_pairs(&refs)?;
        let g = Graph::new();
        let sess = Session::new(&g, &model.store, Mode::Train).with_grads(false);
        model.encode(&sess, g.constant(batch.source.clone()))?;
        let updates = sess.take_bn_updates();
        drop(sess);
        // Momentum 1/(k+1) turns the update into a running mean over batches.
        model
            .store
            .apply_bn_updates(&updates, T::of(1.0 / (k as f64 + 1.0)));
    }
    Ok(())
}

/// Evaluation settings.
#[derive(Clone, Copy)]
pub struct EvalOptions<'a> {
    pub name: &'a str,
    pub switches: AblationSwitches,
    pub lpips: Option<&'a dyn LpipsNetwork>,
    /// Depth evaluation range; `None` evaluates wherever ground truth is
    /// positive, without clamping.
    pub depth_range: Option<DepthRange>,
    pub seed: u64,
}

impl<'a> EvalOptions<'a> {
    pub fn new(name: &'a str, switches: AblationSwitches) -> Self {
        Self {
            name,
            switches,
            lpips: None,
            depth_range: None,
            seed: 0,
        }
    }
}

/// Network outputs for a batch, as plain arrays.
#[derive(Debug, Clone)]
pub struct Rendered<T> {
    /// `[b, 3, h, w]` novel views.
    pub image: Array4<T>,
    /// `[b, 1, h, w]` depth of the target view, or of the source view
    /// without inverse warping.
    pub depth: Array4<T>,
}

/// Eval-mode inference on a batch. The batch's target images are ignored.
pub fn render<T: Element>(
    model: &Model<T>,
    batch: &Batch<T>,
    switches: &AblationSwitches,
) -> Result<Rendered<T>> {
    let g = Graph::new();
    let sess = Session::new(&g, &model.store, Mode::Eval);
    let out = forward(&sess, model, batch, ForwardOptions::inference(switches))?;
    let depth = match &out.depth_t {
        Some(d) => d[0],
        None => out.depth_s[0],
    };
    let to4 = |v: viewsynth_tensor::Var<'_, T>| {
        (*v.value())
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4-d output")
    };
    Ok(Rendered {
        image: to4(out.nvs[0]),
        depth: to4(depth),
    })
}

/// Per-sample image metrics against the target and, where ground truth is
/// available, depth metrics.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &dyn PairSource<T>,
    indices: &[usize],
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(indices.len());
    for &i in indices {
        let Some(pair) = data.pair(i, opts.seed ^ i as u64)? else {
            log::warn!("evaluation: sample {i} has no partner, skipped");
            continue;
        };
        let batch = Batch::from_pairs(&[&pair])?;
        let out = render(model, &batch, &opts.switches)?;
        let image = image_metrics(
            out.image.slice(s![0, .., .., ..]),
            pair.target.view(),
            opts.lpips,
        )?;
        let gt = if opts.switches.inverse_warping {
            pair.depth_t.as_ref()
        } else {
            pair.depth_s.as_ref()
        };
        let depth = match gt {
            Some(gt) => {
                let pred = out.depth.slice(s![0, 0, .., ..]);
                let (p, mask) = match opts.depth_range {
                    Some(r) => r.prepare(pred, gt.view()),
                    None => (pred.mapv(|v| v.to_f64_lossy()), gt.mapv(|v| v > T::zero())),
                };
                let g64: Array2<f64> = gt.mapv(|v| v.to_f64_lossy());
                match depth_metrics(p.view(), g64.view(), mask.view()) {
                    Ok(m) => Some(m),
                    Err(Error::EmptyMask) => None,
                    Err(e) => return Err(e),
                }
            }
            None => None,
        };
        records.push(SampleRecord {
            id: pair.id.clone(),
            image: Some(image),
            depth,
        });
    }
    Ok(EvalReport::new(opts.name, records))
}
