use std::fmt::Write;
use std::path::Path;

use viewsynth_tensor::Element;

use super::{evaluate, train, EvalOptions, TrainConfig, TrainOutcome, Trainer, Variant};
use crate::data::PairSource;
use crate::losses::PerceptualExtractor;
use crate::metrics::{EvalReport, REPORT_COLUMNS};
use crate::networks::Model;
use crate::Result;

/// Outcome of one ablation configuration.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains a fresh model under `variant` applied to `base` and evaluates it on
/// the held-out pairs, or on the training pairs when nothing is held out.
pub fn run_variant<T: Element>(
    base: &TrainConfig,
    variant: Variant,
    data: &dyn PairSource<T>,
    extractor: Option<&dyn PerceptualExtractor<T>>,
    out_dir: Option<&Path>,
) -> Result<VariantRun> {
    let config = variant.apply(base);
    let model = Model::new(config.effective_model(), config.seed)?;
    let extractor = if config.loss.gamma > 0.0 {
        extractor
    } else {
        None
    };
    let mut trainer = Trainer::new(config.clone(), model, extractor)?;
    let outcome = train(&mut trainer, data, out_dir)?;
    let name = variant.to_string();
    let report = match &outcome.report {
        Some(r) => EvalReport::new(name, r.samples.clone()),
        None => evaluate(
            &trainer.model,
            data,
            &outcome.train_indices,
            &EvalOptions::new(&name, config.ablation),
        )?,
    };
    Ok(VariantRun {
        variant,
        outcome,
        report,
    })
}

/// One row per configuration with the mean of every metric column.
pub fn comparison_table(runs: &[VariantRun]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let _ = write!(out, "{:<6} {:<28}", "id", "configuration");
    for c in REPORT_COLUMNS {
        let _ = write!(out, " {c:>9}");
    }
    out.push('\n');
    for r in runs {
        let i = r.report.aggregate.image;
        let d = r.report.aggregate.depth;
        let cells = [
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
        ];
        let _ = write!(
            out,
            "{:<6} {:<28}",
            r.variant.to_string(),
            r.variant.description()
        );
        for c in cells {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
    }
    out
}
