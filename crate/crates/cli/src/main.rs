use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{s, Axis};

use viewsynth::data::io::{
    read_rgb, resize_bilinear, write_depth_png, write_depth_preview, write_pairs, write_rgb,
};
use viewsynth::data::synthetic::generate_pairs;
use viewsynth::data::{split_indices, DatasetKind, PairSource, SamplePair};
use viewsynth::geometry::{read_intrinsics, read_pose};
use viewsynth::losses::PerceptualExtractor;
use viewsynth::metrics::{DepthRange, LpipsNetwork};
use viewsynth::networks::vgg::{Lpips, VggPerceptual};
use viewsynth::networks::Model;
use viewsynth::oracle::warp_check;
use viewsynth::trainer::{
    comparison_table, evaluate, render, run_variant, train, Batch, EvalOptions, TrainConfig,
    Trainer, Variant,
};

/// Single-image novel view synthesis with self-supervised depth.
#[derive(Parser)]
#[command(name = "viewsynth", version)]
struct Cli {
    /// Log every step and per-case details.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test pairs.
    Evaluate(EvalArgs),
    /// Synthesize the target view and depth for one source image.
    Render(RenderArgs),
    /// Train and evaluate ablated configurations and compare them.
    Ablate(AblateArgs),
    /// Write procedurally generated pairs to disk.
    MakeSynth(MakeSynthArgs),
    /// Compare the warps against brute-force oracles.
    WarpCheck(WarpCheckArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value = "synthetic", value_parser = parse_dataset)]
    dataset: DatasetKind,
    /// Dataset root. Synthetic data is generated when absent.
    #[arg(long, env = "VIEWSYNTH_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Configuration the checkpoint was trained with; read from the
    /// checkpoint when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// VGG-16 weights for LPIPS (needs --lpips-lin too).
    #[arg(long, requires = "lpips_lin")]
    lpips_vgg: Option<PathBuf>,
    #[arg(long, requires = "lpips_vgg")]
    lpips_lin: Option<PathBuf>,
    /// Write predicted views and depth for this many samples.
    #[arg(long, default_value_t = 4)]
    save_images: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source image (PNG).
    #[arg(long)]
    source: PathBuf,
    /// Source-to-target transform as a 4x4 or 3x4 matrix.
    #[arg(long)]
    pose: PathBuf,
    /// 3x3 intrinsics of the source image.
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Configurations to run (I..VIII); all when omitted. The full model is
    /// always included.
    #[arg(long, value_parser = parse_variant)]
    variant: Vec<Variant>,
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML training configuration; its `synthetic` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct WarpCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: viewsynth::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: viewsynth::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        let w = &mut c.loss;
        for (dst, src) in [
            (&mut w.alpha, self.alpha),
            (&mut w.beta, self.beta),
            (&mut w.gamma, self.gamma),
            (&mut w.delta, self.delta),
            (&mut w.omega, self.omega),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn open_data(data: &DataArgs, cfg: &TrainConfig, test: bool) -> Result<Box<dyn PairSource<f32>>> {
    let src = data.dataset.open::<f32>(
        data.data_root.as_deref(),
        test,
        cfg.model.image_width,
        cfg.model.image_height,
        (&cfg.synthetic, cfg.synthetic_pairs, cfg.seed),
    )?;
    if src.is_empty() {
        bail!("dataset `{}` has no pairs", data.dataset);
    }
    Ok(src)
}

fn extractor(cfg: &TrainConfig) -> Result<Option<VggPerceptual<f32>>> {
    if cfg.loss.gamma == 0.0 {
        return Ok(None);
    }
    match &cfg.perceptual_weights {
        Some(p) => Ok(Some(VggPerceptual::load(p)?)),
        None => bail!(
            "gamma = {} needs VGG-16 weights: set `perceptual_weights` in the config or pass --gamma 0",
            cfg.loss.gamma
        ),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let ex = extractor(&cfg)?;
    let model = match &a.checkpoint {
        Some(p) => {
            let (m, _) =
                Model::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?;
            m
        }
        None => Model::new(cfg.effective_model(), cfg.seed)?,
    };
    let data = open_data(&a.run.data, &cfg, false)?;
    let mut trainer = Trainer::new(
        cfg,
        model,
        ex.as_ref().map(|e| e as &dyn PerceptualExtractor<f32>),
    )?;
    let outcome = train(&mut trainer, data.as_ref(), Some(&a.run.out))?;
    if let Some(r) = &outcome.report {
        print!("{}", r.to_table());
    }
    println!(
        "trained {} steps; outputs in {}",
        outcome.logs.len(),
        a.run.out.display()
    );
    Ok(())
}

fn save_sample(
    dir: &Path,
    pair: &SamplePair<f32>,
    image: ndarray::ArrayView3<f32>,
    depth: ndarray::ArrayView2<f32>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rgb(&dir.join("source.png"), pair.source.view())?;
    write_rgb(&dir.join("target.png"), pair.target.view())?;
    write_rgb(&dir.join("novel_view.png"), image)?;
    write_depth_png(&dir.join("depth.png"), depth)?;
    write_depth_preview(&dir.join("depth_preview.png"), depth)?;
    Ok(())
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        bail!("checkpoint not found: {}", a.checkpoint.display());
    }
    let (model, meta) = Model::<f32>::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mut cfg = match (&a.config, meta.get("train_config")) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(text)) => TrainConfig::from_toml(text)?,
        (None, None) => TrainConfig::default(),
    };
    cfg.model = model.config.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let lpips = match (&a.lpips_vgg, &a.lpips_lin) {
        (Some(v), Some(l)) => Some(Lpips::load(v, l)?),
        _ => None,
    };
    let synthetic_generated =
        a.data.dataset == DatasetKind::Synthetic && a.data.data_root.is_none();
    let data = open_data(&a.data, &cfg, true)?;
    let indices: Vec<usize> = if synthetic_generated {
        let (_, held) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
        if held.is_empty() {
            (0..data.len()).collect()
        } else {
            held
        }
    } else {
        (0..data.len()).collect()
    };
    let opts = EvalOptions {
        lpips: lpips.as_ref().map(|l| l as &dyn LpipsNetwork),
        depth_range: (a.data.dataset == DatasetKind::Kitti).then_some(DepthRange::KITTI),
        seed: cfg.seed,
        ..EvalOptions::new(a.data.dataset.name(), cfg.ablation)
    };
    let report = evaluate(&model, data.as_ref(), &indices, &opts)?;
    report.write(&a.out, "report")?;
    for &i in indices.iter().take(a.save_images) {
        let Some(pair) = data.pair(i, cfg.seed ^ i as u64)? else {
            continue;
        };
        let out = render(&model, &Batch::from_pairs(&[&pair])?, &cfg.ablation)?;
        save_sample(
            &a.out.join("samples").join(&pair.id),
            &pair,
            out.image.index_axis(Axis(0), 0),
            out.depth.slice(s![0, 0, .., ..]),
        )?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        bail!("checkpoint not found: {}", a.checkpoint.display());
    }
    let (model, meta) = Model::<f32>::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let switches = match meta.get("train_config") {
        Some(t) => TrainConfig::from_toml(t)?.ablation,
        None => Default::default(),
    };
    let pose = read_pose::<f32>(&a.pose)?;
    let mut k = read_intrinsics::<f32>(&a.intrinsics)?;
    let mut img = read_rgb::<f32>(&a.source)?;
    let (h, w) = (model.config.image_height, model.config.image_width);
    let (ih, iw) = (img.shape()[1], img.shape()[2]);
    if (ih, iw) != (h, w) {
        log::info!("resizing {iw}x{ih} source to {w}x{h}");
        img = resize_bilinear(img.view(), h, w);
        k = k.rescaled(w as f64 / iw as f64, h as f64 / ih as f64);
    }
    let pair = SamplePair {
        id: "render".into(),
        target: img.clone(),
        source: img,
        pose_s_to_t: pose,
        intrinsics: k,
        depth_s: None,
        depth_t: None,
    };
    let out = render(&model, &Batch::from_pairs(&[&pair])?, &switches)?;
    std::fs::create_dir_all(&a.out)?;
    let depth = out.depth.slice(s![0, 0, .., ..]);
    write_rgb(
        &a.out.join("novel_view.png"),
        out.image.index_axis(Axis(0), 0),
    )?;
    write_depth_png(&a.out.join("depth.png"), depth)?;
    write_depth_preview(&a.out.join("depth_preview.png"), depth)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = a.run.config()?;
    let mut variants = vec![Variant::Full];
    if a.variant.is_empty() {
        variants.extend(Variant::ABLATIONS);
    } else {
        variants.extend(a.variant.iter().copied().filter(|v| *v != Variant::Full));
    }
    let data = open_data(&a.run.data, &base, false)?;
    let ex = if variants.iter().any(|v| v.apply(&base).loss.gamma > 0.0) {
        extractor(&base)?
    } else {
        None
    };
    let mut runs = Vec::new();
    for v in variants {
        log::info!("configuration {v}: {}", v.description());
        let dir = a.run.out.join(format!("variant_{v}"));
        let run = run_variant(
            &base,
            v,
            data.as_ref(),
            ex.as_ref().map(|e| e as &dyn PerceptualExtractor<f32>),
            Some(&dir),
        )?;
        run.report.write(&dir, "report")?;
        runs.push(run);
    }
    let table = comparison_table(&runs);
    std::fs::write(a.run.out.join("ablation.txt"), &table)?;
    let json: Vec<_> = runs
        .iter()
        .map(|r| serde_json::json!({"variant": r.variant.to_string(), "description": r.variant.description(), "report": r.report}))
        .collect();
    std::fs::write(
        a.run.out.join("ablation.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    print!("{table}");
    Ok(())
}

fn cmd_make_synth(a: &MakeSynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let pairs = generate_pairs::<f32>(&cfg.synthetic, a.count, a.seed)?;
    write_pairs(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn cmd_warp_check(a: &WarpCheckArgs, verbose: bool) -> Result<bool> {
    let r = warp_check(a.seed, a.cases, a.size, 15.0)?;
    if verbose {
        for (i, c) in r.cases.iter().enumerate() {
            println!(
                "case {i:3}: inverse {:.3e} forward {:.3e} projection {:.3e} mask mismatches {}",
                c.inverse, c.forward, c.projection, c.mask_mismatches
            );
        }
    }
    let ok = r.passed(a.tolerance);
    println!(
        "seed {} cases {} size {}: max inverse {:.3e} forward {:.3e} projection {:.3e} mask mismatches {} -> {}",
        a.seed,
        a.cases,
        a.size,
        r.max.inverse,
        r.max.forward,
        r.max.projection,
        r.max.mask_mismatches,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::Render(a) => cmd_render(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::MakeSynth(a) => cmd_make_synth(a).map(|_| true),
        Command::WarpCheck(a) => cmd_warp_check(a, cli.verbose),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
