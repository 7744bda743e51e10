use std::collections::HashSet;

use viewsynth::data::synthetic::{generate_pairs, SyntheticConfig};
use viewsynth::data::{InMemoryPairs, SamplePair};
use viewsynth::geometry::Pose;
use viewsynth::losses::LossWeights;
use viewsynth::networks::vgg::TinyExtractor;
use viewsynth::networks::{Model, ModelConfig};
use viewsynth::trainer::{
    compute_losses, evaluate, forward, render, train, AblationSwitches, Batch, EvalOptions,
    ForwardOptions, TrainConfig, Trainer, Variant,
};
use viewsynth::warp::inverse_warp_array;
use viewsynth::{Error, Graph};
use viewsynth_tensor::{Mode, Session};

fn pairs(n: usize, seed: u64) -> Vec<SamplePair<f64>> {
    let cfg = SyntheticConfig {
        width: 32,
        height: 32,
        supersample: 1,
        ..Default::default()
    };
    generate_pairs(&cfg, n, seed).unwrap()
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        lr: 1e-3,
        validation_fraction: 0.0,
        checkpoint_every: 0,
        log_every: 0,
        model: ModelConfig::small(32, 32),
        loss: LossWeights {
            gamma: 0.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Parameters with a nonzero gradient after one backward pass of the full
/// objective.
fn touched(
    model: &Model<f64>,
    cfg: &TrainConfig,
    batch: &Batch<f64>,
) -> (HashSet<String>, HashSet<String>) {
    let ex = TinyExtractor::<f64>::new(0);
    let g = Graph::new();
    let sess = Session::new(&g, &model.store, Mode::Train);
    let out = forward(&sess, model, batch, ForwardOptions::new(cfg)).unwrap();
    let (total, _) = compute_losses(&g, &out, batch, &cfg.loss, Some(&ex)).unwrap();
    let mut grads = g.backward(total);
    let mut nonzero = HashSet::new();
    let mut all = HashSet::new();
    for (id, gr) in sess.param_grads(&mut grads) {
        let name = model.store.name(id).to_string();
        if gr.iter().any(|v| *v != 0.0) {
            nonzero.insert(name.clone());
        }
        all.insert(name);
    }
    (nonzero, all)
}

#[test]
fn every_parameter_receives_gradient() {
    let data = pairs(2, 0);
    let batch = Batch::from_pairs(&data.iter().collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig {
        loss: LossWeights::default(),
        ..config(1)
    };
    let model = Model::<f64>::new(cfg.effective_model(), 0).unwrap();
    let (nonzero, all) = touched(&model, &cfg, &batch);
    assert_eq!(all.len(), model.store.trainable_ids().count());
    let missing: Vec<_> = all.difference(&nonzero).collect();
    assert!(missing.is_empty(), "no gradient: {missing:?}");
}

#[test]
fn nvs_decoder_idle_without_image_terms() {
    let data = pairs(2, 1);
    let batch = Batch::from_pairs(&data.iter().collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig {
        loss: LossWeights {
            alpha: 0.0,
            gamma: 0.0,
            ..Default::default()
        },
        ..config(1)
    };
    let model = Model::<f64>::new(cfg.effective_model(), 0).unwrap();
    let (nonzero, _) = touched(&model, &cfg, &batch);
    assert!(nonzero.iter().all(|n| !n.starts_with("nvs_decoder.")));
    assert!(nonzero.iter().any(|n| n.starts_with("depth_decoder.")));
    assert!(nonzero.iter().any(|n| n.starts_with("encoder.")));
}

#[test]
fn training_is_seed_deterministic() {
    let data = InMemoryPairs { pairs: pairs(4, 2) };
    let run = |seed| {
        let cfg = TrainConfig { seed, ..config(3) };
        let mut t = Trainer::new(
            cfg.clone(),
            Model::new(cfg.effective_model(), seed).unwrap(),
            None,
        )
        .unwrap();
        let out = train(&mut t, &data, None).unwrap();
        (
            out.logs.iter().map(|l| l.loss.total).collect::<Vec<_>>(),
            t.model.checksum(""),
        )
    };
    let (a, ca) = run(5);
    let (b, cb) = run(5);
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-4);
    }
    assert!((ca - cb).abs() < 1e-4 * ca.abs().max(1.0));
    let (c, _) = run(6);
    assert_ne!(a, c);
}

#[test]
fn loss_decreases_on_a_tiny_set() {
    let data = InMemoryPairs { pairs: pairs(2, 3) };
    let cfg = TrainConfig {
        lr: 1e-3,
        lr_schedule: viewsynth::trainer::LrSchedule::Constant,
        ..config(40)
    };
    let mut t = Trainer::new(
        cfg.clone(),
        Model::new(cfg.effective_model(), 0).unwrap(),
        None,
    )
    .unwrap();
    let out = train(&mut t, &data, None).unwrap();
    let head: f64 = out.logs[..5].iter().map(|l| l.loss.total).sum();
    let tail: f64 = out.logs[35..].iter().map(|l| l.loss.total).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn zero_steps_writes_untouched_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = InMemoryPairs { pairs: pairs(4, 4) };
    let cfg = TrainConfig {
        validation_fraction: 0.25,
        ..config(0)
    };
    let model = Model::new(cfg.effective_model(), 3).unwrap();
    let before = model.checksum("");
    let mut t = Trainer::new(cfg, model, None).unwrap();
    let out = train(&mut t, &data, Some(dir.path())).unwrap();
    assert!(out.logs.is_empty());
    assert_eq!(out.val_indices.len(), 1);
    assert!(out.report.is_some());
    let (back, meta) = Model::<f64>::load(&dir.path().join("final.safetensors")).unwrap();
    assert_eq!(meta["step"], "0");
    assert!(TrainConfig::from_toml(&meta["train_config"]).is_ok());
    // Only batch-norm statistics may move (recalibration); weights stay.
    for id in back.store.trainable_ids() {
        let name = back.store.name(id);
        let orig = t.model.store.get(t.model.store.id(name).unwrap());
        assert_eq!(back.store.get(id), orig);
    }
    let _ = before;
    for f in [
        "config.toml",
        "train_log.jsonl",
        "report.txt",
        "report.json",
        "last.safetensors",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoints_and_log_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = InMemoryPairs { pairs: pairs(3, 5) };
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..config(4)
    };
    let mut t = Trainer::new(
        cfg.clone(),
        Model::new(cfg.effective_model(), 0).unwrap(),
        None,
    )
    .unwrap();
    train(&mut t, &data, Some(dir.path())).unwrap();
    for f in ["step_2", "step_4", "last", "final"] {
        assert!(dir.path().join(format!("{f}.safetensors")).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first["loss"]["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn non_finite_weights_save_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let data = InMemoryPairs { pairs: pairs(2, 6) };
    let cfg = config(5);
    let mut model = Model::<f64>::new(cfg.effective_model(), 0).unwrap();
    let id = model.store.id("encoder.conv1.weight").unwrap();
    let nan = model.store.get(id).mapv(|_| f64::NAN);
    model.store.set(id, nan);
    let mut t = Trainer::new(cfg, model, None).unwrap();
    let err = train(&mut t, &data, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(dir.path().join("last_good.safetensors").exists());
    assert_eq!(t.steps_taken(), 0);
}

#[test]
fn trainer_rejects_inconsistent_setup() {
    let cfg = TrainConfig {
        loss: LossWeights::default(),
        ..config(1)
    };
    let m = Model::<f64>::new(cfg.effective_model(), 0).unwrap();
    assert!(matches!(
        Trainer::new(cfg.clone(), m, None),
        Err(Error::MissingExtractor(_))
    ));

    let ii = Variant::II.apply(&config(1));
    let full_model = Model::<f64>::new(config(1).effective_model(), 0).unwrap();
    assert!(matches!(
        Trainer::new(ii.clone(), full_model, None),
        Err(Error::Config(_))
    ));
    assert!(Trainer::new(
        ii.clone(),
        Model::<f64>::new(ii.effective_model(), 0).unwrap(),
        None
    )
    .is_ok());
}

#[test]
fn synthetic_pose_convention() {
    // The target warped into the source view with source depth and the
    // stored pose reproduces the source; the inverted pose does not.
    let cfg = SyntheticConfig {
        max_translation: 0.6,
        ..Default::default()
    };
    for p in generate_pairs::<f64>(&cfg, 4, 7).unwrap() {
        let depth = p.depth_s.clone().unwrap();
        let src = p.target.clone().insert_axis(ndarray::Axis(0));
        let d = depth
            .insert_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
        let err = |pose| {
            let r = inverse_warp_array(&src, &d, &p.intrinsics, &pose).unwrap();
            let (mut s, mut n) = (0.0, 0.0);
            for ((c, y, x), v) in r.warped.index_axis(ndarray::Axis(0), 0).indexed_iter() {
                if r.valid_mask[[0, 0, y, x]] > 0.5 {
                    s += (v - p.source[[c, y, x]]).abs();
                    n += 1.0;
                }
            }
            s / n
        };
        let good = err(p.pose_s_to_t);
        let bad = err(p.pose_s_to_t.inverse());
        assert!(good < 0.02, "{}: {good}", p.id);
        assert!(bad > good * 2.0, "{}: {good} vs {bad}", p.id);
    }
}

#[test]
fn render_and_evaluate_shapes() {
    let data = InMemoryPairs { pairs: pairs(3, 8) };
    let cfg = config(0);
    let model = Model::<f64>::new(cfg.effective_model(), 0).unwrap();
    let refs: Vec<_> = data.pairs.iter().collect();
    let batch = Batch::from_pairs(&refs).unwrap();
    for sw in [AblationSwitches::default(), Variant::I.apply(&cfg).ablation] {
        let r = render(&model, &batch, &sw).unwrap();
        assert_eq!(r.image.shape(), &[3, 3, 32, 32]);
        assert_eq!(r.depth.shape(), &[3, 1, 32, 32]);
        let rep = evaluate(&model, &data, &[0, 1, 2], &EvalOptions::new("t", sw)).unwrap();
        assert_eq!(rep.samples.len(), 3);
        assert!(rep.aggregate.depth.is_some());
    }
}

#[test]
fn identity_pose_reprojects_source_exactly() {
    let mut data = pairs(2, 11);
    for p in &mut data {
        p.pose_s_to_t = Pose::identity();
    }
    let model = Model::<f64>::new(ModelConfig::small(32, 32), 4).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let batch = Batch::from_pairs(&refs).unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &model.store, Mode::Eval);
    let out = forward(
        &sess,
        &model,
        &batch,
        ForwardOptions::inference(&AblationSwitches::default()),
    )
    .unwrap();
    let depth_t = out.depth_t.unwrap()[0]
        .value()
        .as_ref()
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let src = batch
        .source
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    for b in 0..2 {
        let one = src.slice(ndarray::s![b..b + 1, .., .., ..]).to_owned();
        let d = depth_t.slice(ndarray::s![b..b + 1, .., .., ..]).to_owned();
        let r = inverse_warp_array(&one, &d, &batch.intrinsics[b], &Pose::identity()).unwrap();
        for y in 1..31 {
            for x in 1..31 {
                assert_eq!(r.valid_mask[[0, 0, y, x]], 1.0);
                for c in 0..3 {
                    assert!((r.warped[[0, c, y, x]] - one[[0, c, y, x]]).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn batch_of_two_matches_two_singles() {
    let data = pairs(2, 12);
    let model = Model::<f64>::new(ModelConfig::small(32, 32), 5).unwrap();
    let sw = AblationSwitches::default();
    let both = render(
        &model,
        &Batch::from_pairs(&[&data[0], &data[1]]).unwrap(),
        &sw,
    )
    .unwrap();
    for (b, p) in data.iter().enumerate() {
        let one = render(&model, &Batch::from_pairs(&[p]).unwrap(), &sw).unwrap();
        let pairs = [(&both.image, &one.image), (&both.depth, &one.depth)];
        for (joint, single) in pairs {
            let joint = joint.index_axis(ndarray::Axis(0), b);
            let single = single.index_axis(ndarray::Axis(0), 0);
            let diff = joint
                .iter()
                .zip(single.iter())
                .map(|(a, s)| (a - s).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "sample {b}: {diff}");
        }
    }
}

#[test]
fn repeated_evaluation_is_identical() {
    let data = InMemoryPairs {
        pairs: pairs(3, 13),
    };
    let model = Model::<f64>::new(ModelConfig::small(32, 32), 6).unwrap();
    let opts = EvalOptions::new("again", AblationSwitches::default());
    let a = evaluate(&model, &data, &[0, 1, 2], &opts).unwrap();
    let b = evaluate(&model, &data, &[0, 1, 2], &opts).unwrap();
    assert_eq!(a, b);
}
