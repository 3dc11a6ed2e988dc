mod common;

use common::oracle::{self, Arr, Lcg};
use pptformer::checkpoint;
use pptformer::evaluation::MetricMode;
use pptformer::training::synthetic::{make_synthetic_pair, procedural_image, synthetic_set, Degradation};
use pptformer::training::{loss, lr_at, run_ablation, sample_batch, Ablation, Trainer};
use pptformer::{Error, ModelConfig, Tensor, TrainConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        levels: 2,
        blocks_per_level: vec![1, 1],
        heads_per_level: vec![1, 2],
        refinement_blocks: 1,
        parser_stage_blocks: 1,
        ..ModelConfig::default()
    }
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig { total_steps: steps, patch_size: 8, batch_size: 2, seed: 17, ..Default::default() }
}

#[test]
fn loss_matches_dft_by_definition() {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let p = Lcg(seed).tensor(&[1, 1, 4, 4]);
        let t = Lcg(seed + 100).tensor(&[1, 1, 4, 4]);
        let want = oracle::freq_loss(&Arr::from_tensor(&p), &Arr::from_tensor(&t), 0.1);
        let got = loss(&p, &t, 0.1).unwrap().total;
        worst = worst.max((got - want).abs());
        let multi = (Lcg(seed).tensor(&[2, 3, 4, 6]), Lcg(seed + 7).tensor(&[2, 3, 4, 6]));
        let want = oracle::freq_loss(&Arr::from_tensor(&multi.0), &Arr::from_tensor(&multi.1), 0.1);
        worst = worst.max((loss(&multi.0, &multi.1, 0.1).unwrap().total - want).abs());
    }
    println!("loss max abs diff {worst:.3e}");
    assert!(worst < 1e-6);
    let p = Lcg(1).tensor(&[1, 1, 4, 4]);
    assert!(matches!(loss(&p, &Tensor::zeros(&[1, 1, 4, 5]), 0.1), Err(Error::InvalidArgument(_))));
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg).unwrap(), 5e-4);
    assert_eq!(lr_at(cfg.total_steps, &cfg).unwrap(), 1e-7);
    assert!((lr_at(cfg.total_steps / 2, &cfg).unwrap() - (5e-4 + 1e-7) / 2.0).abs() < 1e-18);
}

#[test]
fn zero_steps_leaves_state_unchanged() {
    let data = synthetic_set::<f32>(2, 16, Degradation::LowLight, 0).unwrap();
    let mut t = Trainer::<f32>::from_configs(&tiny(), train_cfg(0)).unwrap();
    let before = t.model.params.clone();
    assert!(t.run(&data, |_| {}).unwrap().is_none());
    assert_eq!(t.step, 0);
    assert_eq!(t.model.params.iter().map(|(_, _, p)| p.clone()).collect::<Vec<_>>(),
               before.iter().map(|(_, _, p)| p.clone()).collect::<Vec<_>>());
}

#[test]
fn identical_seed_and_config_give_identical_first_loss() {
    let data = synthetic_set::<f32>(3, 16, Degradation::RainStreaks, 1).unwrap();
    let losses: Vec<f64> = (0..2)
        .map(|_| Trainer::<f32>::from_configs(&tiny(), train_cfg(5)).unwrap().step(&data).unwrap().loss)
        .collect();
    assert_eq!(losses[0], losses[1]);
    let other = Trainer::<f32>::from_configs(&tiny(), TrainConfig { seed: 18, ..train_cfg(5) }).unwrap().step(&data).unwrap();
    assert_ne!(other.loss, losses[0]);
}

#[test]
fn resume_reproduces_the_next_step() {
    let data = synthetic_set::<f32>(3, 16, Degradation::LowLight, 2).unwrap();
    let mut straight = Trainer::<f32>::from_configs(&tiny(), train_cfg(6)).unwrap();
    for _ in 0..4 {
        straight.step(&data).unwrap();
    }
    let want = straight.step(&data).unwrap().loss;

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::<f32>::from_configs(&tiny(), train_cfg(6)).unwrap();
    for _ in 0..4 {
        first.step(&data).unwrap();
    }
    first.save_checkpoint(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::<f32>::resume(dir.path()).unwrap();
    assert_eq!(resumed.step, 4);
    let got = resumed.step(&data).unwrap().loss;
    let rel = (got - want).abs() / want.abs();
    println!("resume rel diff {rel:.3e}");
    assert!(rel < 1e-6);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::<f32>::from_configs(&tiny(), train_cfg(3)).unwrap();
    t.save_checkpoint(dir.path()).unwrap();
    let (m, manifest) = checkpoint::load_model::<f32>(dir.path()).unwrap();
    assert_eq!(manifest.model, tiny());
    for ((_, a, x), (_, b, y)) in m.params.iter().zip(t.model.params.iter()) {
        assert_eq!((a, x), (b, y));
    }
    let mut wider = pptformer::PptFormer32::new(ModelConfig { base_channels: 8, ..tiny() }, 0).unwrap();
    let e = checkpoint::load_params(&dir.path().join(checkpoint::MODEL_FILE), &mut wider.params).unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
    assert!(matches!(checkpoint::load_model::<f32>(&dir.path().join("nope")), Err(Error::NotFound(_))));
}

#[test]
fn batches_crop_and_flip_parser_with_images() {
    let data = synthetic_set::<f64>(3, 20, Degradation::RainStreaks, 3).unwrap();
    let cfg = TrainConfig { patch_size: 8, batch_size: 4, seed: 5, ..Default::default() };
    let mut flips = 0;
    for step in 0..10 {
        let b = sample_batch(&data, &cfg, step).unwrap();
        assert_eq!(b.degraded.shape(), &[4, 3, 8, 8]);
        for (i, &(idx, top, left, flip)) in b.origin.iter().enumerate() {
            flips += flip as usize;
            let prep = |t: &Tensor<f64>| {
                let c = t.crop(top, left, 8, 8).unwrap();
                if flip { c.flip_horizontal().unwrap() } else { c }
            };
            assert_eq!(b.degraded.batch_item(i).unwrap(), prep(&data[idx].degraded));
            assert_eq!(b.clean.batch_item(i).unwrap(), prep(&data[idx].clean));
            assert_eq!(b.parser.as_ref().unwrap().batch_item(i).unwrap(), prep(data[idx].parser.as_ref().unwrap()));
        }
        assert_eq!(sample_batch(&data, &cfg, step).unwrap().origin, b.origin);
    }
    assert!(flips > 0 && flips < 40);
}

#[test]
fn low_light_darkens_every_image() {
    for seed in 0..8 {
        let clean = procedural_image::<f64>(24, 24, seed);
        let s = make_synthetic_pair("x", &clean, Degradation::LowLight, seed).unwrap();
        assert!(s.degraded.mean() < s.clean.mean());
        assert_eq!(s, make_synthetic_pair("x", &clean, Degradation::LowLight, seed).unwrap());
    }
}

#[test]
fn nan_loss_aborts_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = synthetic_set::<f32>(1, 8, Degradation::LowLight, 4).unwrap();
    data[0].degraded.data_mut()[5] = f32::NAN;
    let mut t = Trainer::<f32>::from_configs(&tiny(), train_cfg(2)).unwrap().with_output_dir(dir.path()).unwrap();
    let e = t.step(&data).unwrap_err();
    assert!(matches!(e, Error::NumericDomain(_)), "{e}");
    let snap = dir.path().join("nan_snapshot_step000001");
    assert!(snap.join("0_degraded.png").exists() && snap.join("0_info.json").exists());
}

#[test]
fn ablation_tables() {
    let data = synthetic_set::<f32>(2, 16, Degradation::LowLight, 5).unwrap();
    let cfg = TrainConfig { total_steps: 2, patch_size: 8, batch_size: 1, seed: 9, ..Default::default() };
    let one = run_ablation(&[Ablation::Full], &tiny(), &cfg, &data, &data, MetricMode::Rgb, None, |_, _| {}).unwrap();
    assert_eq!(one.rows.len(), 1);
    let two = run_ablation(&[Ablation::Full, Ablation::NoParser], &tiny(), &cfg, &data, &data, MetricMode::Rgb, None, |_, _| {})
        .unwrap();
    assert_eq!(two.rows.len(), 2);
    assert!(two.shared_seed());
    assert_eq!(two.rows[0], one.rows[0]);
    assert!(two.rows[1].params < two.rows[0].params);
    assert_eq!(two.to_csv().lines().count(), 3);
    assert!(matches!("w/o_both".parse::<Ablation>(), Err(Error::InvalidArgument(_))));
}

#[test]
fn every_variant_builds_and_trains_one_step() {
    let data = synthetic_set::<f32>(2, 16, Degradation::RainStreaks, 6).unwrap();
    let mut counts = Vec::new();
    for v in Ablation::ALL {
        let cfg = TrainConfig { ablation: v, ..train_cfg(1) };
        let mut t = Trainer::<f32>::from_configs(&tiny(), cfg).unwrap();
        assert!(t.step(&data).unwrap().loss.is_finite(), "{v}");
        counts.push((v, t.model.param_count()));
    }
    let count = |v| counts.iter().find(|(a, _)| *a == v).unwrap().1;
    assert_eq!(count(Ablation::Full), count(Ablation::DegradedAsParser));
    assert!(count(Ablation::NoIntra) < count(Ablation::Full));
    assert!(count(Ablation::NoInter) < count(Ablation::Full));
    assert!(count(Ablation::SftFusion) != count(Ablation::Full));
}
