//! Overfits a small synthetic low-light set and reports training-set PSNR.
//!
//! `cargo run --release -p pptformer --example overfit -- [channels] [steps] [images] [size] [eval_every]`

use std::time::Instant;

use pptformer::evaluation::MetricMode;
use pptformer::training::synthetic::{synthetic_set, Degradation};
use pptformer::training::{evaluate_model, ParserInput, Trainer};
use pptformer::{ModelConfig, TrainConfig};

fn main() -> pptformer::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (channels, steps, n, size, every) = (arg(0, 32), arg(1, 2000), arg(2, 8), arg(3, 64), arg(4, 250));
    let model = ModelConfig { base_channels: channels, ..ModelConfig::desk() };
    let train = TrainConfig { patch_size: size, total_steps: steps, ..Default::default() };
    let data = synthetic_set::<f32>(n, size, Degradation::LowLight, 0)?;
    let mut trainer = Trainer::<f32>::from_configs(&model, train)?;
    let report = |t: &Trainer<f32>| -> pptformer::Result<f64> {
        let r = evaluate_model(&t.model, &data, ParserInput::Map, MetricMode::Rgb)?;
        Ok(r.mean().map(|m| m.0).unwrap_or(f64::NAN))
    };
    println!("params {} initial psnr {:.3}", trainer.model.param_count(), report(&trainer)?);
    let start = Instant::now();
    while trainer.step < steps {
        let s = trainer.step(&data)?;
        if s.step % every == 0 || s.step == steps {
            println!(
                "step {} loss {:.5} psnr {:.3} elapsed {:.0}s",
                s.step,
                s.loss,
                report(&trainer)?,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
