//! Times forward/backward training steps for a model configuration.
//!
//! `cargo run --release -p pptformer --example step_timing -- [channels] [patch] [batch] [steps]`

use std::time::Instant;

use pptformer::training::synthetic::{make_synthetic_pair, procedural_image, Degradation};
use pptformer::training::{gmacs_256, Trainer};
use pptformer::{ModelConfig, TrainConfig};

fn main() -> pptformer::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (channels, patch, batch, steps) = (arg(0, 32), arg(1, 64), arg(2, 1), arg(3, 5));
    let model = ModelConfig { base_channels: channels, ..ModelConfig::desk() };
    let train = TrainConfig { patch_size: patch, batch_size: batch, total_steps: steps, ..Default::default() };
    let data: Vec<_> = (0..4)
        .map(|i| make_synthetic_pair(&format!("{i}"), &procedural_image::<f32>(patch, patch, i), Degradation::LowLight, i))
        .collect::<Result<_, _>>()?;
    let mut trainer = Trainer::<f32>::from_configs(&model, train)?;
    println!("params {} gmacs@256 {:.3}", trainer.model.param_count(), gmacs_256(&trainer.model)?);
    for _ in 0..steps {
        let t = Instant::now();
        let s = trainer.step(&data)?;
        println!("step {} loss {:.5} {:.3}s", s.step, s.loss, t.elapsed().as_secs_f64());
    }
    Ok(())
}
