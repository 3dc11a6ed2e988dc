//! Training: cosine-annealed AdamW on random patches with a spatial plus
//! frequency L1 loss, checkpoint/resume, and the ablation matrix.

pub mod optim;
pub mod sft;
pub mod synthetic;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{BranchLayout, FusionKind, ModelConfig, PptFormer};
use crate::checkpoint::{self, Manifest, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pair, MetricMode, MetricReport};
use crate::imageio;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use synthetic::{make_synthetic_pair, synthetic_set, Degradation, RestorationSample};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Model edits compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoParser,
    DegradedAsParser,
    NoIntra,
    NoInter,
    BothIntra,
    BothInter,
    SftFusion,
}

/// What the parser branch is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParserInput {
    Map,
    Degraded,
    Absent,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::NoParser,
        Ablation::DegradedAsParser,
        Ablation::NoIntra,
        Ablation::NoInter,
        Ablation::BothIntra,
        Ablation::BothInter,
        Ablation::SftFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoParser => "no_parser",
            Ablation::DegradedAsParser => "degraded_as_parser",
            Ablation::NoIntra => "no_intra",
            Ablation::NoInter => "no_inter",
            Ablation::BothIntra => "both_intra",
            Ablation::BothInter => "both_inter",
            Ablation::SftFusion => "sft_fusion",
        }
    }

    /// The architecture this variant trains, derived from `base`.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::Full | Ablation::DegradedAsParser => {}
            Ablation::NoParser => cfg.use_parser = false,
            Ablation::NoIntra => cfg.branches = BranchLayout::InterOnly,
            Ablation::NoInter => cfg.branches = BranchLayout::IntraOnly,
            Ablation::BothIntra => cfg.branches = BranchLayout::BothIntra,
            Ablation::BothInter => cfg.branches = BranchLayout::BothInter,
            Ablation::SftFusion => cfg.fusion = FusionKind::Sft,
        }
        cfg
    }

    pub fn parser_input(self) -> ParserInput {
        match self {
            Ablation::NoParser => ParserInput::Absent,
            Ablation::DegradedAsParser => ParserInput::Degraded,
            _ => ParserInput::Map,
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::invalid(format!("unknown ablation variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_fft_weight: f64,
    pub ablation: Ablation,
    pub adamw: AdamWConfig,
    /// Global gradient-norm ceiling; unset disables clipping.
    pub clip_norm: Option<f64>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            lr_final: 1e-7,
            total_steps: 2000,
            patch_size: 64,
            batch_size: 1,
            seed: 0,
            loss_fft_weight: 0.1,
            ablation: Ablation::Full,
            adamw: AdamWConfig::default(),
            clip_norm: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final < self.lr_init) || self.lr_final < 0.0 {
            return Err(Error::invalid(format!(
                "need 0 <= lr_final < lr_init, got {} and {}",
                self.lr_final, self.lr_init
            )));
        }
        if !(self.loss_fft_weight >= 0.0) {
            return Err(Error::invalid("loss_fft_weight must be non-negative"));
        }
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return Err(Error::invalid(format!("patch_size must be even and positive, got {}", self.patch_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for `step` in `[0, total_steps]`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::invalid(format!("step {step} outside [0, {}]", config.total_steps)));
    }
    if step == 0 {
        return Ok(config.lr_init);
    }
    if step == config.total_steps {
        return Ok(config.lr_final);
    }
    let t = step as f64 / config.total_steps as f64;
    Ok(config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub spatial: f64,
    pub fft: f64,
}

/// `mean|pred - target| + lambda * mean(|Re D| + |Im D|)` where `D` is the
/// per-plane 2-D DFT of `pred - target`.
pub fn loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, lambda: f64) -> Result<LossParts> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.freq_l1_loss(p, target, T::lit(lambda))?;
    let (spatial, fft) = g.last_loss_parts().expect("loss node records its parts");
    Ok(LossParts { total: g.value(l).data()[0].to_f64_lossy(), spatial: spatial.to_f64_lossy(), fft: fft.to_f64_lossy() })
}

/// One training batch, `(B, 3, P, P)` each.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
    pub parser: Option<Tensor<T>>,
    /// `(sample index, top, left, flipped)` per batch item.
    pub origin: Vec<(usize, usize, usize, bool)>,
}

/// Draws the batch for `step`; the result depends only on `(seed, step)`.
pub fn sample_batch<T: Scalar>(data: &[RestorationSample<T>], config: &TrainConfig, step: usize) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step as u64);
    let p = config.patch_size;
    let input = config.ablation.parser_input();
    let (mut deg, mut clean, mut parser, mut origin) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.batch_size {
        let idx = rng.random_range(0..data.len());
        let s = &data[idx];
        let (_, _, h, w) = s.degraded.dims4()?;
        if h < p || w < p {
            return Err(Error::invalid(format!("sample {} is {h}x{w}, smaller than patch {p}", s.name)));
        }
        let top = rng.random_range(0..=h - p);
        let left = rng.random_range(0..=w - p);
        let flip = rng.random_bool(0.5);
        let prep = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let c = t.crop(top, left, p, p)?;
            if flip {
                c.flip_horizontal()
            } else {
                Ok(c)
            }
        };
        deg.push(prep(&s.degraded)?);
        clean.push(prep(&s.clean)?);
        match input {
            ParserInput::Map => {
                let m = s
                    .parser
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("sample {} has no parser map", s.name)))?;
                parser.push(prep(m)?);
            }
            ParserInput::Degraded => parser.push(prep(&s.degraded)?),
            ParserInput::Absent => {}
        }
        origin.push((idx, top, left, flip));
    }
    Ok(Batch {
        degraded: Tensor::stack(&deg)?,
        clean: Tensor::stack(&clean)?,
        parser: if parser.is_empty() { None } else { Some(Tensor::stack(&parser)?) },
        origin,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_spatial: f64,
    pub loss_fft: f64,
}

/// Owns the model and optimizer state across steps.
pub struct Trainer<T: Scalar> {
    pub model: PptFormer<T>,
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_metric: Option<f64>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: PptFormer<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if (config.ablation.parser_input() == ParserInput::Absent) == model.config.use_parser {
            return Err(Error::invalid(format!(
                "ablation {} does not match the model's use_parser = {}",
                config.ablation, model.config.use_parser
            )));
        }
        let optimizer = AdamW::new(config.adamw, &model.params);
        Ok(Self { model, config, optimizer, step: 0, best_metric: None, out_dir: None, log: None })
    }

    /// Builds the variant's model from `base` and the training seed.
    pub fn from_configs(base: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = PptFormer::new(config.ablation.model_config(base), config.seed)?;
        Self::new(model, config)
    }

    /// Appends metrics to `<dir>/metrics.jsonl` and checkpoints to `<dir>/checkpoint`.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
        self.log = Some(BufWriter::new(f));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    /// Forward pass and loss on a batch; returns the loss parts and, if
    /// requested, the parameter gradients.
    #[allow(clippy::type_complexity)]
    pub fn batch_loss(
        &self,
        batch: &Batch<T>,
        with_grads: bool,
    ) -> Result<(LossParts, Option<Vec<(crate::params::ParamId, Tensor<T>)>>)> {
        let mut g = if with_grads { Graph::with_params(&self.model.params) } else { Graph::inference(&self.model.params) };
        let x = g.constant(batch.degraded.clone());
        let m = batch.parser.clone().map(|p| g.constant(p));
        let y = self.model.forward(&mut g, x, m)?;
        let l = g.freq_l1_loss(y, &batch.clean, T::lit(self.config.loss_fft_weight))?;
        let (sp, ff) = g.last_loss_parts().expect("loss parts");
        let parts = LossParts {
            total: g.value(l).data()[0].to_f64_lossy(),
            spatial: sp.to_f64_lossy(),
            fft: ff.to_f64_lossy(),
        };
        if !with_grads || !parts.total.is_finite() {
            return Ok((parts, None));
        }
        Ok((parts, Some(g.backward(l)?.into_param_grads())))
    }

    /// Loss the next step would see, without updating anything.
    pub fn peek_loss(&self, data: &[RestorationSample<T>]) -> Result<LossParts> {
        let batch = sample_batch(data, &self.config, self.step)?;
        Ok(self.batch_loss(&batch, false)?.0)
    }

    /// Runs one optimizer step.
    pub fn step(&mut self, data: &[RestorationSample<T>]) -> Result<StepStats> {
        if self.step >= self.config.total_steps {
            return Err(Error::invalid(format!("already completed {} steps", self.step)));
        }
        let lr = lr_at(self.step, &self.config)?;
        let batch = sample_batch(data, &self.config, self.step)?;
        let (parts, grads) = match self.batch_loss(&batch, true) {
            Ok(r) if r.0.total.is_finite() => r,
            Ok(_) => return Err(self.numeric_failure("non-finite loss", &batch, data)),
            Err(Error::NumericDomain(msg)) => return Err(self.numeric_failure(&msg, &batch, data)),
            Err(e) => return Err(e),
        };
        let mut grads = grads.expect("gradients for finite loss");
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        let stats = StepStats { step: self.step, lr, loss: parts.total, loss_spatial: parts.spatial, loss_fft: parts.fft };
        if let Some(log) = self.log.as_mut() {
            serde_json::to_writer(&mut *log, &stats)?;
            log.write_all(b"\n")?;
            log.flush()?;
        }
        Ok(stats)
    }

    /// Trains until `total_steps`, checkpointing per the config. Returns the last step's stats.
    pub fn run(&mut self, data: &[RestorationSample<T>], mut on_step: impl FnMut(&StepStats)) -> Result<Option<StepStats>> {
        let mut last = None;
        while self.step < self.config.total_steps {
            let s = self.step(data)?;
            on_step(&s);
            last = Some(s);
            let k = self.config.checkpoint_every;
            if k > 0 && self.step % k == 0 && self.step < self.config.total_steps {
                if let Some(dir) = &self.out_dir {
                    self.save_checkpoint(&dir.join(format!("{CHECKPOINT_DIR}_{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
        }
        Ok(last)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            step: self.step,
            seed: self.config.seed,
            best_metric: self.best_metric,
            model: self.model.config.clone(),
            train: Some(self.config.clone()),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.model, Some(&self.optimizer), &self.manifest())
    }

    /// Restores model, optimizer moments and step counter from a checkpoint directory.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (model, manifest) = checkpoint::load_model::<T>(dir)?;
        let config = manifest
            .train
            .clone()
            .ok_or_else(|| Error::Format(format!("{} has no training config", dir.display())))?;
        let mut t = Self::new(model, config)?;
        checkpoint::load_optimizer(dir, &t.model.params, &mut t.optimizer)?;
        t.step = manifest.step;
        t.best_metric = manifest.best_metric;
        Ok(t)
    }

    fn numeric_failure(&self, what: &str, batch: &Batch<T>, data: &[RestorationSample<T>]) -> Error {
        match self.write_snapshot(batch, data) {
            Ok(at) => Error::NumericDomain(format!(
                "{what} at step {}; batch snapshot written to {}",
                self.step + 1,
                at.display()
            )),
            Err(e) => Error::NumericDomain(format!("{what} at step {}; snapshot failed: {e}", self.step + 1)),
        }
    }

    fn write_snapshot(&self, batch: &Batch<T>, data: &[RestorationSample<T>]) -> Result<PathBuf> {
        let root = self.out_dir.clone().unwrap_or_else(std::env::temp_dir);
        let dir = root.join(format!("nan_snapshot_step{:06}", self.step + 1));
        std::fs::create_dir_all(&dir)?;
        for (i, &(idx, top, left, flip)) in batch.origin.iter().enumerate() {
            imageio::save_rgb(&batch.degraded.batch_item(i)?, &dir.join(format!("{i}_degraded.png")))?;
            imageio::save_rgb(&batch.clean.batch_item(i)?, &dir.join(format!("{i}_clean.png")))?;
            if let Some(p) = &batch.parser {
                imageio::save_rgb(&p.batch_item(i)?, &dir.join(format!("{i}_parser.png")))?;
            }
            let info = serde_json::json!({
                "sample": data[idx].name, "top": top, "left": left, "flipped": flip,
                "step": self.step + 1, "lr": lr_at(self.step, &self.config)?,
            });
            std::fs::write(dir.join(format!("{i}_info.json")), info.to_string())?;
        }
        Ok(dir)
    }
}

/// Restores every sample at full size and scores it against its clean image.
pub fn evaluate_model<T: Scalar>(
    model: &PptFormer<T>,
    samples: &[RestorationSample<T>],
    input: ParserInput,
    mode: MetricMode,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(mode);
    for s in samples {
        let parser = match input {
            ParserInput::Map => Some(
                s.parser
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("sample {} has no parser map", s.name)))?,
            ),
            ParserInput::Degraded => Some(&s.degraded),
            ParserInput::Absent => None,
        };
        let restored = model.restore(&s.degraded, parser)?;
        report.push(evaluate_pair(&s.name, &restored, &s.clean, mode)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub ssim: f64,
    pub psnr: f64,
    pub params: usize,
    /// Multiply-accumulates of one 256x256 forward pass, in billions.
    pub gmacs_256: f64,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// True when every row was trained with the same seed.
    pub fn shared_seed(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].seed == w[1].seed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,ssim,psnr,params,gmacs_256,seed,steps,final_loss\n");
        for r in &self.rows {
            let fl = r.final_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.6},{:.4},{},{:.4},{},{},{fl}\n",
                r.variant, r.ssim, r.psnr, r.params, r.gmacs_256, r.seed, r.steps
            ));
        }
        s
    }
}

/// Size at which MACs are measured before scaling to 256x256 (every layer is linear in area).
const MAC_PROBE: usize = 64;

pub fn gmacs_256<T: Scalar>(model: &PptFormer<T>) -> Result<f64> {
    let probe = MAC_PROBE.max(model.config.spatial_multiple());
    let macs = model.macs_at(probe)? as f64;
    Ok(macs * (256.0 * 256.0) / (probe * probe) as f64 / 1e9)
}

/// Trains each variant with the same seed and budget, then evaluates on `val`.
///
/// With `out_dir`, each variant writes its metrics log and checkpoint to `<out_dir>/<variant>`.
pub fn run_ablation<T: Scalar>(
    variants: &[Ablation],
    base_model: &ModelConfig,
    base: &TrainConfig,
    train: &[RestorationSample<T>],
    val: &[RestorationSample<T>],
    mode: MetricMode,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(Ablation, &StepStats),
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::invalid("no ablation variants requested"));
    }
    let mut report = AblationReport::default();
    for &v in variants {
        let cfg = TrainConfig { ablation: v, ..base.clone() };
        let mut trainer = Trainer::<T>::from_configs(base_model, cfg)?;
        if let Some(dir) = out_dir {
            trainer = trainer.with_output_dir(&dir.join(v.name()))?;
        }
        let mut last = None;
        while trainer.step < trainer.config.total_steps {
            let s = trainer.step(train)?;
            progress(v, &s);
            last = Some(s);
        }
        if let Some(dir) = trainer.out_dir().map(Path::to_path_buf) {
            trainer.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
        }
        let metrics = evaluate_model(&trainer.model, val, v.parser_input(), mode)?;
        let (psnr, ssim, _) = metrics.mean().ok_or_else(|| Error::invalid("validation set is empty"))?;
        report.rows.push(AblationRow {
            variant: v,
            ssim,
            psnr,
            params: trainer.model.param_count(),
            gmacs_256: gmacs_256(&trainer.model)?,
            seed: base.seed,
            steps: trainer.step,
            final_loss: last.map(|s| s.loss),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let c = TrainConfig { total_steps: 1000, ..Default::default() };
        assert_eq!(lr_at(0, &c).unwrap(), 5e-4);
        assert_eq!(lr_at(1000, &c).unwrap(), 1e-7);
        assert!((lr_at(500, &c).unwrap() - (5e-4 + 1e-7) / 2.0).abs() < 1e-18);
        assert!(lr_at(1001, &c).is_err());
    }

    #[test]
    fn ablation_names_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("w/o_everything".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_final: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patch_size: 63, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { loss_fft_weight: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_constant_offset() {
        let t = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5);
        let p = t.map(|v| v + 0.1);
        let l = loss(&p, &t, 0.0).unwrap();
        assert!((l.total - 0.1).abs() < 1e-12);
        assert_eq!(loss(&t, &t, 0.1).unwrap().total, 0.0);
    }
}
