//! Run configuration, dataset manifests and the commands behind the
//! `pptformer` binary.
//!
//! A manifest is a CSV file with the header `split,degraded,clean,parser`;
//! paths are relative to the manifest's directory and an empty `parser`
//! cell means "use the parser cache". Run configurations are TOML files
//! whose keys can be overridden with `key.path=VALUE` strings.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, PptFormer};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pair, MetricMode, MetricReport};
use crate::imageio;
use crate::parser::{self, load_parser, palette, stub_parse};
use crate::tensor::Tensor;
use crate::training::synthetic::{synthetic_set, Degradation, RestorationSample};
use crate::training::{evaluate_model, run_ablation, Ablation, AblationReport, ParserInput, StepStats, TrainConfig, Trainer};

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const CONFIG_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub cache_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_manifest: None, val_manifest: None, cache_dir: PathBuf::from("cache") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserConfig {
    pub n_segments: usize,
    pub seed: u64,
    /// Stub-parse in memory when neither a manifest map nor a cached map exists.
    pub auto_stub: bool,
    /// Nearest-neighbour resize precomputed maps whose size differs from the image.
    pub auto_resize: bool,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self { n_segments: 8, seed: 0, auto_stub: true, auto_resize: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub size: usize,
    pub degradation: Degradation,
    pub seed: u64,
    pub split: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_images: 8, size: 64, degradation: Degradation::LowLight, seed: 0, split: "train".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Ablation>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { variants: vec![Ablation::Full, Ablation::DegradedAsParser, Ablation::NoParser, Ablation::SftFusion] }
    }
}

/// Everything a command needs; `model` is `None` unless the file or an override sets it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub parser: ParserConfig,
    pub synth: SynthConfig,
    pub ablation: AblationConfig,
    pub metric_mode: MetricMode,
    /// Progress line interval in steps; 0 silences progress.
    pub log_every: usize,
}

impl RunConfig {
    /// Reads `path` (if any), applies `key.path=VALUE` overrides in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::NotFound(p.to_path_buf()));
                }
                std::fs::read_to_string(p)?.parse::<toml::Table>()?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if self.parser.n_segments == 0 {
            return Err(Error::invalid("parser.n_segments must be at least 1"));
        }
        Ok(())
    }

    /// The configured architecture, or the desk-scale default.
    pub fn model_or_desk(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(ModelConfig::desk)
    }

    /// Sets every seed the commands consume.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
        self.parser.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Applies one `a.b.c=VALUE` override; `VALUE` is parsed as TOML and falls back to a string.
pub fn apply_override(root: &mut toml::Table, arg: &str) -> Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {arg:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ManifestRow {
    split: String,
    degraded: String,
    clean: String,
    #[serde(default)]
    parser: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub degraded: PathBuf,
    pub clean: PathBuf,
    pub parser: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn name(&self) -> String {
        self.degraded.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Rows of a manifest file with paths resolved against its directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for row in reader.deserialize::<ManifestRow>() {
            let row = row?;
            let resolve = |p: &str| root.join(p);
            let e = ManifestEntry {
                split: row.split,
                degraded: resolve(&row.degraded),
                clean: resolve(&row.clean),
                parser: (!row.parser.is_empty()).then(|| resolve(&row.parser)),
            };
            for f in [Some(&e.degraded), Some(&e.clean), e.parser.as_ref()].into_iter().flatten() {
                if !f.exists() {
                    return Err(Error::NotFound(f.clone()));
                }
            }
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(Error::invalid(format!("manifest {} has no rows", path.display())));
        }
        Ok(Self { root, entries })
    }

    /// Writes the manifest with paths relative to `self.root` where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned();
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(ManifestRow {
                split: e.split.clone(),
                degraded: rel(&e.degraded),
                clean: rel(&e.clean),
                parser: e.parser.as_deref().map(rel).unwrap_or_default(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Decodes every row; parser maps are resolved when `input` needs them.
    pub fn load_samples(&self, input: ParserInput, cache_dir: &Path, cfg: &ParserConfig) -> Result<Vec<RestorationSample<f32>>> {
        self.entries
            .iter()
            .map(|e| {
                let degraded = imageio::load_rgb::<f32>(&e.degraded)?;
                let clean = imageio::load_rgb::<f32>(&e.clean)?;
                if degraded.shape() != clean.shape() {
                    return Err(Error::invalid(format!(
                        "{} is {:?} but {} is {:?}",
                        e.degraded.display(),
                        degraded.shape(),
                        e.clean.display(),
                        clean.shape()
                    )));
                }
                let parser = match input {
                    ParserInput::Map => Some(resolve_parser(e, &degraded, cache_dir, cfg)?),
                    ParserInput::Degraded | ParserInput::Absent => None,
                };
                Ok(RestorationSample { name: e.name(), degraded, clean, parser })
            })
            .collect()
    }
}

fn resolve_parser(e: &ManifestEntry, degraded: &Tensor<f32>, cache_dir: &Path, cfg: &ParserConfig) -> Result<Tensor<f32>> {
    let (_, _, h, w) = degraded.dims4()?;
    if let Some(p) = &e.parser {
        return Ok(load_parser(p, Some((h, w)), cfg.auto_resize)?.image);
    }
    let cached = parser::cache_path(cache_dir, &e.split, &e.degraded);
    if cached.exists() {
        return Ok(load_parser(&cached, Some((h, w)), cfg.auto_resize)?.image);
    }
    if cfg.auto_stub {
        return Ok(stub_parse(degraded, cfg.n_segments, cfg.seed)?.image);
    }
    Err(Error::NotFound(cached))
}

fn load_manifest_samples(
    path: Option<&Path>,
    what: &str,
    input: ParserInput,
    cfg: &RunConfig,
) -> Result<Vec<RestorationSample<f32>>> {
    let path = path.ok_or_else(|| Error::invalid(format!("no {what} manifest configured (data.{what}_manifest)")))?;
    let cache = parser::cache_root(&cfg.data.cache_dir);
    DatasetManifest::load(path)?.load_samples(input, &cache, &cfg.parser)
}

/// Writes `n_images` procedural pairs under `out` plus `out/manifest.csv`.
pub fn cmd_synth(out: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    if cfg.n_images == 0 || cfg.size < 2 {
        return Err(Error::invalid("synth needs n_images >= 1 and size >= 2"));
    }
    let samples = synthetic_set::<f32>(cfg.n_images, cfg.size, cfg.degradation, cfg.seed)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let degraded = out.join("degraded").join(format!("{}.png", s.name));
        let clean = out.join("clean").join(format!("{}.png", s.name));
        imageio::save_rgb(&s.degraded, &degraded)?;
        imageio::save_rgb(&s.clean, &clean)?;
        entries.push(ManifestEntry { split: cfg.split.clone(), degraded, clean, parser: None });
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), entries };
    let path = out.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseSummary {
    pub generated: usize,
    pub copied: usize,
    pub skipped: usize,
}

/// Fills `<cache_dir>/<split>/<stem>.png` for every row; existing files are left alone.
pub fn cmd_parse(manifest: &Path, cache_dir: &Path, n_segments: usize, seed: u64) -> Result<ParseSummary> {
    let m = DatasetManifest::load(manifest)?;
    let mut summary = ParseSummary::default();
    for e in &m.entries {
        let target = parser::cache_path(cache_dir, &e.split, &e.degraded);
        if target.exists() {
            summary.skipped += 1;
            continue;
        }
        if let Some(dir) = target.parent() {
            std::fs::create_dir_all(dir)?;
        }
        match &e.parser {
            Some(p) => {
                std::fs::copy(p, &target)?;
                summary.copied += 1;
            }
            None => {
                let img = imageio::load_rgb::<f32>(&e.degraded)?;
                imageio::save_rgb(&stub_parse(&img, n_segments, seed)?.image, &target)?;
                summary.generated += 1;
            }
        }
    }
    Ok(summary)
}

fn progress_line(every: usize, label: &str) -> impl FnMut(&StepStats) + '_ {
    move |s| {
        if every > 0 && s.step % every == 0 {
            eprintln!("{label}step {} lr {:.3e} loss {:.5} (l1 {:.5}, fft {:.5})", s.step, s.lr, s.loss, s.loss_spatial, s.loss_fft);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_stats: Option<StepStats>,
    pub checkpoint: PathBuf,
    pub validation: Option<MetricReport>,
}

/// Trains (or resumes) into `out`, archiving the effective config as `out/config.toml`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = match resume {
        Some(dir) => Trainer::<f32>::resume(dir)?,
        None => Trainer::<f32>::from_configs(&cfg.model_or_desk(), cfg.train.clone())?,
    };
    if let Some(m) = &cfg.model {
        let diff = m.diff_fields(&trainer.model.config);
        if !diff.is_empty() {
            return Err(Error::invalid(format!("configured model differs from the checkpoint in: {}", diff.join(", "))));
        }
    }
    let input = trainer.config.ablation.parser_input();
    let data = load_manifest_samples(cfg.data.train_manifest.as_deref(), "train", input, cfg)?;
    std::fs::create_dir_all(out)?;
    let effective = RunConfig { model: Some(trainer.model.config.clone()), train: trainer.config.clone(), ..cfg.clone() };
    std::fs::write(out.join(CONFIG_NAME), effective.to_toml()?)?;
    let mut trainer = trainer.with_output_dir(out)?;
    let final_stats = trainer.run(&data, progress_line(cfg.log_every, ""))?;
    let validation = match &cfg.data.val_manifest {
        Some(v) => {
            let val = load_manifest_samples(Some(v), "val", input, cfg)?;
            let report = evaluate_model(&trainer.model, &val, input, cfg.metric_mode)?;
            std::fs::write(out.join("val_metrics.csv"), report.to_csv())?;
            trainer.best_metric = report.mean().map(|m| m.0);
            Some(report)
        }
        None => None,
    };
    let checkpoint = out.join(crate::training::CHECKPOINT_DIR);
    trainer.save_checkpoint(&checkpoint)?;
    Ok(TrainOutcome { steps: trainer.step, final_stats, checkpoint, validation })
}

/// Loads a checkpoint, checking its architecture against `cfg.model` when one is configured.
pub fn load_checked(cfg: &RunConfig, dir: &Path) -> Result<(PptFormer<f32>, ParserInput)> {
    let (model, manifest) = checkpoint::load_model::<f32>(dir)?;
    if let Some(m) = &cfg.model {
        let diff = m.diff_fields(&model.config);
        if !diff.is_empty() {
            return Err(Error::invalid(format!(
                "configured model differs from checkpoint {} in: {}",
                dir.display(),
                diff.join(", ")
            )));
        }
    }
    let input = match manifest.train {
        Some(t) => t.ablation.parser_input(),
        None if model.config.use_parser => ParserInput::Map,
        None => ParserInput::Absent,
    };
    Ok((model, input))
}

/// Scores a manifest. With a checkpoint the model restores each degraded
/// image; without one the degraded column itself is scored as the prediction.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, manifest: &Path, out: Option<&Path>) -> Result<MetricReport> {
    let report = match checkpoint {
        Some(dir) => {
            let (model, input) = load_checked(cfg, dir)?;
            let samples = load_manifest_samples(Some(manifest), "eval", input, cfg)?;
            evaluate_model(&model, &samples, input, cfg.metric_mode)?
        }
        None => {
            let samples = load_manifest_samples(Some(manifest), "eval", ParserInput::Absent, cfg)?;
            let mut r = MetricReport::new(cfg.metric_mode);
            for s in &samples {
                r.push(evaluate_pair(&s.name, &s.degraded, &s.clean, cfg.metric_mode)?);
            }
            r
        }
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
        std::fs::write(dir.join("summary.txt"), report.summary())?;
    }
    Ok(report)
}

/// Restores one image of any size and writes it to `out`; `figure` adds an
/// input / parser / output comparison strip.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    parser_path: Option<&Path>,
    out: &Path,
    figure: Option<&Path>,
) -> Result<()> {
    let (model, input) = load_checked(cfg, checkpoint)?;
    let img = imageio::load_rgb::<f32>(image)?;
    let (_, _, h, w) = img.dims4()?;
    let parser = match input {
        ParserInput::Map => Some(match parser_path {
            Some(p) => load_parser(p, Some((h, w)), cfg.parser.auto_resize)?.image,
            None => stub_parse(&img, cfg.parser.n_segments, cfg.parser.seed)?.image,
        }),
        ParserInput::Degraded => Some(img.clone()),
        ParserInput::Absent => None,
    };
    let restored = model.restore(&img, parser.as_ref())?;
    imageio::save_rgb(&restored, out)?;
    if let Some(fig) = figure {
        let mut panels = vec![imageio::to_rgb8(&img)?];
        if let Some(p) = &parser {
            panels.push(imageio::to_rgb8(p)?);
        }
        panels.push(imageio::to_rgb8(&restored)?);
        if let Some(dir) = fig.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        imageio::side_by_side(&panels).save_with_format(fig, image::ImageFormat::Png)?;
    }
    Ok(())
}

/// Trains every configured variant and writes `ablation.csv`, `ablation.png` and the config into `out`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationReport> {
    let variants = &cfg.ablation.variants;
    if variants.is_empty() {
        return Err(Error::invalid("ablation.variants is empty"));
    }
    let needs_map = variants.iter().any(|v| v.parser_input() == ParserInput::Map);
    let input = if needs_map { ParserInput::Map } else { ParserInput::Absent };
    let train = load_manifest_samples(cfg.data.train_manifest.as_deref(), "train", input, cfg)?;
    let val = match &cfg.data.val_manifest {
        Some(v) => load_manifest_samples(Some(v), "val", input, cfg)?,
        None => train.clone(),
    };
    std::fs::create_dir_all(out)?;
    let effective = RunConfig { model: Some(cfg.model_or_desk()), ..cfg.clone() };
    std::fs::write(out.join(CONFIG_NAME), effective.to_toml()?)?;
    let every = cfg.log_every;
    let report = run_ablation(variants, &cfg.model_or_desk(), &cfg.train, &train, &val, cfg.metric_mode, Some(out), |v, s| {
        if every > 0 && s.step % every == 0 {
            eprintln!("[{v}] step {} loss {:.5}", s.step, s.loss);
        }
    })?;
    std::fs::write(out.join("ablation.csv"), report.to_csv())?;
    let bars: Vec<f64> = report.rows.iter().map(|r| r.ssim).collect();
    bar_chart(&bars).save_with_format(out.join("ablation.png"), image::ImageFormat::Png)?;
    Ok(report)
}

/// One bar per value, left to right in row order, over a `[lo, hi]` axis
/// padded around the data; grey rules mark tenths of the axis.
pub fn bar_chart(values: &[f64]) -> RgbImage {
    const H: u32 = 240;
    const BAR: u32 = 48;
    const GAP: u32 = 16;
    let n = values.len().max(1) as u32;
    let width = GAP + n * (BAR + GAP);
    let mut img = RgbImage::from_pixel(width, H, Rgb([255, 255, 255]));
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let (min, max) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (max - min).max(1e-3);
    let (lo, hi) = (min - 0.5 * span, max + 0.25 * span);
    let plot_h = (H - 2 * GAP) as f64;
    for k in 0..=10 {
        let y = H - GAP - (plot_h * k as f64 / 10.0).round() as u32;
        for x in 0..width {
            img.put_pixel(x, y.min(H - 1), Rgb([220, 220, 220]));
        }
    }
    let colors = palette(values.len(), 7);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let frac = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let top = H - GAP - (plot_h * frac).round() as u32;
        let x0 = GAP + i as u32 * (BAR + GAP);
        for y in top..H - GAP {
            for x in x0..x0 + BAR {
                img.put_pixel(x, y, Rgb(colors[i]));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values_and_create_tables() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.total_steps=12").unwrap();
        apply_override(&mut t, "train.lr_init = 1e-3").unwrap();
        apply_override(&mut t, "synth.degradation=rain_streaks").unwrap();
        apply_override(&mut t, "model.blocks_per_level=[1, 1, 1, 1]").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.train.total_steps, 12);
        assert_eq!(cfg.train.lr_init, 1e-3);
        assert_eq!(cfg.synth.degradation, Degradation::RainStreaks);
        assert_eq!(cfg.model.unwrap().blocks_per_level, vec![1, 1, 1, 1]);
        assert!(apply_override(&mut toml::Table::new(), "no_equals").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::load(None, &["train.totl_steps=3".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig { model: Some(ModelConfig::desk()), ..Default::default() };
        cfg.train.clip_norm = Some(1.0);
        cfg.data.val_manifest = Some("v/manifest.csv".into());
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let plain = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&plain.to_toml().unwrap()).unwrap(), plain);
    }

    #[test]
    fn bar_chart_heights_follow_values() {
        let img = bar_chart(&[0.8, 0.9, 0.85]);
        let bar_top = |i: u32| (0..img.height()).find(|&y| img.get_pixel(16 + i * 64 + 24, y) != &Rgb([255, 255, 255]) && img.get_pixel(16 + i * 64 + 24, y) != &Rgb([220, 220, 220])).unwrap();
        assert!(bar_top(1) < bar_top(2) && bar_top(2) < bar_top(0));
    }
}
