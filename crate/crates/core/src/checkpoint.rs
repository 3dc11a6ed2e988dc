//! Checkpoint directories: parameters and optimizer moments as named-tensor
//! archives plus a TOML manifest.
//!
//! ```text
//! <dir>/model.safetensors   parameter path -> tensor
//! <dir>/optim.safetensors   "m.<path>", "v.<path>" AdamW moments
//! <dir>/manifest.toml       model config, train config, step, seed
//! ```

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, PptFormer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::optim::AdamW;
use crate::training::TrainConfig;

pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIM_FILE: &str = "optim.safetensors";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_metric: Option<f64>,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

fn to_bytes<T: Scalar>(t: &Tensor<T>) -> (Dtype, Vec<u8>) {
    if T::DTYPE == "F64" {
        (Dtype::F64, t.data().iter().flat_map(|v| v.to_f64_lossy().to_le_bytes()).collect())
    } else {
        (Dtype::F32, t.data().iter().flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes()).collect())
    }
}

fn from_view<T: Scalar>(name: &str, view: &TensorView<'_>) -> Result<Tensor<T>> {
    let bytes = view.data();
    let data: Vec<T> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
        other => return Err(Error::Format(format!("tensor {name} has unsupported dtype {other:?}"))),
    };
    Tensor::from_vec(view.shape(), data)
}

/// Writes `(name, tensor)` pairs as one archive.
pub fn write_tensors<T: Scalar>(path: &Path, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    let encoded: Vec<(String, Dtype, &[usize], Vec<u8>)> = entries
        .iter()
        .map(|(n, t)| {
            let (dt, b) = to_bytes(t);
            (n.clone(), dt, t.shape(), b)
        })
        .collect();
    let views = encoded
        .iter()
        .map(|(n, dt, shape, b)| Ok((n.clone(), TensorView::new(*dt, shape.to_vec(), b)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, &None)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads every tensor of an archive, converting to `T`.
pub fn read_tensors<T: Scalar>(path: &Path) -> Result<HashMap<String, Tensor<T>>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes)?;
    st.tensors().into_iter().map(|(n, v)| Ok((n.clone(), from_view(&n, &v)?))).collect()
}

pub fn save_params<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let entries: Vec<(String, &Tensor<T>)> = params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    write_tensors(path, &entries)
}

/// Overwrites every parameter of `params` from an archive; names and shapes must match exactly.
pub fn load_params<T: Scalar>(path: &Path, params: &mut ParamStore<T>) -> Result<()> {
    let mut loaded = read_tensors::<T>(path)?;
    let mut missing = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        match loaded.remove(&name) {
            Some(t) => {
                if t.shape() != params.get(id).shape() {
                    return Err(Error::invalid(format!(
                        "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        params.get(id).shape()
                    )));
                }
                *params.get_mut(id) = t;
            }
            None => missing.push(name),
        }
    }
    if !missing.is_empty() || !loaded.is_empty() {
        let mut extra: Vec<_> = loaded.into_keys().collect();
        extra.sort();
        missing.truncate(5);
        extra.truncate(5);
        return Err(Error::invalid(format!(
            "checkpoint does not match the model; missing {missing:?}, unexpected {extra:?}"
        )));
    }
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(dir.join(MANIFEST_FILE), toml::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::NotFound(path));
    }
    let m: Manifest = toml::from_str(&std::fs::read_to_string(&path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Writes model parameters, optional optimizer state and the manifest into `dir`.
pub fn save<T: Scalar>(dir: &Path, model: &PptFormer<T>, optimizer: Option<&AdamW<T>>, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_params(&dir.join(MODEL_FILE), &model.params)?;
    if let Some(opt) = optimizer {
        let mut entries = Vec::with_capacity(2 * opt.m.len() + 1);
        let t = Tensor::scalar(T::lit(opt.t as f64));
        entries.push(("t".to_string(), &t));
        for ((_, name, _), (m, v)) in model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
            entries.push((format!("m.{name}"), m));
            entries.push((format!("v.{name}"), v));
        }
        write_tensors(&dir.join(OPTIM_FILE), &entries)?;
    }
    write_manifest(dir, manifest)
}

/// Rebuilds a model from a checkpoint directory.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<(PptFormer<T>, Manifest)> {
    if !dir.exists() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let manifest = read_manifest(dir)?;
    let mut model = PptFormer::new(manifest.model.clone(), manifest.seed)?;
    load_params(&dir.join(MODEL_FILE), &mut model.params)?;
    Ok((model, manifest))
}

/// Loads the moments saved next to a checkpoint into `opt`.
pub fn load_optimizer<T: Scalar>(dir: &Path, params: &ParamStore<T>, opt: &mut AdamW<T>) -> Result<()> {
    let mut loaded = read_tensors::<T>(&dir.join(OPTIM_FILE))?;
    let t = loaded.remove("t").ok_or_else(|| Error::Format("optimizer archive lacks the step counter".into()))?;
    opt.t = t.data().first().map_or(0, |v| v.to_f64_lossy() as u64);
    for (i, (_, name, p)) in params.iter().enumerate() {
        for (prefix, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let key = format!("{prefix}.{name}");
            let t = loaded.remove(&key).ok_or_else(|| Error::Format(format!("optimizer archive lacks {key}")))?;
            if t.shape() != p.shape() {
                return Err(Error::invalid(format!("optimizer moment {key} has shape {:?}", t.shape())));
            }
            *slot = t;
        }
    }
    Ok(())
}
