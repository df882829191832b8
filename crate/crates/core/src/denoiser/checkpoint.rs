//! Checkpoint directory layout:
//!
//! ```text
//! manifest.txt          key = value lines
//! params/<name>.ptns    one tensor per named parameter view
//! ema/<name>.ptns       present when the manifest says ema = true
//! ```

use std::fs;
use std::path::Path;

use crate::denoiser::model::{DenoiserModel, ModelConfig};
use crate::error::{bail, Error, Result};
use crate::ndcore::{ptns, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: DenoiserModel<T>,
    pub ema: Option<Vec<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// The model with EMA weights substituted when they exist.
    pub fn ema_model(&self) -> DenoiserModel<T> {
        let mut m = self.model.clone();
        if let Some(e) = &self.ema {
            m.params_mut().copy_from_slice(e);
        }
        m
    }
}

fn write_views<T: Scalar>(dir: &Path, model: &DenoiserModel<T>, values: &[T]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in model.layout().views() {
        let t = Tensor::from_dims(&v.dims, values[v.range()].to_vec())?;
        ptns::write(dir.join(format!("{}.ptns", v.name)), &t)?;
    }
    Ok(())
}

fn read_views<T: Scalar>(dir: &Path, model: &DenoiserModel<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); model.num_params()];
    for v in model.layout().views() {
        let t: Tensor<T> = ptns::read(dir.join(format!("{}.ptns", v.name)))?;
        if t.dims() != v.dims.as_slice() {
            bail!(
                Format,
                "parameter {} has dims {:?}, expected {:?}",
                v.name,
                t.dims(),
                v.dims
            );
        }
        out[v.range()].copy_from_slice(t.data());
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &DenoiserModel<T>,
    ema: Option<&[T]>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_views(&dir.join("params"), model, model.params())?;
    if let Some(e) = ema {
        if e.len() != model.num_params() {
            bail!(
                Shape,
                "EMA vector has {} entries, model has {}",
                e.len(),
                model.num_params()
            );
        }
        write_views(&dir.join("ema"), model, e)?;
    }
    let cfg = model.config();
    let manifest = format!(
        "arch_hash = {}\narch = {}\ntemporal_enabled = {}\nstep = {}\nema = {}\ndtype = {}\nnum_params = {}\n",
        cfg.arch_hash(),
        cfg.arch_string(),
        cfg.temporal_enabled,
        model.steps_trained(),
        ema.is_some(),
        T::NAME,
        model.num_params()
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn manifest_value<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks '{key}'")))
}

/// Loads a checkpoint written by [`save_checkpoint`]. The architecture
/// recorded in the manifest must match `config` apart from `temporal_enabled`,
/// which is taken from the manifest.
pub fn load_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let hash = manifest_value(&text, "arch_hash")?;
    if hash != config.arch_hash() {
        bail!(
            Config,
            "checkpoint architecture {} ({hash}) differs from configured {} ({})",
            manifest_value(&text, "arch")?,
            config.arch_string(),
            config.arch_hash()
        );
    }
    let parse_bool = |key: &str| -> Result<bool> {
        manifest_value(&text, key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest '{key}' is not a boolean")))
    };
    let step: u64 = manifest_value(&text, "step")?
        .parse()
        .map_err(|_| Error::Format("manifest 'step' is not an integer".into()))?;
    let mut cfg = config.clone();
    cfg.temporal_enabled = parse_bool("temporal_enabled")?;
    let shell = DenoiserModel::from_params(
        cfg.clone(),
        vec![T::zero(); crate::denoiser::ParamLayout::for_config(&cfg).total()],
        step,
    )?;
    let params = read_views(&dir.join("params"), &shell)?;
    let model = DenoiserModel::from_params(cfg, params, step)?;
    let ema = if parse_bool("ema")? {
        Some(read_views(&dir.join("ema"), &model)?)
    } else {
        None
    };
    Ok(Checkpoint { model, ema })
}
