//! Training loops for the two-phase protocol: an image phase with the
//! temporal layers disabled and frozen, then a video phase (finetuning or
//! from scratch) on joint batches of videos and single frames.
//!
//! Step `s` draws its batch from `root.split(2s)` and its σ/ε from
//! `root.split(2s + 1)`, so a run is a pure function of the root stream.

use crate::denoiser::{is_temporal_name, AdamW, DenoiserModel, OptimizerConfig, ParamGroups};
use crate::edm::{denoising_loss, Conditioning, EdmParams};
use crate::error::{bail, Result};
use crate::ndcore::{RngStream, Tensor};
use crate::noise_prior::NoiseSpec;
use crate::scalar::Scalar;
use crate::toydata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Videos per step in the video phase.
    pub batch_size: usize,
    /// Single frames per step; the whole batch in the image phase.
    pub image_batch: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            image_batch: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Frames only; temporal layers disabled and excluded from updates.
    Image,
    /// Joint video and frame batches; every parameter is trained.
    Video,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub losses: Vec<f64>,
    pub optimizer: AdamW<T>,
}

fn cond_for(model_classes: usize, labels: &[usize]) -> Conditioning {
    if model_classes > 0 {
        Conditioning::classes(labels.to_vec())
    } else {
        Conditioning::none()
    }
}

/// Loss and gradient of one joint batch: the item-weighted mean of the video
/// and frame losses.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    videos: Option<(&Tensor<T>, &[usize])>,
    frames: Option<(&Tensor<T>, &[usize])>,
    spec: &NoiseSpec,
    edm: &EdmParams,
    rng: &RngStream,
) -> Result<(f64, Vec<T>)> {
    let k = model.config().num_classes;
    let mut total = 0.0;
    let mut grads = vec![T::zero(); model.num_params()];
    let mut count = 0usize;
    let parts = [videos, frames];
    let sizes: Vec<usize> = parts
        .iter()
        .map(|p| p.map_or(0, |(x, _)| x.dims()[0]))
        .collect();
    let n: usize = sizes.iter().sum();
    if n == 0 {
        bail!(Parameter, "joint batch is empty");
    }
    for (part, (data, size)) in parts.iter().zip(&sizes).enumerate() {
        let Some((x, labels)) = data else { continue };
        let out = denoising_loss(
            model,
            x,
            &cond_for(k, labels),
            spec,
            edm,
            &rng.split(part as u64),
        )?;
        let w = *size as f64 / n as f64;
        total += w * out.loss;
        let wt = T::c(w);
        for (g, v) in grads.iter_mut().zip(out.grads) {
            *g += wt * v;
        }
        count += size;
    }
    debug_assert_eq!(count, n);
    Ok((total, grads))
}

/// Runs `cfg.steps` optimizer steps on `model` in place.
pub fn train<T: Scalar>(
    model: &mut DenoiserModel<T>,
    data: &Dataset,
    phase: Phase,
    cfg: &TrainConfig,
    spec: &NoiseSpec,
    edm: &EdmParams,
    root: &RngStream,
) -> Result<TrainOutcome<T>> {
    let mut optimizer = AdamW::new(cfg.optimizer, model.params())?;
    let groups = match phase {
        Phase::Image => {
            model.set_temporal_enabled(false);
            ParamGroups::from_layout(model.layout(), |n| !is_temporal_name(n))
        }
        Phase::Video => ParamGroups::from_layout(model.layout(), |_| true),
    };
    let (b, b_img) = match phase {
        Phase::Image => (0, cfg.image_batch.max(1)),
        Phase::Video => (cfg.batch_size, cfg.image_batch),
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = step as u64;
        let batch = data.next_batch::<T>(b, b_img, &mut root.split(2 * s))?;
        let videos = batch.videos.as_ref().map(|v| (v, batch.labels.as_slice()));
        let frames = batch
            .image_frames
            .as_ref()
            .map(|f| (f, batch.image_labels.as_slice()));
        let (loss, grads) = joint_loss(model, videos, frames, spec, edm, &root.split(2 * s + 1))?;
        if !loss.is_finite() {
            bail!(Numeric, "non-finite loss at training step {step}");
        }
        optimizer.step(model.params_mut(), &grads, &groups)?;
        losses.push(loss);
    }
    model.set_steps_trained(model.steps_trained() + cfg.steps as u64);
    Ok(TrainOutcome { losses, optimizer })
}
