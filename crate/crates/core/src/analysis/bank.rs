use nalgebra::DMatrix;

use crate::denoiser::DenoiserModel;
use crate::edm::{Conditioning, EdmParams};
use crate::error::{bail, Result};
use crate::ndcore::{RngStream, Tensor};
use crate::sampler::{invert, Denoiser, ModelDenoiser, SamplerConfig};
use crate::scalar::Scalar;
use crate::toydata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEntry {
    pub video_id: usize,
    pub frame_index: usize,
    /// Unit-scale noise map shaped `c × h × w`.
    pub noise: Vec<f64>,
}

/// Inverted noise maps keyed by the video and frame they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseBank {
    pub entries: Vec<NoiseEntry>,
}

impl NoiseBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Statistics need maps of one size from ≥ 2 videos, one of which has ≥ 2 frames.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.entries.first() else {
            bail!(Degenerate, "noise bank is empty");
        };
        let d = first.noise.len();
        if d == 0 || self.entries.iter().any(|e| e.noise.len() != d) {
            bail!(Shape, "noise maps in a bank must share one nonzero size");
        }
        let mut videos: Vec<usize> = self.entries.iter().map(|e| e.video_id).collect();
        videos.sort_unstable();
        let distinct = videos.windows(2).filter(|w| w[0] != w[1]).count() + 1;
        let repeated = videos.windows(2).any(|w| w[0] == w[1]);
        if distinct < 2 || !repeated {
            bail!(
                Degenerate,
                "noise bank needs at least 2 videos and a video with 2 frames ({} entries, {distinct} videos)",
                self.len()
            );
        }
        Ok(())
    }
}

/// Inverts the chosen frames one at a time (as length-1 videos) with `den`.
/// Frames are drawn without replacement per video from `rng`.
pub fn build_noise_bank_with<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    sampler: &SamplerConfig,
    data: &Dataset,
    n_videos: usize,
    frames_per_video: usize,
    rng: &mut RngStream,
) -> Result<NoiseBank> {
    let n_frames = data.spec().n_frames;
    if n_videos > data.len()
        || frames_per_video > n_frames
        || n_videos == 0
        || frames_per_video == 0
    {
        bail!(
            Parameter,
            "cannot take {frames_per_video} frames from {n_videos} videos of a {}×{n_frames} dataset",
            data.len()
        );
    }
    let mut picks = Vec::with_capacity(n_videos * frames_per_video);
    for v in 0..n_videos {
        let mut order: Vec<usize> = (0..n_frames).collect();
        for i in 0..frames_per_video {
            let j = i + rng.below((n_frames - i) as u64) as usize;
            order.swap(i, j);
        }
        let mut chosen = order[..frames_per_video].to_vec();
        chosen.sort_unstable();
        picks.extend(chosen.into_iter().map(|f| (v, f)));
    }
    let frames: Tensor<T> = data.gather_frames(&picks)?;
    let noise = invert(den, sampler, &frames)?;
    let per = noise.len() / picks.len();
    let entries = picks
        .iter()
        .zip(noise.data().chunks_exact(per))
        .map(|(&(video_id, frame_index), m)| NoiseEntry {
            video_id,
            frame_index,
            noise: m.iter().map(|v| v.f64()).collect(),
        })
        .collect();
    Ok(NoiseBank { entries })
}

/// [`build_noise_bank_with`] for a trained image model.
pub fn build_noise_bank<T: Scalar>(
    image_model: &DenoiserModel<T>,
    edm: &EdmParams,
    sampler: &SamplerConfig,
    data: &Dataset,
    n_videos: usize,
    frames_per_video: usize,
    rng: &mut RngStream,
) -> Result<NoiseBank> {
    if image_model.steps_trained() == 0 {
        bail!(
            State,
            "noise bank needs a trained image model; this one has 0 steps"
        );
    }
    if image_model.temporal_enabled() {
        bail!(
            State,
            "noise bank needs an image model with temporal layers disabled"
        );
    }
    if image_model.config().num_classes > 0 {
        bail!(
            Config,
            "noise bank inversion is unconditional; model expects class labels"
        );
    }
    let den = ModelDenoiser::new(image_model, Conditioning::none(), *edm);
    build_noise_bank_with(&den, sampler, data, n_videos, frames_per_video, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineStats {
    pub same_mean: f64,
    pub same_std: f64,
    pub same_pairs: usize,
    pub diff_mean: f64,
    pub diff_std: f64,
    pub diff_pairs: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Mean and population std of pairwise cosine similarity, split into pairs
/// from the same video and pairs from different videos.
pub fn cosine_stats(bank: &NoiseBank) -> Result<CosineStats> {
    bank.validate()?;
    let norms: Vec<f64> = bank
        .entries
        .iter()
        .map(|e| e.noise.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        bail!(Degenerate, "noise map {i} has zero norm");
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..bank.len() {
        for j in i + 1..bank.len() {
            let (a, b) = (&bank.entries[i], &bank.entries[j]);
            let dot: f64 = a.noise.iter().zip(&b.noise).map(|(x, y)| x * y).sum();
            let cos = dot / (norms[i] * norms[j]);
            if a.video_id == b.video_id {
                same.push(cos);
            } else {
                diff.push(cos);
            }
        }
    }
    let (same_mean, same_std) = mean_std(&same);
    let (diff_mean, diff_std) = mean_std(&diff);
    Ok(CosineStats {
        same_mean,
        same_std,
        same_pairs: same.len(),
        diff_mean,
        diff_std,
        diff_pairs: diff.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddedPoint {
    pub video_id: usize,
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
}

/// Projection of the centred maps onto the top two principal axes; each axis
/// is signed so its largest-magnitude loading is positive.
pub fn pca_embed_2d(bank: &NoiseBank) -> Result<Vec<EmbeddedPoint>> {
    let n = bank.len();
    if n < 3 {
        bail!(Degenerate, "PCA embedding needs at least 3 maps, got {n}");
    }
    let d = bank.entries[0].noise.len();
    if bank.entries.iter().any(|e| e.noise.len() != d) {
        bail!(Shape, "noise maps in a bank must share one size");
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| bank.entries[i].noise[j]);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let scale = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if !(scale > 0.0) {
        bail!(Degenerate, "all noise maps are identical");
    }
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut axis: Vec<f64> = vt.row(k).iter().copied().collect();
        let lead = axis
            .iter()
            .copied()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        if svd.singular_values[k] <= 1e-12 * scale * (n as f64).sqrt() {
            axis.iter_mut().for_each(|v| *v = 0.0);
        }
        axes.push(axis);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let proj = |a: &[f64]| row.iter().zip(a).map(|(r, v)| r * v).sum::<f64>();
            EmbeddedPoint {
                video_id: bank.entries[i].video_id,
                frame_index: bank.entries[i].frame_index,
                x: proj(&axes[0]),
                y: proj(&axes[1]),
            }
        })
        .collect())
}
