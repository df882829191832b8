//! Finetuning cells for the α sweep and the training-strategy comparison.
//!
//! Every cell derives its randomness from `(seed, repeat)` alone, never from
//! its noise prior, so cells that differ only in prior share batches, σ draws
//! and initial weights.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::analysis::metric::{frame_stats, frechet_distance, video_stats, VideoStats};
use crate::denoiser::{init_from_image_model, DenoiserModel, ModelConfig};
use crate::edm::{Conditioning, EdmParams};
use crate::error::{bail, Result};
use crate::ndcore::{RngStream, Shape, Tensor};
use crate::noise_prior::{NoiseKind, NoiseSpec};
use crate::sampler::{sample, ChurnNoise, ModelDenoiser, SamplerConfig};
use crate::scalar::Scalar;
use crate::toydata::Dataset;
use crate::train::{train, Phase, TrainConfig};

pub const TRAINING_STREAM: u64 = 2;
pub const SAMPLING_STREAM: u64 = 3;
pub const ANALYSIS_STREAM: u64 = 4;

/// Children of the training stream.
pub mod streams {
    pub const MODEL_INIT: u64 = 0;
    pub const IMAGE_PHASE: u64 = 1;
    pub const TEMPORAL_INIT: u64 = 2;
    pub const VIDEO_PHASE: u64 = 3;
}

/// Settings shared by every cell of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub seed: u64,
    pub model: ModelConfig,
    pub edm: EdmParams,
    pub sampler: SamplerConfig,
    pub video_training: TrainConfig,
    /// Videos generated per cell for the metrics.
    pub n_generate: usize,
    /// Sample with the EMA weights rather than the raw weights.
    pub use_ema: bool,
    pub repeats: usize,
}

type CellKey = (Init, NoiseKind, u64);

/// Inputs computed once per experiment, plus finished cells so that runs
/// sharing a cell (the α = 0 sweep row and the finetune strategy row) train
/// it once.
pub struct ExperimentContext<'a, T> {
    pub image_model: &'a DenoiserModel<T>,
    pub data: &'a Dataset,
    pub real_video: VideoStats,
    pub real_frame: VideoStats,
    done: Mutex<BTreeMap<(String, CellKey, usize), CellResult>>,
}

impl<'a, T: Scalar> ExperimentContext<'a, T> {
    /// `held_out` supplies the reference statistics.
    pub fn new(
        image_model: &'a DenoiserModel<T>,
        data: &'a Dataset,
        held_out: &Dataset,
    ) -> Result<Self> {
        Ok(Self {
            image_model,
            data,
            real_video: video_stats(held_out.videos()?)?,
            real_frame: frame_stats(held_out.videos()?)?,
            done: Mutex::new(BTreeMap::new()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Init {
    /// Spatial weights from the image model, identity temporal layers.
    ImageModel,
    /// Fresh random weights.
    Scratch,
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub init: Init,
    pub prior: NoiseSpec,
}

impl Cell {
    /// Mixed and progressive at α = 0 sample exactly like iid and share its key.
    fn key(&self) -> CellKey {
        let kind = match self.prior.kind() {
            NoiseKind::Mixed | NoiseKind::Progressive if self.prior.alpha() == 0.0 => {
                NoiseKind::Iid
            }
            k => k,
        };
        (self.init, kind, self.prior.alpha().to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub repeat: usize,
    pub seed: u64,
    pub steps: usize,
    pub video_metric: f64,
    pub frame_metric: f64,
    pub init_hash: String,
    pub final_hash: String,
}

/// Seed of repeat `r`; repeat 0 uses the experiment seed itself.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn initial_model<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    settings: &ExperimentSettings,
    init: Init,
    seed: u64,
) -> Result<DenoiserModel<T>> {
    let root = RngStream::new(seed, TRAINING_STREAM);
    match init {
        Init::ImageModel => {
            init_from_image_model(ctx.image_model, &mut root.split(streams::TEMPORAL_INIT))
        }
        Init::Scratch => {
            let mut cfg = settings.model.clone();
            cfg.temporal_enabled = true;
            DenoiserModel::new(cfg, &mut root.split(streams::MODEL_INIT))
        }
    }
}

/// Draws `n` videos from `den`-equivalent `model` under `prior`, with
/// labels drawn from the dataset when the model is class-conditional.
pub fn generate_videos<T: Scalar>(
    model: &DenoiserModel<T>,
    edm: &EdmParams,
    sampler: &SamplerConfig,
    prior: &NoiseSpec,
    data: &Dataset,
    n: usize,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    let s = data.spec();
    let shape = Shape::video(n, s.n_frames, s.channels, s.height, s.width)?;
    let noise: Tensor<T> = prior.sample(&shape, &mut rng.split(0))?;
    let cond = if model.config().num_classes > 0 {
        let mut r = rng.split(1);
        Conditioning::classes(
            (0..n)
                .map(|_| data.labels()[r.below(data.len() as u64) as usize])
                .collect(),
        )
    } else {
        Conditioning::none()
    };
    let den = ModelDenoiser::new(model, cond, *edm);
    let mut churn = (sampler.churn > 0.0).then(|| ChurnNoise {
        spec: *prior,
        rng: rng.split(2),
    });
    sample(&den, sampler, &noise, churn.as_mut())
}

pub fn param_hash<T: Scalar>(params: &[T]) -> String {
    use sha2::{Digest, Sha256};
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for &p in params {
        p.write_le(&mut bytes);
    }
    let d = Sha256::digest(&bytes);
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run_cell<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    settings: &ExperimentSettings,
    cell: &Cell,
    repeat: usize,
) -> Result<CellResult> {
    let seed = repeat_seed(settings.seed, repeat);
    let mut model = initial_model(ctx, settings, cell.init, seed)?;
    let init_hash = param_hash(model.params());
    let root = RngStream::new(seed, TRAINING_STREAM).split(streams::VIDEO_PHASE);
    let outcome = train(
        &mut model,
        ctx.data,
        Phase::Video,
        &settings.video_training,
        &cell.prior,
        &settings.edm,
        &root,
    )?;
    let final_hash = param_hash(model.params());
    if settings.use_ema {
        model.params_mut().copy_from_slice(outcome.optimizer.ema());
    }
    let videos = generate_videos(
        &model,
        &settings.edm,
        &settings.sampler,
        &cell.prior,
        ctx.data,
        settings.n_generate,
        &RngStream::new(seed, SAMPLING_STREAM),
    )?;
    Ok(CellResult {
        cell: *cell,
        repeat,
        seed,
        steps: settings.video_training.steps,
        video_metric: frechet_distance(&ctx.real_video, &video_stats(&videos)?)?,
        frame_metric: frechet_distance(&ctx.real_frame, &frame_stats(&videos)?)?,
        init_hash,
        final_hash,
    })
}

/// Runs each distinct cell once per repeat, in parallel, and returns results
/// for `cells` in order (repeat-major within each cell).
pub fn run_cells<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    settings: &ExperimentSettings,
    cells: &[Cell],
) -> Result<Vec<Vec<CellResult>>> {
    if settings.repeats == 0 {
        bail!(Config, "repeats must be at least 1");
    }
    let tag = format!("{settings:?}");
    let mut unique: BTreeMap<CellKey, Cell> = BTreeMap::new();
    for c in cells {
        unique.entry(c.key()).or_insert(*c);
    }
    let jobs: Vec<(Cell, usize)> = {
        let done = ctx.done.lock().expect("cell memo poisoned");
        unique
            .values()
            .flat_map(|c| (0..settings.repeats).map(move |r| (*c, r)))
            .filter(|(c, r)| !done.contains_key(&(tag.clone(), c.key(), *r)))
            .collect()
    };
    let fresh: Vec<Result<CellResult>> = jobs
        .par_iter()
        .map(|(c, r)| run_cell(ctx, settings, c, *r))
        .collect();
    let mut done = ctx.done.lock().expect("cell memo poisoned");
    for res in fresh {
        let res = res?;
        done.insert((tag.clone(), res.cell.key(), res.repeat), res);
    }
    Ok(cells
        .iter()
        .map(|c| {
            (0..settings.repeats)
                .map(|r| {
                    let mut res = done[&(tag.clone(), c.key(), r)].clone();
                    res.cell = *c;
                    res
                })
                .collect()
        })
        .collect())
}

/// One row of the α sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `mixed`, `progressive` or `scratch`.
    pub kind: String,
    pub alpha: f64,
    pub results: Vec<CellResult>,
}

impl SweepRow {
    pub fn mean_video(&self) -> f64 {
        self.results.iter().map(|r| r.video_metric).sum::<f64>() / self.results.len() as f64
    }

    pub fn mean_frame(&self) -> f64 {
        self.results.iter().map(|r| r.frame_metric).sum::<f64>() / self.results.len() as f64
    }
}

/// Finetunes under each `(kind, α)` with the matching sampling prior, plus a
/// scratch row trained with i.i.d. noise. `α = inf` selects the frozen prior.
pub fn run_alpha_sweep<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    settings: &ExperimentSettings,
    alphas: &[f64],
    kinds: &[NoiseKind],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || kinds.is_empty() {
        bail!(Config, "alpha sweep needs at least one alpha and one kind");
    }
    let mut labels = Vec::new();
    let mut cells = Vec::new();
    for &kind in kinds {
        if !matches!(kind, NoiseKind::Mixed | NoiseKind::Progressive) {
            bail!(
                Config,
                "alpha sweep kinds are mixed and progressive, got {kind}"
            );
        }
        for &a in alphas {
            labels.push((kind.to_string(), a));
            cells.push(Cell {
                init: Init::ImageModel,
                prior: NoiseSpec::with_alpha(kind, a)?,
            });
        }
    }
    labels.push(("scratch".to_string(), 0.0));
    cells.push(Cell {
        init: Init::Scratch,
        prior: NoiseSpec::iid(),
    });
    let results = run_cells(ctx, settings, &cells)?;
    Ok(labels
        .into_iter()
        .zip(results)
        .map(|((kind, alpha), results)| SweepRow {
            kind,
            alpha,
            results,
        })
        .collect())
}

/// Rows `scratch`, `finetune`, `mixed`, `progressive`.
pub fn run_strategy_comparison<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    settings: &ExperimentSettings,
    mixed_alpha: f64,
    progressive_alpha: f64,
) -> Result<Vec<SweepRow>> {
    let rows = [
        ("scratch", Init::Scratch, NoiseSpec::iid(), 0.0),
        ("finetune", Init::ImageModel, NoiseSpec::iid(), 0.0),
        (
            "mixed",
            Init::ImageModel,
            NoiseSpec::new(NoiseKind::Mixed, mixed_alpha)?,
            mixed_alpha,
        ),
        (
            "progressive",
            Init::ImageModel,
            NoiseSpec::new(NoiseKind::Progressive, progressive_alpha)?,
            progressive_alpha,
        ),
    ];
    let cells: Vec<Cell> = rows
        .iter()
        .map(|r| Cell {
            init: r.1,
            prior: r.2,
        })
        .collect();
    let results = run_cells(ctx, settings, &cells)?;
    Ok(rows
        .iter()
        .zip(results)
        .map(|(r, results)| SweepRow {
            kind: r.0.to_string(),
            alpha: r.3,
            results,
        })
        .collect())
}
