//! Procedural video datasets with values in `[-1, 1]`.
//!
//! * `bouncing_ball`: a soft ball of random sign moving at constant speed with
//!   elastic reflection, over a low-frequency background texture that is
//!   redrawn per video and drifts slowly in a random direction. Classes bucket the initial direction of motion.
//! * `moving_bars`: a sinusoidal grating translating with periodic wrap.
//!   Classes bucket the signed velocity.
//! * `drifting_gradient`: a low-frequency plane wave whose phase drifts.
//!   Classes bucket the signed drift rate.
//!
//! Video `v` is generated from `RngStream::new(seed, 1).split(v)` alone, so
//! generation is independent per video.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::ndcore::{ptns, RngStream, Shape, Tensor};
use crate::scalar::Scalar;

pub const DATA_STREAM: u64 = 1;

/// Background drift of `bouncing_ball` in units of the shorter side per frame.
const BG_DRIFT: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    BouncingBall,
    MovingBars,
    DriftingGradient,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::BouncingBall => "bouncing_ball",
            DatasetKind::MovingBars => "moving_bars",
            DatasetKind::DriftingGradient => "drifting_gradient",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bouncing_ball" => DatasetKind::BouncingBall,
            "moving_bars" => DatasetKind::MovingBars,
            "drifting_gradient" => DatasetKind::DriftingGradient,
            other => bail!(Parameter, "unknown dataset kind '{other}'"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_videos: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Speed multiplier; 0 gives static videos.
    pub motion_scale: f64,
    pub class_count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::BouncingBall,
            n_videos: 256,
            n_frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            motion_scale: 1.0,
            class_count: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            bail!(
                Parameter,
                "resolution {}×{} below the 4×4 minimum",
                self.height,
                self.width
            );
        }
        if self.n_videos == 0 || self.n_frames == 0 {
            bail!(Parameter, "dataset needs at least one video and one frame");
        }
        if self.channels != 1 {
            bail!(
                Parameter,
                "only single-channel datasets are generated, got {}",
                self.channels
            );
        }
        if self.class_count == 0 {
            bail!(Parameter, "class_count must be positive");
        }
        if !(self.motion_scale >= 0.0) || !self.motion_scale.is_finite() {
            bail!(
                Parameter,
                "motion_scale must be finite and nonnegative, got {}",
                self.motion_scale
            );
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "kind={};n_videos={};n_frames={};height={};width={};channels={};motion_scale={};class_count={};seed={}",
            self.kind,
            self.n_videos,
            self.n_frames,
            self.height,
            self.width,
            self.channels,
            self.motion_scale,
            self.class_count,
            self.seed
        )
    }

    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same distribution, disjoint videos.
    pub fn held_out(&self, n_videos: usize) -> Self {
        Self {
            n_videos,
            seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
            ..self.clone()
        }
    }
}

/// A generated dataset: `n_videos × n_frames × 1 × h × w` videos and labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DatasetSpec,
    videos: Option<Tensor<f64>>,
    labels: Vec<usize>,
}

/// One training batch. Either part may be absent.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub videos: Option<Tensor<T>>,
    pub labels: Vec<usize>,
    /// Single frames shaped `b_img × 1 × c × h × w`.
    pub image_frames: Option<Tensor<T>>,
    pub image_labels: Vec<usize>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, DATA_STREAM);
    let per: Vec<(Vec<f64>, usize)> = (0..spec.n_videos)
        .into_par_iter()
        .map(|v| generate_video(spec, &mut root.split(v as u64)))
        .collect();
    let mut data = Vec::with_capacity(spec.n_videos * spec.n_frames * spec.height * spec.width);
    let mut labels = Vec::with_capacity(spec.n_videos);
    for (frames, label) in per {
        data.extend(frames);
        labels.push(label);
    }
    let shape = Shape::video(spec.n_videos, spec.n_frames, 1, spec.height, spec.width)?;
    Ok(Dataset {
        spec: spec.clone(),
        videos: Some(Tensor::from_vec(shape, data)?),
        labels,
    })
}

fn bucket(x: f64, lo: f64, hi: f64, k: usize) -> usize {
    (((x - lo) / (hi - lo) * k as f64) as usize).min(k - 1)
}

/// Smooth random field bounded by `amp` in absolute value, translating by
/// `(vy, vx)` pixels per frame. Frames are stacked in `out`.
fn drifting_background(
    rng: &mut RngStream,
    spec: &DatasetSpec,
    amp: f64,
    vel: (f64, f64),
) -> Vec<f64> {
    const WAVES: usize = 3;
    let (h, w) = (spec.height, spec.width);
    let mut waves = Vec::with_capacity(WAVES);
    for _ in 0..WAVES {
        let fy = rng.uniform() * 1.5;
        let fx = rng.uniform() * 1.5;
        let phase = rng.uniform() * 2.0 * PI;
        let a = 0.5 + rng.uniform();
        waves.push((fy, fx, phase, a));
    }
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(spec.n_frames * h * w);
    for t in 0..spec.n_frames {
        let (oy, ox) = (vel.0 * t as f64, vel.1 * t as f64);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 - oy, x as f64 - ox);
                let s: f64 = waves
                    .iter()
                    .map(|&(fy, fx, ph, a)| {
                        a * (2.0 * PI * (fy * py / h as f64 + fx * px / w as f64) + ph).cos()
                    })
                    .sum();
                out.push(amp * s / norm);
            }
        }
    }
    out
}

/// Position after one step of constant-velocity motion reflected into `[lo, hi]`.
pub fn reflect_step(p: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut p = p + v;
    let mut v = v;
    let span = hi - lo;
    if span <= 0.0 {
        return (lo, v);
    }
    // Fold into [lo, hi]; speeds above the span fold more than once.
    loop {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Ball radius in pixels for a frame of the given size.
pub fn ball_radius(h: usize, w: usize) -> f64 {
    0.15 * h.min(w) as f64
}

/// Ball centres `(y, x)` for every frame, from the first draws of `rng`.
pub fn ball_trajectory(spec: &DatasetSpec, rng: &mut RngStream) -> (Vec<(f64, f64)>, usize) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let r = ball_radius(spec.height, spec.width);
    let (ylo, yhi, xlo, xhi) = (r, h - 1.0 - r, r, w - 1.0 - r);
    let mut y = ylo + rng.uniform() * (yhi - ylo);
    let mut x = xlo + rng.uniform() * (xhi - xlo);
    let theta = rng.uniform() * 2.0 * PI;
    let speed = spec.motion_scale * 0.12 * h.min(w);
    let (mut vy, mut vx) = (speed * theta.sin(), speed * theta.cos());
    let label = bucket(theta, 0.0, 2.0 * PI, spec.class_count);
    let mut out = Vec::with_capacity(spec.n_frames);
    for _ in 0..spec.n_frames {
        out.push((y, x));
        (y, vy) = reflect_step(y, vy, ylo, yhi);
        (x, vx) = reflect_step(x, vx, xlo, xhi);
    }
    (out, label)
}

fn generate_video(spec: &DatasetSpec, rng: &mut RngStream) -> (Vec<f64>, usize) {
    let (h, w, n) = (spec.height, spec.width, spec.n_frames);
    let mut frames = Vec::with_capacity(n * h * w);
    let label = match spec.kind {
        DatasetKind::BouncingBall => {
            let (traj, label) = ball_trajectory(spec, rng);
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let amp = sign * (0.35 + 0.1 * rng.uniform());
            let drift_dir = rng.uniform() * 2.0 * PI;
            let drift = spec.motion_scale * BG_DRIFT * h.min(w) as f64;
            let bg = drifting_background(
                rng,
                spec,
                0.55,
                (drift * drift_dir.sin(), drift * drift_dir.cos()),
            );
            let r = ball_radius(h, w);
            for (t, &(cy, cx)) in traj.iter().enumerate() {
                let bg = &bg[t * h * w..(t + 1) * h * w];
                for yy in 0..h {
                    for xx in 0..w {
                        let d2 = (yy as f64 - cy).powi(2) + (xx as f64 - cx).powi(2);
                        let ball = amp * (-d2 / (2.0 * r * r)).exp();
                        frames.push((bg[yy * w + xx] + ball).clamp(-1.0, 1.0));
                    }
                }
            }
            label
        }
        DatasetKind::MovingBars => {
            let vertical = rng.uniform() < 0.5;
            let cycles = 1.0 + rng.uniform();
            let phase = rng.uniform();
            let amp = 0.4 + 0.4 * rng.uniform();
            // velocity in cycles per frame; one pass over 8 frames stays below a full period
            let vel = spec.motion_scale * (rng.uniform() * 2.0 - 1.0) * 0.1;
            let label = bucket(
                vel,
                -0.1 * spec.motion_scale.max(1e-12),
                0.1 * spec.motion_scale.max(1e-12),
                spec.class_count,
            );
            for t in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let u = if vertical {
                            xx as f64 / w as f64
                        } else {
                            yy as f64 / h as f64
                        };
                        let arg = cycles * u + phase + vel * t as f64;
                        frames.push(amp * (2.0 * PI * arg.rem_euclid(1.0)).sin());
                    }
                }
            }
            label
        }
        DatasetKind::DriftingGradient => {
            let theta = rng.uniform() * 2.0 * PI;
            let phase = rng.uniform() * 2.0 * PI;
            let amp = 0.4 + 0.4 * rng.uniform();
            let omega = spec.motion_scale * (rng.uniform() * 2.0 - 1.0) * 0.4;
            let label = bucket(
                omega,
                -0.4 * spec.motion_scale.max(1e-12),
                0.4 * spec.motion_scale.max(1e-12),
                spec.class_count,
            );
            let (ct, st) = (theta.cos(), theta.sin());
            for t in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let u = (xx as f64 / w as f64) * ct + (yy as f64 / h as f64) * st;
                        frames.push(amp * (PI * u + phase + omega * t as f64).cos());
                    }
                }
            }
            label
        }
    };
    (frames, label)
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn videos(&self) -> Result<&Tensor<f64>> {
        match &self.videos {
            Some(v) => Ok(v),
            None => bail!(State, "dataset is empty"),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn video(&self, i: usize) -> Result<Tensor<f64>> {
        self.videos()?.video_item(i)
    }

    /// Wraps existing `n_videos × n_frames × 1 × h × w` videos described by `spec`.
    pub fn from_videos(
        spec: &DatasetSpec,
        videos: Tensor<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        spec.validate()?;
        let want = [
            spec.n_videos,
            spec.n_frames,
            spec.channels,
            spec.height,
            spec.width,
        ];
        if videos.dims() != want {
            bail!(
                Shape,
                "videos have dims {:?}, spec describes {want:?}",
                videos.dims()
            );
        }
        if labels.len() != spec.n_videos || labels.iter().any(|&l| l >= spec.class_count) {
            bail!(
                Parameter,
                "need {} labels below {}",
                spec.n_videos,
                spec.class_count
            );
        }
        Ok(Self {
            spec: spec.clone(),
            videos: Some(videos),
            labels,
        })
    }

    /// The videos at `indices`, in that order; an empty list gives an empty dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            spec: DatasetSpec {
                n_videos: indices.len(),
                ..self.spec.clone()
            },
            videos: if indices.is_empty() {
                None
            } else {
                Some(self.gather(indices)?)
            },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Videos at `indices`, stacked into a batch.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let videos = self.videos()?;
        let (_, n, c, h, w) = videos.shape().as_video()?;
        let per = n * c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                bail!(
                    Parameter,
                    "video index {i} out of range for {} videos",
                    self.len()
                );
            }
            data.extend(
                videos.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| T::c(v)),
            );
        }
        Tensor::from_vec(Shape::video(indices.len(), n, c, h, w)?, data)
    }

    /// Single frames `(video, frame)` stacked as a `k × 1 × c × h × w` batch.
    pub fn gather_frames<T: Scalar>(&self, picks: &[(usize, usize)]) -> Result<Tensor<T>> {
        let videos = self.videos()?;
        let (_, n, c, h, w) = videos.shape().as_video()?;
        let fsz = c * h * w;
        let mut data = Vec::with_capacity(picks.len() * fsz);
        for &(v, f) in picks {
            if v >= self.len() || f >= n {
                bail!(Parameter, "frame ({v}, {f}) out of range");
            }
            let s = (v * n + f) * fsz;
            data.extend(videos.data()[s..s + fsz].iter().map(|&x| T::c(x)));
        }
        Tensor::from_vec(Shape::video(picks.len(), 1, c, h, w)?, data)
    }

    /// Uniformly drawn videos, then uniformly drawn `(video, frame)` pairs.
    pub fn next_batch<T: Scalar>(
        &self,
        b: usize,
        b_img: usize,
        rng: &mut RngStream,
    ) -> Result<Batch<T>> {
        if self.is_empty() {
            bail!(State, "cannot draw a batch from an empty dataset");
        }
        if b + b_img == 0 {
            bail!(Parameter, "batch needs at least one video or image");
        }
        let n = self.len() as u64;
        let idx: Vec<usize> = (0..b).map(|_| rng.below(n) as usize).collect();
        let picks: Vec<(usize, usize)> = (0..b_img)
            .map(|_| {
                let v = rng.below(n) as usize;
                (v, rng.below(self.spec.n_frames as u64) as usize)
            })
            .collect();
        Ok(Batch {
            videos: if b > 0 {
                Some(self.gather(&idx)?)
            } else {
                None
            },
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            image_frames: if b_img > 0 {
                Some(self.gather_frames(&picks)?)
            } else {
                None
            },
            image_labels: picks.iter().map(|&(v, _)| self.labels[v]).collect(),
        })
    }

    /// Writes `video_NNNNN.ptns` files and `index.txt` (`file label spec_hash`).
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let hash = self.spec.hash();
        let mut index = format!("# {}\n", self.spec.canonical());
        for i in 0..self.len() {
            let name = format!("video_{i:05}.ptns");
            ptns::write(dir.join(&name), &self.video(i)?)?;
            index.push_str(&format!("{name} {} {hash}\n", self.labels[i]));
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::export`], checking every entry
    /// against `spec`.
    pub fn import(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("index.txt"))?;
        let hash = spec.hash();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [file, label, h] = parts[..] else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 'file label hash', got '{line}'"),
                });
            };
            if h != hash {
                bail!(Format, "{file} was generated by spec {h}, expected {hash}");
            }
            let label = label.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad label '{label}'"),
            })?;
            let t: Tensor<f64> = ptns::read(dir.join(file))?;
            let want = [1, spec.n_frames, spec.channels, spec.height, spec.width];
            if t.dims() != want {
                bail!(Format, "{file} has dims {:?}, expected {want:?}", t.dims());
            }
            data.extend_from_slice(t.data());
            labels.push(label);
        }
        if labels.len() != spec.n_videos {
            bail!(
                Format,
                "index lists {} videos, spec has {}",
                labels.len(),
                spec.n_videos
            );
        }
        let shape = Shape::video(
            labels.len(),
            spec.n_frames,
            spec.channels,
            spec.height,
            spec.width,
        )?;
        Ok(Self {
            spec: spec.clone(),
            videos: Some(Tensor::from_vec(shape, data)?),
            labels,
        })
    }
}
