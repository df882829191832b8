//! Video noise priors: i.i.d., mixed (shared + per-frame), progressive
//! (autoregressive across frames) and frozen (one frame replicated).
//!
//! Every kind has unit marginal variance per element. The frame-to-frame
//! correlation is controlled by a single `alpha`:
//!
//! * mixed: `ε^i = ε_shared + ε_ind^i`, `ε_shared ~ N(0, α²/(1+α²))`,
//!   `ε_ind^i ~ N(0, 1/(1+α²))`; correlation `α²/(1+α²)` for every pair.
//! * progressive: `ε^0 ~ N(0, 1)`, `ε^i = ρ ε^{i-1} + ε_ind^i` with
//!   `ρ = α/√(1+α²)`; correlation `ρ^|i-j|`.
//!
//! RNG consumption, per batch item in order: mixed draws the shared frame
//! first (skipped when `α = 0`), then one frame of standard normals per frame
//! index. iid and progressive draw one frame per index; frozen draws a single
//! frame. With `α = 0`, mixed and progressive reproduce iid bit-for-bit.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::ndcore::{RngStream, Shape, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    Iid,
    Mixed,
    Progressive,
    Frozen,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Iid => "iid",
            NoiseKind::Mixed => "mixed",
            NoiseKind::Progressive => "progressive",
            NoiseKind::Frozen => "frozen",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "iid" => NoiseKind::Iid,
            "mixed" => NoiseKind::Mixed,
            "progressive" => NoiseKind::Progressive,
            "frozen" => NoiseKind::Frozen,
            other => bail!(Parameter, "unknown noise kind '{other}'"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    kind: NoiseKind,
    alpha: f64,
}

impl NoiseSpec {
    /// `alpha` must be finite and nonnegative; it is ignored for iid and frozen.
    pub fn new(kind: NoiseKind, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || alpha.is_infinite() {
            bail!(
                Parameter,
                "alpha must be finite and nonnegative, got {alpha}"
            );
        }
        let alpha = match kind {
            NoiseKind::Iid | NoiseKind::Frozen => 0.0,
            _ => alpha,
        };
        Ok(Self { kind, alpha })
    }

    /// Like [`NoiseSpec::new`], but `alpha = +inf` selects the frozen prior.
    pub fn with_alpha(kind: NoiseKind, alpha: f64) -> Result<Self> {
        if alpha == f64::INFINITY {
            return Ok(Self::frozen());
        }
        Self::new(kind, alpha)
    }

    pub fn iid() -> Self {
        Self {
            kind: NoiseKind::Iid,
            alpha: 0.0,
        }
    }

    pub fn frozen() -> Self {
        Self {
            kind: NoiseKind::Frozen,
            alpha: 0.0,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Alpha as reported in tables: `inf` for the frozen prior.
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            NoiseKind::Frozen => f64::INFINITY,
            _ => self.alpha,
        }
    }

    /// Exact per-element covariance between frames `i` and `j`.
    pub fn frame_covariance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let a2 = self.alpha * self.alpha;
        match self.kind {
            NoiseKind::Iid => 0.0,
            NoiseKind::Frozen => 1.0,
            NoiseKind::Mixed => a2 / (1.0 + a2),
            NoiseKind::Progressive => {
                let rho = self.alpha / (1.0 + a2).sqrt();
                rho.powi(i.abs_diff(j) as i32)
            }
        }
    }

    /// Samples noise shaped `b × n_s × c × h × w`.
    pub fn sample<T: Scalar>(&self, shape: &Shape, rng: &mut RngStream) -> Result<Tensor<T>> {
        let (_, n, c, h, w) = shape.as_video()?;
        let fsz = c * h * w;
        let mut out = Tensor::zeros(shape.clone());
        let data = out.data_mut();
        let a2 = self.alpha * self.alpha;
        let ind_scale = T::c((1.0 / (1.0 + a2)).sqrt());
        for item in data.chunks_exact_mut(n * fsz) {
            match self.kind {
                NoiseKind::Iid => fill_frames(item, fsz, rng),
                NoiseKind::Mixed if self.alpha == 0.0 => fill_frames(item, fsz, rng),
                NoiseKind::Mixed => {
                    let mut shared = vec![T::zero(); fsz];
                    rng.fill_normal(&mut shared);
                    let shared_scale = T::c((a2 / (1.0 + a2)).sqrt());
                    for frame in item.chunks_exact_mut(fsz) {
                        rng.fill_normal(frame);
                        for (v, &s) in frame.iter_mut().zip(&shared) {
                            *v = shared_scale * s + ind_scale * *v;
                        }
                    }
                }
                NoiseKind::Progressive => {
                    let rho = T::c(self.alpha / (1.0 + a2).sqrt());
                    rng.fill_normal(&mut item[..fsz]);
                    for i in 1..n {
                        let (prev, rest) = item.split_at_mut(i * fsz);
                        let prev = &prev[(i - 1) * fsz..];
                        let cur = &mut rest[..fsz];
                        rng.fill_normal(cur);
                        for (v, &p) in cur.iter_mut().zip(prev) {
                            *v = rho * p + ind_scale * *v;
                        }
                    }
                }
                NoiseKind::Frozen => {
                    let (first, rest) = item.split_at_mut(fsz);
                    rng.fill_normal(first);
                    for frame in rest.chunks_exact_mut(fsz) {
                        frame.copy_from_slice(first);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Frame-by-frame fill so odd frame sizes consume the RNG the same way as the
/// correlated kinds.
fn fill_frames<T: Scalar>(item: &mut [T], fsz: usize, rng: &mut RngStream) {
    for frame in item.chunks_exact_mut(fsz) {
        rng.fill_normal(frame);
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::Iid | NoiseKind::Frozen => write!(f, "{}", self.kind),
            _ => write!(f, "{}(alpha={})", self.kind, self.alpha),
        }
    }
}

/// Free-function form of [`NoiseSpec::sample`].
pub fn sample_noise<T: Scalar>(
    spec: &NoiseSpec,
    shape: &Shape,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    spec.sample(shape, rng)
}

/// Exact covariance between frames `i` and `j` under `spec`.
pub fn frame_covariance(spec: &NoiseSpec, i: usize, j: usize) -> f64 {
    spec.frame_covariance(i, j)
}

/// `n_s × n_s` Pearson correlation between frames, with moments pooled over
/// every batch item and element position. The diagonal is exactly 1.
pub fn empirical_correlation<T: Scalar>(samples: &Tensor<T>) -> Result<Tensor<f64>> {
    let (b, n, c, h, w) = samples.shape().as_video()?;
    if b < 2 {
        bail!(
            Shape,
            "empirical_correlation needs at least 2 batch items, got {b}"
        );
    }
    let fsz = c * h * w;
    let count = (b * fsz) as f64;
    let data = samples.data();
    let frame = |item: usize, i: usize| &data[(item * n + i) * fsz..(item * n + i + 1) * fsz];

    let mut mean = vec![0.0f64; n];
    for item in 0..b {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += frame(item, i).iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut cov = vec![0.0f64; n * n];
    let mut centered = vec![0.0f64; n * fsz];
    for item in 0..b {
        for i in 0..n {
            for (dst, &v) in centered[i * fsz..(i + 1) * fsz]
                .iter_mut()
                .zip(frame(item, i))
            {
                *dst = v.f64() - mean[i];
            }
        }
        for i in 0..n {
            let fi = &centered[i * fsz..(i + 1) * fsz];
            for j in i..n {
                let fj = &centered[j * fsz..(j + 1) * fsz];
                cov[i * n + j] += fi.iter().zip(fj).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| !(cov[i * n + i] > 0.0)) {
        bail!(Degenerate, "frame {i} has zero variance");
    }
    let mut corr = vec![0.0f64; n * n];
    for i in 0..n {
        corr[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = cov[i * n + j] / (cov[i * n + i] * cov[j * n + j]).sqrt();
            corr[i * n + j] = r;
            corr[j * n + i] = r;
        }
    }
    Tensor::from_dims(&[n, n], corr)
}

/// Per-frame variance pooled over batch items and element positions.
pub fn frame_variances<T: Scalar>(samples: &Tensor<T>) -> Result<Vec<f64>> {
    let (b, n, c, h, w) = samples.shape().as_video()?;
    let fsz = c * h * w;
    let data = samples.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for item in 0..b {
            for &v in &data[(item * n + i) * fsz..(item * n + i + 1) * fsz] {
                let v = v.f64();
                s += v;
                s2 += v * v;
            }
        }
        let cnt = (b * fsz) as f64;
        let m = s / cnt;
        out.push(s2 / cnt - m * m);
    }
    Ok(out)
}
