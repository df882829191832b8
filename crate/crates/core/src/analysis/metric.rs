//! Hand-crafted video and frame features and the Fréchet distance between
//! Gaussian fits of them.
//!
//! Video features: per-frame spatial mean, per-frame spatial std, and the mean
//! absolute temporal difference within each 4×4 pixel block. Frame features:
//! spatial mean and std, then the mean and std of each 4×4 block.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{bail, Result};
use crate::ndcore::Tensor;
use crate::scalar::Scalar;

/// Shrinkage of covariance estimates toward their diagonal.
pub const SHRINKAGE: f64 = 1e-3;
const BLOCK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl VideoStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and unbiased covariance of `rows`, shrunk toward the diagonal.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            bail!(Degenerate, "need at least 2 feature vectors, got {n}");
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            bail!(Shape, "feature vectors must share a nonzero dimension");
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        let norm = 1.0 / (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] * norm * if i == j { 1.0 } else { 1.0 - SHRINKAGE };
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }
}

fn block_grid(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(BLOCK), w.div_ceil(BLOCK))
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One feature vector per video of a `b × n × c × h × w` batch.
pub fn video_features<T: Scalar>(videos: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (b, n, c, h, w) = videos.shape().as_video()?;
    let fsz = c * h * w;
    let (gh, gw) = block_grid(h, w);
    let d = videos.data();
    let mut out = Vec::with_capacity(b);
    for item in 0..b {
        let frame = |f: usize| &d[(item * n + f) * fsz..(item * n + f + 1) * fsz];
        let mut feat = Vec::with_capacity(2 * n + c * gh * gw);
        let stats: Vec<(f64, f64)> = (0..n)
            .map(|f| mean_std(frame(f).iter().map(|v| v.f64())))
            .collect();
        feat.extend(stats.iter().map(|s| s.0));
        feat.extend(stats.iter().map(|s| s.1));
        for ch in 0..c {
            for by in 0..gh {
                for bx in 0..gw {
                    let mut acc = 0.0;
                    let mut cnt = 0usize;
                    for f in 1..n {
                        let (a, p) = (frame(f), frame(f - 1));
                        for y in by * BLOCK..((by + 1) * BLOCK).min(h) {
                            for x in bx * BLOCK..((bx + 1) * BLOCK).min(w) {
                                let i = (ch * h + y) * w + x;
                                acc += (a[i].f64() - p[i].f64()).abs();
                                cnt += 1;
                            }
                        }
                    }
                    feat.push(if cnt > 0 { acc / cnt as f64 } else { 0.0 });
                }
            }
        }
        out.push(feat);
    }
    Ok(out)
}

/// One feature vector per frame, frames of all videos pooled.
pub fn frame_features<T: Scalar>(videos: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (b, n, c, h, w) = videos.shape().as_video()?;
    let fsz = c * h * w;
    let (gh, gw) = block_grid(h, w);
    let mut out = Vec::with_capacity(b * n);
    for frame in videos.data().chunks_exact(fsz) {
        let (m, s) = mean_std(frame.iter().map(|v| v.f64()));
        let mut feat = vec![m, s];
        for ch in 0..c {
            for by in 0..gh {
                for bx in 0..gw {
                    let ys = by * BLOCK..((by + 1) * BLOCK).min(h);
                    let xs = bx * BLOCK..((bx + 1) * BLOCK).min(w);
                    let vals = ys.flat_map(|y| xs.clone().map(move |x| (ch * h + y) * w + x));
                    let (bm, bs) = mean_std(vals.map(|i| frame[i].f64()));
                    feat.push(bm);
                    feat.push(bs);
                }
            }
        }
        out.push(feat);
    }
    Ok(out)
}

pub fn video_stats<T: Scalar>(videos: &Tensor<T>) -> Result<VideoStats> {
    VideoStats::from_features(&video_features(videos)?)
}

pub fn frame_stats<T: Scalar>(videos: &Tensor<T>) -> Result<VideoStats> {
    VideoStats::from_features(&frame_features(videos)?)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = m
        .diagonal()
        .iter()
        .fold(0.0f64, |a, &v| a.max(v.abs()))
        .max(1e-300);
    let eig = SymmetricEigen::new(m);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-9 * scale) {
        bail!(
            Numeric,
            "{what} is not positive semidefinite (eigenvalue {bad:e})"
        );
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μ_r − μ_g‖² + tr(C_r + C_g − 2 (C_r^{1/2} C_g C_r^{1/2})^{1/2})`.
pub fn frechet_distance(real: &VideoStats, gen: &VideoStats) -> Result<f64> {
    let d = real.dim();
    if gen.dim() != d {
        bail!(Shape, "feature dimensions differ: {d} vs {}", gen.dim());
    }
    let cr = DMatrix::from_row_slice(d, d, &real.cov);
    let cg = DMatrix::from_row_slice(d, d, &gen.cov);
    let mean_term: f64 = real
        .mean
        .iter()
        .zip(&gen.mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let sr = psd_sqrt(cr.clone(), "real covariance")?;
    let inner = &sr * &cg * &sr;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(inner, "covariance product")?;
    let value = mean_term + cr.trace() + cg.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Fréchet distance between the video features of two batches.
pub fn frechet_video_metric<T: Scalar>(real: &Tensor<T>, gen: &Tensor<T>) -> Result<f64> {
    frechet_distance(&video_stats(real)?, &video_stats(gen)?)
}
