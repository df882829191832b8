//! Stride-1, zero-padded 3-D convolution over the `b, t, c, h, w` layout.
//!
//! Kernels are laid out `c_out × c_in × k_t × k_h × k_w`. The loops run in a
//! fixed order so results are bit-stable.

use crate::error::{bail, Result};
use crate::ndcore::tensor::{Shape, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Padding {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    /// Padding that keeps extents unchanged for odd kernels.
    pub fn same(kernel: &Shape) -> Self {
        let d = kernel.dims();
        Self::new(d[2] / 2, d[3] / 2, d[4] / 2)
    }
}

struct Geometry {
    b: usize,
    t_in: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    t_out: usize,
    h_out: usize,
    w_out: usize,
    pad: Padding,
}

fn geometry(input: &Shape, kernel: &Shape, pad: Padding) -> Result<Geometry> {
    let (b, t_in, c_in, h_in, w_in) = input.as_video()?;
    let &[c_out, kc_in, kt, kh, kw] = kernel.dims() else {
        bail!(Shape, "conv3d kernel must have 5 axes, got {kernel:?}");
    };
    if kc_in != c_in {
        bail!(
            Shape,
            "conv3d kernel expects {kc_in} input channels, input has {c_in}"
        );
    }
    let out = |n: usize, k: usize, p: usize| (n + 2 * p).checked_sub(k).map(|v| v + 1);
    let (Some(t_out), Some(h_out), Some(w_out)) = (
        out(t_in, kt, pad.t),
        out(h_in, kh, pad.h),
        out(w_in, kw, pad.w),
    ) else {
        bail!(
            Shape,
            "conv3d kernel {kernel:?} larger than padded input {input:?}"
        );
    };
    if pad.t >= kt || pad.h >= kh || pad.w >= kw {
        bail!(
            Shape,
            "conv3d padding {pad:?} must be smaller than kernel {kernel:?}"
        );
    }
    Ok(Geometry {
        b,
        t_in,
        c_in,
        h_in,
        w_in,
        c_out,
        kt,
        kh,
        kw,
        t_out,
        h_out,
        w_out,
        pad,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn span(k: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input index = out + k - pad must lie in [0, n_in)
    let lo = pad.saturating_sub(k);
    let hi = (n_in + pad).saturating_sub(k).min(n_out);
    (lo, hi.max(lo))
}

impl Geometry {
    fn taps(&self) -> usize {
        self.c_in * self.kt * self.kh * self.kw
    }

    /// Fills `cols` (`taps × h_out·w_out`) with the zero-padded input patches
    /// feeding output frame `to` of item `bi`.
    fn im2col<T: Scalar>(&self, x: &[T], bi: usize, to: usize, cols: &mut [T]) {
        let in_plane = self.h_in * self.w_in;
        let out_plane = self.h_out * self.w_out;
        cols.fill(T::zero());
        let mut row = 0;
        for ci in 0..self.c_in {
            for dt in 0..self.kt {
                let ti = (to + dt).checked_sub(self.pad.t).filter(|&t| t < self.t_in);
                for dy in 0..self.kh {
                    let (y0, y1) = span(dy, self.pad.h, self.h_in, self.h_out);
                    for dx in 0..self.kw {
                        let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                        row += 1;
                        let Some(ti) = ti else { continue };
                        let base = ((bi * self.t_in + ti) * self.c_in + ci) * in_plane;
                        let (x0, x1) = span(dx, self.pad.w, self.w_in, self.w_out);
                        for y in y0..y1 {
                            let off =
                                base + (y + dy - self.pad.h) * self.w_in + x0 + dx - self.pad.w;
                            dst[y * self.w_out + x0..y * self.w_out + x1]
                                .copy_from_slice(&x[off..off + x1 - x0]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: accumulates `cols` into `gx`.
    fn col2im<T: Scalar>(&self, cols: &[T], bi: usize, to: usize, gx: &mut [T]) {
        let in_plane = self.h_in * self.w_in;
        let out_plane = self.h_out * self.w_out;
        let mut row = 0;
        for ci in 0..self.c_in {
            for dt in 0..self.kt {
                let ti = (to + dt).checked_sub(self.pad.t).filter(|&t| t < self.t_in);
                for dy in 0..self.kh {
                    let (y0, y1) = span(dy, self.pad.h, self.h_in, self.h_out);
                    for dx in 0..self.kw {
                        let src = &cols[row * out_plane..(row + 1) * out_plane];
                        row += 1;
                        let Some(ti) = ti else { continue };
                        let base = ((bi * self.t_in + ti) * self.c_in + ci) * in_plane;
                        let (x0, x1) = span(dx, self.pad.w, self.w_in, self.w_out);
                        for y in y0..y1 {
                            let off =
                                base + (y + dy - self.pad.h) * self.w_in + x0 + dx - self.pad.w;
                            for (g, &v) in gx[off..off + x1 - x0]
                                .iter_mut()
                                .zip(&src[y * self.w_out + x0..y * self.w_out + x1])
                            {
                                *g += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Stride-1 cross-correlation of `input` (`b × t × c_in × h × w`) with
/// `kernel` (`c_out × c_in × k_t × k_h × k_w`), zero-padded by `pad`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    pad: Padding,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), kernel.shape(), pad)?;
    if let Some(bias) = bias {
        if bias.len() != g.c_out {
            bail!(
                Shape,
                "conv3d bias has {} entries, expected {}",
                bias.len(),
                g.c_out
            );
        }
    }
    let out_plane = g.h_out * g.w_out;
    let taps = g.taps();
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.b * g.t_out * g.c_out * out_plane];
    let mut cols = vec![T::zero(); taps * out_plane];
    for bi in 0..g.b {
        for to in 0..g.t_out {
            g.im2col(x, bi, to, &mut cols);
            for co in 0..g.c_out {
                let o_base = ((bi * g.t_out + to) * g.c_out + co) * out_plane;
                let o = &mut out[o_base..o_base + out_plane];
                if let Some(bias) = bias {
                    o.fill(bias[co]);
                }
                for (r, &w) in k[co * taps..(co + 1) * taps].iter().enumerate() {
                    if w != T::zero() {
                        axpy(o, w, &cols[r * out_plane..(r + 1) * out_plane]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::video(g.b, g.t_out, g.c_out, g.h_out, g.w_out)?, out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of `Σ grad_out ⊙ conv3d(input, kernel, bias, pad)`.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: Padding,
) -> Result<ConvGrads<T>> {
    let g = geometry(input.shape(), kernel.shape(), pad)?;
    if grad_out.dims() != [g.b, g.t_out, g.c_out, g.h_out, g.w_out] {
        bail!(
            Shape,
            "conv3d grad_out {:?} does not match output geometry",
            grad_out.shape()
        );
    }
    let out_plane = g.h_out * g.w_out;
    let taps = g.taps();
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let mut cols = vec![T::zero(); taps * out_plane];
    let mut gcols = vec![T::zero(); taps * out_plane];
    for bi in 0..g.b {
        for to in 0..g.t_out {
            g.im2col(x, bi, to, &mut cols);
            gcols.fill(T::zero());
            for co in 0..g.c_out {
                let o_base = ((bi * g.t_out + to) * g.c_out + co) * out_plane;
                let gop = &go[o_base..o_base + out_plane];
                gb[co] += gop.iter().fold(T::zero(), |a, &v| a + v);
                let krow = &k[co * taps..(co + 1) * taps];
                let gkrow = &mut gk[co * taps..(co + 1) * taps];
                for r in 0..taps {
                    let c = r * out_plane..(r + 1) * out_plane;
                    gkrow[r] += dot(gop, &cols[c.clone()]);
                    if krow[r] != T::zero() {
                        axpy(&mut gcols[c], krow[r], gop);
                    }
                }
            }
            g.col2im(&gcols, bi, to, &mut gx);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().clone(), gx)?,
        kernel: Tensor::from_vec(kernel.shape().clone(), gk)?,
        bias: gb,
    })
}
