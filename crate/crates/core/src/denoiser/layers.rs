//! Forward and backward kernels for the denoiser's layer types. All video
//! activations use the `b, t, c, h, w` layout.

use crate::error::{bail, Result};
use crate::ndcore::{conv3d, conv3d_backward, Padding, Shape, Tensor};
use crate::scalar::Scalar;

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of SiLU given its input `x`.
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::from_vec(x.shape().clone(), data).expect("same shape")
}

pub fn silu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward<T: Scalar>(x: &[T], gy: &[T]) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Group normalization with the temporal axis folded into the batch axis:
/// statistics are per `(item, frame, group)`.
pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    groups: usize,
}

pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let (b, t, c, h, w) = x.shape().as_video()?;
    if c % groups != 0 || gamma.len() != c || beta.len() != c {
        bail!(
            Shape,
            "group_norm: {c} channels, {groups} groups, {} affine params",
            gamma.len()
        );
    }
    let cpg = c / groups;
    let plane = h * w;
    let gsz = cpg * plane;
    let inv_n = T::one() / T::c(gsz as f64);
    let eps = T::c(eps);
    let mut y = Tensor::zeros(x.shape().clone());
    let mut xhat = Tensor::zeros(x.shape().clone());
    let mut inv_std = Vec::with_capacity(b * t * groups);
    let xd = x.data();
    for bt in 0..b * t {
        for g in 0..groups {
            let start = (bt * c + g * cpg) * plane;
            let seg = &xd[start..start + gsz];
            let mut mean = T::zero();
            for &v in seg {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = &mut xhat.data_mut()[start..start + gsz];
            for (o, &v) in xh.iter_mut().zip(seg) {
                *o = (v - mean) * is;
            }
            let yd = &mut y.data_mut()[start..start + gsz];
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let xs = &xhat.data()[start + ci * plane..start + (ci + 1) * plane];
                for (o, &v) in yd[ci * plane..(ci + 1) * plane].iter_mut().zip(xs) {
                    *o = v * ga + be;
                }
            }
        }
    }
    Ok((
        y,
        GroupNormCache {
            xhat,
            inv_std,
            groups,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn group_norm_backward<T: Scalar>(
    cache: &GroupNormCache<T>,
    gamma: &[T],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (b, t, c, h, w) = gy.shape().as_video()?;
    let groups = cache.groups;
    let cpg = c / groups;
    let plane = h * w;
    let gsz = cpg * plane;
    let n = T::c(gsz as f64);
    let mut gx = Tensor::zeros(gy.shape().clone());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let gyd = gy.data();
    let xh = cache.xhat.data();
    let mut gxhat = vec![T::zero(); gsz];
    for bt in 0..b * t {
        for g in 0..groups {
            let start = (bt * c + g * cpg) * plane;
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let off = start + ci * plane;
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for p in 0..plane {
                    let gv = gyd[off + p];
                    sg += gv;
                    sgx += gv * xh[off + p];
                    gxhat[ci * plane + p] = gv * gamma[ch];
                }
                gbeta[ch] += sg;
                ggamma[ch] += sgx;
            }
            let xs = &xh[start..start + gsz];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&gv, &xv) in gxhat.iter().zip(xs) {
                sum_g += gv;
                sum_gx += gv * xv;
            }
            let is = cache.inv_std[bt * groups + g];
            let k = is / n;
            let out = &mut gx.data_mut()[start..start + gsz];
            for ((o, &gv), &xv) in out.iter_mut().zip(&gxhat).zip(xs) {
                *o = k * (n * gv - sum_g - xv * sum_gx);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// 2×2 average pooling over the spatial axes.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, c, h, w) = x.shape().as_video()?;
    if h % 2 != 0 || w % 2 != 0 {
        bail!(Shape, "avg_pool2 needs even spatial extents, got {h}×{w}");
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * t * c * ho * wo);
    for p in 0..b * t * c {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let i = base + 2 * y * w + 2 * xx;
                out.push((xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(Shape::video(b, t, c, ho, wo)?, out)
}

pub fn avg_pool2_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, c, ho, wo) = gy.shape().as_video()?;
    let (h, w) = (2 * ho, 2 * wo);
    let quarter = T::c(0.25);
    let mut gx = Tensor::zeros(Shape::video(b, t, c, h, w)?);
    let g = gy.data();
    let out = gx.data_mut();
    for p in 0..b * t * c {
        for y in 0..ho {
            for xx in 0..wo {
                let v = g[(p * ho + y) * wo + xx] * quarter;
                let i = p * h * w + 2 * y * w + 2 * xx;
                out[i] = v;
                out[i + 1] = v;
                out[i + w] = v;
                out[i + w + 1] = v;
            }
        }
    }
    Ok(gx)
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, c, h, w) = x.shape().as_video()?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = Tensor::zeros(Shape::video(b, t, c, ho, wo)?);
    let od = out.data_mut();
    for p in 0..b * t * c {
        for y in 0..ho {
            for xx in 0..wo {
                od[(p * ho + y) * wo + xx] = xd[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, c, ho, wo) = gy.shape().as_video()?;
    let (h, w) = (ho / 2, wo / 2);
    let g = gy.data();
    let mut gx = Tensor::zeros(Shape::video(b, t, c, h, w)?);
    let out = gx.data_mut();
    for p in 0..b * t * c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(p * h + y / 2) * w + xx / 2] += g[(p * ho + y) * wo + xx];
            }
        }
    }
    Ok(gx)
}

/// `y[i] = W x[i] + bias` for each row `x[i]` of a `rows × in` matrix;
/// `weight` is `out × in`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let n_out = bias.len();
    let n_in = weight.len() / n_out;
    let mut y = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let wr = &weight[o * n_in..(o + 1) * n_in];
            let mut acc = bias[o];
            for (&a, &b) in wr.iter().zip(xr) {
                acc += a * b;
            }
            y.push(acc);
        }
    }
    y
}

/// Returns `grad_x`; accumulates into `gw` and `gb`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    weight: &[T],
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let n_out = gb.len();
    let n_in = weight.len() / n_out;
    let mut gx = vec![T::zero(); rows * n_in];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let g = gy[r * n_out + o];
            gb[o] += g;
            let wr = &weight[o * n_in..(o + 1) * n_in];
            let gwr = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gwr[i] += g * xr[i];
                gx[r * n_in + i] += g * wr[i];
            }
        }
    }
    gx
}

/// Adds a per-(item, channel) bias, broadcast over frames and pixels.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) -> Result<()> {
    let (b, t, c, h, w) = x.shape().as_video()?;
    if bias.len() != b * c {
        bail!(
            Shape,
            "channel bias has {} entries, expected {}",
            bias.len(),
            b * c
        );
    }
    let plane = h * w;
    let d = x.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let v = bias[bi * c + ci];
                let s = ((bi * t + ti) * c + ci) * plane;
                for o in &mut d[s..s + plane] {
                    *o += v;
                }
            }
        }
    }
    Ok(())
}

pub fn add_channel_bias_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Vec<T>> {
    let (b, t, c, h, w) = gy.shape().as_video()?;
    let plane = h * w;
    let g = gy.data();
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let s = ((bi * t + ti) * c + ci) * plane;
                let mut acc = T::zero();
                for &v in &g[s..s + plane] {
                    acc += v;
                }
                out[bi * c + ci] += acc;
            }
        }
    }
    Ok(out)
}

/// Parameters of the single-head temporal attention block, borrowed from the
/// flat parameter vector. Projection kernels are `c × c × 1 × 1 × 1`.
pub struct AttnParams<'a, T> {
    pub wq: &'a Tensor<T>,
    pub bq: &'a [T],
    pub wk: &'a Tensor<T>,
    pub bk: &'a [T],
    pub wv: &'a Tensor<T>,
    pub bv: &'a [T],
    pub wo: &'a Tensor<T>,
    pub bo: &'a [T],
    /// Learned bias indexed by the clamped frame offset `g - f`.
    pub pos_bias: &'a [T],
}

pub struct AttnGrads<T> {
    pub x: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Vec<T>,
    pub wk: Tensor<T>,
    pub bk: Vec<T>,
    pub wv: Tensor<T>,
    pub bv: Vec<T>,
    pub wo: Tensor<T>,
    pub bo: Vec<T>,
    pub pos_bias: Vec<T>,
}

pub struct AttnCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention weights laid out `b × t_query × t_key × pixels`.
    att: Vec<T>,
    o: Tensor<T>,
}

const NO_PAD: Padding = Padding::new(0, 0, 0);

#[inline]
fn pos_index(f: usize, g: usize, n_bias: usize) -> usize {
    let max_off = (n_bias / 2) as isize;
    let off = (g as isize - f as isize).clamp(-max_off, max_off);
    (off + max_off) as usize
}

/// Residual single-head dot-product attention across frames, applied
/// independently at every spatial position: `x + W_o softmax(q k^T/√c + P) v + b_o`.
pub fn temporal_attention<T: Scalar>(
    x: &Tensor<T>,
    p: &AttnParams<'_, T>,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let (b, t, c, h, w) = x.shape().as_video()?;
    let plane = h * w;
    let q = conv3d(x, p.wq, Some(p.bq), NO_PAD)?;
    let k = conv3d(x, p.wk, Some(p.bk), NO_PAD)?;
    let v = conv3d(x, p.wv, Some(p.bv), NO_PAD)?;
    let scale = T::one() / T::c(c as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut att = vec![T::zero(); b * t * t * plane];
    let mut o = Tensor::zeros(x.shape().clone());
    let mut scores = vec![T::zero(); t * plane];
    for bi in 0..b {
        for f in 0..t {
            scores.fill(T::zero());
            for g in 0..t {
                let sg = &mut scores[g * plane..(g + 1) * plane];
                for ci in 0..c {
                    let qs = &qd[((bi * t + f) * c + ci) * plane..][..plane];
                    let ks = &kd[((bi * t + g) * c + ci) * plane..][..plane];
                    for ((s, &a), &bb) in sg.iter_mut().zip(qs).zip(ks) {
                        *s += a * bb;
                    }
                }
                let pb = p.pos_bias[pos_index(f, g, p.pos_bias.len())];
                for s in sg.iter_mut() {
                    *s = *s * scale + pb;
                }
            }
            let a = &mut att[(bi * t + f) * t * plane..][..t * plane];
            for px in 0..plane {
                let mut m = T::neg_infinity();
                for g in 0..t {
                    m = m.max(scores[g * plane + px]);
                }
                let mut z = T::zero();
                for g in 0..t {
                    let e = (scores[g * plane + px] - m).exp();
                    a[g * plane + px] = e;
                    z += e;
                }
                for g in 0..t {
                    a[g * plane + px] /= z;
                }
            }
            let od = o.data_mut();
            for g in 0..t {
                let ag = &a[g * plane..(g + 1) * plane];
                for ci in 0..c {
                    let vs = &vd[((bi * t + g) * c + ci) * plane..][..plane];
                    let os = &mut od[((bi * t + f) * c + ci) * plane..][..plane];
                    for ((ov, &av), &vv) in os.iter_mut().zip(ag).zip(vs) {
                        *ov += av * vv;
                    }
                }
            }
        }
    }
    let proj = conv3d(&o, p.wo, Some(p.bo), NO_PAD)?;
    let y = x.add(&proj)?;
    Ok((
        y,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            att,
            o,
        },
    ))
}

pub fn temporal_attention_backward<T: Scalar>(
    cache: &AttnCache<T>,
    p: &AttnParams<'_, T>,
    gy: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    let (b, t, c, h, w) = gy.shape().as_video()?;
    let plane = h * w;
    let scale = T::one() / T::c(c as f64).sqrt();
    let go_proj = conv3d_backward(&cache.o, p.wo, gy, NO_PAD)?;
    let g_o = go_proj.input;
    let (qd, kd, vd) = (cache.q.data(), cache.k.data(), cache.v.data());
    let god = g_o.data();
    let mut gq = Tensor::zeros(cache.q.shape().clone());
    let mut gk = Tensor::zeros(cache.k.shape().clone());
    let mut gv = Tensor::zeros(cache.v.shape().clone());
    let mut gpos = vec![T::zero(); p.pos_bias.len()];
    let mut ga = vec![T::zero(); t * plane];
    let mut gs = vec![T::zero(); t * plane];
    for bi in 0..b {
        for f in 0..t {
            let a = &cache.att[(bi * t + f) * t * plane..][..t * plane];
            // grad wrt attention weights and values
            ga.fill(T::zero());
            for g in 0..t {
                let gag = &mut ga[g * plane..(g + 1) * plane];
                let ag = &a[g * plane..(g + 1) * plane];
                for ci in 0..c {
                    let gos = &god[((bi * t + f) * c + ci) * plane..][..plane];
                    let vs = &vd[((bi * t + g) * c + ci) * plane..][..plane];
                    for ((gav, &gov), &vv) in gag.iter_mut().zip(gos).zip(vs) {
                        *gav += gov * vv;
                    }
                    let gvs = &mut gv.data_mut()[((bi * t + g) * c + ci) * plane..][..plane];
                    for ((gvv, &av), &gov) in gvs.iter_mut().zip(ag).zip(gos) {
                        *gvv += av * gov;
                    }
                }
            }
            // softmax backward
            for px in 0..plane {
                let mut dot = T::zero();
                for g in 0..t {
                    dot += a[g * plane + px] * ga[g * plane + px];
                }
                for g in 0..t {
                    gs[g * plane + px] = a[g * plane + px] * (ga[g * plane + px] - dot);
                }
            }
            for g in 0..t {
                let gsg = &gs[g * plane..(g + 1) * plane];
                let mut acc = T::zero();
                for &v in gsg {
                    acc += v;
                }
                gpos[pos_index(f, g, p.pos_bias.len())] += acc;
                for ci in 0..c {
                    let qoff = ((bi * t + f) * c + ci) * plane;
                    let koff = ((bi * t + g) * c + ci) * plane;
                    for px in 0..plane {
                        let s = gsg[px] * scale;
                        gq.data_mut()[qoff + px] += s * kd[koff + px];
                        gk.data_mut()[koff + px] += s * qd[qoff + px];
                    }
                }
            }
        }
    }
    let bq = conv3d_backward(&cache.x, p.wq, &gq, NO_PAD)?;
    let bk = conv3d_backward(&cache.x, p.wk, &gk, NO_PAD)?;
    let bv = conv3d_backward(&cache.x, p.wv, &gv, NO_PAD)?;
    let mut gx = gy.clone();
    gx.axpy(T::one(), &bq.input)?;
    gx.axpy(T::one(), &bk.input)?;
    gx.axpy(T::one(), &bv.input)?;
    Ok(AttnGrads {
        x: gx,
        wq: bq.kernel,
        bq: bq.bias,
        wk: bk.kernel,
        bk: bk.bias,
        wv: bv.kernel,
        bv: bv.bias,
        wo: go_proj.kernel,
        bo: go_proj.bias,
        pos_bias: gpos,
    })
}
