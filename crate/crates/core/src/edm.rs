//! EDM preconditioning, the log-normal σ distribution and the weighted
//! denoising loss.
//!
//! `D(x; σ) = c_skip x + c_out F(c_in x; ln(σ)/4)` with `σ* = √(σ² + σ_d²)`,
//! `c_skip = σ_d²/σ*²`, `c_out = σ σ_d/σ*`, `c_in = 1/σ*`. The loss weight
//! `λ(σ) = (σ² + σ_d²)/(σ σ_d)²` satisfies `λ c_out² = 1`.

use crate::denoiser::{DenoiserModel, ForwardCache};
use crate::error::{bail, Result};
use crate::ndcore::{pairwise_sum, RngStream, Shape, Tensor};
use crate::noise_prior::NoiseSpec;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmParams {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl EdmParams {
    pub fn new(sigma_data: f64, p_mean: f64, p_std: f64) -> Result<Self> {
        let p = Self {
            sigma_data,
            p_mean,
            p_std,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) || !self.sigma_data.is_finite() {
            bail!(
                Parameter,
                "sigma_data must be positive, got {}",
                self.sigma_data
            );
        }
        if !(self.p_std > 0.0) || !self.p_std.is_finite() {
            bail!(Parameter, "p_std must be positive, got {}", self.p_std);
        }
        if !self.p_mean.is_finite() {
            bail!(Parameter, "p_mean must be finite, got {}", self.p_mean);
        }
        Ok(())
    }
}

/// Per-item class labels, or none for an unconditional model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conditioning {
    labels: Option<Vec<usize>>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self { labels: None }
    }

    pub fn classes(labels: Vec<usize>) -> Self {
        Self {
            labels: Some(labels),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Conditioning for a sub-batch, in the order of `items`.
    pub fn select(&self, items: &[usize]) -> Self {
        Self {
            labels: self
                .labels
                .as_ref()
                .map(|l| items.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        match (&self.labels, &other.labels) {
            (None, None) => Ok(Self::none()),
            (Some(a), Some(b)) => Ok(Self::classes(a.iter().chain(b).copied().collect())),
            _ => bail!(Shape, "cannot join labelled and unlabelled conditioning"),
        }
    }
}

/// Scalings of the preconditioned denoiser at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn at(sigma: f64, params: &EdmParams) -> Result<Self> {
        check_sigma(sigma)?;
        let sd = params.sigma_data;
        let s_star2 = sigma * sigma + sd * sd;
        let s_star = s_star2.sqrt();
        Ok(Self {
            c_skip: sd * sd / s_star2,
            c_out: sigma * sd / s_star,
            c_in: 1.0 / s_star,
            c_noise: sigma.ln() / 4.0,
        })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        bail!(Parameter, "sigma must be positive and finite, got {sigma}");
    }
    Ok(())
}

pub fn loss_weight(sigma: f64, params: &EdmParams) -> Result<f64> {
    check_sigma(sigma)?;
    let sd = params.sigma_data;
    Ok((sigma * sigma + sd * sd) / (sigma * sd).powi(2))
}

pub fn sample_sigma(rng: &mut RngStream, params: &EdmParams) -> f64 {
    (params.p_mean + params.p_std * rng.standard_normal()).exp()
}

/// A trainable `F_θ` with a flat parameter vector and exact gradients.
pub trait Network<T: Scalar>: Sync {
    type Cache;

    fn num_params(&self) -> usize;
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    fn forward_cached(
        &self,
        x: &Tensor<T>,
        sigma_feature: &[T],
        cond: &Conditioning,
        keep_activations: bool,
    ) -> Result<(Tensor<T>, Self::Cache)>;
    /// Gradient of `Σ grad_out ⊙ F_θ(x)` with respect to the parameters.
    fn backward(&self, cache: &Self::Cache, grad_out: &Tensor<T>) -> Result<Vec<T>>;
}

impl<T: Scalar> Network<T> for DenoiserModel<T> {
    type Cache = ForwardCache<T>;

    fn num_params(&self) -> usize {
        DenoiserModel::num_params(self)
    }

    fn params(&self) -> &[T] {
        DenoiserModel::params(self)
    }

    fn params_mut(&mut self) -> &mut [T] {
        DenoiserModel::params_mut(self)
    }

    fn forward_cached(
        &self,
        x: &Tensor<T>,
        sigma_feature: &[T],
        cond: &Conditioning,
        keep_activations: bool,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        DenoiserModel::forward_cached(self, x, sigma_feature, cond, keep_activations)
    }

    fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<Vec<T>> {
        DenoiserModel::backward(self, cache, grad_out)
    }
}

struct Preconditioned<T, C> {
    denoised: Tensor<T>,
    precond: Vec<Precond>,
    cache: C,
}

fn precondition_inner<T: Scalar, N: Network<T>>(
    net: &N,
    x: &Tensor<T>,
    sigmas: &[f64],
    cond: &Conditioning,
    params: &EdmParams,
    keep_activations: bool,
) -> Result<Preconditioned<T, N::Cache>> {
    let (b, ..) = x.shape().as_video()?;
    if sigmas.len() != b {
        bail!(Shape, "{} sigmas for a batch of {b}", sigmas.len());
    }
    let precond = sigmas
        .iter()
        .map(|&s| Precond::at(s, params))
        .collect::<Result<Vec<_>>>()?;
    let per_item = x.len() / b;
    let mut x_in = x.clone();
    for (chunk, p) in x_in.data_mut().chunks_exact_mut(per_item).zip(&precond) {
        let c_in = T::c(p.c_in);
        for v in chunk {
            *v *= c_in;
        }
    }
    let feats: Vec<T> = precond.iter().map(|p| T::c(p.c_noise)).collect();
    let (f, cache) = net.forward_cached(&x_in, &feats, cond, keep_activations)?;
    if f.shape() != x.shape() {
        bail!(
            Shape,
            "network output {:?} differs from input {:?}",
            f.shape(),
            x.shape()
        );
    }
    let mut denoised = f;
    for ((d, xc), p) in denoised
        .data_mut()
        .chunks_exact_mut(per_item)
        .zip(x.data().chunks_exact(per_item))
        .zip(&precond)
    {
        let (cs, co) = (T::c(p.c_skip), T::c(p.c_out));
        for (dv, &xv) in d.iter_mut().zip(xc) {
            *dv = cs * xv + co * *dv;
        }
    }
    if let Some(i) = (0..b).find(|&i| {
        !denoised.data()[i * per_item..(i + 1) * per_item]
            .iter()
            .all(|v| v.is_finite())
    }) {
        bail!(
            Numeric,
            "non-finite denoiser output for item {i} at sigma {}",
            sigmas[i]
        );
    }
    Ok(Preconditioned {
        denoised,
        precond,
        cache,
    })
}

/// `D(x; σ)` with one σ shared by the whole batch.
pub fn precondition<T: Scalar, N: Network<T>>(
    net: &N,
    x: &Tensor<T>,
    sigma: f64,
    cond: &Conditioning,
    params: &EdmParams,
) -> Result<Tensor<T>> {
    let b = x.shape().as_video()?.0;
    precondition_batch(net, x, &vec![sigma; b], cond, params)
}

/// `D(x; σ_i)` with a σ per batch item.
pub fn precondition_batch<T: Scalar, N: Network<T>>(
    net: &N,
    x: &Tensor<T>,
    sigmas: &[f64],
    cond: &Conditioning,
    params: &EdmParams,
) -> Result<Tensor<T>> {
    precondition_inner(net, x, sigmas, cond, params, false).map(|p| p.denoised)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grads: Vec<T>,
    /// Per-item weighted losses in batch order.
    pub item_losses: Vec<f64>,
}

/// The σ and ε drawn for one batch, so a loss evaluation can be replayed.
#[derive(Debug, Clone)]
pub struct NoiseDraw<T> {
    pub sigmas: Vec<f64>,
    pub eps: Tensor<T>,
}

/// Draws σ then ε for each item from `rng.split(item)`, so items are
/// independent of batch composition order.
pub fn draw_noise<T: Scalar>(
    shape: &Shape,
    spec: &NoiseSpec,
    params: &EdmParams,
    rng: &RngStream,
) -> Result<NoiseDraw<T>> {
    let (b, n, c, h, w) = shape.as_video()?;
    let item_shape = Shape::video(1, n, c, h, w)?;
    let mut sigmas = Vec::with_capacity(b);
    let mut data = Vec::with_capacity(shape.numel());
    for item in 0..b {
        let mut r = rng.split(item as u64);
        sigmas.push(sample_sigma(&mut r, params));
        data.extend(spec.sample::<T>(&item_shape, &mut r)?.into_data());
    }
    Ok(NoiseDraw {
        sigmas,
        eps: Tensor::from_vec(shape.clone(), data)?,
    })
}

/// Mean over the batch of `λ(σ_i) ‖D(x_i + σ_i ε_i; σ_i) − x_i‖²` with exact
/// parameter gradients.
pub fn denoising_loss<T: Scalar, N: Network<T>>(
    net: &N,
    x_clean: &Tensor<T>,
    cond: &Conditioning,
    spec: &NoiseSpec,
    params: &EdmParams,
    rng: &RngStream,
) -> Result<LossOutput<T>> {
    let draw = draw_noise(x_clean.shape(), spec, params, rng)?;
    denoising_loss_with(net, x_clean, cond, &draw, params)
}

pub fn denoising_loss_with<T: Scalar, N: Network<T>>(
    net: &N,
    x_clean: &Tensor<T>,
    cond: &Conditioning,
    draw: &NoiseDraw<T>,
    params: &EdmParams,
) -> Result<LossOutput<T>> {
    let (b, ..) = x_clean.shape().as_video()?;
    if draw.eps.shape() != x_clean.shape() {
        bail!(
            Shape,
            "noise {:?} does not match data {:?}",
            draw.eps.shape(),
            x_clean.shape()
        );
    }
    let per_item = x_clean.len() / b;
    let mut x_noise = x_clean.clone();
    for ((xn, e), &s) in x_noise
        .data_mut()
        .chunks_exact_mut(per_item)
        .zip(draw.eps.data().chunks_exact(per_item))
        .zip(&draw.sigmas)
    {
        let s = T::c(s);
        for (v, &ev) in xn.iter_mut().zip(e) {
            *v += s * ev;
        }
    }
    let pre = precondition_inner(net, &x_noise, &draw.sigmas, cond, params, true)?;
    let mut item_losses = Vec::with_capacity(b);
    let mut grad_f = Tensor::zeros(x_clean.shape().clone());
    let inv_b = 1.0 / b as f64;
    let mut sq = vec![T::zero(); per_item];
    for item in 0..b {
        let range = item * per_item..(item + 1) * per_item;
        let d = &pre.denoised.data()[range.clone()];
        let x = &x_clean.data()[range.clone()];
        let lambda = loss_weight(draw.sigmas[item], params)?;
        for ((o, &dv), &xv) in sq.iter_mut().zip(d).zip(x) {
            let r = dv - xv;
            *o = r * r;
        }
        item_losses.push(lambda * pairwise_sum(&sq).f64());
        // dL/dF = c_out · 2λ (D − x) / b
        let k = T::c(2.0 * lambda * pre.precond[item].c_out * inv_b);
        for ((g, &dv), &xv) in grad_f.data_mut()[range].iter_mut().zip(d).zip(x) {
            *g = k * (dv - xv);
        }
    }
    let loss = pairwise_sum(&item_losses) * inv_b;
    let grads = net.backward(&pre.cache, &grad_f)?;
    Ok(LossOutput {
        loss,
        grads,
        item_losses,
    })
}

/// Result of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks `indices` of the loss gradient against central differences,
/// replaying the same σ and ε for every evaluation. Differences at `h` and
/// `h/2` are Richardson-combined, so the reference is accurate to O(h⁴).
pub fn gradient_check<T: Scalar, N: Network<T> + Clone>(
    net: &N,
    x_clean: &Tensor<T>,
    cond: &Conditioning,
    draw: &NoiseDraw<T>,
    params: &EdmParams,
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = denoising_loss_with(net, x_clean, cond, draw, params)?.grads;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for &i in indices {
        if i >= analytic.len() {
            bail!(Parameter, "parameter index {i} out of range");
        }
        let orig = probe.params()[i];
        let mut central = |step: f64| -> Result<f64> {
            probe.params_mut()[i] = T::c(orig.f64() + step);
            let up = denoising_loss_with(&probe, x_clean, cond, draw, params)?.loss;
            probe.params_mut()[i] = T::c(orig.f64() - step);
            let down = denoising_loss_with(&probe, x_clean, cond, draw, params)?.loss;
            probe.params_mut()[i] = orig;
            Ok((up - down) / (2.0 * step))
        };
        let (coarse, fine) = (central(h)?, central(h / 2.0)?);
        let fd = (4.0 * fine - coarse) / 3.0;
        let err = relative_error(analytic[i].f64(), fd);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
