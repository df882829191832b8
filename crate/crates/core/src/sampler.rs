//! Probability-flow ODE `dx/dσ = (x − D(x; σ))/σ` integrated on a power-law
//! σ grid, forwards for sampling and backwards for inversion.
//!
//! The multistep integrator uses the exact relation
//! `x(σ')/σ' = x(σ)/σ + ∫_{σ'}^{σ} D(τ)/τ² dτ` with `D` replaced by the
//! Lagrange polynomial (in σ) through the most recent evaluations.

use std::fmt;
use std::str::FromStr;

use crate::edm::{precondition, Conditioning, EdmParams, Network};
use crate::error::{bail, Error, Result};
use crate::ndcore::{RngStream, Tensor};
use crate::noise_prior::NoiseSpec;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Euler,
    Heun,
    Deis,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Euler => "euler",
            SamplerKind::Heun => "heun",
            SamplerKind::Deis => "deis",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "euler" => SamplerKind::Euler,
            "heun" => SamplerKind::Heun,
            "deis" => SamplerKind::Deis,
            other => bail!(Parameter, "unknown sampler '{other}'"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub deis_order: usize,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub grid_rho: f64,
    pub churn: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Deis,
            deis_order: 3,
            steps: 60,
            sigma_min: 0.002,
            sigma_max: 80.0,
            grid_rho: 7.0,
            churn: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn heun(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Heun,
            steps,
            ..Self::default()
        }
    }

    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Euler,
            steps,
            ..Self::default()
        }
    }

    pub fn deis(order: usize, steps: usize) -> Self {
        Self {
            kind: SamplerKind::Deis,
            deis_order: order,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            bail!(Parameter, "steps must be at least 2, got {}", self.steps);
        }
        if !(self.sigma_min > 0.0)
            || !(self.sigma_min < self.sigma_max)
            || !self.sigma_max.is_finite()
        {
            bail!(
                Parameter,
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min,
                self.sigma_max
            );
        }
        if !(self.grid_rho > 0.0) {
            bail!(
                Parameter,
                "grid_rho must be positive, got {}",
                self.grid_rho
            );
        }
        if !(self.churn >= 0.0) || !self.churn.is_finite() {
            bail!(
                Parameter,
                "churn must be finite and nonnegative, got {}",
                self.churn
            );
        }
        if self.kind == SamplerKind::Deis && !(1..=4).contains(&self.deis_order) {
            bail!(
                Parameter,
                "deis_order must lie in [1, 4], got {}",
                self.deis_order
            );
        }
        if self.kind == SamplerKind::Deis && self.steps < self.deis_order {
            bail!(
                Parameter,
                "steps {} below deis_order {}",
                self.steps,
                self.deis_order
            );
        }
        Ok(())
    }
}

/// `steps` decreasing noise levels from `sigma_max` to `sigma_min` followed by 0.
pub fn sigma_grid(config: &SamplerConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let inv = 1.0 / config.grid_rho;
    let (a, b) = (config.sigma_max.powf(inv), config.sigma_min.powf(inv));
    let last = (config.steps - 1) as f64;
    let mut grid: Vec<f64> = (0..config.steps)
        .map(|i| (a + i as f64 / last * (b - a)).powf(config.grid_rho))
        .collect();
    grid[0] = config.sigma_max;
    grid[config.steps - 1] = config.sigma_min;
    grid.push(0.0);
    Ok(grid)
}

/// Anything that can evaluate `D(x; σ)` for a whole batch at one σ.
pub trait Denoiser<T: Scalar> {
    fn denoise(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> Denoiser<T> for F
where
    F: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    fn denoise(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        self(x, sigma)
    }
}

/// The preconditioned network `D = c_skip x + c_out F(c_in x)`.
pub struct ModelDenoiser<'a, N> {
    pub net: &'a N,
    pub cond: Conditioning,
    pub params: EdmParams,
}

impl<'a, N> ModelDenoiser<'a, N> {
    pub fn new(net: &'a N, cond: Conditioning, params: EdmParams) -> Self {
        Self { net, cond, params }
    }
}

impl<T: Scalar, N: Network<T>> Denoiser<T> for ModelDenoiser<'_, N> {
    fn denoise(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        precondition(self.net, x, sigma, &self.cond, &self.params)
    }
}

/// Posterior-mean denoiser for data distributed `N(mean, std²)` per element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDenoiser {
    pub mean: f64,
    pub std: f64,
}

impl GaussianDenoiser {
    pub fn eval(&self, x: f64, sigma: f64) -> f64 {
        let s2 = self.std * self.std;
        let v = sigma * sigma;
        (s2 * x + v * self.mean) / (s2 + v)
    }

    /// Exact probability-flow solution from `(x0, sigma0)` to `sigma`.
    pub fn flow(&self, x0: f64, sigma0: f64, sigma: f64) -> f64 {
        let s2 = self.std * self.std;
        self.mean + (x0 - self.mean) * ((s2 + sigma * sigma) / (s2 + sigma0 * sigma0)).sqrt()
    }
}

impl<T: Scalar> Denoiser<T> for GaussianDenoiser {
    fn denoise(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        Ok(x.map(|v| T::c(self.eval(v.f64(), sigma))))
    }
}

/// `(x − D(x; σ))/σ`.
pub fn ode_rhs<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    x: &Tensor<T>,
    sigma: f64,
) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        bail!(Parameter, "ode_rhs needs sigma > 0, got {sigma}");
    }
    let d = den.denoise(x, sigma)?;
    rhs_from(x, &d, sigma)
}

fn rhs_from<T: Scalar>(x: &Tensor<T>, d: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let mut r = x.sub(d)?;
    let inv = T::c(1.0 / sigma);
    r.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(r)
}

/// Fresh noise for the stochastic variant, drawn from the experiment's prior.
#[derive(Debug, Clone)]
pub struct ChurnNoise {
    pub spec: NoiseSpec,
    pub rng: RngStream,
}

const GL_NODES: [(f64, f64); 8] = [
    (0.095_012_509_837_637_44, 0.189_450_610_455_068_5),
    (0.281_603_550_779_258_9, 0.182_603_415_044_923_6),
    (0.458_016_777_657_227_4, 0.169_156_519_395_002_5),
    (0.617_876_244_402_643_7, 0.149_595_988_816_576_7),
    (0.755_404_408_355_003, 0.124_628_971_255_533_9),
    (0.865_631_202_387_831_7, 0.095_158_511_682_492_78),
    (0.944_575_023_073_232_6, 0.062_253_523_938_647_89),
    (0.989_400_934_991_649_9, 0.027_152_459_411_754_09),
];

/// `∫_{to}^{from} ℓ_j(τ)/τ² dτ` for each Lagrange basis polynomial through
/// `nodes`, by 16-point Gauss–Legendre in `u = ln τ`.
fn deis_weights(nodes: &[f64], from: f64, to: f64) -> Vec<f64> {
    let (ua, ub) = (to.ln(), from.ln());
    let half = 0.5 * (ub - ua);
    let mid = 0.5 * (ub + ua);
    let mut w = vec![0.0; nodes.len()];
    for &(xi, wi) in &GL_NODES {
        for u in [mid - half * xi, mid + half * xi] {
            let tau = u.exp();
            let jac = wi * half / tau;
            for (j, wj) in w.iter_mut().enumerate() {
                let mut l = 1.0;
                for (m, &nm) in nodes.iter().enumerate() {
                    if m != j {
                        l *= (tau - nm) / (nodes[j] - nm);
                    }
                }
                *wj += jac * l;
            }
        }
    }
    w
}

fn check_state<T: Scalar>(x: &Tensor<T>, step: usize, sigma: f64) -> Result<()> {
    if !x.all_finite() {
        bail!(Numeric, "non-finite state at step {step} (sigma {sigma})");
    }
    Ok(())
}

/// Integrates along `grid` (monotone, strictly positive except possibly a
/// final 0) starting from `x`.
fn integrate<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    config: &SamplerConfig,
    grid: &[f64],
    mut x: Tensor<T>,
    mut churn: Option<&mut ChurnNoise>,
) -> Result<Tensor<T>> {
    let gamma = (config.churn / config.steps as f64).min(2f64.sqrt() - 1.0);
    let mut history: Vec<(f64, Tensor<T>)> = Vec::new();
    for (step, w) in grid.windows(2).enumerate() {
        let (mut sigma, next) = (w[0], w[1]);
        if let (Some(ch), true) = (churn.as_deref_mut(), gamma > 0.0 && next > 0.0) {
            let hat = sigma * (1.0 + gamma);
            let eps: Tensor<T> = ch.spec.sample(x.shape(), &mut ch.rng)?;
            x.axpy(T::c((hat * hat - sigma * sigma).sqrt()), &eps)?;
            sigma = hat;
        }
        let d = den.denoise(&x, sigma)?;
        check_state(&d, step, sigma)?;
        if next == 0.0 {
            x = d;
            check_state(&x, step, sigma)?;
            break;
        }
        let dt = T::c(next - sigma);
        let multistep = config.kind == SamplerKind::Deis && history.len() + 1 >= config.deis_order;
        if multistep {
            history.push((sigma, d));
            let k = config.deis_order;
            let recent = &history[history.len() - k..];
            let nodes: Vec<f64> = recent.iter().map(|(s, _)| *s).collect();
            let weights = deis_weights(&nodes, sigma, next);
            let mut out = x.scale(T::c(next / sigma));
            for ((_, dj), &wj) in recent.iter().zip(&weights) {
                out.axpy(T::c(next * wj), dj)?;
            }
            x = out;
            if history.len() > k {
                history.remove(0);
            }
        } else {
            let slope = rhs_from(&x, &d, sigma)?;
            let mut euler = x.clone();
            euler.axpy(dt, &slope)?;
            if config.kind == SamplerKind::Euler {
                x = euler;
            } else {
                let d2 = den.denoise(&euler, next)?;
                let slope2 = rhs_from(&euler, &d2, next)?;
                let half = T::c(0.5) * dt;
                x.axpy(half, &slope)?;
                x.axpy(half, &slope2)?;
            }
            if config.kind == SamplerKind::Deis {
                history.push((sigma, d));
            }
        }
        check_state(&x, step, next)?;
    }
    Ok(x)
}

/// Integrates from `σ_max · prior_noise` down to σ = 0.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    config: &SamplerConfig,
    prior_noise: &Tensor<T>,
    churn: Option<&mut ChurnNoise>,
) -> Result<Tensor<T>> {
    let grid = sigma_grid(config)?;
    let x = prior_noise.scale(T::c(config.sigma_max));
    integrate(den, config, &grid, x, churn)
}

/// Integrates `video` from `σ_min` up to `σ_max` and returns `x(σ_max)/σ_max`.
pub fn invert<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    config: &SamplerConfig,
    video: &Tensor<T>,
) -> Result<Tensor<T>> {
    if config.churn > 0.0 {
        bail!(
            Config,
            "inversion must be deterministic; churn is {}",
            config.churn
        );
    }
    let mut grid = sigma_grid(config)?;
    grid.pop();
    grid.reverse();
    let x = integrate(den, config, &grid, video.clone(), None)?;
    Ok(x.scale(T::c(1.0 / config.sigma_max)))
}
