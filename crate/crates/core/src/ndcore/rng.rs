//! Counter-based, stream-splittable random numbers.
//!
//! A stream is identified by `(seed, stream_id)` and positioned by a word
//! counter. The keystream is ChaCha8 keyed by `seed` (expanded with
//! `SeedableRng::seed_from_u64`) with `stream_id` as the ChaCha nonce, so a
//! given `(seed, stream_id, counter)` triple yields the same values on every
//! platform.
//!
//! Normals use the Box–Muller transform on pairs of 53-bit uniforms:
//! `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`, `z0 = r cos(2π u2)`, `z1 = r sin(2π u2)`
//! with `r = sqrt(-2 ln u1)`. Both outputs are used, in that order; a request
//! for an odd count discards the final `z1`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::Result;
use crate::ndcore::tensor::{Shape, Tensor};
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("stream_id", &self.stream_id)
            .field("counter", &self.counter())
            .finish()
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream positioned at an explicit 32-bit-word counter.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.inner.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Position in 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// A child stream under the same seed. Distinct `child` values give
    /// distinct ChaCha nonces and therefore independent keystreams.
    pub fn split(&self, child: u64) -> RngStream {
        RngStream::new(
            self.seed,
            mix64(self.stream_id ^ mix64(child.wrapping_add(1))),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = std::f64::consts::TAU * u2;
        (r * th.cos(), r * th.sin())
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = T::c(a);
            pair[1] = T::c(b);
        }
        if let [last] = chunks.into_remainder() {
            *last = T::c(self.normal_pair().0);
        }
    }
}

/// I.i.d. standard normal tensor; advances `rng` by `2 * ceil(n / 2)` u64 draws.
pub fn gaussian<T: Scalar>(rng: &mut RngStream, dims: &[usize]) -> Result<Tensor<T>> {
    let shape = Shape::new(dims.to_vec())?;
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    Ok(t)
}
