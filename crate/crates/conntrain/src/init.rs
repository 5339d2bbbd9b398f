//! Weight initializers and the seeded RNG they draw from.
//!
//! All randomness flows through `ChaCha8Rng` seeded from a caller-supplied
//! 64-bit seed, so identical specs reproduce identical tensors across runs
//! and platforms. Three families are supported:
//!
//! - Glorot Normal: `N(0, 2 / (fan_in + fan_out))`
//! - He Normal: `N(0, 2 / fan_in)`
//! - Signed He Constant: every element has magnitude `sqrt(2 / fan_in)`,
//!   with an independent Bernoulli(p) positive sign.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("fan_in must be at least 1")]
    ZeroFanIn,
    #[error("sign_prob_p must lie in [0, 1], got {0}")]
    BadSignProb(f64),
    #[error("sign_prob_p other than 0.5 only applies to signed_he_constant")]
    SignProbWithoutConstantInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    GlorotNormal,
    HeNormal,
    SignedHeConstant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub kind: InitKind,
    /// Probability of a positive sign; only meaningful for
    /// [`InitKind::SignedHeConstant`].
    #[serde(default = "default_sign_prob")]
    pub sign_prob_p: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_sign_prob() -> f64 {
    0.5
}

fn default_seed() -> u64 {
    1
}

impl InitSpec {
    pub fn new(kind: InitKind, seed: u64) -> Self {
        InitSpec {
            kind,
            sign_prob_p: 0.5,
            seed,
        }
    }

    pub fn with_sign_prob(mut self, p: f64) -> Self {
        self.sign_prob_p = p;
        self
    }

    pub fn validate(&self) -> Result<(), InitError> {
        if !(0.0..=1.0).contains(&self.sign_prob_p) || self.sign_prob_p.is_nan() {
            return Err(InitError::BadSignProb(self.sign_prob_p));
        }
        if self.sign_prob_p != 0.5 && self.kind != InitKind::SignedHeConstant {
            return Err(InitError::SignProbWithoutConstantInit);
        }
        Ok(())
    }
}

/// The constant weight magnitude of a layer, `sqrt(2 / fan_in)`.
pub fn layer_magnitude(fan_in: usize) -> Result<f64, InitError> {
    if fan_in == 0 {
        return Err(InitError::ZeroFanIn);
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Draws a weight tensor. `fan_in`/`fan_out` set the scale; for conv layers
/// the convention is `fan_in = C * k * k`.
pub fn init_weights(
    spec: &InitSpec,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Result<Tensor, InitError> {
    spec.validate()?;
    if fan_in == 0 {
        return Err(InitError::ZeroFanIn);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = match spec.kind {
        InitKind::GlorotNormal => {
            let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Normal::new(0.0, sd).unwrap();
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
        InitKind::HeNormal => {
            let sd = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, sd).unwrap();
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
        InitKind::SignedHeConstant => {
            let c = layer_magnitude(fan_in)? as f32;
            (0..n)
                .map(|_| if rng.gen_bool(spec.sign_prob_p) { c } else { -c })
                .collect()
        }
    };
    Ok(Tensor::new(shape.to_vec(), data).unwrap())
}

/// Splitmix64 finalizer, used to derive independent per-layer and per-epoch
/// seeds from a base seed without correlated streams.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
