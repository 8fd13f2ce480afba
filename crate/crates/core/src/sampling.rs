//! Seedable random streams and the handful of distribution primitives the
//! samplers need.
//!
//! Every stochastic routine in the crate draws from an [`RngStream`]. A stream
//! is a ChaCha8 generator keyed by `seed` with its 64-bit stream selector set
//! to `stream_id`, so independent tasks can be handed their own stream and the
//! results do not depend on how tasks are scheduled across threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};
use libm::erfc;
use statrs::function::erf::erfc_inv;
use thiserror::Error;

/// Standardized truncation point above which the exponential-proposal
/// rejection sampler replaces naive rejection.
pub const TAIL_SWITCH: f64 = 0.45;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

fn check_positive(name: &'static str, value: f64) -> Result<(), SamplingError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(SamplingError::InvalidParameter { name, value })
    }
}

fn check_finite(name: &'static str, value: f64) -> Result<(), SamplingError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(SamplingError::InvalidParameter { name, value })
    }
}

/// A deterministic random stream identified by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    #[inline]
    pub(crate) fn standard_exponential(&mut self) -> f64 {
        Exp1.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer, used to derive child seeds from a parent seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn draw_normal(mean: f64, sd: f64, rng: &mut RngStream) -> Result<f64, SamplingError> {
    check_finite("mean", mean)?;
    check_positive("sd", sd)?;
    Ok(mean + sd * rng.standard_normal())
}

/// Standard normal conditioned on `z >= lower`.
pub(crate) fn standard_normal_above(lower: f64, rng: &mut RngStream) -> f64 {
    if lower <= TAIL_SWITCH {
        loop {
            let z = rng.standard_normal();
            if z >= lower {
                return z;
            }
        }
    }
    // Robert (1995): translated exponential proposal with the optimal rate.
    let rate = 0.5 * (lower + (lower * lower + 4.0).sqrt());
    loop {
        let z = lower + rng.standard_exponential() / rate;
        let d = z - rate;
        if rng.uniform() <= (-0.5 * d * d).exp() {
            return z;
        }
    }
}

/// One draw from `N(mean, sd^2)` conditioned on the value being at least
/// `lower`. `lower = -inf` means no truncation.
pub fn draw_left_truncated_normal(
    mean: f64,
    sd: f64,
    lower: f64,
    rng: &mut RngStream,
) -> Result<f64, SamplingError> {
    check_finite("mean", mean)?;
    check_positive("sd", sd)?;
    if lower.is_nan() || lower == f64::INFINITY {
        return Err(SamplingError::InvalidParameter {
            name: "lower",
            value: lower,
        });
    }
    let a = (lower - mean) / sd;
    let value = mean + sd * standard_normal_above(a, rng);
    // Guard against rounding pushing the value a hair below the bound.
    Ok(value.max(lower))
}

/// Draw of `nu * lambda / X` with `X ~ chi^2(nu)`.
pub fn draw_scaled_inv_chisq(
    nu: f64,
    lambda: f64,
    rng: &mut RngStream,
) -> Result<f64, SamplingError> {
    check_positive("nu", nu)?;
    check_positive("lambda", lambda)?;
    let chi = ChiSquared::new(nu).map_err(|_| SamplingError::InvalidParameter {
        name: "nu",
        value: nu,
    })?;
    let x: f64 = chi.sample(rng);
    Ok(nu * lambda / x.max(f64::MIN_POSITIVE))
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Phi(x)` without cancellation for large `x`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> Result<f64, SamplingError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SamplingError::InvalidParameter {
            name: "p",
            value: p,
        });
    }
    let mut q = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // One Halley step against the accurate cdf polishes the initial guess.
    let err = if q <= 0.0 {
        normal_cdf(q) - p
    } else {
        (1.0 - p) - normal_sf(q)
    };
    let u = err * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * q * q).exp();
    if u.is_finite() {
        q -= u / (1.0 + 0.5 * q * u);
    }
    Ok(q)
}

/// `ln(1 - Phi(z))`, accurate far into the upper tail.
pub fn log_normal_sf(z: f64) -> f64 {
    if z < 30.0 {
        normal_sf(z).ln()
    } else {
        // Continued fraction for the Mills ratio.
        let mut frac = z;
        for k in (1..=60).rev() {
            frac = z + k as f64 / frac;
        }
        -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - frac.ln()
    }
}

/// `phi(z) / (1 - Phi(z))`, the inverse Mills ratio.
pub fn inverse_mills(z: f64) -> f64 {
    let log_pdf = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (log_pdf - log_normal_sf(z)).exp()
}

/// Linear-interpolation sample quantile (Hyndman-Fan type 7) of
/// already-sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64, SamplingError> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&p) {
        return Err(SamplingError::InvalidParameter { name: "p", value: p });
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Type-7 quantile of unsorted values; NaNs are rejected.
pub fn quantile(values: &[f64], p: f64) -> Result<f64, SamplingError> {
    if let Some(bad) = values.iter().find(|v| v.is_nan()) {
        return Err(SamplingError::InvalidParameter { name: "value", value: *bad });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}
