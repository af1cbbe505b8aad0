//! Poisson variate generation.
//!
//! Small rates use inversion by sequential search; rates above 10 use the
//! transformed-rejection sampler with squeeze (PTRS, Hörmann 1993).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const INVERSION_LIMIT: f64 = 10.0;

/// Draws one Poisson(`rate`) variate. `rate` must be finite and positive.
pub fn draw<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    if rate <= INVERSION_LIMIT {
        draw_inversion(rng, rate)
    } else {
        draw_ptrs(rng, rate)
    }
}

fn draw_inversion<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-rate).exp();
    let mut cdf = p;
    // The tail beyond ~60 has mass below 1e-30 for rate <= 10; the cap guards
    // against rounding in the cumulative sum when u is within ulp of 1.
    while u > cdf && k < 200 {
        k += 1;
        p *= rate / k as f64;
        cdf += p;
    }
    k
}

fn draw_ptrs<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    let slam = rate.sqrt();
    let loglam = rate.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -rate + k * loglam - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// Independent Poisson draws for each mean, deterministic in `seed`.
pub fn sample_counts(means: &[f64], seed: u64) -> Result<Vec<u64>> {
    if let Some(bad) = means.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
        return Err(Error::invalid(format!(
            "Poisson mean must be finite and positive, got {bad}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(means.iter().map(|&m| draw(&mut rng, m)).collect())
}
