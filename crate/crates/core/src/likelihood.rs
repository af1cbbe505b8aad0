//! Poisson negative log-likelihood of detector counts under the Beer-Lambert
//! model, with gradients and cumulative bookkeeping.
//!
//! Per bin: `λ − y·ln λ + ln Γ(y + 1)`. All likelihood arithmetic is `f64`.

use statrs::function::gamma::ln_gamma;

use crate::error::{ensure_len, Error, Result};
use crate::forward::{backproject_into, project_with, Geometry, Measurement};
use crate::grid::Grid;
use crate::scalar::Real;

/// `ln(y!)`
#[inline]
pub fn ln_factorial(y: u64) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

/// Poisson NLL of `counts` given rates `lambda`, including `ln(y!)`.
pub fn poisson_nll(lambda: &[f64], counts: &[u64]) -> f64 {
    lambda
        .iter()
        .zip(counts)
        .map(|(&l, &y)| {
            let yf = y as f64;
            let data = if y == 0 { 0.0 } else { yf * l.ln() };
            l - data + ln_factorial(y)
        })
        .sum()
}

fn rates<T: Real>(image: &Grid<T>, m: &Measurement, geometry: &Geometry) -> Result<Vec<f64>> {
    image.ensure_side(geometry.side())?;
    m.validate(geometry)?;
    let table = geometry.bin_table(m.angle)?;
    let proj = project_with(image.as_slice(), &table, geometry.side(), T::lit(geometry.pixel_length()));
    Ok(proj.into_iter().map(|g| m.intensity * (-g.as_f64()).exp()).collect())
}

/// `−ln p_x(y | angle, I0)` for one measurement.
pub fn nll_increment<T: Real>(image: &Grid<T>, m: &Measurement, geometry: &Geometry) -> Result<f64> {
    Ok(poisson_nll(&rates(image, m, geometry)?, &m.counts))
}

/// Gradient of [`nll_increment`] with respect to the image:
/// `(l/r) · Rᵀ (y − λ(x))`.
pub fn nll_gradient<T: Real>(image: &Grid<T>, m: &Measurement, geometry: &Geometry) -> Result<Grid<T>> {
    let mut grad = Grid::zeros(geometry.side());
    accumulate(image, m, geometry, &mut grad)?;
    Ok(grad)
}

/// Adds the gradient of one measurement into `grad` and returns its NLL.
fn accumulate<T: Real>(image: &Grid<T>, m: &Measurement, geometry: &Geometry, grad: &mut Grid<T>) -> Result<f64> {
    let lambda = rates(image, m, geometry)?;
    let residual: Vec<T> = lambda
        .iter()
        .zip(&m.counts)
        .map(|(&l, &y)| T::lit(y as f64 - l))
        .collect();
    let table = geometry.bin_table(m.angle)?;
    backproject_into(grad.as_mut_slice(), &residual, &table, T::lit(geometry.pixel_length()));
    Ok(poisson_nll(&lambda, &m.counts))
}

/// `L_t(x) = Σ_s nll_increment(x, Z_s)` over a non-empty sequence.
pub fn cumulative_nll<T: Real>(image: &Grid<T>, measurements: &[Measurement], geometry: &Geometry) -> Result<f64> {
    if measurements.is_empty() {
        return Err(Error::invalid("cumulative NLL over an empty sequence"));
    }
    measurements
        .iter()
        .try_fold(0.0, |acc, m| Ok(acc + nll_increment(image, m, geometry)?))
}

/// Cumulative NLL and its gradient in one pass. An empty sequence yields
/// `(0, 0)`.
pub fn cumulative_nll_and_gradient<T: Real>(
    image: &Grid<T>,
    measurements: &[Measurement],
    geometry: &Geometry,
) -> Result<(f64, Grid<T>)> {
    image.ensure_side(geometry.side())?;
    let mut grad = Grid::zeros(geometry.side());
    let mut total = 0.0;
    for m in measurements {
        total += accumulate(image, m, geometry, &mut grad)?;
    }
    Ok((total, grad))
}

/// Running `L_t` of a fixed image, updated one measurement at a time.
#[derive(Debug, Clone)]
pub struct NllAccumulator<T> {
    image: Grid<T>,
    value: f64,
    steps: usize,
}

impl<T: Real> NllAccumulator<T> {
    pub fn new(image: Grid<T>) -> Self {
        Self {
            image,
            value: 0.0,
            steps: 0,
        }
    }

    /// Adds one measurement and returns its increment.
    pub fn push(&mut self, m: &Measurement, geometry: &Geometry) -> Result<f64> {
        let inc = nll_increment(&self.image, m, geometry)?;
        self.value += inc;
        self.steps += 1;
        Ok(inc)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn image(&self) -> &Grid<T> {
        &self.image
    }
}

/// Checks that counts have the geometry's bin count.
pub fn validate_measurements(measurements: &[Measurement], geometry: &Geometry) -> Result<()> {
    for m in measurements {
        m.validate(geometry)?;
        ensure_len(geometry.side(), m.counts.len())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{mean_counts, radon_project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    #[test]
    fn scalar_closed_forms() {
        let g = Geometry::new(1, 1.0).unwrap();
        let x = Grid::filled(1, 1.0);
        let m = Measurement::new(0.0, E, vec![0]).unwrap();
        assert!((nll_increment(&x, &m, &g).unwrap() - 1.0).abs() < 1e-12);

        // λ = 2 via zero attenuation
        let z = Grid::<f64>::zeros(1);
        let m = Measurement::new(0.0, 2.0, vec![2]).unwrap();
        let expected = 2.0 - 2f64.ln();
        assert!((nll_increment(&z, &m, &g).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.306_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn scalar_gradient_closed_form() {
        let g = Geometry::new(1, 1.0).unwrap();
        let x = Grid::filled(1, 0.5);
        let m = Measurement::new(0.0, 10.0, vec![3]).unwrap();
        let grad = nll_gradient(&x, &m, &g).unwrap();
        let expected = 3.0 - 10.0 * (-0.5f64).exp();
        assert!((grad.as_slice()[0] - expected).abs() < 1e-12);
        assert!((expected + 3.065_306_597_126_334).abs() < 1e-9);
    }

    #[test]
    fn matches_per_bin_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Geometry::new(8, 4.0).unwrap();
        let x = Grid::from_fn(8, |_, _| rng.random::<f64>());
        let counts: Vec<u64> = (0..8).map(|_| rng.random_range(0..400)).collect();
        let m = Measurement::new(61.0, 300.0, counts.clone()).unwrap();
        let proj = radon_project(&x, 61.0, &g).unwrap();
        let mut oracle = 0.0;
        for (i, &y) in counts.iter().enumerate() {
            let lam = 300.0 * (-proj[i]).exp();
            let lnfact: f64 = (1..=y).map(|k| (k as f64).ln()).sum();
            oracle += lam - y as f64 * lam.ln() + lnfact;
        }
        let got = nll_increment(&x, &m, &g).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }

    #[test]
    fn stationary_at_expected_counts() {
        // counts equal to λ exactly needs integer λ: zero image, integer I0
        let g = Geometry::new(4, 4.0).unwrap();
        let x = Grid::<f64>::zeros(4);
        let m = Measurement::new(12.0, 50.0, vec![50; 4]).unwrap();
        let grad = nll_gradient(&x, &m, &g).unwrap();
        assert!(grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_minimized_at_count() {
        // NLL as a function of λ is minimized at λ = y
        let y = 7u64;
        let f = |lam: f64| poisson_nll(&[lam], &[y]);
        let best = f(7.0);
        for lam in [6.0, 6.9, 6.99, 7.01, 7.1, 8.0] {
            assert!(f(lam) > best);
        }
    }

    #[test]
    fn additivity_and_incremental() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Geometry::new(8, 4.0).unwrap();
        let x = Grid::from_fn(8, |_, _| rng.random::<f64>());
        let ms: Vec<Measurement> = (0..10)
            .map(|k| {
                let angle = k as f64 * 17.0;
                let lam = mean_counts(&x, angle, 1e3, &g).unwrap();
                Measurement::new(angle, 1e3, lam.iter().map(|l| l.round() as u64).collect()).unwrap()
            })
            .collect();
        let single = nll_increment(&x, &ms[0], &g).unwrap();
        assert_eq!(cumulative_nll(&x, &ms[..1], &g).unwrap(), single);
        let twice = vec![ms[0].clone(), ms[0].clone()];
        assert_eq!(cumulative_nll(&x, &twice, &g).unwrap(), 2.0 * single);

        let mut acc = NllAccumulator::new(x.clone());
        for m in &ms {
            acc.push(m, &g).unwrap();
        }
        let batch = cumulative_nll(&x, &ms, &g).unwrap();
        assert!((acc.value() - batch).abs() < 1e-9);
        assert_eq!(acc.steps(), 10);
        assert!(cumulative_nll(&x, &[], &g).is_err());
    }
}
