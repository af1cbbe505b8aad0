//! Classical reconstructors and the predictor interface that turns a
//! measurement history into a mixing distribution.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::confseq::MixingDistribution;
use crate::error::{Error, Result};
use crate::forward::{Geometry, Measurement};
use crate::grid::{Grid, Image};
use crate::likelihood::{cumulative_nll_and_gradient, validate_measurements};
use crate::optim::{minimize_in_unit_box, OptimizerConfig};
use crate::scalar::Real;

/// Ram-Lak filter applied through a zero-padded FFT.
struct RampFilter {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    response: Vec<Complex<f64>>,
}

impl RampFilter {
    fn new(bins: usize) -> Self {
        let len = (2 * bins).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        // spatial Ram-Lak kernel with unit sample spacing, wrapped circularly
        let mut kernel = vec![Complex::new(0.0, 0.0); len];
        kernel[0].re = 0.25;
        for n in 1..len / 2 {
            if n % 2 == 1 {
                let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
                kernel[n].re = v;
                kernel[len - n].re = v;
            }
        }
        forward.process(&mut kernel);
        Self {
            len,
            forward,
            inverse,
            response: kernel,
        }
    }

    fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(values) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.inverse.process(&mut buf);
        let norm = 1.0 / self.len as f64;
        buf[..values.len()].iter().map(|c| c.re * norm).collect()
    }
}

/// Backprojection that linearly interpolates between detector bin centers.
/// The nearest-bin adjoint correlates with the bin-occupancy aliasing of
/// the pixel-driven projector, which the ramp filter turns into a DC bias.
fn interpolated_backproject(acc: &mut [f64], q: &[f64], angle: f64, side: usize) {
    let half = side as f64 / 2.0;
    let (sin, cos) = angle.to_radians().sin_cos();
    let at = |i: isize| if i >= 0 && (i as usize) < side { q[i as usize] } else { 0.0 };
    for row in 0..side {
        let y = half - (row as f64 + 0.5);
        for col in 0..side {
            let x = col as f64 + 0.5 - half;
            let u = x * cos + y * sin + half - 0.5;
            let i = u.floor();
            let w = u - i;
            let i = i as isize;
            acc[row * side + col] += (1.0 - w) * at(i) + w * at(i + 1);
        }
    }
}

/// Filtered backprojection from line integrals in pixel units (`R x`).
pub fn fbp_sinogram(views: &[(f64, Vec<f64>)], geometry: &Geometry) -> Result<Image<f64>> {
    if views.is_empty() {
        return Err(Error::invalid("filtered backprojection needs at least one view"));
    }
    let side = geometry.side();
    let filter = RampFilter::new(side);
    let mut acc = Grid::zeros(side);
    for (angle, g) in views {
        crate::error::ensure_len(side, g.len())?;
        crate::forward::check_angle(*angle)?;
        let q = filter.apply(g);
        interpolated_backproject(acc.as_mut_slice(), &q, *angle, side);
    }
    let scale = std::f64::consts::PI / views.len() as f64;
    Ok(Image::clamped(acc.map(|v| v * scale)))
}

/// Line-integral estimate `−(r/l) ln(max(y, 1) / I0)`, clamped at 0.
pub fn line_integrals(m: &Measurement, geometry: &Geometry) -> Vec<f64> {
    let inv = 1.0 / geometry.pixel_length();
    m.counts
        .iter()
        .map(|&y| (-(y.max(1) as f64 / m.intensity).ln() * inv).max(0.0))
        .collect()
}

/// Filtered backprojection from photon counts.
pub fn fbp(measurements: &[Measurement], geometry: &Geometry) -> Result<Image<f64>> {
    validate_measurements(measurements, geometry)?;
    let views: Vec<(f64, Vec<f64>)> = measurements
        .iter()
        .map(|m| (m.angle, line_integrals(m, geometry)))
        .collect();
    fbp_sinogram(&views, geometry)
}

/// Approximate maximum likelihood: Adam on the cumulative NLL from `init`,
/// projected onto `[0, 1]` after each step. Returns the lowest-NLL iterate,
/// so the result never scores worse than `init`.
pub fn mle(
    measurements: &[Measurement],
    init: &Image<f64>,
    config: &OptimizerConfig,
    geometry: &Geometry,
) -> Result<Image<f64>> {
    config.validate()?;
    validate_measurements(measurements, geometry)?;
    init.ensure_side(geometry.side())?;
    let side = geometry.side();
    let (best, _) = minimize_in_unit_box(init.as_slice().to_vec(), config, |x| {
        let grid = Grid::from_vec(side, x.to_vec())?;
        let (value, grad) = cumulative_nll_and_gradient(&grid, measurements, geometry)?;
        Ok((value, grad.into_vec()))
    })?;
    Image::from_vec(side, best)
}

/// Separable Gaussian smoothing with a kernel renormalized at the borders.
/// `sigma = 0` returns the input unchanged.
pub fn gaussian_smooth<T: Real>(grid: &Grid<T>, sigma: f64) -> Grid<T> {
    if sigma <= 0.0 {
        return grid.clone();
    }
    let side = grid.side();
    let radius = ((4.0 * sigma).ceil() as usize).min(side.saturating_sub(1));
    let weights: Vec<f64> = (0..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let blur_line = |get: &dyn Fn(usize) -> f64, i: usize| -> f64 {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(side - 1);
        let (mut num, mut den) = (0.0, 0.0);
        for j in lo..=hi {
            let w = weights[i.abs_diff(j)];
            num += w * get(j);
            den += w;
        }
        num / den
    };
    let rows = Grid::from_fn(side, |r, c| T::lit(blur_line(&|j| grid.get(r, j).as_f64(), c)));
    Grid::from_fn(side, |r, c| T::lit(blur_line(&|j| rows.get(j, c).as_f64(), r)))
}

/// Smooths and clamps a reconstruction.
pub fn smooth_image(image: &Image<f64>, sigma: f64) -> Image<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    Image::clamped(gaussian_smooth(image, sigma))
}

/// Produces the mixing distribution for the next measurement from the
/// measurements acquired so far.
pub trait Predictor: Send {
    fn name(&self) -> String;

    fn sample_count(&self) -> usize;

    /// The returned mixing distribution records `history.len()` as the data
    /// it depends on.
    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn sample_count(&self) -> usize {
        (**self).sample_count()
    }

    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution> {
        (**self).predict(history, geometry)
    }
}

fn prior(geometry: &Geometry) -> Image<f64> {
    Image::zeros(geometry.side())
}

/// Point prediction by filtered backprojection.
#[derive(Debug, Clone, Default)]
pub struct FbpPredictor;

impl Predictor for FbpPredictor {
    fn name(&self) -> String {
        "fbp".into()
    }

    fn sample_count(&self) -> usize {
        1
    }

    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution> {
        let img = if history.is_empty() { prior(geometry) } else { fbp(history, geometry)? };
        Ok(MixingDistribution::dirac(img, history.len()))
    }
}

/// Point prediction by approximate MLE initialized from FBP.
///
/// With `refit_steps` set, every prediction after the first starts from the
/// previous estimate and runs only that many Adam steps.
#[derive(Debug, Clone)]
pub struct MlePredictor {
    pub config: OptimizerConfig,
    pub refit_steps: Option<usize>,
    last: Option<Image<f64>>,
}

impl MlePredictor {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            refit_steps: None,
            last: None,
        }
    }

    pub fn warm_started(config: OptimizerConfig, refit_steps: usize) -> Self {
        Self {
            config,
            refit_steps: Some(refit_steps),
            last: None,
        }
    }

    fn fit(&mut self, history: &[Measurement], geometry: &Geometry, init: Option<Image<f64>>) -> Result<Image<f64>> {
        if history.is_empty() {
            return Ok(prior(geometry));
        }
        let (start, cfg) = match (self.refit_steps, self.last.take()) {
            (Some(steps), Some(last)) => (last, self.config.with_steps(steps)),
            _ => (match init {
                Some(i) => i,
                None => fbp(history, geometry)?,
            }, self.config),
        };
        let est = mle(history, &start, &cfg, geometry)?;
        if self.refit_steps.is_some() {
            self.last = Some(est.clone());
        }
        Ok(est)
    }
}

impl Predictor for MlePredictor {
    fn name(&self) -> String {
        "mle".into()
    }

    fn sample_count(&self) -> usize {
        1
    }

    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution> {
        let est = self.fit(history, geometry, None)?;
        Ok(MixingDistribution::dirac(est, history.len()))
    }
}

/// Applies Gaussian smoothing to every sample of a base predictor.
#[derive(Debug, Clone)]
pub struct SmoothedPredictor<P> {
    pub base: P,
    pub sigma: f64,
}

impl<P: Predictor> Predictor for SmoothedPredictor<P> {
    fn name(&self) -> String {
        format!("{}_smooth{}", self.base.name(), self.sigma)
    }

    fn sample_count(&self) -> usize {
        self.base.sample_count()
    }

    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution> {
        let mix = self.base.predict(history, geometry)?;
        let n = mix.data_measurements();
        let smoothed = mix.into_samples().iter().map(|s| smooth_image(s, self.sigma)).collect();
        MixingDistribution::new(smoothed, n)
    }
}

/// One ensemble member: jittered initialization and a smoothing strength.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberSpec {
    pub seed: u64,
    pub smoothing: f64,
}

/// Ensemble of approximate MLE runs from jittered FBP initializations, each
/// followed by its own smoothing strength.
#[derive(Debug, Clone)]
pub struct EnsemblePredictor {
    members: Vec<(MemberSpec, MlePredictor)>,
    jitter_sigma: f64,
}

/// Pixel jitter of ensemble initializations.
pub const DEFAULT_JITTER_SIGMA: f64 = 0.02;

impl EnsemblePredictor {
    pub fn new(
        specs: Vec<MemberSpec>,
        config: OptimizerConfig,
        refit_steps: Option<usize>,
        jitter_sigma: f64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        if !(jitter_sigma >= 0.0) {
            return Err(Error::invalid("jitter sigma must be non-negative"));
        }
        let members = specs
            .into_iter()
            .map(|s| {
                let mut p = MlePredictor::new(config);
                p.refit_steps = refit_steps;
                (s, p)
            })
            .collect();
        Ok(Self { members, jitter_sigma })
    }

    /// `k` members with seeds `base_seed + i` and smoothing strengths spread
    /// evenly over `[0, max_smoothing]`.
    pub fn standard(k: usize, base_seed: u64, max_smoothing: f64, config: OptimizerConfig, refit_steps: Option<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("ensemble needs K >= 2"));
        }
        let specs = (0..k)
            .map(|i| MemberSpec {
                seed: base_seed.wrapping_add(i as u64),
                smoothing: max_smoothing * i as f64 / (k - 1) as f64,
            })
            .collect();
        Self::new(specs, config, refit_steps, DEFAULT_JITTER_SIGMA)
    }
}

impl EnsemblePredictor {
    pub fn with_jitter(mut self, sigma: f64) -> Self {
        self.jitter_sigma = sigma;
        self
    }
}

fn jitter(image: &Image<f64>, sigma: f64, seed: u64) -> Image<f64> {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Image::clamped(image.map(|v| v + normal.sample(&mut rng)))
}

impl Predictor for EnsemblePredictor {
    fn name(&self) -> String {
        "ensemble".into()
    }

    fn sample_count(&self) -> usize {
        self.members.len()
    }

    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution> {
        if history.is_empty() {
            let p = prior(geometry);
            return MixingDistribution::new(vec![p; self.members.len()], 0);
        }
        let base = fbp(history, geometry)?;
        let step_salt = (history.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let sigma = self.jitter_sigma;
        let mut samples = Vec::with_capacity(self.members.len());
        for (spec, mle) in &mut self.members {
            let init = jitter(&base, sigma, spec.seed ^ step_salt);
            let est = mle.fit(history, geometry, Some(init))?;
            samples.push(smooth_image(&est, spec.smoothing));
        }
        MixingDistribution::new(samples, history.len())
    }
}

/// Collapses a base predictor's mixture onto its pixel-wise mean.
#[derive(Debug, Clone)]
pub struct MeanPredictor<P> {
    pub base: P,
}

impl<P: Predictor> Predictor for MeanPredictor<P> {
    fn name(&self) -> String {
        format!("{}_mean", self.base.name())
    }

    fn sample_count(&self) -> usize {
        1
    }

    fn predict(&mut self, history: &[Measurement], geometry: &Geometry) -> Result<MixingDistribution> {
        Ok(self.base.predict(history, geometry)?.mean_aggregated())
    }
}

/// Data-independent mixture over fixed images.
#[derive(Debug, Clone)]
pub struct FixedPredictor {
    pub label: String,
    pub samples: Vec<Image<f64>>,
}

impl Predictor for FixedPredictor {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn sample_count(&self) -> usize {
        self.samples.len()
    }

    fn predict(&mut self, history: &[Measurement], _geometry: &Geometry) -> Result<MixingDistribution> {
        MixingDistribution::new(self.samples.clone(), history.len())
    }
}
