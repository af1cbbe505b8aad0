//! Parallel-beam Radon geometry, Beer-Lambert mean counts and Poisson
//! acquisition.
//!
//! The projection matrix is binary and pixel-driven: each pixel center is
//! rotated by `-angle` about the image center and assigned to the nearest of
//! `side` detector bins spanning `[-side/2, side/2)`. Angle 0 integrates along
//! image columns; angles are measured counter-clockwise.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::grid::{Grid, Image};
use crate::poisson;
use crate::scalar::Real;

/// Default physical side length of the imaged region.
pub const DEFAULT_PATH_SCALE: f64 = 4.0;

const MISS: u32 = u32::MAX;

/// Detector geometry: `side` pixels per image row and `side` detector bins.
///
/// Clones share a cache of per-angle pixel-to-bin tables.
#[derive(Clone)]
pub struct Geometry {
    side: usize,
    path_scale: f64,
    tables: Arc<RwLock<HashMap<u64, Arc<[u32]>>>>,
}

impl fmt::Debug for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Geometry")
            .field("side", &self.side)
            .field("path_scale", &self.path_scale)
            .finish()
    }
}

impl PartialEq for Geometry {
    fn eq(&self, other: &Self) -> bool {
        self.side == other.side && self.path_scale == other.path_scale
    }
}

impl Geometry {
    pub fn new(side: usize, path_scale: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("geometry side must be at least 1"));
        }
        if !(path_scale.is_finite() && path_scale > 0.0) {
            return Err(Error::invalid(format!(
                "path scale must be positive, got {path_scale}"
            )));
        }
        Ok(Self {
            side,
            path_scale,
            tables: Arc::default(),
        })
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn path_scale(&self) -> f64 {
        self.path_scale
    }

    /// Path length of one pixel, `l / r`.
    #[inline]
    pub fn pixel_length(&self) -> f64 {
        self.path_scale / self.side as f64
    }

    /// Geometry at twice the resolution covering the same physical extent.
    pub fn doubled(&self) -> Self {
        Self::new(2 * self.side, self.path_scale).expect("valid geometry")
    }

    /// Pixel-to-bin table for `angle`; `u32::MAX` marks pixels off the detector.
    pub fn bin_table(&self, angle: f64) -> Result<Arc<[u32]>> {
        check_angle(angle)?;
        let key = angle.to_bits();
        if let Some(t) = self.tables.read().expect("table lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = self.build_table(angle);
        let mut guard = self.tables.write().expect("table lock");
        Ok(Arc::clone(guard.entry(key).or_insert(table)))
    }

    fn build_table(&self, angle: f64) -> Arc<[u32]> {
        let r = self.side as f64;
        let half = r / 2.0;
        let theta = angle.to_radians();
        let (sin, cos) = theta.sin_cos();
        let mut table = Vec::with_capacity(self.side * self.side);
        for row in 0..self.side {
            let y = half - (row as f64 + 0.5);
            for col in 0..self.side {
                let x = col as f64 + 0.5 - half;
                let s = x * cos + y * sin + half;
                let bin = s.floor();
                table.push(if bin >= 0.0 && bin < r { bin as u32 } else { MISS });
            }
        }
        table.into()
    }
}

pub(crate) fn check_angle(angle: f64) -> Result<()> {
    if (0.0..180.0).contains(&angle) {
        Ok(())
    } else {
        Err(Error::invalid(format!("angle {angle} outside [0, 180)")))
    }
}

/// One acquisition: detector counts at one angle and per-bin intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub angle: f64,
    pub intensity: f64,
    pub counts: Vec<u64>,
}

impl Measurement {
    pub fn new(angle: f64, intensity: f64, counts: Vec<u64>) -> Result<Self> {
        check_angle(angle)?;
        if !(intensity.is_finite() && intensity > 0.0) {
            return Err(Error::invalid(format!(
                "intensity must be positive, got {intensity}"
            )));
        }
        Ok(Self {
            angle,
            intensity,
            counts,
        })
    }

    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        check_angle(self.angle)?;
        if !(self.intensity.is_finite() && self.intensity > 0.0) {
            return Err(Error::invalid("non-positive intensity"));
        }
        ensure_len(geometry.side(), self.counts.len())
    }
}

/// Acquisition protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    /// One angle per step at constant per-bin intensity.
    Sparse,
    /// The full angle grid every step; the step intensity is split evenly.
    Dense,
}

/// Ordered schedule of angles and intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionPlan {
    pub mode: AcquisitionMode,
    /// Sparse: one angle per step. Dense: the angle grid used every step.
    pub angles: Vec<f64>,
    /// Sparse: per-bin intensity of each step. Dense: total intensity of each
    /// step, divided evenly over the grid angles.
    pub intensities: Vec<f64>,
    /// Leading steps reserved for the initial mixing distribution.
    pub warmup_steps: usize,
}

/// Increment of the golden-angle sweep over the half circle.
pub const GOLDEN_ANGLE_DEG: f64 = 137.507_764_050_037_85;

impl AcquisitionPlan {
    pub fn sparse(angles: Vec<f64>, intensity: f64, warmup_steps: usize) -> Result<Self> {
        let plan = Self {
            mode: AcquisitionMode::Sparse,
            intensities: vec![intensity; angles.len()],
            angles,
            warmup_steps,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn dense(grid: Vec<f64>, step_intensities: Vec<f64>, warmup_steps: usize) -> Result<Self> {
        let plan = Self {
            mode: AcquisitionMode::Dense,
            angles: grid,
            intensities: step_intensities,
            warmup_steps,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for &a in &self.angles {
            check_angle(a)?;
        }
        if let Some(bad) = self.intensities.iter().find(|i| !(i.is_finite() && **i > 0.0)) {
            return Err(Error::invalid(format!("non-positive intensity {bad}")));
        }
        if self.angles.is_empty() {
            return Err(Error::invalid("acquisition plan has no angles"));
        }
        if self.mode == AcquisitionMode::Sparse {
            ensure_len(self.angles.len(), self.intensities.len())?;
        }
        if self.warmup_steps >= self.total_steps() {
            return Err(Error::invalid(format!(
                "warmup {} must be below the {} total steps",
                self.warmup_steps,
                self.total_steps()
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.intensities.len()
    }

    /// Number of steps scored by the confidence sequence.
    pub fn scored_steps(&self) -> usize {
        self.total_steps() - self.warmup_steps
    }

    /// `(angle, per-bin intensity)` pairs acquired at `step`.
    pub fn step_views(&self, step: usize) -> Vec<(f64, f64)> {
        match self.mode {
            AcquisitionMode::Sparse => vec![(self.angles[step], self.intensities[step])],
            AcquisitionMode::Dense => {
                let per = self.intensities[step] / self.angles.len() as f64;
                self.angles.iter().map(|&a| (a, per)).collect()
            }
        }
    }
}

/// `count` angles advancing by the golden angle, wrapped into `[0, 180)`.
pub fn golden_angles(count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| (k as f64 * GOLDEN_ANGLE_DEG).rem_euclid(180.0))
        .collect()
}

/// `count` uniformly spaced angles `k · 180 / count`.
pub fn uniform_angles(count: usize) -> Vec<f64> {
    (0..count).map(|k| k as f64 * 180.0 / count as f64).collect()
}

/// `steps` intensities on a geometric grid from `first` to `last`.
pub fn exponential_intensities(first: f64, last: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![first];
    }
    let ratio = (last / first).ln() / (steps - 1) as f64;
    (0..steps)
        .map(|t| {
            if t == steps - 1 {
                last
            } else {
                first * (ratio * t as f64).exp()
            }
        })
        .collect()
}

/// Line integrals `(l/r) · R_angle x`.
pub fn radon_project<T: Real>(image: &Grid<T>, angle: f64, geometry: &Geometry) -> Result<Vec<T>> {
    image.ensure_side(geometry.side())?;
    let table = geometry.bin_table(angle)?;
    Ok(project_with(image.as_slice(), &table, geometry.side(), T::lit(geometry.pixel_length())))
}

#[inline]
pub(crate) fn project_with<T: Real>(pixels: &[T], table: &[u32], bins: usize, scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); bins];
    for (&v, &b) in pixels.iter().zip(table) {
        if b != MISS {
            out[b as usize] += v;
        }
    }
    for o in &mut out {
        *o *= scale;
    }
    out
}

/// `acc += (l/r) · R_angleᵀ values`, without allocating.
#[inline]
pub(crate) fn backproject_into<T: Real>(acc: &mut [T], values: &[T], table: &[u32], scale: T) {
    for (a, &b) in acc.iter_mut().zip(table) {
        if b != MISS {
            *a += scale * values[b as usize];
        }
    }
}

/// Adjoint of [`radon_project`]: `(l/r) · R_angleᵀ values`.
pub fn radon_backproject<T: Real>(values: &[T], angle: f64, geometry: &Geometry) -> Result<Grid<T>> {
    ensure_len(geometry.side(), values.len())?;
    let table = geometry.bin_table(angle)?;
    let mut out = Grid::zeros(geometry.side());
    backproject_into(out.as_mut_slice(), values, &table, T::lit(geometry.pixel_length()));
    Ok(out)
}

/// Beer-Lambert mean counts `I0 · exp(-(l/r) [R x]_i)`, in `f64`.
pub fn mean_counts<T: Real>(
    image: &Grid<T>,
    angle: f64,
    intensity: f64,
    geometry: &Geometry,
) -> Result<Vec<f64>> {
    if !(intensity.is_finite() && intensity > 0.0) {
        return Err(Error::invalid(format!("intensity must be positive, got {intensity}")));
    }
    Ok(radon_project(image, angle, geometry)?
        .into_iter()
        .map(|g| intensity * (-g.as_f64()).exp())
        .collect())
}

/// Simulates one step at twice the target resolution and sums adjacent
/// detector bin pairs, so the returned counts are exact Poisson draws that do
/// not share the reconstruction model's discretization.
pub fn simulate_step<T: Real>(
    truth_highres: &Image<T>,
    angle: f64,
    intensity: f64,
    seed: u64,
    target: &Geometry,
) -> Result<Measurement> {
    let high = target.doubled();
    truth_highres.ensure_side(high.side())?;
    let means = mean_counts(truth_highres, angle, intensity / 2.0, &high)?;
    let fine = poisson::sample_counts(&means, seed)?;
    let counts = fine.chunks_exact(2).map(|p| p[0] + p[1]).collect();
    Measurement::new(angle, intensity, counts)
}

/// Mean of the counts produced by [`simulate_step`].
pub fn simulated_means<T: Real>(
    truth_highres: &Image<T>,
    angle: f64,
    intensity: f64,
    target: &Geometry,
) -> Result<Vec<f64>> {
    let high = target.doubled();
    truth_highres.ensure_side(high.side())?;
    let means = mean_counts(truth_highres, angle, intensity / 2.0, &high)?;
    Ok(means.chunks_exact(2).map(|p| p[0] + p[1]).collect())
}
