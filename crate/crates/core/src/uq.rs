//! Pixel-wise uncertainty intervals derived from the confidence set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::confseq::{ConfidenceState, Membership};
use crate::error::{ensure_len, Error, Result};
use crate::forward::{Geometry, Measurement};
use crate::grid::{Grid, Image};
use crate::likelihood::{cumulative_nll, cumulative_nll_and_gradient};
use crate::optim::{adam_step, AdamState, OptimizerConfig};

/// Per-pixel lower and upper bounds, both inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelIntervals {
    lower: Grid<f64>,
    upper: Grid<f64>,
}

impl PixelIntervals {
    pub fn new(lower: Grid<f64>, upper: Grid<f64>) -> Result<Self> {
        ensure_len(lower.len(), upper.len())?;
        for (i, (&lo, &hi)) in lower.as_slice().iter().zip(upper.as_slice()).enumerate() {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::invalid(format!("bad interval [{lo}, {hi}] at pixel {i}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Pixel-wise min and max across samples.
    pub fn envelope(samples: &[Image<f64>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("no samples"))?;
        let mut lower = first.grid().clone();
        let mut upper = first.grid().clone();
        for s in &samples[1..] {
            s.ensure_side(first.side())?;
            for ((lo, hi), &v) in lower
                .as_mut_slice()
                .iter_mut()
                .zip(upper.as_mut_slice().iter_mut())
                .zip(s.as_slice())
            {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        Self::new(lower, upper)
    }

    pub fn side(&self) -> usize {
        self.lower.side()
    }

    pub fn lower(&self) -> &Grid<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &Grid<f64> {
        &self.upper
    }

    pub fn half_width(&self) -> Grid<f64> {
        let data = self
            .lower
            .as_slice()
            .iter()
            .zip(self.upper.as_slice())
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect();
        Grid::from_vec(self.side(), data).expect("matching sides")
    }

    pub fn mean_width(&self) -> f64 {
        2.0 * self.half_width().mean()
    }

    /// True iff every interval of `other` lies inside the matching one here.
    pub fn contains(&self, other: &PixelIntervals) -> bool {
        self.side() == other.side()
            && self
                .lower
                .as_slice()
                .iter()
                .zip(other.lower.as_slice())
                .all(|(a, b)| a <= b)
            && self
                .upper
                .as_slice()
                .iter()
                .zip(other.upper.as_slice())
                .all(|(a, b)| a >= b)
    }
}

/// The set `{x : L_t(x) ≤ β_t + ln(1/δ)}` for a fixed scored log.
#[derive(Debug, Clone, Copy)]
pub struct ConfidenceSet<'a> {
    scored: &'a [Measurement],
    threshold: f64,
    geometry: &'a Geometry,
}

impl<'a> ConfidenceSet<'a> {
    pub fn new(scored: &'a [Measurement], threshold: f64, geometry: &'a Geometry) -> Self {
        Self {
            scored,
            threshold,
            geometry,
        }
    }

    /// Set of `state` given the measurements it has scored.
    pub fn of_state(state: &'a ConfidenceState, scored: &'a [Measurement]) -> Result<Self> {
        if (state.step() == 0) != scored.is_empty() {
            return Err(Error::invalid("scored measurements do not match the confidence state"));
        }
        Ok(Self::new(scored, state.threshold(), state.geometry()))
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn geometry(&self) -> &Geometry {
        self.geometry
    }

    pub fn scored(&self) -> &[Measurement] {
        self.scored
    }

    pub fn nll(&self, x: &Grid<f64>) -> Result<f64> {
        if self.scored.is_empty() {
            return Ok(0.0);
        }
        cumulative_nll(x, self.scored, self.geometry)
    }

    fn nll_and_gradient(&self, x: &Grid<f64>) -> Result<(f64, Grid<f64>)> {
        if self.scored.is_empty() {
            return Ok((0.0, Grid::zeros(x.side())));
        }
        cumulative_nll_and_gradient(x, self.scored, self.geometry)
    }

    pub fn membership(&self, x: &Grid<f64>) -> Result<Membership> {
        let gap = self.threshold - self.nll(x)?;
        Ok(Membership { member: gap >= 0.0, gap })
    }
}

/// Outcome of projecting an image into the confidence set.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub image: Image<f64>,
    pub nll: f64,
    pub inner_steps: usize,
    pub converged: bool,
}

/// Adam on `L_t` with unit-box clamping until the image enters the set or
/// `budget` steps are spent. Without convergence the lowest-NLL iterate is
/// returned with `converged = false`.
pub fn project_into_set(image: &Image<f64>, set: &ConfidenceSet<'_>, budget: usize, learning_rate: f64) -> Result<Projection> {
    image.ensure_side(set.geometry.side())?;
    let (mut nll, mut grad) = set.nll_and_gradient(image)?;
    if nll <= set.threshold {
        return Ok(Projection {
            image: image.clone(),
            nll,
            inner_steps: 0,
            converged: true,
        });
    }
    let config = OptimizerConfig::default().with_learning_rate(learning_rate);
    config.validate()?;
    let mut x = image.grid().clone();
    let mut state = AdamState::new(x.len());
    let mut best = (x.clone(), nll);
    for step in 1..=budget {
        adam_step(x.as_mut_slice(), grad.as_slice(), &mut state, &config)?;
        for v in x.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        (nll, grad) = set.nll_and_gradient(&x)?;
        if nll < best.1 {
            best = (x.clone(), nll);
        }
        if nll <= set.threshold {
            return Ok(Projection {
                image: Image::clamped(x),
                nll,
                inner_steps: step,
                converged: true,
            });
        }
    }
    Ok(Projection {
        image: Image::clamped(best.0),
        nll: best.1,
        inner_steps: budget,
        converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorstCaseConfig {
    pub replicates: usize,
    pub init_noise: f64,
    pub max_outer_steps: usize,
    pub step_size: f64,
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub projection_budget: usize,
    pub projection_learning_rate: f64,
    /// Inner steps above which the outer step size is decayed.
    pub hard_projection_steps: usize,
    pub hard_projection_decay: f64,
    pub plateau_decay: f64,
    pub plateau_tolerance: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for WorstCaseConfig {
    fn default() -> Self {
        Self {
            replicates: 8,
            init_noise: 1e-3,
            max_outer_steps: 1000,
            step_size: 2.0,
            upper_bound: 0.999,
            lower_bound: 0.001,
            projection_budget: 10_000,
            projection_learning_rate: 1e-2,
            hard_projection_steps: 10,
            hard_projection_decay: 0.9,
            plateau_decay: 0.5,
            plateau_tolerance: 1e-5,
            patience: 10,
            seed: 0,
        }
    }
}

impl WorstCaseConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("replicates", self.replicates as f64),
            ("max_outer_steps", self.max_outer_steps as f64),
            ("step_size", self.step_size),
            ("projection_budget", self.projection_budget as f64),
            ("projection_learning_rate", self.projection_learning_rate),
            ("hard_projection_decay", self.hard_projection_decay),
            ("plateau_decay", self.plateau_decay),
            ("plateau_tolerance", self.plateau_tolerance),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.init_noise >= 0.0) {
            return Err(Error::config("init_noise", "must be non-negative"));
        }
        for (field, v) in [("upper_bound", self.upper_bound), ("lower_bound", self.lower_bound)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if self.lower_bound >= self.upper_bound {
            return Err(Error::config("lower_bound", "must be below upper_bound"));
        }
        Ok(())
    }
}

/// A final replicate with its membership audit.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub image: Image<f64>,
    pub nll: f64,
    pub member: bool,
    /// Set when the last projection of this replicate ran out of budget.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseResult {
    pub intervals: PixelIntervals,
    pub replicates: Vec<Replicate>,
    pub outer_steps: usize,
    pub final_step_size: f64,
    pub spread: f64,
}

impl WorstCaseResult {
    /// Every replicate is in the set or carries a flag.
    pub fn audited(&self) -> bool {
        self.replicates.iter().all(|r| r.member || r.flagged)
    }
}

/// Mean over replicates of `‖z_k − z̄‖₂`.
pub fn spread(samples: &[Grid<f64>]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mean = mean_grid(samples);
    samples
        .iter()
        .map(|s| {
            s.as_slice()
                .iter()
                .zip(mean.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / samples.len() as f64
}

fn mean_grid(samples: &[Grid<f64>]) -> Grid<f64> {
    let mut mean = Grid::zeros(samples[0].side());
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        mean.add_scaled(w, s);
    }
    mean
}

/// Zeroes expansion directions that push a pixel further past the bounds,
/// then scales the rest to unit length.
pub fn masked_direction(z: &[f64], g: &mut [f64], lower_bound: f64, upper_bound: f64) {
    for (gi, &zi) in g.iter_mut().zip(z) {
        if (zi > upper_bound && *gi > 0.0) || (zi < lower_bound && *gi < 0.0) {
            *gi = 0.0;
        }
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for gi in g.iter_mut() {
            *gi /= norm;
        }
    }
}

/// Worst-case projection of the confidence set onto pixel intervals:
/// `K` replicates are pushed apart from their mean and projected back into
/// the set after every move.
pub fn worst_case_intervals(prediction: &Image<f64>, set: &ConfidenceSet<'_>, config: &WorstCaseConfig) -> Result<WorstCaseResult> {
    config.validate()?;
    let budget = config.projection_budget;
    let lr = config.projection_learning_rate;
    let start = project_into_set(prediction, set, budget, lr)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.init_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut reps: Vec<Replicate> = Vec::with_capacity(config.replicates);
    for _ in 0..config.replicates {
        let jittered = if config.init_noise > 0.0 {
            Image::clamped(start.image.map(|v| v + noise.sample(&mut rng)))
        } else {
            start.image.clone()
        };
        let p = project_into_set(&jittered, set, budget, lr)?;
        reps.push(Replicate {
            image: p.image,
            nll: p.nll,
            member: p.converged,
            flagged: !p.converged,
        });
    }

    let grids = |reps: &[Replicate]| reps.iter().map(|r| r.image.grid().clone()).collect::<Vec<_>>();
    let mut eta = config.step_size;
    let mut patience = 0;
    let mut previous = spread(&grids(&reps));
    let mut outer = 0;
    while outer < config.max_outer_steps {
        outer += 1;
        let mean = mean_grid(&grids(&reps));
        let mut hardest = 0;
        for rep in reps.iter_mut() {
            let z = rep.image.as_slice();
            let mut g: Vec<f64> = z.iter().zip(mean.as_slice()).map(|(a, b)| a - b).collect();
            masked_direction(z, &mut g, config.lower_bound, config.upper_bound);
            let moved = Image::clamped(Grid::from_vec(z.len().isqrt(), z.iter().zip(&g).map(|(a, d)| a + eta * d).collect())?);
            let p = project_into_set(&moved, set, budget, lr)?;
            hardest = hardest.max(p.inner_steps);
            *rep = Replicate {
                image: p.image,
                nll: p.nll,
                member: p.converged,
                flagged: !p.converged,
            };
        }
        if hardest > config.hard_projection_steps {
            eta *= config.hard_projection_decay;
        }
        let current = spread(&grids(&reps));
        if current - previous <= config.plateau_tolerance {
            eta *= config.plateau_decay;
            patience += 1;
            if patience > config.patience {
                previous = current;
                break;
            }
        }
        previous = current;
    }

    let images: Vec<Image<f64>> = reps.iter().map(|r| r.image.clone()).collect();
    Ok(WorstCaseResult {
        intervals: PixelIntervals::envelope(&images)?,
        replicates: reps,
        outer_steps: outer,
        final_step_size: eta,
        spread: previous,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub diversity_weight: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            diversity_weight: 1000.0,
            steps: 20,
            learning_rate: 0.01,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diversity_weight > 0.0) {
            return Err(Error::config("diversity_weight", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Gradient of the batch loss `(1/K) Σ_k L'(x_k, x̄)` with respect to each
/// sample. Inside the set `L' = −γ‖x − x̄‖²`, outside `L' = L_t(x) − β`.
/// Also returns which samples were inside.
pub fn boundary_gradients(samples: &[Grid<f64>], set: &ConfidenceSet<'_>, gamma: f64) -> Result<(Vec<Grid<f64>>, Vec<bool>)> {
    let k = samples.len() as f64;
    let mean = mean_grid(samples);
    let mut grads = Vec::with_capacity(samples.len());
    let mut inside = Vec::with_capacity(samples.len());
    for x in samples {
        let (nll, grad) = set.nll_and_gradient(x)?;
        if nll <= set.threshold {
            let c = -2.0 * gamma * (1.0 - 1.0 / k) / k;
            let data = x.as_slice().iter().zip(mean.as_slice()).map(|(a, b)| c * (a - b)).collect();
            grads.push(Grid::from_vec(x.side(), data)?);
            inside.push(true);
        } else {
            grads.push(grad.map(|v| v / k));
            inside.push(false);
        }
    }
    Ok((grads, inside))
}

/// Pushes predictor samples toward the boundary of the confidence set.
pub fn boundary_spread(samples: &[Image<f64>], set: &ConfidenceSet<'_>, config: &BoundaryConfig) -> Result<Vec<Image<f64>>> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::invalid("boundary spread needs K >= 2 samples"));
    }
    let side = set.geometry.side();
    for s in samples {
        s.ensure_side(side)?;
    }
    let opt = OptimizerConfig::default().with_learning_rate(config.learning_rate);
    let mut xs: Vec<Grid<f64>> = samples.iter().map(|s| s.grid().clone()).collect();
    let mut states: Vec<AdamState<f64>> = xs.iter().map(|x| AdamState::new(x.len())).collect();
    for _ in 0..config.steps {
        let (grads, _) = boundary_gradients(&xs, set, config.diversity_weight)?;
        for ((x, g), st) in xs.iter_mut().zip(&grads).zip(states.iter_mut()) {
            adam_step(x.as_mut_slice(), g.as_slice(), st, &opt)?;
            for v in x.as_mut_slice() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(xs.into_iter().map(Image::clamped).collect())
}

/// `mean ± t_{1−δ/2, K−1} · s / √K` per pixel, clamped to `[0, 1]`.
pub fn student_t_intervals(samples: &[Image<f64>], delta: f64) -> Result<PixelIntervals> {
    if samples.len() < 2 {
        return Err(Error::invalid("Student-t intervals need K >= 2 samples"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
    }
    let side = samples[0].side();
    for s in samples {
        s.ensure_side(side)?;
    }
    let k = samples.len() as f64;
    let t = StudentsT::new(0.0, 1.0, k - 1.0)
        .map_err(|e| Error::invalid(e.to_string()))?
        .inverse_cdf(1.0 - delta / 2.0);
    let n = side * side;
    let (mut lower, mut upper) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        // shifted by the first sample so identical samples give their exact value
        let first = samples[0].as_slice()[i];
        let mean = first + samples.iter().map(|s| s.as_slice()[i] - first).sum::<f64>() / k;
        let var = samples.iter().map(|s| (s.as_slice()[i] - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let half = t * var.sqrt() / k.sqrt();
        lower[i] = (mean - half).clamp(0.0, 1.0);
        upper[i] = (mean + half).clamp(0.0, 1.0);
    }
    PixelIntervals::new(Grid::from_vec(side, lower)?, Grid::from_vec(side, upper)?)
}

/// 1-based nearest-rank index `⌈p·n⌉`, kept inside `[1, n]`.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    // guard against 0.025 * 1000 = 25.000000000000004
    let raw = (p * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Percentile bootstrap: resample measurements with replacement `b` times,
/// reconstruct each resample and take per-pixel `δ/2` and `1−δ/2`
/// nearest-rank quantiles.
pub fn bootstrap_intervals(
    reconstruct: &mut dyn FnMut(&[Measurement]) -> Result<Image<f64>>,
    measurements: &[Measurement],
    b: usize,
    delta: f64,
    seed: u64,
) -> Result<PixelIntervals> {
    if b < 2 {
        return Err(Error::invalid("bootstrap needs B >= 2"));
    }
    if measurements.is_empty() {
        return Err(Error::invalid("bootstrap needs measurements"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = measurements.len();
    let mut recons = Vec::with_capacity(b);
    for _ in 0..b {
        let resample: Vec<Measurement> = (0..n).map(|_| measurements[rng.random_range(0..n)].clone()).collect();
        recons.push(reconstruct(&resample)?);
    }
    let side = recons[0].side();
    let lo_rank = nearest_rank(delta / 2.0, b) - 1;
    let hi_rank = nearest_rank(1.0 - delta / 2.0, b) - 1;
    let (mut lower, mut upper) = (vec![0.0; side * side], vec![0.0; side * side]);
    let mut column = vec![0.0; b];
    for i in 0..side * side {
        for (c, r) in column.iter_mut().zip(&recons) {
            *c = r.as_slice()[i];
        }
        column.sort_by(f64::total_cmp);
        lower[i] = column[lo_rank];
        upper[i] = column[hi_rank];
    }
    PixelIntervals::new(Grid::from_vec(side, lower)?, Grid::from_vec(side, upper)?)
}
