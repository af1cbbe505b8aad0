//! Sequential likelihood-mixing confidence sequences.
//!
//! The confidence set after `t` scored steps is
//! `C_t = { x : L_t(x) ≤ β_t + ln(1/δ) }`, where `β_t` accumulates the
//! negative log marginal likelihood of each new measurement under a mixing
//! distribution fitted only to earlier data.

use indexmap::IndexMap;
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::error::{Error, Result};
use crate::forward::{Geometry, Measurement};
use crate::grid::Image;
use crate::likelihood::{cumulative_nll, nll_increment, poisson_nll};

/// Uniform mixture of point masses on candidate images.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingDistribution {
    samples: Vec<Image<f64>>,
    data_measurements: usize,
}

impl MixingDistribution {
    /// `data_measurements` is the number of acquired measurements the samples
    /// were allowed to depend on.
    pub fn new(samples: Vec<Image<f64>>, data_measurements: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("mixing distribution needs at least one sample"))?;
        for s in &samples {
            s.ensure_side(first.side())?;
        }
        Ok(Self {
            samples,
            data_measurements,
        })
    }

    pub fn dirac(image: Image<f64>, data_measurements: usize) -> Self {
        Self {
            samples: vec![image],
            data_measurements,
        }
    }

    pub fn samples(&self) -> &[Image<f64>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Image<f64>> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn data_measurements(&self) -> usize {
        self.data_measurements
    }

    /// Pixel-wise mean of the samples.
    pub fn mean(&self) -> Image<f64> {
        Image::mean_of(&self.samples).expect("non-empty, equal sides")
    }

    /// Collapses the mixture onto its mean.
    pub fn mean_aggregated(&self) -> Self {
        Self::dirac(self.mean(), self.data_measurements)
    }
}

/// `ln((1/K) Σ exp(a_k))` with max subtraction.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// One mixture increment with the per-sample increments it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureIncrement {
    pub value: f64,
    pub per_sample: Vec<f64>,
}

impl MixtureIncrement {
    pub fn best_sample(&self) -> f64 {
        self.per_sample.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `−ln (1/K) Σ_k p_{x_k}(y | angle, I0)`, with per-sample increments.
pub fn mixture_increment(mixing: &MixingDistribution, m: &Measurement, geometry: &Geometry) -> Result<MixtureIncrement> {
    let per_sample = mixing
        .samples
        .iter()
        .map(|s| nll_increment(s, m, geometry))
        .collect::<Result<Vec<_>>>()?;
    let value = if per_sample.len() == 1 {
        per_sample[0]
    } else {
        let neg: Vec<f64> = per_sample.iter().map(|v| -v).collect();
        -log_mean_exp(&neg)
    };
    Ok(MixtureIncrement { value, per_sample })
}

/// `β` increment for one measurement; equals `nll_increment` for `K = 1`.
pub fn beta_increment(mixing: &MixingDistribution, m: &Measurement, geometry: &Geometry) -> Result<f64> {
    Ok(mixture_increment(mixing, m, geometry)?.value)
}

#[derive(Debug, Clone)]
struct Tracked {
    image: Image<f64>,
    nll: f64,
}

/// Membership verdict with its slack `β_t + ln(1/δ) − L_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub member: bool,
    pub gap: f64,
}

/// Audit record of one scored acquisition step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub beta: f64,
    pub increments: Vec<MixtureIncrement>,
}

/// Running confidence coefficient and tracked candidate likelihoods.
#[derive(Debug, Clone)]
pub struct ConfidenceState {
    geometry: Geometry,
    delta: f64,
    step: usize,
    next_index: usize,
    beta: f64,
    tracked: IndexMap<String, Tracked>,
}

impl ConfidenceState {
    /// `first_index` is the acquisition index of the first scored
    /// measurement (the number of warm-up measurements before it).
    pub fn new(geometry: Geometry, delta: f64, first_index: usize) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
        }
        Ok(Self {
            geometry,
            delta,
            step: 0,
            next_index: first_index,
            beta: 0.0,
            tracked: IndexMap::new(),
        })
    }

    /// Registers a candidate before any update.
    pub fn track(&mut self, name: impl Into<String>, image: Image<f64>) -> Result<()> {
        if self.step != 0 {
            return Err(Error::invalid(
                "candidates must be registered before the first update; use track_replayed",
            ));
        }
        self.insert(name.into(), image, 0.0)
    }

    /// Registers a candidate mid-run by replaying the scored measurements.
    pub fn track_replayed(&mut self, name: impl Into<String>, image: Image<f64>, scored: &[Measurement]) -> Result<()> {
        let nll = if scored.is_empty() { 0.0 } else { cumulative_nll(&image, scored, &self.geometry)? };
        self.insert(name.into(), image, nll)
    }

    fn insert(&mut self, name: String, image: Image<f64>, nll: f64) -> Result<()> {
        image.ensure_side(self.geometry.side())?;
        if self.tracked.contains_key(&name) {
            return Err(Error::invalid(format!("candidate `{name}` already tracked")));
        }
        self.tracked.insert(name, Tracked { image, nll });
        Ok(())
    }

    /// Scores one acquisition step. `index` is the acquisition index of its
    /// first measurement; `mixing` must not depend on data at or after it.
    pub fn update(&mut self, mixing: &MixingDistribution, index: usize, step: &[Measurement]) -> Result<StepRecord> {
        if index != self.next_index {
            return Err(Error::OutOfOrder {
                expected: self.next_index,
                got: index,
            });
        }
        if mixing.data_measurements() > index {
            return Err(Error::StalePrediction {
                fitted: mixing.data_measurements(),
                index,
            });
        }
        if step.is_empty() {
            return Err(Error::invalid("empty acquisition step"));
        }
        let mut increments = Vec::with_capacity(step.len());
        let mut tracked_inc = vec![0.0; self.tracked.len()];
        for m in step {
            increments.push(mixture_increment(mixing, m, &self.geometry)?);
            for (acc, t) in tracked_inc.iter_mut().zip(self.tracked.values()) {
                *acc += nll_increment(&t.image, m, &self.geometry)?;
            }
        }
        for inc in &increments {
            self.beta += inc.value;
        }
        for (t, inc) in self.tracked.values_mut().zip(tracked_inc) {
            t.nll += inc;
        }
        self.step += 1;
        self.next_index += step.len();
        Ok(StepRecord {
            step: self.step,
            beta: self.beta,
            increments,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// `β_t + ln(1/δ)`
    pub fn threshold(&self) -> f64 {
        self.beta + self.slack()
    }

    /// `ln(1/δ)`
    pub fn slack(&self) -> f64 {
        (1.0 / self.delta).ln()
    }

    pub fn candidate_names(&self) -> impl Iterator<Item = &str> {
        self.tracked.keys().map(String::as_str)
    }

    pub fn nll(&self, name: &str) -> Result<f64> {
        self.tracked
            .get(name)
            .map(|t| t.nll)
            .ok_or_else(|| Error::UnknownCandidate(name.to_owned()))
    }

    pub fn candidate(&self, name: &str) -> Result<&Image<f64>> {
        self.tracked
            .get(name)
            .map(|t| &t.image)
            .ok_or_else(|| Error::UnknownCandidate(name.to_owned()))
    }

    /// `L_t ≤ β_t + ln(1/δ)`, ties included.
    pub fn membership(&self, name: &str) -> Result<Membership> {
        let gap = (self.beta - self.nll(name)?) + self.slack();
        Ok(Membership { member: gap >= 0.0, gap })
    }

    /// Membership at another error level, same trajectory.
    pub fn membership_at(&self, name: &str, delta: f64) -> Result<Membership> {
        let gap = (self.beta - self.nll(name)?) + (1.0 / delta).ln();
        Ok(Membership { member: gap >= 0.0, gap })
    }

    /// Membership of an untracked image given the scored measurement log.
    pub fn contains(&self, image: &Image<f64>, scored: &[Measurement]) -> Result<Membership> {
        let nll = if scored.is_empty() { 0.0 } else { cumulative_nll(image, scored, &self.geometry)? };
        let gap = (self.beta - nll) + self.slack();
        Ok(Membership { member: gap >= 0.0, gap })
    }
}

/// True iff the truth's `L_t` exceeded `β_t + ln(1/δ)` at some step.
/// `history` holds `(β_t, L_t(x*))` per scored step.
pub fn crossover_flag(history: &[(f64, f64)], delta: f64) -> bool {
    let slack = (1.0 / delta).ln();
    history.iter().any(|&(b, l)| l > b + slack)
}

/// Expected sequential marginal likelihood ratio `E[S_t(x*)]` on a single
/// pixel, by exhaustive enumeration of count sequences.
///
/// `mixing` maps the counts observed so far to the pixel values of a uniform
/// mixture. Counts are enumerated up to the point where the Poisson tail at
/// rate `intensity` (the largest rate any pixel in `[0, 1]` can produce)
/// drops below `tail`.
pub fn martingale_oracle(
    truth: &Image<f64>,
    geometry: &Geometry,
    intensity: f64,
    mixing: &dyn Fn(&[u64]) -> Vec<f64>,
    steps: usize,
    tail: f64,
) -> Result<f64> {
    if truth.side() != 1 || geometry.side() != 1 {
        return Err(Error::invalid("martingale oracle needs a single-pixel image"));
    }
    if !(tail > 0.0 && tail < 1.0) {
        return Err(Error::invalid("tail truncation must lie in (0, 1)"));
    }
    let rate = |pixel: f64| intensity * (-geometry.path_scale() * pixel).exp();
    let truth_rate = rate(truth.as_slice()[0]);
    let upper = Poisson::new(intensity).map_err(|e| Error::invalid(e.to_string()))?;
    let mut max_count = 0u64;
    while upper.sf(max_count) >= tail {
        max_count += 1;
    }
    let log_pmf = |lam: f64, y: u64| -poisson_nll(&[lam], &[y]);

    fn recurse(
        history: &mut Vec<u64>,
        remaining: usize,
        max_count: u64,
        truth_rate: f64,
        rate: &dyn Fn(f64) -> f64,
        log_pmf: &dyn Fn(f64, u64) -> f64,
        mixing: &dyn Fn(&[u64]) -> Vec<f64>,
        log_ratio: f64,
        log_prob: f64,
    ) -> f64 {
        if remaining == 0 {
            return (log_prob + log_ratio).exp();
        }
        let components: Vec<f64> = mixing(history).into_iter().map(rate).collect();
        let mut total = 0.0;
        for y in 0..=max_count {
            let lp_truth = log_pmf(truth_rate, y);
            let lp_mix: Vec<f64> = components.iter().map(|&l| log_pmf(l, y)).collect();
            let step_ratio = log_mean_exp(&lp_mix) - lp_truth;
            history.push(y);
            total += recurse(
                history,
                remaining - 1,
                max_count,
                truth_rate,
                rate,
                log_pmf,
                mixing,
                log_ratio + step_ratio,
                log_prob + lp_truth,
            );
            history.pop();
        }
        total
    }

    let mut history = Vec::with_capacity(steps);
    Ok(recurse(
        &mut history,
        steps,
        max_count,
        truth_rate,
        &rate,
        &log_pmf,
        mixing,
        0.0,
        0.0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::mean_counts;
    use crate::phantoms::{make_phantom, PhantomFamily};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_measurement(img: &Image<f64>, angle: f64, i0: f64, g: &Geometry, rng: &mut ChaCha8Rng) -> Measurement {
        let lam = mean_counts(img, angle, i0, g).unwrap();
        let seed = rng.random();
        Measurement::new(angle, i0, crate::poisson::sample_counts(&lam, seed).unwrap()).unwrap()
    }

    fn setup() -> (Geometry, Image<f64>, Vec<Measurement>) {
        let g = Geometry::new(16, 4.0).unwrap();
        let truth = make_phantom(PhantomFamily::Ellipses, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms = (0..12)
            .map(|k| noisy_measurement(&truth, (k as f64 * 37.0) % 180.0, 200.0, &g, &mut rng))
            .collect();
        (g, truth, ms)
    }

    #[test]
    fn dirac_equals_nll() {
        let (g, truth, ms) = setup();
        let mix = MixingDistribution::dirac(truth.clone(), 0);
        assert_eq!(
            beta_increment(&mix, &ms[0], &g).unwrap(),
            nll_increment(&truth, &ms[0], &g).unwrap()
        );
        let dup = MixingDistribution::new(vec![truth.clone(), truth.clone()], 0).unwrap();
        let a = beta_increment(&dup, &ms[0], &g).unwrap();
        let b = beta_increment(&mix, &ms[0], &g).unwrap();
        assert!((a - b).abs() < 1e-9 * b.abs());
    }

    #[test]
    fn sandwich_bounds() {
        let (g, _, ms) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let samples: Vec<Image<f64>> = (0..3)
                .map(|_| Image::clamped(crate::grid::Grid::from_fn(16, |_, _| rng.random::<f64>() * 0.5)))
                .collect();
            let mix = MixingDistribution::new(samples, 0).unwrap();
            for m in &ms {
                let inc = mixture_increment(&mix, m, &g).unwrap();
                let lo = inc.best_sample();
                assert!(lo <= inc.value && inc.value <= lo + 3f64.ln(), "{inc:?}");
            }
        }
    }

    #[test]
    fn log_mean_exp_stable() {
        assert!((log_mean_exp(&[-1000.0, -1000.0]) + 1000.0).abs() < 1e-12);
        let v = log_mean_exp(&[-5000.0, 0.0]);
        assert!((v + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn self_prediction_gap_is_log_inverse_delta() {
        let (g, truth, ms) = setup();
        let mut state = ConfidenceState::new(g, 0.05, 0).unwrap();
        state.track("c", truth.clone()).unwrap();
        for (i, m) in ms.iter().enumerate() {
            let mix = MixingDistribution::dirac(truth.clone(), i);
            state.update(&mix, i, std::slice::from_ref(m)).unwrap();
            assert_eq!(state.nll("c").unwrap(), state.beta());
            let mem = state.membership("c").unwrap();
            assert!(mem.member);
            assert_eq!(mem.gap, state.slack());
            assert!((mem.gap - 20f64.ln()).abs() < 1e-9);
        }
        assert_eq!(state.step(), 12);
    }

    #[test]
    fn first_update_sets_beta() {
        let (g, truth, ms) = setup();
        let mut state = ConfidenceState::new(g.clone(), 0.1, 0).unwrap();
        let mix = MixingDistribution::dirac(Image::constant(16, 0.2).unwrap(), 0);
        state.update(&mix, 0, &ms[..1]).unwrap();
        assert_eq!(state.beta(), beta_increment(&mix, &ms[0], &g).unwrap());
        let _ = truth;
    }

    #[test]
    fn ordering_enforced() {
        let (g, truth, ms) = setup();
        let mut state = ConfidenceState::new(g, 0.05, 2).unwrap();
        let mix = MixingDistribution::dirac(truth.clone(), 2);
        assert!(matches!(state.update(&mix, 3, &ms[..1]), Err(Error::OutOfOrder { .. })));
        let peek = MixingDistribution::dirac(truth.clone(), 3);
        assert!(matches!(state.update(&peek, 2, &ms[..1]), Err(Error::StalePrediction { .. })));
        state.update(&mix, 2, &ms[..1]).unwrap();
        assert!(state.track("late", truth).is_err());
        assert!(matches!(state.membership("nope"), Err(Error::UnknownCandidate(_))));
    }

    #[test]
    fn replayed_tracking_matches_live() {
        let (g, truth, ms) = setup();
        let other = Image::constant(16, 0.1).unwrap();
        let mut state = ConfidenceState::new(g, 0.05, 0).unwrap();
        state.track("live", other.clone()).unwrap();
        for (i, m) in ms.iter().enumerate() {
            state.update(&MixingDistribution::dirac(truth.clone(), i), i, std::slice::from_ref(m)).unwrap();
        }
        state.track_replayed("late", other, &ms).unwrap();
        assert!((state.nll("live").unwrap() - state.nll("late").unwrap()).abs() < 1e-9);
    }

    #[test]
    fn delta_nesting_and_collapse() {
        let (g, truth, ms) = setup();
        let mut state = ConfidenceState::new(g, 0.05, 0).unwrap();
        state.track("x", Image::constant(16, 0.15).unwrap()).unwrap();
        for (i, m) in ms.iter().enumerate() {
            state.update(&MixingDistribution::dirac(truth.clone(), i), i, std::slice::from_ref(m)).unwrap();
        }
        let l = state.nll("x").unwrap();
        let near_one = state.membership_at("x", 1.0).unwrap();
        assert_eq!(near_one.member, l <= state.beta());
        for (d1, d2) in [(0.01, 0.1), (0.05, 0.5), (0.2, 0.9)] {
            let big = state.membership_at("x", d2).unwrap();
            let small = state.membership_at("x", d1).unwrap();
            if big.member {
                assert!(small.member);
            }
        }
    }

    #[test]
    fn crossover_flag_basics() {
        assert!(!crossover_flag(&[(10.0, 10.0), (20.0, 20.0)], 0.05));
        assert!(crossover_flag(&[(10.0, 10.0), (20.0, 23.1)], 0.05));
        assert!(!crossover_flag(&[(10.0, 10.0), (20.0, 22.9)], 0.05));
    }

    #[test]
    fn martingale_truth_dirac_is_one() {
        let g = Geometry::new(1, 1.0).unwrap();
        let truth = Image::constant(1, 0.5).unwrap();
        let i0 = 3.0 * 0.5f64.exp();
        let e = martingale_oracle(&truth, &g, i0, &|_| vec![0.5], 1, 1e-12).unwrap();
        assert!((e - 1.0).abs() < 1e-10, "{e}");
        assert!(martingale_oracle(&Image::zeros(2), &g, i0, &|_| vec![0.5], 1, 1e-12).is_err());
    }
}
