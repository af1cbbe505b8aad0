//! Scalar evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::uq::PixelIntervals;

/// PSNR in dB with peak 1.0. Identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(recon: &Grid<T>, truth: &Grid<T>) -> Result<f64> {
    ensure_len(truth.side(), recon.side())?;
    let mse = recon
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / recon.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Binomial proportion with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub sem: f64,
    pub n: usize,
}

impl Rate {
    pub fn from_flags(flags: impl IntoIterator<Item = bool>) -> Result<Self> {
        let (hits, n) = flags
            .into_iter()
            .fold((0usize, 0usize), |(h, n), f| (h + f as usize, n + 1));
        if n == 0 {
            return Err(Error::invalid("rate over zero runs"));
        }
        let p = hits as f64 / n as f64;
        Ok(Self {
            rate: p,
            sem: (p * (1.0 - p) / n as f64).sqrt(),
            n,
        })
    }
}

/// Fraction of runs whose ground truth ever left the confidence set.
pub fn crossover_rate(flags: &[bool]) -> Result<Rate> {
    Rate::from_flags(flags.iter().copied())
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

impl MeanSem {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sem = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sem, n })
    }
}

/// Per-angle exclusion rate: `final_member[run][angle]` is the final-step
/// membership of the rotated truth.
pub fn exclusion_rate(angles: &[f64], final_member: &[Vec<bool>]) -> Result<Vec<(f64, Rate)>> {
    if final_member.is_empty() {
        return Err(Error::invalid("exclusion rate over zero runs"));
    }
    angles
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            for run in final_member {
                ensure_len(angles.len(), run.len())?;
            }
            Ok((a, Rate::from_flags(final_member.iter().map(|run| !run[j]))?))
        })
        .collect()
}

/// `(coverage fraction, mean width)` of pixel intervals against a truth.
pub fn coverage_and_width<T: Real>(intervals: &PixelIntervals, truth: &Grid<T>) -> Result<(f64, f64)> {
    ensure_len(intervals.side(), truth.side())?;
    let lo = intervals.lower().as_slice();
    let hi = intervals.upper().as_slice();
    let n = lo.len() as f64;
    let mut covered = 0usize;
    let mut width = 0.0;
    for ((&l, &h), &t) in lo.iter().zip(hi).zip(truth.as_slice()) {
        let t = t.as_f64();
        if l <= t && t <= h {
            covered += 1;
        }
        width += h - l;
    }
    Ok((covered as f64 / n, width / n))
}

/// Sparsification curve: mean absolute error of the pixels kept after
/// removing the top `k%` by `order_key`, for `k = 0..100`, normalized by the
/// full-image MAE.
pub fn sparsification_curve(order_key: &[f64], error: &[f64]) -> Result<Vec<f64>> {
    ensure_len(error.len(), order_key.len())?;
    let n = error.len();
    let total: f64 = error.iter().sum();
    if n == 0 || total == 0.0 {
        return Ok(vec![0.0; 100]);
    }
    let full_mae = total / n as f64;
    let mut idx: Vec<usize> = (0..n).collect();
    // decreasing key, ties broken by index for determinism
    idx.sort_by(|&a, &b| order_key[b].total_cmp(&order_key[a]).then(a.cmp(&b)));
    // suffix sums of errors in removal order
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + error[idx[i]];
    }
    Ok((0..100)
        .map(|k| {
            let removed = (k * n) / 100;
            let kept = n - removed;
            suffix[removed] / kept as f64 / full_mae
        })
        .collect())
}

/// Area under the sparsification error: mean gap between the
/// uncertainty-ordered and error-ordered curves. Zero total error gives 0.
pub fn ause(uncertainty: &[f64], error: &[f64]) -> Result<f64> {
    let by_unc = sparsification_curve(uncertainty, error)?;
    let oracle = sparsification_curve(error, error)?;
    Ok(by_unc.iter().zip(&oracle).map(|(u, o)| u - o).sum::<f64>() / by_unc.len() as f64)
}

/// Stored per-step `(β_t, L_t(x*))` trajectory of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTrajectory {
    pub beta: Vec<f64>,
    pub truth_nll: Vec<f64>,
}

impl TruthTrajectory {
    /// True iff `L_t(x*) > β_t + ln(1/δ)` at some step.
    pub fn crosses(&self, delta: f64) -> bool {
        let slack = (1.0 / delta).ln();
        self.beta
            .iter()
            .zip(&self.truth_nll)
            .any(|(b, l)| *l > *b + slack)
    }
}

/// Crossover rate at every `δ` in the grid, recomputed from trajectories.
pub fn calibration_curve(runs: &[TruthTrajectory], deltas: &[f64]) -> Result<Vec<(f64, Rate)>> {
    for &d in deltas {
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::invalid(format!("delta {d} outside (0, 1]")));
        }
    }
    deltas
        .iter()
        .map(|&d| Ok((d, Rate::from_flags(runs.iter().map(|r| r.crosses(d)))?)))
        .collect()
}

/// Out-of-set sample statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    /// Fraction of out-of-set samples at each evaluated step.
    pub flag_rate_per_step: Vec<f64>,
    pub flag_rate: f64,
    /// Mean PSNR of in-set samples; `None` when no sample was in the set.
    pub psnr_in_set: Option<f64>,
    /// Mean PSNR of out-of-set samples; `None` when none was flagged.
    pub psnr_out_of_set: Option<f64>,
}

/// Summarizes membership flags and sample PSNRs.
///
/// `steps[t]` holds `(in_set, psnr)` for every sample evaluated at step `t`.
/// Infinite PSNRs (exact matches) are averaged as infinity.
pub fn hallucination_report(steps: &[Vec<(bool, f64)>]) -> HallucinationReport {
    let mut per_step = Vec::with_capacity(steps.len());
    let (mut flagged, mut total) = (0usize, 0usize);
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for step in steps {
        let f = step.iter().filter(|(m, _)| !m).count();
        per_step.push(if step.is_empty() { 0.0 } else { f as f64 / step.len() as f64 });
        flagged += f;
        total += step.len();
        for &(member, p) in step {
            if member {
                in_sum += p;
                in_n += 1;
            } else {
                out_sum += p;
                out_n += 1;
            }
        }
    }
    HallucinationReport {
        flag_rate_per_step: per_step,
        flag_rate: if total == 0 { 0.0 } else { flagged as f64 / total as f64 },
        psnr_in_set: (in_n > 0).then(|| in_sum / in_n as f64),
        psnr_out_of_set: (out_n > 0).then(|| out_sum / out_n as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_forms() {
        let a = Grid::filled(8, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Grid::filled(8, 0.4);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&Grid::filled(4, 0.0), &a).is_err());
    }

    #[test]
    fn psnr_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Grid::from_fn(16, |_, _| rng.random::<f64>());
        let b = Grid::from_fn(16, |_, _| rng.random::<f64>());
        let mut sq = 0.0;
        for i in 0..256 {
            sq += (a.as_slice()[i] - b.as_slice()[i]).powi(2);
        }
        let expected = -10.0 * (sq / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn crossover_binomial() {
        assert_eq!(crossover_rate(&[false; 10]).unwrap().rate, 0.0);
        let mut flags = vec![false; 100];
        flags[..3].fill(true);
        let r = crossover_rate(&flags).unwrap();
        assert!((r.rate - 0.03).abs() < 1e-15);
        assert!((r.sem - 0.017_058_722_109_231_98).abs() < 1e-12);
        assert!(crossover_rate(&[]).is_err());
    }

    #[test]
    fn coverage_full_box_and_point() {
        let truth = Image::from_vec(2, vec![0.1, 0.5, 0.9, 0.0]).unwrap();
        let full = PixelIntervals::new(Grid::zeros(2), Grid::filled(2, 1.0)).unwrap();
        assert_eq!(coverage_and_width(&full, &truth).unwrap(), (1.0, 1.0));
        let point = PixelIntervals::new(truth.grid().clone(), truth.grid().clone()).unwrap();
        assert_eq!(coverage_and_width(&point, &truth).unwrap(), (1.0, 0.0));
        let shifted = Image::clamped(truth.map(|v| v + 0.01)).into_grid();
        let miss = PixelIntervals::new(shifted.clone(), shifted).unwrap();
        assert_eq!(coverage_and_width(&miss, &truth).unwrap().0, 0.0);
    }

    #[test]
    fn ause_zero_for_oracle_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let unc: Vec<f64> = err.iter().map(|e| 3.0 * e).collect();
        assert_eq!(ause(&unc, &err).unwrap(), 0.0);
        assert_eq!(ause(&err, &err).unwrap(), 0.0);
    }

    #[test]
    fn ause_reversed_is_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let err: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let reversed: Vec<f64> = err.iter().map(|e| -e).collect();
        let worst = ause(&reversed, &err).unwrap();
        // direct oracle: reversed-order curve minus oracle curve
        let mut asc = err.clone();
        asc.sort_by(f64::total_cmp);
        let mut desc = asc.clone();
        desc.reverse();
        let mae = err.iter().sum::<f64>() / 400.0;
        let curve = |sorted: &[f64], k: usize| {
            let removed = k * 400 / 100;
            sorted[removed..].iter().sum::<f64>() / (400 - removed) as f64 / mae
        };
        let direct = (0..100).map(|k| curve(&asc, k) - curve(&desc, k)).sum::<f64>() / 100.0;
        assert!((worst - direct).abs() < 1e-12);
        for _ in 0..20 {
            let unc: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
            assert!(ause(&unc, &err).unwrap() <= worst + 1e-12);
        }
    }

    #[test]
    fn ause_constant_uncertainty_positive() {
        let err: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        assert!(ause(&vec![1.0; 100], &err).unwrap() > 0.0);
        assert_eq!(ause(&vec![1.0; 100], &vec![0.0; 100]).unwrap(), 0.0);
    }

    #[test]
    fn calibration_threshold_collapse_and_monotone() {
        let runs = vec![
            TruthTrajectory { beta: vec![1.0, 2.0], truth_nll: vec![1.5, 2.0] },
            TruthTrajectory { beta: vec![1.0, 2.0], truth_nll: vec![0.5, 1.0] },
            TruthTrajectory { beta: vec![1.0, 2.0], truth_nll: vec![3.0, 4.5] },
        ];
        let curve = calibration_curve(&runs, &[0.01, 0.1, 0.5, 1.0]).unwrap();
        // δ = 1: crossover iff L > β somewhere -> runs 0 and 2
        assert!((curve[3].1.rate - 2.0 / 3.0).abs() < 1e-12);
        for w in curve.windows(2) {
            assert!(w[0].1.rate <= w[1].1.rate);
        }
        assert!(calibration_curve(&runs, &[0.0]).is_err());
    }

    #[test]
    fn hallucination_groups() {
        let rep = hallucination_report(&[vec![(true, 30.0), (false, 10.0)], vec![(true, 32.0)]]);
        assert_eq!(rep.flag_rate_per_step, vec![0.5, 0.0]);
        assert!((rep.flag_rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.psnr_in_set, Some(31.0));
        assert_eq!(rep.psnr_out_of_set, Some(10.0));
        let none = hallucination_report(&[vec![(true, f64::INFINITY)]]);
        assert_eq!(none.psnr_out_of_set, None);
        assert_eq!(none.psnr_in_set, Some(f64::INFINITY));
    }

    #[test]
    fn exclusion_per_angle() {
        let runs = vec![vec![true, false], vec![true, true], vec![false, false]];
        let r = exclusion_rate(&[0.0, 8.0], &runs).unwrap();
        assert!((r[0].1.rate - 1.0 / 3.0).abs() < 1e-12);
        assert!((r[1].1.rate - 2.0 / 3.0).abs() < 1e-12);
    }
}
