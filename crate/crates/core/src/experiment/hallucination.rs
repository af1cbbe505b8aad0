//! Out-of-set detection on a mixed population of clean and corrupted
//! samples.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experiment::run::{derive_seed, execute, RunRecord, Scenario, StepView};
use crate::grid::Image;
use crate::metrics::{hallucination_report, psnr, HallucinationReport};
use crate::recon::Predictor;

/// Replaces `v` by `1 − v` on a random `fraction` of the pixels.
pub fn corrupt(image: &Image<f64>, fraction: f64, seed: u64) -> Result<Image<f64>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let n = image.len();
    let k = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = image.as_slice().to_vec();
    for i in sample(&mut rng, n, k) {
        data[i] = 1.0 - data[i];
    }
    Image::from_vec(image.side(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationOutcome {
    pub report: HallucinationReport,
    pub clean_flag_rate: f64,
    pub corrupted_flag_rate: f64,
}

/// Runs the confidence sequence and, every `every` scored steps (and at the
/// last one), checks each mixing sample and a corrupted copy of it for
/// membership in `C_t`.
pub fn hallucination_run(
    scenario: &Scenario,
    predictor: &mut dyn Predictor,
    fraction: f64,
    every: usize,
    seed: u64,
) -> Result<(RunRecord, HallucinationOutcome)> {
    if every == 0 {
        return Err(Error::invalid("evaluation stride must be at least 1"));
    }
    let last = scenario.plan.scored_steps();
    let truth = scenario.truth.clone();
    let mut steps: Vec<Vec<(bool, f64)>> = Vec::new();
    let (mut clean, mut clean_out, mut bad, mut bad_out) = (0usize, 0usize, 0usize, 0usize);
    let mut observe = |v: &StepView<'_>| -> Result<()> {
        if v.step % every != 0 && v.step != last {
            return Ok(());
        }
        let mut row = Vec::new();
        for (k, s) in v.mixing.samples().iter().enumerate() {
            let c = corrupt(s, fraction, derive_seed(&[seed, v.step as u64, k as u64]))?;
            for (img, is_clean) in [(s, true), (&c, false)] {
                let member = v.state.contains(img, v.scored)?.member;
                row.push((member, psnr(img, &truth)?));
                if is_clean {
                    clean += 1;
                    clean_out += usize::from(!member);
                } else {
                    bad += 1;
                    bad_out += usize::from(!member);
                }
            }
        }
        steps.push(row);
        Ok(())
    };
    let record = execute(scenario, predictor, Some(&mut observe))?;
    let rate = |out: usize, n: usize| if n == 0 { 0.0 } else { out as f64 / n as f64 };
    Ok((
        record,
        HallucinationOutcome {
            report: hallucination_report(&steps),
            clean_flag_rate: rate(clean_out, clean),
            corrupted_flag_rate: rate(bad_out, bad),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_flips_exact_fraction() {
        let img = Image::constant(10, 0.2).unwrap();
        let c = corrupt(&img, 0.2, 3).unwrap();
        let flipped = c.as_slice().iter().filter(|&&v| (v - 0.8).abs() < 1e-12).count();
        assert_eq!(flipped, 20);
        assert_eq!(corrupt(&img, 0.2, 3).unwrap(), c);
        assert_eq!(corrupt(&img, 0.0, 3).unwrap(), img);
        assert!(corrupt(&img, 1.5, 3).is_err());
    }
}
