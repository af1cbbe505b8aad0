use ctseq::confseq::{crossover_flag, log_mean_exp, mixture_increment, ConfidenceState};
use ctseq::experiment::hallucination::corrupt;
use ctseq::forward::{mean_counts, radon_backproject, radon_project};
use ctseq::io::render_levels;
use ctseq::likelihood::{cumulative_nll, nll_increment};
use ctseq::uq::{nearest_rank, student_t_intervals};
use ctseq::{Geometry, Grid, Image, Measurement, MixingDistribution, PixelIntervals};
use proptest::prelude::*;

fn image(side: usize) -> impl Strategy<Value = Image<f64>> {
    prop::collection::vec(0.0..=1.0f64, side * side).prop_map(move |v| Image::from_vec(side, v).unwrap())
}

fn measurement(side: usize) -> impl Strategy<Value = Measurement> {
    (0.0..180.0f64, 1.0..1e4f64, prop::collection::vec(0..2000u64, side))
        .prop_map(|(a, i, c)| Measurement::new(a, i, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_identity(side in 2usize..12, angle in 0.0..180.0f64, seed in any::<u64>()) {
        let g = Geometry::new(side, 4.0).unwrap();
        let x = Grid::from_fn(side, |r, c| ((seed as usize + 7 * r + 3 * c) % 11) as f64 / 10.0);
        let y: Vec<f64> = (0..side).map(|k| ((seed as usize >> 3) + k) as f64 % 5.0 - 2.0).collect();
        let lhs: f64 = radon_project(&x, angle, &g).unwrap().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs = x.dot(&radon_backproject(&y, angle, &g).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn mean_counts_bounded_by_intensity(x in image(6), angle in 0.0..180.0f64, i0 in 1.0..1e6f64) {
        let g = Geometry::new(6, 4.0).unwrap();
        for l in mean_counts(x.grid(), angle, i0, &g).unwrap() {
            prop_assert!(l > 0.0 && l <= i0);
        }
    }

    #[test]
    fn nll_is_non_negative(x in image(5), m in measurement(5)) {
        let g = Geometry::new(5, 4.0).unwrap();
        prop_assert!(nll_increment(x.grid(), &m, &g).unwrap() >= 0.0);
    }

    #[test]
    fn log_mean_exp_between_max_minus_log_k_and_max(v in prop::collection::vec(-1e4..1e4f64, 1..20)) {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lme = log_mean_exp(&v);
        prop_assert!(lme <= m + 1e-9);
        prop_assert!(lme >= m - (v.len() as f64).ln() - 1e-9);
    }

    #[test]
    fn mixture_sandwich(samples in prop::collection::vec(image(4), 1..6), m in measurement(4)) {
        let g = Geometry::new(4, 4.0).unwrap();
        let k = samples.len();
        let mix = MixingDistribution::new(samples, 0).unwrap();
        let inc = mixture_increment(&mix, &m, &g).unwrap();
        let lo = inc.best_sample();
        prop_assert!(lo <= inc.value);
        prop_assert!(inc.value <= lo + (k as f64).ln());
    }

    #[test]
    fn smaller_delta_gives_larger_set(
        truth in image(4),
        other in image(4),
        ms in prop::collection::vec(measurement(4), 1..5),
        d1 in 0.001..0.5f64,
        d2 in 0.5..0.999f64,
    ) {
        let g = Geometry::new(4, 4.0).unwrap();
        let mut state = ConfidenceState::new(g.clone(), 0.05, 0).unwrap();
        state.track("x", other.clone()).unwrap();
        for (i, m) in ms.iter().enumerate() {
            state.update(&MixingDistribution::dirac(truth.clone(), i), i, std::slice::from_ref(m)).unwrap();
        }
        let l = cumulative_nll(other.grid(), &ms, &g).unwrap();
        prop_assert!((state.nll("x").unwrap() - l).abs() <= 1e-9 * l.max(1.0));
        if state.membership_at("x", d2).unwrap().member {
            prop_assert!(state.membership_at("x", d1).unwrap().member);
        }
    }

    #[test]
    fn crossover_monotone_in_delta(
        hist in prop::collection::vec((0.0..100.0f64, 0.0..110.0f64), 1..10),
        d1 in 0.001..0.5f64,
        d2 in 0.5..0.999f64,
    ) {
        if crossover_flag(&hist, d1) {
            prop_assert!(crossover_flag(&hist, d2));
        }
    }

    #[test]
    fn envelope_contains_every_sample(samples in prop::collection::vec(image(3), 1..6)) {
        let env = PixelIntervals::envelope(&samples).unwrap();
        for s in &samples {
            let point = PixelIntervals::new(s.grid().clone(), s.grid().clone()).unwrap();
            prop_assert!(env.contains(&point));
        }
    }

    #[test]
    fn student_t_interval_contains_sample_mean(samples in prop::collection::vec(image(3), 2..8), delta in 0.01..0.5f64) {
        let iv = student_t_intervals(&samples, delta).unwrap();
        let mean = Image::mean_of(&samples).unwrap();
        for (k, &m) in mean.as_slice().iter().enumerate() {
            prop_assert!(iv.lower().as_slice()[k] <= m + 1e-12 && m <= iv.upper().as_slice()[k] + 1e-12);
        }
    }

    #[test]
    fn nearest_rank_in_range(p in 0.0..=1.0f64, n in 1usize..500) {
        let k = nearest_rank(p, n);
        prop_assert!((1..=n).contains(&k));
        prop_assert!(k as f64 >= p * n as f64 - 1e-6);
    }

    #[test]
    fn corruption_flips_rounded_fraction(x in image(6), f in 0.0..=1.0f64, seed in any::<u64>()) {
        let c = corrupt(&x, f, seed).unwrap();
        let changed = x.as_slice().iter().zip(c.as_slice()).filter(|(a, b)| (*a + *b - 1.0).abs() < 1e-12 && a != b).count();
        let expected = (f * 36.0).round() as usize;
        let half = x.as_slice().iter().filter(|&&v| v == 0.5).count();
        prop_assert!(changed <= expected && changed + half >= expected);
        prop_assert!(c.is_unit_box());
    }

    #[test]
    fn rendering_is_monotone_and_clamped(v in prop::collection::vec(0.0..2.0f64, 16), white in 0.01..1.5f64) {
        let grid = Grid::from_vec(4, v.clone()).unwrap();
        let px = render_levels(&grid, white).unwrap();
        for (a, pa) in v.iter().zip(&px) {
            if *a >= white {
                prop_assert_eq!(*pa, 255);
            }
            for (b, pb) in v.iter().zip(&px) {
                if a <= b {
                    prop_assert!(pa <= pb);
                }
            }
        }
        let zero = render_levels(&Grid::zeros(2), white).unwrap();
        prop_assert!(zero.iter().all(|&p| p == 0));
    }
}
