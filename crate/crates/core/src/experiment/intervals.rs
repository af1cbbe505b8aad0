//! Pixel-interval comparison at the final step of a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::run::{derive_seed, RunRecord, Scenario};
use crate::io::write_image;
use crate::metrics::{ause, coverage_and_width};
use crate::optim::OptimizerConfig;
use crate::recon::{fbp, EnsemblePredictor, Predictor};
use crate::uq::{
    boundary_spread, bootstrap_intervals, student_t_intervals, worst_case_intervals, BoundaryConfig, ConfidenceSet,
    PixelIntervals, WorstCaseConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntervalConfig {
    pub worst_case: WorstCaseConfig,
    pub boundary: BoundaryConfig,
    /// Ensemble size feeding the boundary-spread samples.
    pub members: usize,
    pub max_smoothing: f64,
    pub optimizer: OptimizerConfig,
    /// FBP bootstrap resamples; 0 disables the bootstrap.
    pub bootstrap: usize,
}

impl Default for IntervalConfig {
    fn default() -> Self {
        Self {
            worst_case: WorstCaseConfig::default(),
            boundary: BoundaryConfig::default(),
            members: 8,
            max_smoothing: 1.0,
            optimizer: OptimizerConfig::default(),
            bootstrap: 0,
        }
    }
}

impl IntervalConfig {
    pub fn validate(&self) -> Result<()> {
        self.worst_case
            .validate()
            .map_err(|e| Error::config("intervals.worst_case", e.to_string()))?;
        self.boundary
            .validate()
            .map_err(|e| Error::config("intervals.boundary", e.to_string()))?;
        if self.members < 2 {
            return Err(Error::config("intervals.members", "must be at least 2"));
        }
        if self.bootstrap == 1 {
            return Err(Error::config("intervals.bootstrap", "must be 0 or at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalOutcome {
    pub method: String,
    pub intervals: PixelIntervals,
    pub coverage: f64,
    pub width: f64,
    pub ause: f64,
    /// Samples or replicates that ended inside `C_t`, and how many there were.
    pub in_set: usize,
    pub total: usize,
    /// Worst-case replicates whose projection ran out of budget.
    pub flagged: usize,
    /// Every worst-case replicate is in the set or flagged.
    pub audited: bool,
}

fn outcome(
    method: &str,
    intervals: PixelIntervals,
    scenario: &Scenario,
    estimate: &[f64],
    counts: (usize, usize, usize, bool),
) -> Result<IntervalOutcome> {
    let (coverage, width) = coverage_and_width(&intervals, &scenario.truth)?;
    let err: Vec<f64> = estimate
        .iter()
        .zip(scenario.truth.as_slice())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let a = ause(intervals.half_width().as_slice(), &err)?;
    Ok(IntervalOutcome {
        method: method.to_owned(),
        intervals,
        coverage,
        width,
        ause: a,
        in_set: counts.0,
        total: counts.1,
        flagged: counts.2,
        audited: counts.3,
    })
}

/// Worst-case, boundary-spread Student-t, raw-ensemble Student-t and
/// (optionally) FBP bootstrap intervals for the final confidence set.
pub fn compute_intervals(scenario: &Scenario, record: &RunRecord, config: &IntervalConfig) -> Result<Vec<IntervalOutcome>> {
    config.validate()?;
    let scored = scenario.scored_through(scenario.plan.scored_steps());
    let set = ConfidenceSet::new(&scored, record.final_threshold(), &scenario.geometry);
    let estimate = record.final_estimate();
    let run_seed = derive_seed(&[scenario.config.seed, scenario.config.phantom.index, 0x7571]);
    let mut out = Vec::new();

    let mut wc_cfg = config.worst_case;
    wc_cfg.seed = derive_seed(&[run_seed, wc_cfg.seed]);
    let wc = worst_case_intervals(&estimate, &set, &wc_cfg)?;
    let members = wc.replicates.iter().filter(|r| r.member).count();
    let flagged = wc.replicates.iter().filter(|r| r.flagged).count();
    let audited = wc.audited();
    let n = wc.replicates.len();
    out.push(outcome("worst_case", wc.intervals, scenario, estimate.as_slice(), (members, n, flagged, audited))?);

    let all = scenario.all_measurements();
    let mut ens = EnsemblePredictor::standard(config.members, run_seed, config.max_smoothing, config.optimizer, None)?;
    let samples = ens.predict(&all, &scenario.geometry)?.into_samples();
    let count_in = |xs: &[crate::grid::Image<f64>]| -> Result<usize> {
        let mut k = 0;
        for x in xs {
            k += usize::from(set.membership(x)?.member);
        }
        Ok(k)
    };
    let raw_in = count_in(&samples)?;
    let raw = student_t_intervals(&samples, scenario.config.delta)?;
    out.push(outcome("ensemble_t", raw, scenario, estimate.as_slice(), (raw_in, samples.len(), 0, true))?);

    let spread = boundary_spread(&samples, &set, &config.boundary)?;
    let spread_in = count_in(&spread)?;
    let bt = student_t_intervals(&spread, scenario.config.delta)?;
    out.push(outcome("boundary_t", bt, scenario, estimate.as_slice(), (spread_in, spread.len(), 0, true))?);

    if config.bootstrap >= 2 {
        let mut rec = |ms: &[crate::forward::Measurement]| fbp(ms, &scenario.geometry);
        let bs = bootstrap_intervals(&mut rec, &all, config.bootstrap, scenario.config.delta, run_seed)?;
        out.push(outcome("fbp_bootstrap", bs, scenario, estimate.as_slice(), (0, 0, 0, true))?);
    }
    Ok(out)
}

/// Writes `{method}_lower`, `_upper` and `_halfwidth` image files.
pub fn write_intervals(dir: &Path, outcomes: &[IntervalOutcome]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for o in outcomes {
        let prov = |what: &str| {
            let mut p = BTreeMap::new();
            p.insert("content".to_owned(), what.to_owned());
            p.insert("method".to_owned(), o.method.clone());
            p
        };
        write_image(&dir.join(format!("{}_lower.f32", o.method)), o.intervals.lower(), prov("lower"))?;
        write_image(&dir.join(format!("{}_upper.f32", o.method)), o.intervals.upper(), prov("upper"))?;
        write_image(&dir.join(format!("{}_halfwidth.f32", o.method)), &o.intervals.half_width(), prov("halfwidth"))?;
    }
    Ok(())
}
