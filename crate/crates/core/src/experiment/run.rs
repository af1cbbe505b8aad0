//! Single runs: simulation, the confidence-sequence loop and per-step hooks.

use crate::confseq::{ConfidenceState, MixingDistribution};
use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::forward::{simulate_step, AcquisitionPlan, Geometry, Measurement};
use crate::grid::Image;
use crate::metrics::{psnr, TruthTrajectory};
use crate::phantoms::{phantom_pair, rotate_image, PhantomFamily};
use crate::recon::Predictor;

/// SplitMix64 fold of `parts` into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn family_id(f: PhantomFamily) -> u64 {
    PhantomFamily::ALL.iter().position(|&g| g == f).expect("listed family") as u64
}

/// Truth and the full measurement stream of one run, grouped by step.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub geometry: Geometry,
    pub plan: AcquisitionPlan,
    pub truth_highres: Image<f64>,
    pub truth: Image<f64>,
    pub steps: Vec<Vec<Measurement>>,
}

impl Scenario {
    /// Simulates every step. Noise seeds depend on the config seed, the
    /// phantom, the step, the view and its intensity, never on the predictor.
    pub fn simulate(config: &ExperimentConfig) -> Result<Self> {
        let mut s = Self::without_data(config)?;
        let fam = family_id(config.phantom.family);
        for step in 0..s.plan.total_steps() {
            let views = s.plan.step_views(step);
            let mut ms = Vec::with_capacity(views.len());
            for (j, (angle, intensity)) in views.into_iter().enumerate() {
                let seed = derive_seed(&[
                    config.seed,
                    fam,
                    config.phantom.index,
                    step as u64,
                    j as u64,
                    intensity.to_bits(),
                ]);
                ms.push(simulate_step(&s.truth_highres, angle, intensity, seed, &s.geometry)?);
            }
            s.steps.push(ms);
        }
        Ok(s)
    }

    /// Rebuilds a scenario around a recorded measurement log.
    pub fn from_log(config: &ExperimentConfig, steps: Vec<Vec<Measurement>>) -> Result<Self> {
        let mut s = Self::without_data(config)?;
        if steps.len() != s.plan.total_steps() {
            return Err(Error::invalid(format!(
                "log has {} steps, config expects {}",
                steps.len(),
                s.plan.total_steps()
            )));
        }
        for (t, ms) in steps.iter().enumerate() {
            let views = s.plan.step_views(t);
            if ms.len() != views.len() {
                return Err(Error::invalid(format!("step {t}: {} measurements, expected {}", ms.len(), views.len())));
            }
            for m in ms {
                m.validate(&s.geometry)?;
            }
        }
        s.steps = steps;
        Ok(s)
    }

    fn without_data(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let plan = config.plan()?;
        let (truth_highres, truth) = phantom_pair(config.phantom.family, config.phantom.side, config.phantom.index)?;
        Ok(Self {
            config: config.clone(),
            geometry,
            plan,
            truth_highres,
            truth,
            steps: Vec::new(),
        })
    }

    pub fn warmup(&self) -> usize {
        self.plan.warmup_steps
    }

    /// Measurements of the warm-up steps.
    pub fn warmup_measurements(&self) -> Vec<Measurement> {
        self.steps[..self.warmup()].iter().flatten().cloned().collect()
    }

    /// Measurements of the scored steps `1..=t`.
    pub fn scored_through(&self, t: usize) -> Vec<Measurement> {
        self.steps[self.warmup()..self.warmup() + t].iter().flatten().cloned().collect()
    }

    /// Every measurement in acquisition order.
    pub fn all_measurements(&self) -> Vec<Measurement> {
        self.steps.iter().flatten().cloned().collect()
    }

    /// Truth first, then its configured rotations.
    pub fn candidates(&self) -> Result<Vec<(String, Image<f64>)>> {
        let mut out = vec![("truth".to_owned(), self.truth.clone())];
        for &deg in &self.config.candidates.rotations {
            out.push((rotation_name(deg), rotate_image(&self.truth, deg)?));
        }
        Ok(out)
    }
}

pub fn rotation_name(deg: f64) -> String {
    format!("rot{deg}")
}

/// One scored step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    /// Scored step number, starting at 1.
    pub step: usize,
    /// Acquisition index of the step's first measurement.
    pub index: usize,
    pub views: usize,
    pub beta: f64,
    pub increment: f64,
    /// Whether every per-view increment obeyed `min ℓ_k ≤ inc ≤ min ℓ_k + ln K`.
    pub sandwich: bool,
    /// Cumulative NLL of each candidate, in candidate order.
    pub nll: Vec<f64>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: String,
    pub delta: f64,
    pub candidates: Vec<String>,
    pub rows: Vec<StepRow>,
    /// Prediction from all measurements, after the last step.
    pub final_mixing: MixingDistribution,
}

impl RunRecord {
    pub fn slack(&self) -> f64 {
        (1.0 / self.delta).ln()
    }

    pub fn final_row(&self) -> &StepRow {
        self.rows.last().expect("runs have at least one scored step")
    }

    pub fn final_threshold(&self) -> f64 {
        self.final_row().beta + self.slack()
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.candidates
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCandidate(name.to_owned()))
    }

    /// `(β_t, L_t)` of the truth at every step.
    pub fn truth_trajectory(&self) -> TruthTrajectory {
        TruthTrajectory {
            beta: self.rows.iter().map(|r| r.beta).collect(),
            truth_nll: self.rows.iter().map(|r| r.nll[0]).collect(),
        }
    }

    pub fn crossed(&self) -> bool {
        self.truth_trajectory().crosses(self.delta)
    }

    /// Final `β_T − L_T(x*)`; smaller means a tighter set.
    pub fn truth_gap(&self) -> f64 {
        let r = self.final_row();
        r.beta - r.nll[0]
    }

    pub fn final_member(&self, name: &str) -> Result<bool> {
        let c = self.column(name)?;
        Ok(self.final_row().nll[c] <= self.final_threshold())
    }

    pub fn final_estimate(&self) -> Image<f64> {
        self.final_mixing.mean()
    }

    pub fn sandwich_holds(&self) -> bool {
        self.rows.iter().all(|r| r.sandwich)
    }
}

/// What an observer sees after each scored step.
pub struct StepView<'a> {
    pub step: usize,
    pub state: &'a ConfidenceState,
    /// Scored measurements through this step.
    pub scored: &'a [Measurement],
    /// The mixing distribution that scored this step.
    pub mixing: &'a MixingDistribution,
}

pub type Observer<'o> = dyn FnMut(&StepView<'_>) -> Result<()> + 'o;

/// Runs the confidence sequence over the scored steps of `scenario`.
pub fn execute(scenario: &Scenario, predictor: &mut dyn Predictor, observer: Option<&mut Observer<'_>>) -> Result<RunRecord> {
    let mut observer = observer;
    let mut history = scenario.warmup_measurements();
    let mut scored: Vec<Measurement> = Vec::new();
    let mut state = ConfidenceState::new(scenario.geometry.clone(), scenario.config.delta, history.len())?;
    let candidates = scenario.candidates()?;
    for (name, img) in &candidates {
        state.track(name.clone(), img.clone())?;
    }
    let names: Vec<String> = candidates.into_iter().map(|(n, _)| n).collect();
    let mut rows = Vec::with_capacity(scenario.plan.scored_steps());
    for step_ms in &scenario.steps[scenario.warmup()..] {
        let mixing = predictor.predict(&history, &scenario.geometry)?;
        let before = state.beta();
        let index = history.len();
        let record = state.update(&mixing, index, step_ms)?;
        let ln_k = (mixing.len() as f64).ln();
        let sandwich = record.increments.iter().all(|inc| {
            let lo = inc.best_sample();
            lo <= inc.value && inc.value <= lo + ln_k
        });
        rows.push(StepRow {
            step: record.step,
            index,
            views: step_ms.len(),
            beta: record.beta,
            increment: record.beta - before,
            sandwich,
            nll: names.iter().map(|n| state.nll(n)).collect::<Result<_>>()?,
        });
        history.extend(step_ms.iter().cloned());
        scored.extend(step_ms.iter().cloned());
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepView {
                step: record.step,
                state: &state,
                scored: &scored,
                mixing: &mixing,
            })?;
        }
    }
    let final_mixing = predictor.predict(&history, &scenario.geometry)?;
    Ok(RunRecord {
        method: predictor.name(),
        delta: scenario.config.delta,
        candidates: names,
        rows,
        final_mixing,
    })
}

/// Simulates and runs the configured predictor.
pub fn run(config: &ExperimentConfig) -> Result<(Scenario, RunRecord)> {
    let scenario = Scenario::simulate(config)?;
    let mut predictor = predictor_for(config)?;
    let record = execute(&scenario, predictor.as_mut(), None)?;
    Ok((scenario, record))
}

/// The configured predictor; ensemble jitter is seeded from the run seed.
pub fn predictor_for(config: &ExperimentConfig) -> Result<Box<dyn Predictor>> {
    config.predictor.build(
        config.phantom.side,
        derive_seed(&[config.seed, config.phantom.index, 0x656e_7365_6d62_6c65]),
    )
}

/// Summary numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_beta: f64,
    pub threshold: f64,
    pub truth_nll: f64,
    pub gap: f64,
    pub crossed: bool,
    pub psnr: f64,
    /// Final membership of each candidate, in candidate order.
    pub members: Vec<(String, bool)>,
}

pub fn summarize(scenario: &Scenario, record: &RunRecord) -> Result<RunSummary> {
    let last = record.final_row();
    Ok(RunSummary {
        final_beta: last.beta,
        threshold: record.final_threshold(),
        truth_nll: last.nll[0],
        gap: record.truth_gap(),
        crossed: record.crossed(),
        psnr: psnr(&record.final_estimate(), &scenario.truth)?,
        members: record
            .candidates
            .iter()
            .map(|n| Ok((n.clone(), record.final_member(n)?)))
            .collect::<Result<_>>()?,
    })
}
