//! Versioned TOML configuration with field-level validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    exponential_intensities, golden_angles, uniform_angles, AcquisitionMode, AcquisitionPlan, Geometry,
};
use crate::optim::OptimizerConfig;
use crate::phantoms::{PhantomFamily, MIN_PHANTOM_SIDE};
use crate::recon::{
    EnsemblePredictor, FbpPredictor, FixedPredictor, MeanPredictor, MlePredictor, Predictor, SmoothedPredictor,
};
use crate::experiment::intervals::IntervalConfig;
use crate::grid::Image;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Noise seed; measurement streams depend on it, the phantom and the
    /// acquisition, never on the predictor.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub phantom: PhantomConfig,
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub candidates: CandidateConfig,
    #[serde(default)]
    pub intervals: IntervalConfig,
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub family: PhantomFamily,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Which phantom of the family.
    #[serde(default)]
    pub index: u64,
}

fn default_side() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleSchedule {
    Golden,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub mode: AcquisitionMode,
    #[serde(default = "default_path_scale")]
    pub path_scale: f64,
    /// Sparse: number of acquired angles, one per step. Dense: the grid size.
    #[serde(default = "default_angles")]
    pub angles: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_schedule")]
    pub schedule: AngleSchedule,
    /// Sparse: `t_final · r · I0` over the scored steps.
    #[serde(default)]
    pub total_intensity: Option<f64>,
    /// Dense: first and last step intensity of the exponential grid.
    #[serde(default)]
    pub first_intensity: Option<f64>,
    #[serde(default)]
    pub last_intensity: Option<f64>,
    /// Dense: number of steps.
    #[serde(default)]
    pub steps: Option<usize>,
}

fn default_path_scale() -> f64 {
    4.0
}
fn default_angles() -> usize {
    50
}
fn default_warmup() -> usize {
    5
}
fn default_schedule() -> AngleSchedule {
    AngleSchedule::Golden
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Fbp,
    Mle,
    Ensemble,
    EnsembleMean,
    SmoothedFbp,
    SmoothedMle,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub optimizer: OptimizerConfig,
    /// Adam steps for every refit after the first, starting from the previous
    /// estimate. Absent: every prediction is a full fit from FBP.
    pub refit_steps: Option<usize>,
    pub members: usize,
    pub max_smoothing: f64,
    pub jitter: f64,
    /// Smoothing strength of the smoothed predictors.
    pub sigma: f64,
    /// Pixel value of the constant predictor.
    pub value: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Mle,
            optimizer: OptimizerConfig::default(),
            refit_steps: None,
            members: 10,
            max_smoothing: 1.0,
            jitter: crate::recon::DEFAULT_JITTER_SIGMA,
            sigma: 1.0,
            value: 0.0,
        }
    }
}

impl PredictorConfig {
    pub fn of_kind(kind: PredictorKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn label(&self) -> String {
        match self.kind {
            PredictorKind::Fbp => "fbp".into(),
            PredictorKind::Mle => "mle".into(),
            PredictorKind::Ensemble => format!("ensemble{}", self.members),
            PredictorKind::EnsembleMean => format!("ensemble{}_mean", self.members),
            PredictorKind::SmoothedFbp => format!("fbp_smooth{}", self.sigma),
            PredictorKind::SmoothedMle => format!("mle_smooth{}", self.sigma),
            PredictorKind::Constant => format!("constant{}", self.value),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer
            .validate()
            .map_err(|e| Error::config("predictor.optimizer", e.to_string()))?;
        if self.refit_steps == Some(0) {
            return Err(Error::config("predictor.refit_steps", "must be at least 1"));
        }
        if matches!(self.kind, PredictorKind::Ensemble | PredictorKind::EnsembleMean) && self.members < 2 {
            return Err(Error::config("predictor.members", "ensembles need at least 2 members"));
        }
        if !(self.max_smoothing >= 0.0 && self.max_smoothing.is_finite()) {
            return Err(Error::config("predictor.max_smoothing", "must be finite and non-negative"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("predictor.jitter", "must be finite and non-negative"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("predictor.sigma", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::config("predictor.value", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Instantiates a fresh predictor. `seed` feeds ensemble jitter.
    pub fn build(&self, side: usize, seed: u64) -> Result<Box<dyn Predictor>> {
        self.validate()?;
        let mle = || {
            let mut p = MlePredictor::new(self.optimizer);
            p.refit_steps = self.refit_steps;
            p
        };
        let ensemble = || {
            EnsemblePredictor::standard(self.members, seed, self.max_smoothing, self.optimizer, self.refit_steps)
                .map(|e| e.with_jitter(self.jitter))
        };
        Ok(match self.kind {
            PredictorKind::Fbp => Box::new(FbpPredictor),
            PredictorKind::Mle => Box::new(mle()),
            PredictorKind::Ensemble => Box::new(ensemble()?),
            PredictorKind::EnsembleMean => Box::new(MeanPredictor { base: ensemble()? }),
            PredictorKind::SmoothedFbp => Box::new(SmoothedPredictor {
                base: FbpPredictor,
                sigma: self.sigma,
            }),
            PredictorKind::SmoothedMle => Box::new(SmoothedPredictor {
                base: mle(),
                sigma: self.sigma,
            }),
            PredictorKind::Constant => Box::new(FixedPredictor {
                label: self.label(),
                samples: vec![Image::constant(side, self.value)?],
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateConfig {
    /// Rotations of the truth (degrees, counter-clockwise) tracked from the
    /// first scored step.
    pub rotations: Vec<f64>,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            rotations: vec![0.0, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

impl ExperimentConfig {
    /// Sparse desk-scale defaults for one phantom.
    pub fn sparse(family: PhantomFamily, side: usize, total_intensity: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            delta: default_delta(),
            phantom: PhantomConfig { family, side, index: 0 },
            acquisition: AcquisitionConfig {
                mode: AcquisitionMode::Sparse,
                path_scale: default_path_scale(),
                angles: default_angles(),
                warmup: default_warmup(),
                schedule: AngleSchedule::Golden,
                total_intensity: Some(total_intensity),
                first_intensity: None,
                last_intensity: None,
                steps: None,
            },
            predictor: PredictorConfig::default(),
            candidates: CandidateConfig::default(),
            intervals: IntervalConfig::default(),
        }
    }

    /// Dense defaults: a uniform grid every step, exponential intensities.
    pub fn dense(family: PhantomFamily, side: usize, grid_angles: usize, first: f64, last: f64, steps: usize) -> Self {
        let mut c = Self::sparse(family, side, 1.0);
        c.acquisition = AcquisitionConfig {
            mode: AcquisitionMode::Dense,
            path_scale: default_path_scale(),
            angles: grid_angles,
            warmup: 1,
            schedule: AngleSchedule::Uniform,
            total_intensity: None,
            first_intensity: Some(first),
            last_intensity: Some(last),
            steps: Some(steps),
        };
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if self.phantom.side < MIN_PHANTOM_SIDE / 2 || self.phantom.side > 1024 {
            return Err(Error::config(
                "phantom.side",
                format!("must lie in [{}, 1024]", MIN_PHANTOM_SIDE / 2),
            ));
        }
        let a = &self.acquisition;
        if !(a.path_scale > 0.0 && a.path_scale.is_finite()) {
            return Err(Error::config("acquisition.path_scale", "must be positive"));
        }
        if a.angles == 0 {
            return Err(Error::config("acquisition.angles", "must be at least 1"));
        }
        let positive = |field: &str, v: Option<f64>| match v {
            Some(x) if x > 0.0 && x.is_finite() => Ok(x),
            Some(_) => Err(Error::config(field, "must be positive")),
            None => Err(Error::config(field, "required for this acquisition mode")),
        };
        match a.mode {
            AcquisitionMode::Sparse => {
                positive("acquisition.total_intensity", a.total_intensity)?;
                if a.warmup >= a.angles {
                    return Err(Error::config("acquisition.warmup", "must be below acquisition.angles"));
                }
            }
            AcquisitionMode::Dense => {
                positive("acquisition.first_intensity", a.first_intensity)?;
                positive("acquisition.last_intensity", a.last_intensity)?;
                let steps = a
                    .steps
                    .ok_or_else(|| Error::config("acquisition.steps", "required for this acquisition mode"))?;
                if a.warmup >= steps {
                    return Err(Error::config("acquisition.warmup", "must be below acquisition.steps"));
                }
            }
        }
        self.predictor.validate()?;
        self.intervals.validate()?;
        for &r in &self.candidates.rotations {
            if !(r.abs() <= 45.0) {
                return Err(Error::config("candidates.rotations", format!("{r} outside [-45, 45]")));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.phantom.side, self.acquisition.path_scale)
    }

    fn angle_list(&self) -> Vec<f64> {
        match self.acquisition.schedule {
            AngleSchedule::Golden => golden_angles(self.acquisition.angles),
            AngleSchedule::Uniform => uniform_angles(self.acquisition.angles),
        }
    }

    /// Per-bin intensity of a sparse acquisition: `I_total / (t_final · r)`.
    pub fn sparse_bin_intensity(&self) -> Option<f64> {
        let a = &self.acquisition;
        let scored = a.angles.checked_sub(a.warmup)?;
        Some(a.total_intensity? / (scored * self.phantom.side) as f64)
    }

    pub fn plan(&self) -> Result<AcquisitionPlan> {
        self.validate()?;
        let a = &self.acquisition;
        match a.mode {
            AcquisitionMode::Sparse => {
                let i0 = self.sparse_bin_intensity().expect("validated");
                AcquisitionPlan::sparse(self.angle_list(), i0, a.warmup)
            }
            AcquisitionMode::Dense => {
                let steps = a.steps.expect("validated");
                let intensities = exponential_intensities(
                    a.first_intensity.expect("validated"),
                    a.last_intensity.expect("validated"),
                    steps,
                );
                AcquisitionPlan::dense(self.angle_list(), intensities, a.warmup)
            }
        }
    }
}

fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown and missing fields with the name in backticks
    msg.split('`').nth(1).map(str::to_owned).unwrap_or_else(|| "toml".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[phantom]
family = "ellipses"
side = 128
[acquisition]
mode = "sparse"
angles = 200
warmup = 10
total_intensity = 1e6
"#;

    #[test]
    fn sparse_intensity_per_bin() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let i0 = c.sparse_bin_intensity().unwrap();
        assert!((i0 - 41.118_421_052_631_58).abs() < 1e-9, "{i0}");
        let plan = c.plan().unwrap();
        assert_eq!(plan.scored_steps(), 190);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = ExperimentConfig::dense(PhantomFamily::Fibers, 32, 20, 1e4, 1e9, 30);
        assert_eq!(ExperimentConfig::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn field_level_errors() {
        let field_of = |text: &str| match ExperimentConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field_of(&MINIMAL.replace("schema_version = 1", "schema_version = 2")), "schema_version");
        assert_eq!(field_of(&MINIMAL.replace("warmup = 10", "warmup = 200")), "acquisition.warmup");
        assert_eq!(field_of(&MINIMAL.replace("total_intensity = 1e6", "total_intensity = -1.0")), "acquisition.total_intensity");
        assert_eq!(field_of(&MINIMAL.replace("side = 128", "side = 128\nbogus = 3")), "bogus");
        assert_eq!(field_of(&MINIMAL.replace("schema_version = 1", "schema_version = 1\ndelta = 2.0")), "delta");
        assert_eq!(field_of(&MINIMAL.replace("mode = \"sparse\"", "mode = \"dense\"")), "acquisition.first_intensity");
    }

    #[test]
    fn dense_plan_split() {
        let c = ExperimentConfig::dense(PhantomFamily::Ellipses, 32, 200, 1e4, 1e9, 30);
        let plan = c.plan().unwrap();
        let views = plan.step_views(0);
        assert_eq!(views.len(), 200);
        assert!((views[0].1 - 50.0).abs() < 1e-12);
        assert!((plan.intensities[29] - 1e9).abs() < 1e-3);
    }

    #[test]
    fn builds_every_predictor() {
        for kind in [
            PredictorKind::Fbp,
            PredictorKind::Mle,
            PredictorKind::Ensemble,
            PredictorKind::EnsembleMean,
            PredictorKind::SmoothedFbp,
            PredictorKind::SmoothedMle,
            PredictorKind::Constant,
        ] {
            let p = PredictorConfig::of_kind(kind).build(16, 0).unwrap();
            assert_eq!(p.name().is_empty(), false);
        }
    }
}
