//! Anytime-valid confidence sequences for sequential X-ray CT.
//!
//! Measurements arrive one projection at a time. A predictor fitted to the
//! data seen so far scores each new projection before it is observed, and
//! the running negative log marginal likelihood `β_t` defines the set of
//! images whose cumulative Poisson NLL stays below `β_t + ln(1/δ)`. The
//! truth stays inside that set at every step simultaneously with
//! probability at least `1 − δ`.

pub mod confseq;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod grid;
pub mod io;
pub mod likelihood;
pub mod metrics;
pub mod optim;
pub mod phantoms;
pub mod poisson;
pub mod recon;
pub mod scalar;
pub mod uq;

pub use confseq::{ConfidenceState, MixingDistribution};
pub use error::{Error, Result};
pub use forward::{AcquisitionPlan, Geometry, Measurement};
pub use grid::{Grid, Image};
pub use optim::OptimizerConfig;
pub use phantoms::PhantomFamily;
pub use scalar::Real;
pub use uq::PixelIntervals;

pub type Grid64 = Grid<f64>;
pub type Grid32 = Grid<f32>;
pub type Image64 = Image<f64>;
pub type Image32 = Image<f32>;
