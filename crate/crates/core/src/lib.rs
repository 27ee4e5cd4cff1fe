//! Reference-guided diffusion sampling for test-time domain adaptation,
//! together with the pieces needed to measure its effect on a downstream
//! segmentation task: small trainable U-Nets, overlap and surface-distance
//! metrics, Welch's t-test and a cardiac-like phantom generator.

pub mod engine;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod refinement;
pub mod rng;
pub mod schedule;

pub use engine::{AnalyticGmm, Denoiser, DenoiserOutput, EngineError};
pub use grid::{CaseRecord, Class, DomainTag, Grid, Grid2D, GridError, LabelMap, Spacing};
pub use refinement::{adapt, lowpass, AdaptationTrace, RefinementConfig};
pub use rng::SeededRng;
pub use schedule::{NoiseSchedule, RespacedSchedule, Respacing, ScheduleKind};
