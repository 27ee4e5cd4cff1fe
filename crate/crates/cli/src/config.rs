//! Experiment configuration, loaded from JSON with every field defaulted to
//! the desk protocol.

use std::path::Path;

use refdiff_core::nn::train::{AdamConfig, TrainConfig};
use refdiff_core::nn::ConvUNetSpec;
use refdiff_core::phantom::{DomainStyle, PhantomParams};
use refdiff_core::{RefinementConfig, Respacing, ScheduleKind, SeededRng};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Da,
    Dg,
    Mixed,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Da, Arm::Dg, Arm::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Da => "da",
            Arm::Dg => "dg",
            Arm::Mixed => "mixed",
        }
    }

    /// Arms that evaluate on adapted target images.
    pub fn adapts_target(self) -> bool {
        matches!(self, Arm::Da | Arm::Mixed)
    }

    /// Arms whose segmenter trains on regenerated source images.
    pub fn regenerates_source(self) -> bool {
        matches!(self, Arm::Dg | Arm::Mixed)
    }
}

impl std::str::FromStr for Arm {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown arm '{s}' (baseline, da, dg, mixed)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_train: usize,
    pub source_test: usize,
    pub target_test: usize,
    pub phantom: PhantomParams,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_train: 200,
            source_test: 100,
            target_test: 100,
            phantom: PhantomParams::default(),
            source_style: DomainStyle::source(),
            target_style: DomainStyle::target(),
        }
    }
}

/// Percentile window applied before every network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { lo: 0.5, hi: 99.5 }
    }
}

/// Optimiser settings without a seed; seeds come from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
}

impl OptimConfig {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam: self.adam,
            seed,
            checkpoint_every: 0,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
    /// Sampling steps, as a count or an explicit list.
    pub respace: Respacing,
    pub learn_sigma: bool,
    pub vlb_weight: f64,
    pub network: ConvUNetSpec,
    pub training: OptimConfig,
    pub refinement: RefinementConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Linear,
            steps: 1000,
            respace: Respacing::Count(100),
            learn_sigma: true,
            vlb_weight: 1e-3,
            network: ConvUNetSpec::desk_denoiser(16, true),
            training: OptimConfig {
                epochs: 100,
                ..OptimConfig::default()
            },
            refinement: RefinementConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub network: ConvUNetSpec,
    pub training: OptimConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            network: ConvUNetSpec::desk_segmenter(),
            training: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub clip: ClipConfig,
    pub diffusion: DiffusionConfig,
    pub segmenter: SegmenterConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            clip: ClipConfig::default(),
            diffusion: DiffusionConfig::default(),
            segmenter: SegmenterConfig::default(),
        }
    }
}

/// Independent streams for each stage, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SourceTrain = 1,
    SourceTest = 2,
    TargetTest = 3,
    Denoiser = 4,
    Segmenter = 5,
    DgSegmenter = 6,
    Adaptation = 7,
    Sampling = 8,
}

impl ExperimentConfig {
    /// The reference-scale protocol: full-width segmenter trained for 250
    /// epochs and a 64-filter denoiser.
    pub fn paper_protocol() -> Self {
        let mut cfg = Self::default();
        cfg.segmenter.network = ConvUNetSpec::reference_segmenter();
        cfg.segmenter.training.epochs = 250;
        cfg.diffusion.network = ConvUNetSpec::desk_denoiser(64, true);
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parse and validate a JSON config; absent fields take the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        SeededRng::derive(self.seed, 0x5EED, stage as u32).next_u64()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source_train < 2 || d.source_test < 2 || d.target_test < 2 {
            return Err(CliError::Config("every dataset needs at least two cases".into()));
        }
        d.phantom.validate()?;
        d.source_style.validate()?;
        d.target_style.validate()?;
        if !(0.0..=100.0).contains(&self.clip.lo) || !(0.0..=100.0).contains(&self.clip.hi) || self.clip.lo >= self.clip.hi
        {
            return Err(CliError::Config(format!(
                "clip percentiles must satisfy 0 <= lo < hi <= 100, got {} and {}",
                self.clip.lo, self.clip.hi
            )));
        }
        let diff = &self.diffusion;
        let expected_out = if diff.learn_sigma { 2 } else { 1 };
        if !diff.network.time_conditioned || diff.network.out_channels != expected_out || diff.network.in_channels != 1 {
            return Err(CliError::Config(format!(
                "denoiser network must be time-conditioned with 1 input and {expected_out} output channels"
            )));
        }
        let seg = &self.segmenter.network;
        if seg.time_conditioned || seg.in_channels != 1 || seg.out_channels != 4 {
            return Err(CliError::Config("segmenter network must map 1 channel to 4 classes".into()));
        }
        diff.network.validate()?;
        seg.validate()?;
        diff.training.with_seed(0).validate()?;
        self.segmenter.training.with_seed(0).validate()?;
        let sched = self.sampling_schedule()?;
        let size = d.phantom.size;
        diff.refinement.validate(&sched, size, size)?;
        let factor = 1usize << diff.network.depth.max(seg.depth);
        if size % factor != 0 {
            return Err(CliError::Config(format!(
                "image size {size} is not divisible by 2^depth = {factor}"
            )));
        }
        Ok(())
    }

    pub fn sampling_schedule(&self) -> Result<refdiff_core::NoiseSchedule> {
        let parent = refdiff_core::NoiseSchedule::build(self.diffusion.schedule, self.diffusion.steps)?;
        Ok(self.diffusion.respace.apply(&parent)?.schedule)
    }
}
