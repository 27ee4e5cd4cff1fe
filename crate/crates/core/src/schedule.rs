//! Noise schedules and timestep respacing.
//!
//! Timesteps are 1-based throughout: a schedule with `T` steps is queried
//! with `t ∈ [1, T]`, and `ᾱ₀ = 1` is implied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("schedule of {0} steps exceeds the limit of {MAX_STEPS}")]
    TooManySteps(usize),
    #[error("timestep {t} outside [1, {steps}]")]
    OutOfRange { t: usize, steps: usize },
    #[error("respacing subsequence is empty")]
    EmptyRespacing,
    #[error("respacing subsequence must be strictly increasing within [1, {steps}], got {found:?}")]
    BadRespacing { steps: usize, found: Vec<usize> },
    #[error("cannot parse respacing `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(ScheduleError::Parse(other.to_string())),
        }
    }
}

/// Largest admissible per-step variance.
pub const MAX_BETA: f64 = 0.999;

/// Upper bound on schedule length, far above any practical `T`.
pub const MAX_STEPS: usize = 1 << 20;

fn check_steps(steps: usize) -> Result<(), ScheduleError> {
    if steps < 2 {
        Err(ScheduleError::TooFewSteps(steps))
    } else if steps > MAX_STEPS {
        Err(ScheduleError::TooManySteps(steps))
    } else {
        Ok(())
    }
}
pub const COSINE_OFFSET: f64 = 0.008;

/// β, α, ᾱ and posterior tables for one (possibly respaced) chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
    log_betas: Vec<f64>,
    log_posterior_var: Vec<f64>,
    /// Timestep of the trained model that step `i` corresponds to. The
    /// identity for a full schedule; the kept subsequence after respacing.
    model_timesteps: Vec<usize>,
    /// Step count of the schedule the model was trained on.
    model_steps: usize,
}

impl NoiseSchedule {
    fn from_tables(betas: Vec<f64>, alpha_bars: Vec<f64>, model_timesteps: Vec<usize>, model_steps: usize) -> Self {
        let n = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let posterior_var: Vec<f64> = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        let log_betas = betas.iter().map(|b| b.ln()).collect();
        // β̃₁ = 0, so its log is replaced by log β̃₂. Only the learned-variance
        // interpolation reads this table and the last step adds no noise.
        let log_posterior_var = (0..n)
            .map(|i| {
                if i == 0 {
                    posterior_var.get(1).copied().unwrap_or(betas[0]).ln()
                } else {
                    posterior_var[i].ln()
                }
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_var,
            log_betas,
            log_posterior_var,
            model_timesteps,
            model_steps,
        }
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let n = betas.len();
        Self::from_tables(betas, alpha_bars, (1..=n).collect(), n)
    }

    /// Linear β from `1e-4·(1000/T)` to `2e-2·(1000/T)`, each capped at
    /// [`MAX_BETA`].
    pub fn linear(steps: usize) -> Result<Self, ScheduleError> {
        check_steps(steps)?;
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, 2e-2 * scale);
        let betas = (0..steps)
            .map(|i| (lo + (hi - lo) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// `ᾱ_t = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`; β is
    /// derived from consecutive ratios and capped at [`MAX_BETA`].
    pub fn cosine(steps: usize, offset: f64) -> Result<Self, ScheduleError> {
        check_steps(steps)?;
        let f = |t: f64| {
            let x = (t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let betas = (1..=steps)
            .map(|t| (1.0 - (f(t as f64) / f0) / (f((t - 1) as f64) / f0)).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self, ScheduleError> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps),
            ScheduleKind::Cosine => Self::cosine(steps, COSINE_OFFSET),
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<usize, ScheduleError> {
        if t == 0 || t > self.steps() {
            Err(ScheduleError::OutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn log_beta(&self, t: usize) -> f64 {
        self.log_betas[t - 1]
    }

    /// `log β̃_t`, with the `t = 1` entry clipped to `log β̃_2`.
    pub fn log_posterior_variance(&self, t: usize) -> f64 {
        self.log_posterior_var[t - 1]
    }

    /// Coefficients `(c0, ct)` of the forward-process posterior mean
    /// `μ̃_t = c0·y₀ + ct·y_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let b = self.beta(t);
        (
            b * ab_prev.sqrt() / (1.0 - ab),
            (1.0 - ab_prev) * self.alpha(t).sqrt() / (1.0 - ab),
        )
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Model timestep for step `t` of this chain.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t - 1]
    }

    pub fn model_steps(&self) -> usize {
        self.model_steps
    }
}

/// A schedule restricted to a subsequence of its parent's timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    pub parent_steps: usize,
    pub kept: Vec<usize>,
    pub schedule: NoiseSchedule,
}

/// Keep `kept` (1-based, strictly increasing) steps of `parent`, with
/// `β'_s = 1 − ᾱ_{t_s}/ᾱ_{t_{s−1}}`. The kept `ᾱ` values are copied, not
/// recomputed, so they equal the parent's bit for bit.
pub fn respace(parent: &NoiseSchedule, kept: &[usize]) -> Result<RespacedSchedule, ScheduleError> {
    if kept.is_empty() {
        return Err(ScheduleError::EmptyRespacing);
    }
    let steps = parent.steps();
    let valid = kept.windows(2).all(|w| w[0] < w[1]) && kept[0] >= 1 && *kept.last().unwrap() <= steps;
    if !valid {
        return Err(ScheduleError::BadRespacing {
            steps,
            found: kept.to_vec(),
        });
    }
    let alpha_bars: Vec<f64> = kept.iter().map(|&t| parent.alpha_bar(t)).collect();
    let mut prev = 1.0;
    let betas = alpha_bars
        .iter()
        .map(|&ab| {
            let b = 1.0 - ab / prev;
            prev = ab;
            b
        })
        .collect();
    let model_timesteps = kept.iter().map(|&t| parent.model_timestep(t)).collect();
    Ok(RespacedSchedule {
        parent_steps: steps,
        kept: kept.to_vec(),
        schedule: NoiseSchedule::from_tables(betas, alpha_bars, model_timesteps, parent.model_steps()),
    })
}

/// `count` evenly strided timesteps in `[1, steps]`, always including both
/// ends when `count ≥ 2`; a single step keeps only `steps`.
pub fn even_stride(steps: usize, count: usize) -> Result<Vec<usize>, ScheduleError> {
    if count == 0 {
        return Err(ScheduleError::EmptyRespacing);
    }
    if count > steps {
        return Err(ScheduleError::BadRespacing {
            steps,
            found: vec![count],
        });
    }
    if count == 1 {
        return Ok(vec![steps]);
    }
    let stride = (steps - 1) as f64 / (count - 1) as f64;
    Ok((0..count)
        .map(|i| 1 + (i as f64 * stride).round() as usize)
        .collect())
}

/// Respacing argument: either a step count (`"100"`) or an explicit comma
/// separated list of timesteps (`"1,10,250"`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Respacing {
    Count(usize),
    Explicit(Vec<usize>),
}

impl Respacing {
    pub fn parse(s: &str) -> Result<Self, ScheduleError> {
        let s = s.trim();
        let bad = || ScheduleError::Parse(s.chars().take(64).collect());
        if s.is_empty() {
            return Err(bad());
        }
        if s.contains(',') {
            let list = s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Self::Explicit(list))
        } else {
            s.parse::<usize>().map(Self::Count).map_err(|_| bad())
        }
    }

    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>, ScheduleError> {
        match self {
            Self::Count(n) => even_stride(steps, *n),
            Self::Explicit(list) => Ok(list.clone()),
        }
    }

    pub fn apply(&self, parent: &NoiseSchedule) -> Result<RespacedSchedule, ScheduleError> {
        respace(parent, &self.timesteps(parent.steps())?)
    }
}

impl std::fmt::Display for Respacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Count(n) => write!(f, "{n}"),
            Self::Explicit(list) => {
                let parts: Vec<String> = list.iter().map(|t| t.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}
