//! Forward corruption, the reverse proposal and ancestral sampling.
//!
//! RNG consumption order: [`forward_sample`] draws one normal per pixel in
//! row-major order; [`reverse_step`] evaluates the denoiser first and then
//! draws one normal per pixel, except at `t = 1` where it draws nothing.

use num_traits::Float;
use thiserror::Error;

use crate::grid::{Grid, Grid2D, GridError};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error("non-finite sample at step {0}")]
    NonFinite(usize),
}

/// Predicted noise and, for learned-variance models, the per-pixel
/// interpolation weight between `log β_t` (at 1) and `log β̃_t` (at 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Grid2D,
    pub var_logits: Option<Grid2D>,
}

/// Noise predictor `g(y, w, t)`.
///
/// `t` indexes `sched`; implementations that were trained on a different
/// step count read [`NoiseSchedule::model_timestep`]. Evaluation must be
/// deterministic and safe to call concurrently.
pub trait Denoiser: Sync {
    fn evaluate(&self, y_t: &Grid2D, t: usize, sched: &NoiseSchedule) -> Result<DenoiserOutput, EngineError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn evaluate(&self, y_t: &Grid2D, t: usize, sched: &NoiseSchedule) -> Result<DenoiserOutput, EngineError> {
        (**self).evaluate(y_t, t, sched)
    }
}

/// `√ᾱ·y₀ + √(1−ᾱ)·ε`.
pub fn q_sample<T: Float>(y0: &Grid<T>, alpha_bar: f64, eps: &Grid<T>) -> Result<Grid<T>, GridError> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y0.zip_map(eps, |x, e| T::from(a * f64(x) + b * f64(e)).expect("float"))
}

fn f64<T: Float>(v: T) -> f64 {
    v.to_f64().expect("float")
}

/// Sample `y_t ~ q(y_t | y₀)`; returns `(y_t, ε)`.
pub fn forward_sample(
    y0: &Grid2D,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(Grid2D, Grid2D), EngineError> {
    sched.check(t)?;
    let eps = y0.map(|_| rng.normal() as f32);
    Ok((q_sample(y0, sched.alpha_bar(t), &eps)?, eps))
}

/// `ŷ₀ = √(1/ᾱ_t)·y_t − √(1/ᾱ_t − 1)·ε̂`, optionally clamped to `[-1, 1]`.
pub fn predict_x0<T: Float>(
    y_t: &Grid<T>,
    eps_hat: &Grid<T>,
    t: usize,
    sched: &NoiseSchedule,
    clamp: bool,
) -> Result<Grid<T>, EngineError> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = ((1.0 / ab).sqrt(), (1.0 / ab - 1.0).sqrt());
    Ok(y_t.zip_map(eps_hat, |y, e| {
        let x = a * f64(y) - b * f64(e);
        T::from(if clamp { x.clamp(-1.0, 1.0) } else { x }).expect("float")
    })?)
}

/// Per-pixel reverse-step variance interpolated in log space between `β̃_t`
/// (weight 0) and `β_t` (weight 1). `None` when the model has no variance
/// channel, in which case the step uses the fixed `β̃_t`.
pub fn step_variance(out: &DenoiserOutput, t: usize, sched: &NoiseSchedule) -> Option<Vec<f64>> {
    let v = out.var_logits.as_ref()?;
    let (lb, lp) = (sched.log_beta(t), sched.log_posterior_variance(t));
    Some(
        v.data()
            .iter()
            .map(|&v| {
                let v = (v as f64).clamp(0.0, 1.0);
                (v * lb + (1.0 - v) * lp).exp()
            })
            .collect(),
    )
}

/// Mean of `p_θ(y_{t−1} | y_t)`: `(1/√α_t)(y_t − β_t/√(1−ᾱ_t)·ε̂)`.
pub fn reverse_mean(y_t: &Grid2D, eps_hat: &Grid2D, t: usize, sched: &NoiseSchedule) -> Result<Grid2D, EngineError> {
    sched.check(t)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(y_t.zip_map(eps_hat, |y, e| (inv * (y as f64 - coef * e as f64)) as f32)?)
}

/// One unconditional proposal `y_{t−1} ~ p_θ(· | y_t)`, also returning the
/// denoiser output it was built from.
pub fn reverse_step_with_output<D: Denoiser + ?Sized>(
    y_t: &Grid2D,
    t: usize,
    denoiser: &D,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(Grid2D, DenoiserOutput), EngineError> {
    sched.check(t)?;
    let out = denoiser.evaluate(y_t, t, sched)?;
    out.eps_hat.check_shape(y_t)?;
    let mean = reverse_mean(y_t, &out.eps_hat, t, sched)?;
    if t == 1 {
        return Ok((mean, out));
    }
    let sample = match step_variance(&out, t, sched) {
        Some(var) => {
            let data = mean
                .data()
                .iter()
                .zip(&var)
                .map(|(&m, &v)| (m as f64 + v.sqrt() * rng.normal()) as f32)
                .collect();
            mean.with_data(data)
        }
        None => {
            let sd = sched.posterior_variance(t).sqrt();
            mean.map(|m| (m as f64 + sd * rng.normal()) as f32)
        }
    };
    if sample.data().iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite(t));
    }
    Ok((sample, out))
}

pub fn reverse_step<D: Denoiser + ?Sized>(
    y_t: &Grid2D,
    t: usize,
    denoiser: &D,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Grid2D, EngineError> {
    reverse_step_with_output(y_t, t, denoiser, sched, rng).map(|(s, _)| s)
}

/// Run the reverse chain from `from_t` down to 1 starting at `init`.
/// `from_t = 0` returns `init`. With `clamp_output` the result is clamped to
/// the working range `[-1, 1]`.
pub fn ancestral_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    from_t: usize,
    init: &Grid2D,
    rng: &mut SeededRng,
    clamp_output: bool,
) -> Result<Grid2D, EngineError> {
    if from_t > sched.steps() {
        return Err(ScheduleError::OutOfRange {
            t: from_t,
            steps: sched.steps(),
        }
        .into());
    }
    let mut y = init.clone();
    for t in (1..=from_t).rev() {
        y = reverse_step(&y, t, denoiser, sched, rng)?;
    }
    if clamp_output && from_t > 0 {
        y = y.map(|v| v.clamp(-1.0, 1.0));
    }
    Ok(y)
}

/// One isotropic Gaussian component of the data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub mean: Grid<f64>,
    pub variance: f64,
    pub weight: f64,
}

/// Exact posterior-mean denoiser for a Gaussian-mixture data distribution.
#[derive(Debug, Clone)]
pub struct AnalyticGmm {
    components: Vec<GmmComponent>,
}

impl AnalyticGmm {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self, EngineError> {
        let first = components
            .first()
            .ok_or_else(|| EngineError::Denoiser("mixture needs at least one component".into()))?;
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &components {
            c.mean.check_shape(&first.mean)?;
            if !(c.weight > 0.0) || !(c.variance >= 0.0) {
                return Err(EngineError::Denoiser(
                    "component weights must be positive and variances non-negative".into(),
                ));
            }
        }
        let components = components
            .into_iter()
            .map(|c| GmmComponent {
                weight: c.weight / total,
                ..c
            })
            .collect();
        Ok(Self { components })
    }

    pub fn single(mean: Grid<f64>, variance: f64) -> Result<Self, EngineError> {
        Self::new(vec![GmmComponent {
            mean,
            variance,
            weight: 1.0,
        }])
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Component responsibilities for `y_t` at cumulative signal level `ab`.
    pub fn responsibilities(&self, y_t: &Grid2D, ab: f64) -> Vec<f64> {
        let n = y_t.len() as f64;
        let sa = ab.sqrt();
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let s = ab * c.variance + 1.0 - ab;
                let sq: f64 = y_t
                    .data()
                    .iter()
                    .zip(c.mean.data())
                    .map(|(&y, &m)| (y as f64 - sa * m).powi(2))
                    .sum();
                c.weight.ln() - 0.5 * n * (std::f64::consts::TAU * s).ln() - sq / (2.0 * s)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// `E[y₀ | y_t]` at cumulative signal level `ab`.
    pub fn posterior_mean(&self, y_t: &Grid2D, ab: f64) -> Grid<f64> {
        let r = self.responsibilities(y_t, ab);
        let sa = ab.sqrt();
        let mut acc = vec![0.0; y_t.len()];
        for (c, rk) in self.components.iter().zip(r) {
            let s = ab * c.variance + 1.0 - ab;
            for ((a, &y), &m) in acc.iter_mut().zip(y_t.data()).zip(c.mean.data()) {
                *a += rk * (sa * c.variance * y as f64 + (1.0 - ab) * m) / s;
            }
        }
        y_t.to_f64().with_data(acc)
    }

    pub fn eps(&self, y_t: &Grid2D, t: usize, sched: &NoiseSchedule) -> Result<DenoiserOutput, EngineError> {
        sched.check(t)?;
        y_t.check_shape(&self.components[0].mean)?;
        let ab = sched.alpha_bar(t);
        let e = self.posterior_mean(y_t, ab);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps = y_t
            .data()
            .iter()
            .zip(e.data())
            .map(|(&y, &m)| ((y as f64 - sa * m) / sb) as f32)
            .collect();
        Ok(DenoiserOutput {
            eps_hat: y_t.with_data(eps),
            var_logits: None,
        })
    }
}

impl Denoiser for AnalyticGmm {
    fn evaluate(&self, y_t: &Grid2D, t: usize, sched: &NoiseSchedule) -> Result<DenoiserOutput, EngineError> {
        self.eps(y_t, t, sched)
    }
}

/// Free-function form of [`AnalyticGmm::eps`].
pub fn analytic_eps(
    y_t: &Grid2D,
    t: usize,
    sched: &NoiseSchedule,
    gmm: &AnalyticGmm,
) -> Result<DenoiserOutput, EngineError> {
    gmm.eps(y_t, t, sched)
}
