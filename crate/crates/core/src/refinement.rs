//! Reference-guided iterative refinement.
//!
//! A reference image is corrupted to step `N` with the forward process and
//! then denoised back to step 0. After every unconditional proposal the
//! sample is nudged along the negative gradient of
//! `‖φ_D(y₀) − φ_D(ŷ₀)‖₂`, where `φ_D` keeps only the `D×D` block means of an
//! image and `ŷ₀` is the clean-image estimate at the current step. Large
//! `D` constrains only coarse structure; large `τ` pulls harder.
//!
//! The gradient treats the denoiser output as constant, so
//! `∂ŷ₀/∂y_t = 1/√ᾱ_t` and no network backward pass is needed.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{predict_x0, reverse_step_with_output, Denoiser, EngineError};
use crate::grid::{Grid, Grid2D, GridError};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinementError {
    #[error("scale factor D = {d} must be >= 1 and divide the {width}x{height} grid")]
    BadScale { d: usize, width: usize, height: usize },
    #[error("diffusion range N = {n} outside [1, {steps}]")]
    BadRange { n: usize, steps: usize },
    #[error("guidance strength must be finite and non-negative, got {0}")]
    BadStrength(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `(N, D, τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Diffusion range: forward corruption depth and first reverse step,
    /// counted on the sampling schedule's own index space.
    pub range: usize,
    /// Low-pass block size.
    pub scale: usize,
    /// Guidance strength.
    pub strength: f64,
    /// Keep `ŷ₀` snapshots every this many steps in the trace (0 = none).
    #[serde(default)]
    pub snapshot_every: usize,
    /// Clamp the final image to `[-1, 1]`.
    #[serde(default = "yes")]
    pub clamp_output: bool,
}

fn yes() -> bool {
    true
}

impl RefinementConfig {
    pub fn new(range: usize, scale: usize, strength: f64) -> Self {
        Self {
            range,
            scale,
            strength,
            snapshot_every: 0,
            clamp_output: true,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule, width: usize, height: usize) -> Result<(), RefinementError> {
        check_scale(self.scale, width, height)?;
        if self.range == 0 || self.range > sched.steps() {
            return Err(RefinementError::BadRange {
                n: self.range,
                steps: sched.steps(),
            });
        }
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(RefinementError::BadStrength(self.strength));
        }
        Ok(())
    }
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self::new(25, 2, 6.0)
    }
}

fn check_scale(d: usize, width: usize, height: usize) -> Result<(), RefinementError> {
    if d == 0 || width % d != 0 || height % d != 0 {
        return Err(RefinementError::BadScale { d, width, height });
    }
    Ok(())
}

/// `φ_D`: replace every `D×D` block by its mean. Block sums accumulate in
/// 64-bit.
pub fn lowpass<T: Float>(img: &Grid<T>, d: usize) -> Result<Grid<T>, RefinementError> {
    let (w, h) = img.shape();
    check_scale(d, w, h)?;
    if d == 1 {
        return Ok(img.clone());
    }
    let (bw, bh) = (w / d, h / d);
    let mut means = vec![0.0f64; bw * bh];
    for y in 0..h {
        let row = &img.data()[y * w..(y + 1) * w];
        let out = &mut means[(y / d) * bw..(y / d + 1) * bw];
        for (x, v) in row.iter().enumerate() {
            out[x / d] += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    let inv = (d * d) as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let block_row = &means[(y / d) * bw..(y / d + 1) * bw];
        data.extend((0..w).map(|x| T::from(block_row[x / d] / inv).expect("finite block mean")));
    }
    Ok(img.with_data(data))
}

/// `φ_D(y₀)` for a fixed reference. Holding only the filtered image means
/// the sampler cannot read the reference at full resolution.
#[derive(Debug, Clone)]
pub struct FilteredReference {
    scale: usize,
    filtered: Grid2D,
}

impl FilteredReference {
    pub fn new(reference: &Grid2D, scale: usize) -> Result<Self, RefinementError> {
        Ok(Self {
            scale,
            filtered: lowpass(reference, scale)?,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn image(&self) -> &Grid2D {
        &self.filtered
    }

    /// `r = φ_D(y₀) − φ_D(x̂₀)`, in 64-bit.
    pub fn residual(&self, x0_hat: &Grid2D) -> Result<Grid<f64>, RefinementError> {
        let fx = lowpass(&x0_hat.to_f64(), self.scale)?;
        Ok(self.filtered.to_f64().zip_map(&fx, |a, b| a - b)?)
    }

    /// `∇_{y_t} ‖r‖₂` with the denoiser output held fixed, together with
    /// `‖r‖₂`. Zero when the residual vanishes.
    pub fn gradient(
        &self,
        x0_hat: &Grid2D,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Grid2D, f64), RefinementError> {
        sched.check(t).map_err(EngineError::from)?;
        let r = self.residual(x0_hat)?;
        let norm = r.l2_norm();
        if norm < 1e-12 {
            return Ok((x0_hat.map(|_| 0.0), norm));
        }
        let pr = lowpass(&r, self.scale)?;
        let coef = -1.0 / (sched.alpha_bar(t).sqrt() * norm);
        let g = pr.map(|v| coef * v).to_f32();
        Ok((g, norm))
    }
}

/// Gradient of `‖φ_D(y0_ref) − φ_D(x0_hat)‖₂` with respect to `y_t` under
/// the frozen-denoiser approximation.
pub fn guidance_gradient(
    y_t: &Grid2D,
    y0_ref: &Grid2D,
    x0_hat: &Grid2D,
    t: usize,
    sched: &NoiseSchedule,
    scale: usize,
) -> Result<Grid2D, RefinementError> {
    y_t.check_shape(y0_ref)?;
    y_t.check_shape(x0_hat)?;
    let reference = FilteredReference::new(y0_ref, scale)?;
    Ok(reference.gradient(x0_hat, t, sched)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: usize,
    pub model_t: usize,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationTrace {
    pub records: Vec<TraceRecord>,
    /// `(t, ŷ₀)` pairs when snapshots were requested.
    pub snapshots: Vec<(usize, Grid2D)>,
}

impl AdaptationTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,model_t,residual_norm\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.9e}\n", r.t, r.model_t, r.residual_norm));
        }
        s
    }
}

/// Adapt `y0_ref` with reference-guided sampling.
///
/// RNG order: the forward corruption to step `N`, then one proposal per
/// step from `N` down to 1. With `τ = 0` this is exactly
/// [`crate::engine::ancestral_sample`] started from the corrupted reference.
pub fn adapt<D: Denoiser + ?Sized>(
    y0_ref: &Grid2D,
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &RefinementConfig,
    rng: &mut SeededRng,
) -> Result<(Grid2D, AdaptationTrace), RefinementError> {
    cfg.validate(sched, y0_ref.width(), y0_ref.height())?;
    let (mut y, _) = crate::engine::forward_sample(y0_ref, cfg.range, sched, rng)?;
    let reference = FilteredReference::new(y0_ref, cfg.scale)?;
    let mut trace = AdaptationTrace::default();
    for t in (1..=cfg.range).rev() {
        let (proposal, out) = reverse_step_with_output(&y, t, denoiser, sched, rng)?;
        let x0_hat = predict_x0(&y, &out.eps_hat, t, sched, false)?;
        let (grad, residual_norm) = reference.gradient(&x0_hat, t, sched)?;
        trace.records.push(TraceRecord {
            t,
            model_t: sched.model_timestep(t),
            residual_norm,
        });
        if cfg.snapshot_every > 0 && (t % cfg.snapshot_every == 0 || t == 1) {
            trace.snapshots.push((t, x0_hat));
        }
        let tau = cfg.strength;
        y = proposal.zip_map(&grad, |p, g| (p as f64 - tau * g as f64) as f32)?;
        if y.data().iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite(t).into());
        }
    }
    if cfg.clamp_output {
        y = y.map(|v| v.clamp(-1.0, 1.0));
    }
    Ok((y, trace))
}
