//! Unconditional sampling and the `(D, τ)` sweep over reference-guided
//! sampling.

use refdiff_core::engine::ancestral_sample;
use refdiff_core::grid::sample_gaussian_grid;
use refdiff_core::io::mosaic;
use refdiff_core::{adapt, Denoiser, Grid2D, NoiseSchedule, RefinementConfig, SeededRng, Spacing};
use serde::Serialize;

use crate::error::Result;

pub const SWEEP_SCALES: [usize; 5] = [1, 2, 4, 16, 32];
pub const SWEEP_STRENGTHS: [f64; 4] = [1.0, 6.0, 18.0, 24.0];

/// Draw `n` images by running the full reverse chain from pure noise.
/// Sample `i` uses its own stream, so the set is independent of `n`.
pub fn sample_images<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Grid2D>> {
    (0..n)
        .map(|i| {
            let mut rng = SeededRng::derive(seed, 3, i as u32);
            let init = sample_gaussian_grid(size, size, Spacing::default(), &mut rng)?;
            Ok(ancestral_sample(model, sched, sched.steps(), &init, &mut rng, true)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub reference: String,
    pub scale: usize,
    pub strength: f64,
    /// `‖φ_D(y₀) − φ_D(ŷ₀)‖₂` at the last step.
    pub final_residual: f64,
    /// `‖y₀ − x₀‖₂` between the reference and the output.
    pub reference_distance: f64,
}

/// Adapt one reference at every `(D, τ)` pair with the same seed. Returns
/// the rows and a mosaic with one row per `D`: the reference, then one tile
/// per `τ`.
pub fn sweep_reference<D: Denoiser + ?Sized>(
    name: &str,
    reference: &Grid2D,
    model: &D,
    sched: &NoiseSchedule,
    range: usize,
    scales: &[usize],
    strengths: &[f64],
    seed: u64,
) -> Result<(Vec<SweepRow>, Grid2D)> {
    let mut rows = Vec::new();
    let mut tiles = Vec::new();
    for &d in scales {
        tiles.push(reference.clone());
        for &tau in strengths {
            let cfg = RefinementConfig::new(range, d, tau);
            let (out, trace) = adapt(reference, model, sched, &cfg, &mut SeededRng::new(seed))?;
            let diff = out.zip_map(reference, |a, b| a - b)?;
            rows.push(SweepRow {
                reference: name.to_string(),
                scale: d,
                strength: tau,
                final_residual: trace.records.last().map_or(0.0, |r| r.residual_norm),
                reference_distance: diff.l2_norm(),
            });
            tiles.push(out);
        }
    }
    let grid = mosaic(&tiles, strengths.len() + 1).expect("tiles share a shape");
    Ok((rows, grid))
}

/// Block sizes from `scales` that divide an image of side `size`.
pub fn usable_scales(scales: &[usize], size: usize) -> Vec<usize> {
    scales.iter().copied().filter(|&d| d > 0 && size % d == 0).collect()
}
