//! Cardiac-like short-axis phantoms and appearance shifts.
//!
//! A case is a left-ventricular blood pool (disk) wrapped in a myocardial
//! annulus, with a right-ventricular crescent formed by a larger offset disk
//! minus the epicardial disk. Image intensities are rendered with 4×4
//! supersampling so edges are antialiased; labels take the class at each
//! pixel centre.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CaseRecord, Class, DomainTag, Grid2D, GridError, LabelMap, Spacing};
use crate::rng::SeededRng;

const SUPERSAMPLE: usize = 4;
const GEOMETRY_STREAM: u32 = 1;
const STYLE_STREAM: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    Params(String),
    #[error("structures reach {reach:.1} px from the centre but only {room:.1} px fit")]
    Overflow { reach: f64, room: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Closed interval sampled uniformly per case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut SeededRng) -> f64 {
        rng.uniform_range(self.lo, self.hi)
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Per-tissue base intensities on the 0–255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub background: f64,
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
}

impl TissueIntensities {
    fn of(&self, c: Class) -> f64 {
        match c {
            Class::Background => self.background,
            Class::Lv => self.lv,
            Class::Myo => self.myo,
            Class::Rv => self.rv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub size: usize,
    pub spacing_mm: f64,
    /// Offset of the LV centre from the grid centre, per axis (pixels).
    pub centre_jitter: Range,
    pub lv_radius: Range,
    pub myo_thickness: Range,
    /// Distance of the RV disk centre from the LV centre, as a fraction of
    /// the epicardial radius; larger values give a narrower crescent.
    pub rv_offset: Range,
    /// Direction of the RV relative to the LV (radians, 0 = +x).
    pub rv_angle: Range,
    /// How far the RV disk extends past the epicardium (pixels).
    pub rv_thickness: Range,
    pub intensities: TissueIntensities,
    /// Per-case additive jitter applied to every tissue intensity.
    pub intensity_jitter: Range,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 64,
            spacing_mm: 1.5,
            centre_jitter: Range::new(-2.5, 2.5),
            lv_radius: Range::new(5.5, 7.5),
            myo_thickness: Range::new(3.0, 4.0),
            rv_offset: Range::new(0.85, 1.0),
            rv_angle: Range::new(PI - 0.35, PI + 0.35),
            rv_thickness: Range::new(3.5, 5.5),
            intensities: TissueIntensities {
                background: 40.0,
                lv: 200.0,
                myo: 90.0,
                rv: 170.0,
            },
            intensity_jitter: Range::new(-8.0, 8.0),
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let ranges = [
            self.centre_jitter,
            self.lv_radius,
            self.myo_thickness,
            self.rv_offset,
            self.rv_angle,
            self.rv_thickness,
            self.intensity_jitter,
        ];
        if ranges.iter().any(|r| !r.valid()) {
            return Err(PhantomError::Params("every range needs finite lo <= hi".into()));
        }
        if self.size < 8 || self.size > 4096 {
            return Err(PhantomError::Params(format!("size {} outside [8, 4096]", self.size)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(PhantomError::Params("spacing must be positive".into()));
        }
        if self.lv_radius.lo <= 0.0 || self.myo_thickness.lo <= 1.5 || self.rv_thickness.lo <= 0.0 || self.rv_offset.lo < 0.0 {
            return Err(PhantomError::Params(
                "radii and thicknesses must be positive (myocardium thicker than 1.5 px)".into(),
            ));
        }
        if self.rv_offset.lo * (self.lv_radius.lo + self.myo_thickness.lo) <= self.rv_thickness.hi {
            return Err(PhantomError::Params("RV disk would enclose the whole ventricle".into()));
        }
        let i = &self.intensities;
        let (jlo, jhi) = (self.intensity_jitter.lo, self.intensity_jitter.hi);
        for v in [i.background, i.lv, i.myo, i.rv] {
            if !(v + jlo >= 0.0 && v + jhi <= 255.0) {
                return Err(PhantomError::Params(format!("intensity {v} leaves [0, 255] under jitter")));
            }
        }
        let epi = self.lv_radius.hi + self.myo_thickness.hi;
        let reach = self.centre_jitter.lo.abs().max(self.centre_jitter.hi.abs())
            + self.rv_offset.hi * epi
            + epi
            + self.rv_thickness.hi;
        let room = self.size as f64 / 2.0 - 1.0;
        if reach > room {
            return Err(PhantomError::Overflow { reach, room });
        }
        Ok(())
    }
}

/// Appearance transform applied to a rendered phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub gamma: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    #[serde(default)]
    pub blur_radius: f64,
    pub domain: DomainTag,
}

impl DomainStyle {
    pub fn identity(domain: DomainTag) -> Self {
        Self {
            gamma: 1.0,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            blur_radius: 0.0,
            domain,
        }
    }

    pub fn source() -> Self {
        Self {
            gamma: 1.0,
            noise_sigma: 4.0,
            bias_amplitude: 0.1,
            blur_radius: 0.0,
            domain: DomainTag::SourceA,
        }
    }

    pub fn target() -> Self {
        Self {
            gamma: 0.7,
            noise_sigma: 10.0,
            bias_amplitude: 0.3,
            blur_radius: 0.0,
            domain: DomainTag::TargetB,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let ok = self.gamma > 0.0
            && self.gamma.is_finite()
            && self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && (0.0..1.0).contains(&self.bias_amplitude)
            && self.blur_radius >= 0.0
            && self.blur_radius <= 64.0;
        if ok {
            Ok(())
        } else {
            Err(PhantomError::Params(
                "style needs gamma > 0, noise >= 0, bias amplitude in [0, 1), blur in [0, 64]".into(),
            ))
        }
    }
}

struct Geometry {
    c: (f64, f64),
    r_lv: f64,
    r_epi: f64,
    c_rv: (f64, f64),
    r_rv: f64,
}

impl Geometry {
    fn sample(p: &PhantomParams, rng: &mut SeededRng) -> Self {
        let mid = p.size as f64 / 2.0;
        let c = (mid + p.centre_jitter.sample(rng), mid + p.centre_jitter.sample(rng));
        let r_lv = p.lv_radius.sample(rng);
        let r_epi = r_lv + p.myo_thickness.sample(rng);
        let offset = p.rv_offset.sample(rng) * r_epi;
        let angle = p.rv_angle.sample(rng);
        let c_rv = (c.0 + offset * angle.cos(), c.1 + offset * angle.sin());
        let r_rv = r_epi + p.rv_thickness.sample(rng);
        Self {
            c,
            r_lv,
            r_epi,
            c_rv,
            r_rv,
        }
    }

    fn class_at(&self, x: f64, y: f64) -> Class {
        let d2 = (x - self.c.0).powi(2) + (y - self.c.1).powi(2);
        if d2 <= self.r_lv * self.r_lv {
            Class::Lv
        } else if d2 <= self.r_epi * self.r_epi {
            Class::Myo
        } else if (x - self.c_rv.0).powi(2) + (y - self.c_rv.1).powi(2) <= self.r_rv * self.r_rv {
            Class::Rv
        } else {
            Class::Background
        }
    }
}

/// Render one clean (unstyled) case; pixel `(i, j)` covers `[i, i+1)×[j, j+1)`.
pub fn generate_phantom(params: &PhantomParams, rng: &mut SeededRng) -> Result<(Grid2D, LabelMap), PhantomError> {
    params.validate()?;
    let g = Geometry::sample(params, rng);
    let mut tissue = params.intensities;
    for v in [&mut tissue.background, &mut tissue.lv, &mut tissue.myo, &mut tissue.rv] {
        *v += params.intensity_jitter.sample(rng);
    }
    let n = params.size;
    let mut image = Vec::with_capacity(n * n);
    let mut labels = Vec::with_capacity(n * n);
    let step = 1.0 / SUPERSAMPLE as f64;
    for j in 0..n {
        for i in 0..n {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = i as f64 + (sx as f64 + 0.5) * step;
                    let y = j as f64 + (sy as f64 + 0.5) * step;
                    acc += tissue.of(g.class_at(x, y));
                }
            }
            image.push((acc / (SUPERSAMPLE * SUPERSAMPLE) as f64) as f32);
            labels.push(g.class_at(i as f64 + 0.5, j as f64 + 0.5).id());
        }
    }
    let spacing = Spacing::isotropic(params.spacing_mm)?;
    Ok((Grid2D::from_vec(n, n, spacing, image)?, LabelMap::from_vec(n, n, spacing, labels)?))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(data: &mut [f64], w: usize, h: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(o, kv)| kv * data[y * w + (x as i64 + o as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(o, kv)| kv * tmp[(y as i64 + o as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
}

/// Gamma, then a smooth multiplicative bias field `1 + a·b(x, y)` with
/// `|b| ≤ 1`, then additive Gaussian noise, optional blur, and clipping to
/// `[0, 255]`.
pub fn apply_style(img: &Grid2D, style: &DomainStyle, rng: &mut SeededRng) -> Result<Grid2D, PhantomError> {
    style.validate()?;
    let (w, h) = img.shape();
    let k1 = rng.uniform_range(0.5, 1.0);
    let k2 = rng.uniform_range(0.5, 1.0);
    let p1 = rng.uniform();
    let p2 = rng.uniform();
    let mut out: Vec<f64> = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            let b = 0.5 * (2.0 * PI * (k1 * x + p1)).cos() + 0.5 * (2.0 * PI * (k2 * y + p2)).cos();
            let v = 255.0 * (v.clamp(0.0, 255.0) as f64 / 255.0).powf(style.gamma);
            v * (1.0 + style.bias_amplitude * b)
        })
        .collect();
    if style.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            *v += style.noise_sigma * rng.normal();
        }
    }
    if style.blur_radius > 0.0 {
        blur(&mut out, w, h, style.blur_radius);
    }
    let data = out.into_iter().map(|v| v.clamp(0.0, 255.0) as f32).collect();
    Ok(Grid2D::from_vec(w, h, img.spacing(), data)?)
}

fn subject_prefix(tag: DomainTag) -> &'static str {
    match tag {
        DomainTag::SourceA => "src",
        DomainTag::TargetB => "tgt",
        DomainTag::SyntheticA => "syn",
        DomainTag::AdaptedB => "adp",
    }
}

/// One styled case; geometry and style draw from separate streams keyed by
/// `(seed, index)`, so two styles with the same seed share anatomy.
pub fn generate_case(
    params: &PhantomParams,
    style: &DomainStyle,
    seed: u64,
    index: u32,
) -> Result<CaseRecord, PhantomError> {
    let (clean, labels) = generate_phantom(params, &mut SeededRng::derive(seed, GEOMETRY_STREAM, index))?;
    let image = apply_style(&clean, style, &mut SeededRng::derive(seed, STYLE_STREAM, index))?;
    let id = format!("{}-{seed}-{index:04}", subject_prefix(style.domain));
    Ok(CaseRecord::new(image, labels, id, style.domain)?)
}

pub fn generate_dataset(
    n: usize,
    params: &PhantomParams,
    style: &DomainStyle,
    seed: u64,
) -> Result<Vec<CaseRecord>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::Params("dataset size must be at least 1".into()));
    }
    if n > u32::MAX as usize {
        return Err(PhantomError::Params("dataset too large".into()));
    }
    (0..n as u32).map(|i| generate_case(params, style, seed, i)).collect()
}
