//! Scalar images, label maps and the preprocessing applied before they
//! reach the diffusion model or a segmenter.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {width}x{height}")]
    EmptyShape { width: usize, height: usize },
    #[error("data length {len} does not match {width}x{height}")]
    LengthMismatch { width: usize, height: usize, len: usize },
    #[error("spacing components must be positive and finite, got ({0}, {1})")]
    BadSpacing(f64, f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("label value {value} at index {index} is not a known class")]
    BadLabel { index: usize, value: u8 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch(Spacing, Spacing),
    #[error("percentile bounds must satisfy 0 <= lo < hi <= 100, got {lo} and {hi}")]
    BadPercentiles { lo: f64, hi: f64 },
}

/// Physical pixel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
}

impl Spacing {
    pub fn new(sx: f64, sy: f64) -> Result<Self, GridError> {
        if sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite() {
            Ok(Self { sx, sy })
        } else {
            Err(GridError::BadSpacing(sx, sy))
        }
    }

    pub fn isotropic(s: f64) -> Result<Self, GridError> {
        Self::new(s, s)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self { sx: 1.0, sy: 1.0 }
    }
}

/// Row-major 2D scalar field with physical spacing.
///
/// `Grid2D` (32-bit storage) is what flows between modules and is what the
/// file formats persist. The 64-bit instantiation is used where exact
/// algebraic properties are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    spacing: Spacing,
    data: Vec<T>,
}

pub type Grid2D = Grid<f32>;

impl<T: Float> Grid<T> {
    pub fn from_vec(
        width: usize,
        height: usize,
        spacing: Spacing,
        data: Vec<T>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyShape { width, height });
        }
        if data.len() != width * height {
            return Err(GridError::LengthMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: Spacing, value: T) -> Result<Self, GridError> {
        Self::from_vec(width, height, spacing, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize, spacing: Spacing) -> Result<Self, GridError> {
        Self::filled(width, height, spacing, T::zero())
    }

    /// Grid of the same shape and spacing as `self` with new data.
    ///
    /// Panics if the length differs; callers derive `data` from `self`.
    pub(crate) fn with_data(&self, data: Vec<T>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self, GridError> {
        self.check_shape(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn check_shape<U>(&self, other: &Grid<U>) -> Result<(), GridError> {
        if self.shape() != (other.width, other.height) {
            return Err(GridError::ShapeMismatch(
                self.shape(),
                (other.width, other.height),
            ));
        }
        Ok(())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Euclidean norm accumulated in 64-bit.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

impl Grid2D {
    pub fn to_f64(&self) -> Grid<f64> {
        Grid {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl Grid<f64> {
    pub fn to_f32(&self) -> Grid2D {
        Grid {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Anatomical classes of the label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Lv = 1,
    Myo = 2,
    Rv = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Background, Class::Lv, Class::Myo, Class::Rv];
    pub const FOREGROUND: [Class; 3] = [Class::Lv, Class::Myo, Class::Rv];
    pub const COUNT: usize = 4;

    pub fn from_id(id: u8) -> Option<Class> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Lv => "LV",
            Class::Myo => "MYO",
            Class::Rv => "RV",
        }
    }
}

/// Per-pixel class map sharing the geometry conventions of [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    spacing: Spacing,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(
        width: usize,
        height: usize,
        spacing: Spacing,
        data: Vec<u8>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyShape { width, height });
        }
        if data.len() != width * height {
            return Err(GridError::LengthMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|&v| Class::from_id(v).is_none()) {
            return Err(GridError::BadLabel {
                index,
                value: data[index],
            });
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn background(width: usize, height: usize, spacing: Spacing) -> Result<Self, GridError> {
        Self::from_vec(width, height, spacing, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Class {
        Class::from_id(self.data[y * self.width + x]).expect("validated on construction")
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: Class) -> Vec<bool> {
        self.data.iter().map(|&v| v == class.id()).collect()
    }

    pub fn count(&self, class: Class) -> usize {
        self.data.iter().filter(|&&v| v == class.id()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    SourceA,
    TargetB,
    SyntheticA,
    AdaptedB,
}

/// One image with its labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub image: Grid2D,
    pub labels: LabelMap,
    pub subject_id: String,
    pub domain_tag: DomainTag,
}

impl CaseRecord {
    pub fn new(
        image: Grid2D,
        labels: LabelMap,
        subject_id: impl Into<String>,
        domain_tag: DomainTag,
    ) -> Result<Self, GridError> {
        if image.shape() != labels.shape() {
            return Err(GridError::ShapeMismatch(image.shape(), labels.shape()));
        }
        if image.spacing() != labels.spacing() {
            return Err(GridError::SpacingMismatch(image.spacing(), labels.spacing()));
        }
        Ok(Self {
            image,
            labels,
            subject_id: subject_id.into(),
            domain_tag,
        })
    }

    /// Same labels and id, different image; used by adaptation and styling.
    pub fn with_image(&self, image: Grid2D, domain_tag: DomainTag) -> Result<Self, GridError> {
        Self::new(image, self.labels.clone(), self.subject_id.clone(), domain_tag)
    }
}

/// Nearest-rank percentile of an already sorted sample.
///
/// The rank is `ceil(p/100 * n)` clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBounds {
    pub lo: f64,
    pub hi: f64,
}

/// Output of [`clip_rescale`]. `degenerate` is set when the two percentile
/// values coincide and the result was forced to zero.
#[derive(Debug, Clone)]
pub struct Rescaled {
    pub grid: Grid2D,
    pub bounds: ClipBounds,
    pub degenerate: bool,
}

pub const DEFAULT_CLIP_LO: f64 = 0.5;
pub const DEFAULT_CLIP_HI: f64 = 99.5;

/// Clip intensities to the `[lo_pct, hi_pct]` percentile window and map the
/// window linearly onto `[0, 255]`.
pub fn clip_rescale(img: &Grid2D, lo_pct: f64, hi_pct: f64) -> Result<Rescaled, GridError> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(GridError::BadPercentiles {
            lo: lo_pct,
            hi: hi_pct,
        });
    }
    let mut sorted: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, lo_pct);
    let hi = nearest_rank(&sorted, hi_pct);
    let bounds = ClipBounds { lo, hi };
    if hi <= lo {
        log::warn!("clip_rescale: degenerate percentile window at {lo}; returning zeros");
        return Ok(Rescaled {
            grid: img.map(|_| 0.0),
            bounds,
            degenerate: true,
        });
    }
    let scale = 255.0 / (hi - lo);
    let grid = img.map(|v| ((v as f64 - lo) * scale).clamp(0.0, 255.0) as f32);
    Ok(Rescaled {
        grid,
        bounds,
        degenerate: false,
    })
}

/// `[0, 255]` → `[-1, 1]`.
pub fn normalize_unit(img: &Grid2D) -> Grid2D {
    img.map(|v| (v as f64 / 127.5 - 1.0) as f32)
}

/// `[-1, 1]` → `[0, 255]`.
pub fn denormalize_unit(img: &Grid2D) -> Grid2D {
    img.map(|v| ((v as f64 + 1.0) * 127.5) as f32)
}

/// Preprocessing shared by every network input: percentile clip to
/// `[0, 255]` followed by the map to `[-1, 1]`.
pub fn preprocess(img: &Grid2D, lo_pct: f64, hi_pct: f64) -> Result<Grid2D, GridError> {
    Ok(normalize_unit(&clip_rescale(img, lo_pct, hi_pct)?.grid))
}

/// Grid of i.i.d. standard normal deviates drawn in row-major order.
pub fn sample_gaussian_grid(
    width: usize,
    height: usize,
    spacing: Spacing,
    rng: &mut SeededRng,
) -> Result<Grid2D, GridError> {
    if width == 0 || height == 0 {
        return Err(GridError::EmptyShape { width, height });
    }
    let data = (0..width * height).map(|_| rng.normal() as f32).collect();
    Grid2D::from_vec(width, height, spacing, data)
}
