//! Segmentation quality measures and the statistics used to compare them.

mod stats;
mod surface;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{histogram_divergence, summarize, welch_t_test, Summary, WelchResult};
pub use surface::{
    directed_distances, extract_surface, squared_distance_transform, summarize_distances, surface_metrics, Extent,
    Spacing3, SurfaceDistances, SurfacePointSet,
};

use crate::grid::{Class, LabelMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("mask has {got} voxels, extent needs {expected}")]
    Shape { expected: usize, got: usize },
    #[error("label maps differ in shape or spacing")]
    Mismatch,
    #[error("need at least two values per sample, got {nx} and {ny}")]
    InsufficientData { nx: usize, ny: usize },
    #[error("samples have zero combined variance")]
    ZeroVariance,
    #[error("non-finite sample value")]
    NonFinite,
    #[error("no defined values for {metric} / {class}")]
    AllUndefined { metric: &'static str, class: &'static str },
}

/// Why a metric value is not an ordinary measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    /// Both masks empty; overlap set to 1 by convention.
    BothEmpty,
    /// Exactly one mask empty; overlap is 0.
    OneEmpty,
    /// Surface distance with an empty surface; no value.
    Undefined,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::BothEmpty => "both_empty",
            Flag::OneEmpty => "one_empty",
            Flag::Undefined => "undefined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Value {
    pub value: Option<f64>,
    pub flag: Option<Flag>,
}

impl Value {
    fn plain(v: f64) -> Self {
        Self {
            value: Some(v),
            flag: None,
        }
    }

    /// Whether the value enters aggregates and tests. Both-empty overlaps
    /// (a convention, not a measurement) and undefined distances do not;
    /// one-empty overlaps (a missed or hallucinated structure) do.
    pub fn counts(&self) -> bool {
        self.value.is_some() && !matches!(self.flag, Some(Flag::BothEmpty) | Some(Flag::Undefined))
    }
}

fn check_pair(a: &[bool], b: &[bool]) -> Result<(usize, usize, usize), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().filter(|v| **v).count();
    let nb = b.iter().filter(|v| **v).count();
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    Ok((na, nb, both))
}

fn overlap(a: &[bool], b: &[bool], f: impl Fn(f64, f64, f64) -> f64) -> Result<Value, MetricError> {
    let (na, nb, both) = check_pair(a, b)?;
    Ok(match (na, nb) {
        (0, 0) => Value {
            value: Some(1.0),
            flag: Some(Flag::BothEmpty),
        },
        (0, _) | (_, 0) => Value {
            value: Some(0.0),
            flag: Some(Flag::OneEmpty),
        },
        _ => Value::plain(f(na as f64, nb as f64, both as f64)),
    })
}

/// Dice similarity `2|A∩B| / (|A| + |B|)`.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<Value, MetricError> {
    overlap(a, b, |na, nb, i| 2.0 * i / (na + nb))
}

/// Intersection over union `|A∩B| / |A∪B|`.
pub fn iou(a: &[bool], b: &[bool]) -> Result<Value, MetricError> {
    overlap(a, b, |na, nb, i| i / (na + nb - i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Dsc,
    Iou,
    Asd,
    Assd,
    Hd,
    Hd95,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Dsc, Metric::Iou, Metric::Asd, Metric::Assd, Metric::Hd, Metric::Hd95];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Iou => "iou",
            Metric::Asd => "asd",
            Metric::Assd => "assd",
            Metric::Hd => "hd",
            Metric::Hd95 => "hd95",
        }
    }

    pub fn from_name(s: &str) -> Option<Metric> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dsc | Metric::Iou)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: Value,
    pub iou: Value,
    pub asd: Value,
    pub assd: Value,
    pub hd: Value,
    pub hd95: Value,
}

impl ClassMetrics {
    pub fn get(&self, m: Metric) -> Value {
        match m {
            Metric::Dsc => self.dsc,
            Metric::Iou => self.iou,
            Metric::Asd => self.asd,
            Metric::Assd => self.assd,
            Metric::Hd => self.hd,
            Metric::Hd95 => self.hd95,
        }
    }
}

/// Six metrics for each foreground class of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    /// Indexed like [`Class::FOREGROUND`].
    pub classes: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn get(&self, class: Class, m: Metric) -> Option<Value> {
        let k = Class::FOREGROUND.iter().position(|c| *c == class)?;
        self.classes.get(k).map(|c| c.get(m))
    }
}

pub fn class_metrics(pred: &[bool], gt: &[bool], extent: Extent, spacing: Spacing3) -> Result<ClassMetrics, MetricError> {
    let d = dsc(pred, gt)?;
    let j = iou(pred, gt)?;
    let undefined = Value {
        value: None,
        flag: Some(Flag::Undefined),
    };
    let s = surface_metrics(pred, gt, extent, spacing)?;
    let pick = |f: fn(&SurfaceDistances) -> f64| s.as_ref().map_or(undefined, |s| Value::plain(f(s)));
    Ok(ClassMetrics {
        dsc: d,
        iou: j,
        asd: pick(|s| s.asd),
        assd: pick(|s| s.assd),
        hd: pick(|s| s.hd),
        hd95: pick(|s| s.hd95),
    })
}

/// Evaluate a predicted label map against the reference, slice-wise 2D.
pub fn evaluate_case(case_id: &str, pred: &LabelMap, gt: &LabelMap) -> Result<MetricReport, MetricError> {
    if pred.shape() != gt.shape() || pred.spacing() != gt.spacing() {
        return Err(MetricError::Mismatch);
    }
    let extent = Extent::planar(gt.width(), gt.height());
    let sp = gt.spacing();
    let spacing = [sp.sx, sp.sy, 1.0];
    let classes = Class::FOREGROUND
        .iter()
        .map(|&c| class_metrics(&pred.mask(c), &gt.mask(c), extent, spacing))
        .collect::<Result<_, _>>()?;
    Ok(MetricReport {
        case_id: case_id.to_string(),
        classes,
    })
}

/// Values of one (class, metric) cell that enter statistics, plus the
/// number of entries left out.
pub fn cell_values(reports: &[MetricReport], class: Class, m: Metric) -> (Vec<f64>, usize) {
    let mut kept = Vec::with_capacity(reports.len());
    let mut excluded = 0;
    for r in reports {
        match r.get(class, m) {
            Some(v) if v.counts() => kept.push(v.value.expect("counted values exist")),
            _ => excluded += 1,
        }
    }
    (kept, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub class: Class,
    pub metric: Metric,
    pub summary: Summary,
    pub excluded: usize,
    /// One-empty overlaps included in the mean.
    pub flagged: usize,
}

/// Per-class, per-metric mean with a 95% interval. Flagged entries that do
/// not count are excluded and tallied.
pub fn aggregate(reports: &[MetricReport]) -> Result<Vec<AggregateCell>, MetricError> {
    let mut cells = Vec::new();
    for class in Class::FOREGROUND {
        for m in Metric::ALL {
            let (values, excluded) = cell_values(reports, class, m);
            if values.is_empty() {
                return Err(MetricError::AllUndefined {
                    metric: m.name(),
                    class: class.name(),
                });
            }
            let flagged = reports
                .iter()
                .filter(|r| r.get(class, m).is_some_and(|v| v.counts() && v.flag.is_some()))
                .count();
            cells.push(AggregateCell {
                class,
                metric: m,
                summary: summarize(&values)?,
                excluded,
                flagged,
            });
        }
    }
    Ok(cells)
}
