//! Boundary extraction, exact Euclidean distance transforms and the
//! surface-distance family (ASD, ASSD, HD, HD95).

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::grid::nearest_rank;

/// Voxel-grid extent. 2D masks use `depth = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Extent {
    pub fn planar(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn coords(&self, i: usize) -> [usize; 3] {
        let plane = self.width * self.height;
        [i % self.width, (i / self.width) % self.height, i / plane]
    }
}

/// Millimetres per voxel along x, y and z.
pub type Spacing3 = [f64; 3];

/// Boundary voxels of a mask in millimetre coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePointSet {
    /// Linear indices of the boundary voxels, ascending.
    pub indices: Vec<usize>,
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check(mask: &[bool], extent: Extent) -> Result<(), MetricError> {
    if mask.len() != extent.len() || extent.is_empty() {
        return Err(MetricError::Shape {
            expected: extent.len(),
            got: mask.len(),
        });
    }
    Ok(())
}

/// Whether foreground voxel `i` touches the background through a face
/// (4-neighbourhood in 2D, 6 in 3D). Outside the grid counts as background;
/// along a singleton depth axis there are no neighbours.
fn on_boundary(mask: &[bool], extent: Extent, i: usize) -> bool {
    let [x, y, z] = extent.coords(i);
    let (w, h, d) = (extent.width, extent.height, extent.depth);
    let plane = w * h;
    let bg = |j: usize| !mask[j];
    if x == 0 || x + 1 == w || y == 0 || y + 1 == h {
        return true;
    }
    if bg(i - 1) || bg(i + 1) || bg(i - w) || bg(i + w) {
        return true;
    }
    if d > 1 && (z == 0 || z + 1 == d || bg(i - plane) || bg(i + plane)) {
        return true;
    }
    false
}

pub fn extract_surface(mask: &[bool], extent: Extent, spacing: Spacing3) -> Result<SurfacePointSet, MetricError> {
    check(mask, extent)?;
    let indices: Vec<usize> = (0..mask.len())
        .filter(|&i| mask[i] && on_boundary(mask, extent, i))
        .collect();
    let points = indices
        .iter()
        .map(|&i| {
            let c = extent.coords(i);
            [c[0] as f64 * spacing[0], c[1] as f64 * spacing[1], c[2] as f64 * spacing[2]]
        })
        .collect();
    Ok(SurfacePointSet { indices, points })
}

/// One-dimensional pass: `out[i] = min_j (f[j] + ((i − j)·s)²)` over the
/// entries with finite `f`. Quadratic in the line length, which keeps the
/// arithmetic identical to a direct nearest-point search.
fn min_plus_line(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&j| f[j].is_finite()).collect();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let mut best = f64::INFINITY;
        for &j in &finite {
            let d = (i as f64 - j as f64) * s;
            let v = f[j] + d * d;
            if v < best {
                best = v;
            }
        }
        *o = best;
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest
/// feature voxel, by separable exact passes along x, then y, then z.
/// Infinite everywhere when there are no features.
pub fn squared_distance_transform(feature: &[bool], extent: Extent, spacing: Spacing3) -> Result<Vec<f64>, MetricError> {
    check(feature, extent)?;
    let (w, h, d) = (extent.width, extent.height, extent.depth);
    // Pass along x: exact distance to the nearest feature in the row, from
    // a forward and a backward sweep of integer offsets.
    let mut g = vec![f64::INFINITY; feature.len()];
    for row in 0..h * d {
        let base = row * w;
        let mut last: Option<usize> = None;
        let mut fwd = vec![usize::MAX; w];
        for x in 0..w {
            if feature[base + x] {
                last = Some(x);
            }
            if let Some(l) = last {
                fwd[x] = x - l;
            }
        }
        last = None;
        for x in (0..w).rev() {
            if feature[base + x] {
                last = Some(x);
            }
            let back = last.map_or(usize::MAX, |l| l - x);
            let k = fwd[x].min(back);
            if k != usize::MAX {
                let dx = k as f64 * spacing[0];
                g[base + x] = dx * dx;
            }
        }
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    // Pass along y.
    for z in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| g[(z * h + y) * w + x]));
            out.resize(h, 0.0);
            min_plus_line(&line, spacing[1], &mut out);
            for y in 0..h {
                g[(z * h + y) * w + x] = out[y];
            }
        }
    }
    if d > 1 {
        let plane = w * h;
        for p in 0..plane {
            line.clear();
            line.extend((0..d).map(|z| g[z * plane + p]));
            out.resize(d, 0.0);
            min_plus_line(&line, spacing[2], &mut out);
            for z in 0..d {
                g[z * plane + p] = out[z];
            }
        }
    }
    Ok(g)
}

/// Surface-distance summary in millimetres. `asd` is directed from the
/// first mask (the prediction) to the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub asd: f64,
    pub assd: f64,
    pub hd: f64,
    pub hd95: f64,
}

/// Distances from each surface point of `from` to the nearest surface
/// point of `to`, in the order of `from`'s surface indices.
pub fn directed_distances(
    from: &SurfacePointSet,
    to: &SurfacePointSet,
    extent: Extent,
    spacing: Spacing3,
) -> Result<Vec<f64>, MetricError> {
    let mut feature = vec![false; extent.len()];
    for &i in &to.indices {
        feature[i] = true;
    }
    let dt = squared_distance_transform(&feature, extent, spacing)?;
    Ok(from.indices.iter().map(|&i| dt[i].sqrt()).collect())
}

/// `None` when either mask has no surface.
pub fn surface_metrics(
    a: &[bool],
    b: &[bool],
    extent: Extent,
    spacing: Spacing3,
) -> Result<Option<SurfaceDistances>, MetricError> {
    let sa = extract_surface(a, extent, spacing)?;
    let sb = extract_surface(b, extent, spacing)?;
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let ab = directed_distances(&sa, &sb, extent, spacing)?;
    let ba = directed_distances(&sb, &sa, extent, spacing)?;
    Ok(Some(summarize_distances(&ab, &ba)))
}

/// ASD, ASSD, HD and HD95 from the two directed distance lists.
pub fn summarize_distances(ab: &[f64], ba: &[f64]) -> SurfaceDistances {
    let asd = ab.iter().sum::<f64>() / ab.len() as f64;
    let mut pooled: Vec<f64> = ab.iter().chain(ba).copied().collect();
    let assd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    pooled.sort_by(f64::total_cmp);
    SurfaceDistances {
        asd,
        assd,
        hd: *pooled.last().expect("nonempty"),
        hd95: nearest_rank(&pooled, 95.0),
    }
}
