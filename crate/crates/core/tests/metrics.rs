use proptest::prelude::*;
use refdiff_core::grid::{Grid2D, Spacing};
use refdiff_core::metrics::*;
use refdiff_core::SeededRng;

/// O(n²) nearest-point search in index space, scaled by spacing.
fn brute_directed(a: &[bool], b: &[bool], e: Extent, s: Spacing3) -> Vec<f64> {
    let sa = extract_surface(a, e, s).unwrap();
    let sb = extract_surface(b, e, s).unwrap();
    let coords = |i: usize| {
        let plane = e.width * e.height;
        [(i % e.width) as f64, ((i / e.width) % e.height) as f64, (i / plane) as f64]
    };
    sa.indices
        .iter()
        .map(|&i| {
            let p = coords(i);
            let mut best = f64::INFINITY;
            for &j in &sb.indices {
                let q = coords(j);
                let dx = (p[0] - q[0]) * s[0];
                let dy = (p[1] - q[1]) * s[1];
                let dz = (p[2] - q[2]) * s[2];
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

fn brute_metrics(a: &[bool], b: &[bool], e: Extent, s: Spacing3) -> SurfaceDistances {
    let ab = brute_directed(a, b, e, s);
    let ba = brute_directed(b, a, e, s);
    let asd = ab.iter().sum::<f64>() / ab.len() as f64;
    let mut all: Vec<f64> = ab.iter().chain(&ba).copied().collect();
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((0.95 * all.len() as f64).ceil() as usize).clamp(1, all.len());
    SurfaceDistances {
        asd,
        assd,
        hd: all[all.len() - 1],
        hd95: all[rank - 1],
    }
}

/// Union of a few random discs and rectangles, sometimes speckled.
fn random_mask(w: usize, h: usize, rng: &mut SeededRng) -> Vec<bool> {
    let mut m = vec![false; w * h];
    for _ in 0..1 + rng.below(4) {
        let (cx, cy) = (rng.uniform_range(0.0, w as f64), rng.uniform_range(0.0, h as f64));
        let r = rng.uniform_range(1.0, w as f64 / 4.0);
        let disc = rng.uniform() < 0.5;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r / 2.0 };
                if inside {
                    m[y * w + x] = true;
                }
            }
        }
    }
    if rng.uniform() < 0.3 {
        for _ in 0..20 {
            let i = rng.below(w * h);
            m[i] = !m[i];
        }
    }
    if !m.iter().any(|v| *v) {
        m[rng.below(w * h)] = true;
    }
    m
}

#[test]
fn overlap_hand_cases() {
    let a = [true, true, true, true, false, false, false, false];
    let b = [true, true, false, false, true, true, false, false];
    assert_eq!(dsc(&a, &a).unwrap().value, Some(1.0));
    assert_eq!(dsc(&a, &b).unwrap().value, Some(0.5));
    assert_eq!(iou(&a, &b).unwrap().value, Some(1.0 / 3.0));
    let c = [false, false, false, false, true, true, true, true];
    assert_eq!(dsc(&a, &c).unwrap().value, Some(0.0));
    assert_eq!(dsc(&a, &c).unwrap().flag, None);
    let empty = [false; 8];
    let both = dsc(&empty, &empty).unwrap();
    assert_eq!((both.value, both.flag), (Some(1.0), Some(Flag::BothEmpty)));
    let one = iou(&a, &empty).unwrap();
    assert_eq!((one.value, one.flag), (Some(0.0), Some(Flag::OneEmpty)));
    assert!(dsc(&a, &a[..4]).is_err());
}

#[test]
fn surface_hand_cases() {
    let e = Extent::planar(6, 6);
    let s = [1.0, 1.0, 1.0];
    let mut single = vec![false; 36];
    single[14] = true;
    assert_eq!(extract_surface(&single, e, s).unwrap().indices, vec![14]);
    let mut square = vec![false; 36];
    for y in 1..5 {
        for x in 1..5 {
            square[y * 6 + x] = true;
        }
    }
    assert_eq!(extract_surface(&square, e, s).unwrap().len(), 12);
    assert!(extract_surface(&vec![false; 36], e, s).unwrap().is_empty());

    let d = surface_metrics(&square, &square, e, s).unwrap().unwrap();
    assert_eq!((d.asd, d.assd, d.hd, d.hd95), (0.0, 0.0, 0.0, 0.0));

    let e = Extent::planar(8, 8);
    let mut a = vec![false; 64];
    let mut b = vec![false; 64];
    a[0] = true;
    b[4 * 8 + 3] = true;
    let d = surface_metrics(&a, &b, e, s).unwrap().unwrap();
    assert_eq!((d.asd, d.assd, d.hd, d.hd95), (5.0, 5.0, 5.0, 5.0));
    assert_eq!(surface_metrics(&a, &vec![false; 64], e, s).unwrap(), None);
}

#[test]
fn edge_pixels_count_as_boundary() {
    let e = Extent::planar(3, 3);
    let full = vec![true; 9];
    let surf = extract_surface(&full, e, [1.0; 3]).unwrap();
    assert_eq!(surf.indices, vec![0, 1, 2, 3, 5, 6, 7, 8]);
}

#[test]
fn distance_transform_path_equals_brute_force() {
    let mut rng = SeededRng::new(77);
    let e = Extent::planar(64, 64);
    for case in 0..50 {
        let s = match case % 3 {
            0 => [1.5, 1.5, 1.0],
            1 => [1.0, 1.0, 1.0],
            _ => [0.7, 1.3, 1.0],
        };
        let a = random_mask(64, 64, &mut rng);
        let b = random_mask(64, 64, &mut rng);
        let fast = surface_metrics(&a, &b, e, s).unwrap().unwrap();
        assert_eq!(fast, brute_metrics(&a, &b, e, s), "case {case}");
    }
}

#[test]
fn volumetric_masks_match_brute_force() {
    let mut rng = SeededRng::new(5);
    let e = Extent {
        width: 9,
        height: 7,
        depth: 5,
    };
    let s = [1.0, 0.8, 2.5];
    for _ in 0..10 {
        let mut a: Vec<bool> = (0..e.len()).map(|_| rng.uniform() < 0.3).collect();
        let mut b: Vec<bool> = (0..e.len()).map(|_| rng.uniform() < 0.3).collect();
        a[0] = true;
        b[e.len() - 1] = true;
        let fast = surface_metrics(&a, &b, e, s).unwrap().unwrap();
        assert_eq!(fast, brute_metrics(&a, &b, e, s));
    }
}

#[test]
fn interior_voxel_of_a_cube_is_not_surface() {
    let e = Extent {
        width: 3,
        height: 3,
        depth: 3,
    };
    let surf = extract_surface(&vec![true; 27], e, [1.0; 3]).unwrap();
    assert_eq!(surf.len(), 26);
    assert!(!surf.indices.contains(&13));
}

#[test]
fn asd_is_directed() {
    let e = Extent::planar(16, 16);
    let s = [1.0; 3];
    let mut a = vec![false; 256];
    let mut b = vec![false; 256];
    a[0] = true;
    b[0] = true;
    b[15] = true;
    let ab = surface_metrics(&a, &b, e, s).unwrap().unwrap();
    let ba = surface_metrics(&b, &a, e, s).unwrap().unwrap();
    assert_eq!(ab.asd, 0.0);
    assert_eq!(ba.asd, 7.5);
    assert_eq!(ab.assd, ba.assd);
    assert_eq!(ab.hd, ba.hd);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_relations_hold(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let a = random_mask(16, 16, &mut rng);
        let b = random_mask(16, 16, &mut rng);
        let (d, j) = (dsc(&a, &b).unwrap().value.unwrap(), iou(&a, &b).unwrap().value.unwrap());
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        prop_assert!(j <= d + 1e-15);
        prop_assert_eq!(dsc(&b, &a).unwrap().value.unwrap(), d);
        let e = Extent::planar(16, 16);
        let s = [1.5, 1.5, 1.0];
        let m = surface_metrics(&a, &b, e, s).unwrap().unwrap();
        let r = surface_metrics(&b, &a, e, s).unwrap().unwrap();
        prop_assert!(m.hd95 <= m.hd && m.assd <= m.hd);
        prop_assert_eq!((m.hd, m.hd95), (r.hd, r.hd95));
        prop_assert!((m.assd - r.assd).abs() < 1e-12);
        let (lo, hi) = (m.asd.min(r.asd), m.asd.max(r.asd));
        prop_assert!(m.assd >= lo - 1e-12 && m.assd <= hi + 1e-12);
    }
}

/// Adaptive Simpson on `[a, b]`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

/// Two-sided tail of Student's t by integrating the unnormalised density
/// after the substitution u = tan θ; the normaliser is integrated the same
/// way.
fn quadrature_p(t: f64, df: f64) -> f64 {
    let g = |th: f64| {
        let c = th.cos();
        if c <= 0.0 {
            return if df == 1.0 { 1.0 } else { 0.0 };
        }
        let u = th.tan();
        (1.0 + u * u / df).powf(-(df + 1.0) / 2.0) / (c * c)
    };
    let half = std::f64::consts::FRAC_PI_2;
    let total = simpson(&g, 0.0, half, 1e-14);
    let tail = simpson(&g, t.abs().atan(), half, 1e-14);
    tail / total
}

fn manual_welch(x: &[f64], y: &[f64]) -> (f64, f64) {
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let mu = m(v);
        v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let (a, b) = (var(x) / x.len() as f64, var(y) / y.len() as f64);
    let t = (m(x) - m(y)) / (a + b).sqrt();
    let df = (a + b).powi(2) / (a * a / (x.len() as f64 - 1.0) + b * b / (y.len() as f64 - 1.0));
    (t, df)
}

#[test]
fn welch_matches_quadrature() {
    let mut rng = SeededRng::new(2024);
    for _ in 0..20 {
        let nx = 3 + rng.below(40);
        let ny = 3 + rng.below(40);
        let (sx, sy) = (rng.uniform_range(0.2, 3.0), rng.uniform_range(0.2, 3.0));
        let shift = rng.uniform_range(-1.5, 1.5);
        let x: Vec<f64> = (0..nx).map(|_| rng.normal() * sx).collect();
        let y: Vec<f64> = (0..ny).map(|_| shift + rng.normal() * sy).collect();
        let r = welch_t_test(&x, &y).unwrap();
        let (t, df) = manual_welch(&x, &y);
        assert!((r.t - t).abs() < 1e-12 * t.abs().max(1.0));
        assert!((r.df - df).abs() < 1e-10 * df);
        let q = quadrature_p(t, df);
        assert!((r.p - q).abs() < 1e-6, "t={t} df={df}: {} vs {q}", r.p);
    }
}

#[test]
fn welch_edge_cases() {
    let x = [1.0, 2.0, 4.0, 7.0];
    let r = welch_t_test(&x, &x).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
    let y = [0.5, 3.0, 3.5, 9.0, 1.0];
    let a = welch_t_test(&x, &y).unwrap();
    let x3: Vec<f64> = x.iter().map(|v| v * 3.0).collect();
    let y3: Vec<f64> = y.iter().map(|v| v * 3.0).collect();
    let b = welch_t_test(&x3, &y3).unwrap();
    assert!((a.t - b.t).abs() < 1e-12 && (a.df - b.df).abs() < 1e-12 && (a.p - b.p).abs() < 1e-12);
    assert!(matches!(welch_t_test(&[1.0], &y), Err(MetricError::InsufficientData { .. })));
    assert!(matches!(welch_t_test(&[2.0, 2.0], &[2.0, 2.0]), Err(MetricError::ZeroVariance)));
}

#[test]
fn welch_p_falls_as_t_grows() {
    let base = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let mut last = 1.0;
    for k in 1..20 {
        let y: Vec<f64> = base.iter().map(|v| v + k as f64 * 0.3).collect();
        let r = welch_t_test(&base, &y).unwrap();
        assert!(r.p < last);
        last = r.p;
    }
}

fn report(id: &str, dsc_v: f64, hd: Option<f64>) -> MetricReport {
    let plain = |v| Value { value: Some(v), flag: None };
    let hdv = hd.map_or(Value { value: None, flag: Some(Flag::Undefined) }, plain);
    let c = ClassMetrics {
        dsc: plain(dsc_v),
        iou: plain(dsc_v / (2.0 - dsc_v)),
        asd: hdv,
        assd: hdv,
        hd: hdv,
        hd95: hdv,
    };
    MetricReport {
        case_id: id.into(),
        classes: vec![c; 3],
    }
}

#[test]
fn aggregate_closed_forms() {
    let same = vec![report("a", 0.8, Some(2.0)); 4];
    for cell in aggregate(&same).unwrap() {
        assert_eq!(cell.summary.half_width, 0.0);
    }
    let two = vec![report("a", 0.0, Some(1.0)), report("b", 1.0, Some(3.0)), report("c", 0.5, None)];
    let cells = aggregate(&two[..2]).unwrap();
    let d = cells.iter().find(|c| c.metric == Metric::Dsc).unwrap();
    assert_eq!(d.summary.mean, 0.5);
    assert!((d.summary.half_width - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    let cells = aggregate(&two).unwrap();
    let h = cells.iter().find(|c| c.metric == Metric::Hd).unwrap();
    assert_eq!((h.excluded, h.summary.n), (1, 2));
    let none = vec![report("a", 0.5, None), report("b", 0.6, None)];
    assert!(matches!(aggregate(&none), Err(MetricError::AllUndefined { .. })));
}

fn grid(vals: Vec<f32>) -> Grid2D {
    let n = vals.len();
    Grid2D::from_vec(n, 1, Spacing::default(), vals).unwrap()
}

#[test]
fn histogram_divergence_cases() {
    let a = grid((0..256).map(|v| v as f32).collect());
    assert_eq!(histogram_divergence(&[&a], &[&a], 64).unwrap(), 0.0);
    let low = grid(vec![10.0; 500]);
    let mid = grid(vec![120.0; 500]);
    let high = grid(vec![250.0; 500]);
    let near = histogram_divergence(&[&low], &[&mid], 64).unwrap();
    let far = histogram_divergence(&[&low], &[&high], 64).unwrap();
    assert!(near > 1.0);
    assert!(far >= near);
}
