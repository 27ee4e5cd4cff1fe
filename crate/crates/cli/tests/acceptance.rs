//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and a count of the failures.
//!
//! Set `REFDIFF_ACCEPT=1,2,5` to run a subset and `REFDIFF_ACCEPT_STRICT=1`
//! to exit non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use refdiff::config::ExperimentConfig;
use refdiff::pipeline::network_input;
use refdiff::{Arm, ArmOutcome, Experiment};
use refdiff_core::engine::{ancestral_sample, predict_x0, q_sample, AnalyticGmm, GmmComponent};
use refdiff_core::grid::{denormalize_unit, sample_gaussian_grid};
use refdiff_core::metrics::{
    extract_surface, histogram_divergence, surface_metrics, welch_t_test, Extent, Metric, MetricReport, Spacing3,
};
use refdiff_core::nn::{ConvUNetSpec, Layout, Mode, Tensor};
use refdiff_core::refinement::guidance_gradient;
use refdiff_core::schedule::respace;
use refdiff_core::{adapt, lowpass, Class, Grid, Grid2D, NoiseSchedule, RefinementConfig, SeededRng, Spacing};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_grid(w: usize, h: usize, rng: &mut SeededRng, scale: f64) -> Grid<f64> {
    Grid::from_vec(w, h, Spacing::default(), (0..w * h).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Block means written directly from the definition.
fn block_mean_oracle(g: &Grid<f64>, d: usize) -> Vec<f64> {
    let (w, h) = g.shape();
    let mut out = vec![0.0; w * h];
    for by in (0..h).step_by(d) {
        for bx in (0..w).step_by(d) {
            let mut s = 0.0;
            for y in by..by + d {
                for x in bx..bx + d {
                    s += g.get(x, y);
                }
            }
            let m = s / (d * d) as f64;
            for y in by..by + d {
                for x in bx..bx + d {
                    out[y * w + x] = m;
                }
            }
        }
    }
    out
}

fn c1_filter_algebra() -> Outcome {
    let mut rng = SeededRng::new(101);
    let shapes = [(16, 16), (32, 8), (24, 48), (64, 64)];
    let mut worst = 0.0f64;
    let mut identity_exact = true;
    for k in 0..100 {
        let (w, h) = shapes[k % shapes.len()];
        let d = [1, 2, 4, 8][k % 4];
        let a = random_grid(w, h, &mut rng, 1.0);
        let b = random_grid(w, h, &mut rng, 1.0);
        let pa = lowpass(&a, d).unwrap();
        let pb = lowpass(&b, d).unwrap();
        let ppa = lowpass(&pa, d).unwrap();
        let lin = lowpass(&a.zip_map(&b, |x, y| 1.5 * x - 0.25 * y).unwrap(), d).unwrap();
        let oracle = block_mean_oracle(&a, d);
        let errs = [
            ppa.data().iter().zip(pa.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
            (dot(pa.data(), b.data()) - dot(a.data(), pb.data())).abs(),
            (pa.mean() - a.mean()).abs(),
            lin.data()
                .iter()
                .zip(pa.data().iter().zip(pb.data()))
                .map(|(l, (x, y))| (l - (1.5 * x - 0.25 * y)).abs())
                .fold(0.0, f64::max),
            pa.data().iter().zip(&oracle).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        ];
        worst = errs.into_iter().fold(worst, f64::max);
        if d == 1 && pa != a {
            identity_exact = false;
        }
    }
    outcome(
        worst <= 1e-10 && identity_exact,
        format!("worst deviation {worst:.2e} over 100 grids; D=1 identity exact: {identity_exact}"),
    )
}

fn c2_reparameterisation() -> Outcome {
    let mut worst = 0.0f64;
    for sched in [NoiseSchedule::linear(1000).unwrap(), NoiseSchedule::cosine(1000, 0.008).unwrap()] {
        let mut rng = SeededRng::new(202);
        let y0 = random_grid(16, 16, &mut rng, 0.5).map(|v| v.clamp(-1.0, 1.0));
        for k in 0..20 {
            let t = 1 + k * 999 / 19;
            let eps = random_grid(16, 16, &mut rng, 1.0);
            let yt = q_sample(&y0, sched.alpha_bar(t), &eps).unwrap();
            let back = predict_x0(&yt, &eps, t, &sched, false).unwrap();
            let e = back.data().iter().zip(y0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(e);
        }
    }
    outcome(worst <= 1e-5, format!("max |x̂₀ − y₀| = {worst:.2e} at 20 timesteps, linear and cosine"))
}

fn c3_schedules() -> Outcome {
    let t_total = 1000usize;
    let s = 0.008;
    let cos = NoiseSchedule::cosine(t_total, s).unwrap();
    let f = |t: f64| (((t / t_total as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    // Closed form wherever the implied β stays under the 0.999 cap; where the
    // cap binds, the table follows ᾱ_t = 0.001 · ᾱ_{t-1} of the closed form.
    let closed = |t: usize| {
        let (prev, cur) = (f((t - 1) as f64) / f(0.0), f(t as f64) / f(0.0));
        if 1.0 - cur / prev > 0.999 {
            prev * (1.0 - 0.999)
        } else {
            cur
        }
    };
    let cos_err = (1..=t_total).map(|t| (cos.alpha_bar(t) - closed(t)).abs()).fold(0.0, f64::max);
    let lin = NoiseSchedule::linear(t_total).unwrap();
    let lin_err = (lin.beta(1) - 1e-4).abs().max((lin.beta(t_total) - 0.02).abs());
    let lin2 = NoiseSchedule::linear(2000).unwrap();
    let lin2_err = (lin2.beta(1) - 0.5e-4).abs().max((lin2.beta(2000) - 0.01).abs());
    let kept: Vec<usize> = (1..=100).map(|k| k * 10).collect();
    let mut kept_exact = true;
    for parent in [&lin, &cos] {
        let r = respace(parent, &kept).unwrap();
        for (j, &t) in kept.iter().enumerate() {
            kept_exact &= r.schedule.alpha_bar(j + 1) == parent.alpha_bar(t);
        }
    }
    outcome(
        cos_err <= 1e-9 && lin_err <= 1e-15 && lin2_err <= 1e-15 && kept_exact,
        format!(
            "cosine ᾱ max err {cos_err:.2e}; linear endpoint err {:.1e}; respaced ᾱ exact: {kept_exact}",
            lin_err.max(lin2_err)
        ),
    )
}

fn c4_analytic_sampling() -> Outcome {
    let sched = NoiseSchedule::linear(1000).unwrap();
    let mut rng = SeededRng::new(404);
    let mean = Grid::from_vec(8, 8, Spacing::default(), (0..64).map(|i| 0.2 + 0.5 * i as f64 / 63.0).collect()).unwrap();
    let var = 0.04;
    let gmm = AnalyticGmm::single(mean.clone(), var).unwrap();
    let runs = 10_000;
    let mut sum = vec![0.0; 64];
    let mut sq = vec![0.0; 64];
    for _ in 0..runs {
        let init = sample_gaussian_grid(8, 8, Spacing::default(), &mut rng).unwrap();
        let y = ancestral_sample(&gmm, &sched, 1000, &init, &mut rng, false).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v as f64) * (v as f64);
        }
    }
    let n = runs as f64;
    let mut worst_mean = 0.0f64;
    let mut var_sum = 0.0;
    for i in 0..64 {
        let m = sum[i] / n;
        let v = (sq[i] - n * m * m) / (n - 1.0);
        worst_mean = worst_mean.max((m - mean.data()[i]).abs() / mean.data()[i].abs());
        var_sum += v;
    }
    let var_rel = (var_sum / 64.0 - var).abs() / var;
    outcome(
        worst_mean < 0.05 && var_rel < 0.05,
        format!("{runs} chains: worst per-pixel mean rel. err {worst_mean:.4}, pooled variance rel. err {var_rel:.4}"),
    )
}

fn c5_guidance_gradient() -> Outcome {
    let sched = NoiseSchedule::linear(1000).unwrap();
    let mut rng = SeededRng::new(505);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let d = [1, 2, 4][k % 3];
        let t = 1 + rng.below(1000);
        let yt = random_grid(8, 8, &mut rng, 1.0);
        let eps = random_grid(8, 8, &mut rng, 1.0);
        let reference = random_grid(8, 8, &mut rng, 0.5);
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        // The clean-image estimate with the noise estimate frozen.
        let x0 = |y: &Grid<f64>| y.zip_map(&eps, |y, e| (y - b * e) / a).unwrap();
        let objective = |y: &Grid<f64>| {
            let r: Vec<f64> = block_mean_oracle(&reference, d)
                .iter()
                .zip(block_mean_oracle(&x0(y), d))
                .map(|(p, q)| p - q)
                .collect();
            dot(&r, &r).sqrt()
        };
        let g = guidance_gradient(&yt.to_f32(), &reference.to_f32(), &x0(&yt).to_f32(), t, &sched, d).unwrap();
        let h = 1e-6 * a.max(1e-3);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..64 {
            let mut p = yt.data().to_vec();
            p[i] += h;
            let mut m = yt.data().to_vec();
            m[i] -= h;
            let grid = |v: Vec<f64>| Grid::from_vec(8, 8, Spacing::default(), v).unwrap();
            let fd = (objective(&grid(p)) - objective(&grid(m))) / (2.0 * h);
            num += (fd - g.data()[i] as f64).powi(2);
            den += fd * fd;
        }
        worst = worst.max((num / den).sqrt());
    }
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over 50 cases"))
}

/// A few flat disks on a dark background.
fn shapes(w: usize, rng: &mut SeededRng) -> Grid<f64> {
    let mut v = vec![-0.8; w * w];
    for _ in 0..3 {
        let cx = rng.uniform_range(0.2, 0.8) * w as f64;
        let cy = rng.uniform_range(0.2, 0.8) * w as f64;
        let r = rng.uniform_range(0.1, 0.25) * w as f64;
        let level = rng.uniform_range(-0.3, 0.9);
        for y in 0..w {
            for x in 0..w {
                if (x as f64 - cx).hypot(y as f64 - cy) < r {
                    v[y * w + x] = level;
                }
            }
        }
    }
    Grid::from_vec(w, w, Spacing::default(), v).unwrap()
}

/// Terminal residuals of guided sampling against an analytic shape prior.
/// The reference is a draw from one component seen through an appearance
/// shift (contrast, offset and noise), so it sits just off the prior.
fn c6_guidance_monotonicity() -> Outcome {
    let parent = NoiseSchedule::linear(1000).unwrap();
    let sched = respace(&parent, &(1..=100).map(|k| k * 10).collect::<Vec<_>>()).unwrap().schedule;
    let (w, variance, range, seeds) = (64, 0.01, 25, 24);
    let taus = [0.0, 1.0, 6.0, 18.0, 24.0];
    let scales = [1usize, 2, 4];
    let mut residual = vec![0.0; taus.len()];
    let mut distance = vec![0.0; scales.len()];
    for s in 0..seeds {
        let mut rng = SeededRng::new(600 + s);
        let means: Vec<Grid<f64>> = (0..4).map(|_| shapes(w, &mut rng)).collect();
        let components = means
            .iter()
            .map(|m| GmmComponent {
                mean: m.clone(),
                variance,
                weight: 1.0,
            })
            .collect();
        let gmm = AnalyticGmm::new(components).unwrap();
        let reference = means[0]
            .map(|v| {
                let x = v + variance.sqrt() * rng.normal();
                (0.7 * x + 0.15 + 0.05 * rng.normal()).clamp(-1.0, 1.0)
            })
            .to_f32();
        let filtered_ref = lowpass(&reference.to_f64(), 4).unwrap();
        for (k, &tau) in taus.iter().enumerate() {
            let cfg = RefinementConfig::new(range, 4, tau);
            let (out, _) = adapt(&reference, &gmm, &sched, &cfg, &mut SeededRng::new(9000 + s)).unwrap();
            let r = filtered_ref.zip_map(&lowpass(&out.to_f64(), 4).unwrap(), |a, b| a - b).unwrap();
            residual[k] += r.l2_norm() / seeds as f64;
        }
        for (k, &d) in scales.iter().enumerate() {
            let cfg = RefinementConfig::new(range, d, 6.0);
            let (out, _) = adapt(&reference, &gmm, &sched, &cfg, &mut SeededRng::new(9000 + s)).unwrap();
            distance[k] += out.zip_map(&reference, |a, b| a - b).unwrap().l2_norm() / seeds as f64;
        }
    }
    let res_ok = residual.windows(2).all(|w| w[1] <= w[0]);
    let dist_ok = distance.windows(2).all(|w| w[1] >= w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        res_ok && dist_ok,
        format!(
            "{seeds} seeds, {w}²; filtered residual over τ {{0,1,6,18,24}}: {} (non-increasing: {res_ok}); \
             reference distance over D {{1,2,4}}: {} (non-decreasing: {dist_ok})",
            fmt(&residual),
            fmt(&distance)
        ),
    )
}

fn random_mask(w: usize, h: usize, rng: &mut SeededRng) -> Vec<bool> {
    let mut m = vec![false; w * h];
    for _ in 0..1 + rng.below(3) {
        let (cx, cy) = (rng.uniform_range(0.0, w as f64), rng.uniform_range(0.0, h as f64));
        let (rx, ry) = (rng.uniform_range(2.0, 16.0), rng.uniform_range(2.0, 16.0));
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    m[y * w + x] = true;
                }
            }
        }
    }
    for _ in 0..rng.below(12) {
        let i = rng.below(w * h);
        m[i] = !m[i];
    }
    if !m.iter().any(|v| *v) {
        m[rng.below(w * h)] = true;
    }
    m
}

/// Surface distances by comparing every pair of boundary points.
fn brute_surface(a: &[bool], b: &[bool], e: Extent, s: Spacing3) -> [f64; 4] {
    let pa = extract_surface(a, e, s).unwrap();
    let pb = extract_surface(b, e, s).unwrap();
    let directed = |from: &[usize], to: &[usize]| -> Vec<f64> {
        from.iter()
            .map(|&i| {
                let (xi, yi) = ((i % e.width) as f64, (i / e.width) as f64);
                to.iter()
                    .map(|&j| {
                        let dx = (xi - (j % e.width) as f64) * s[0];
                        let dy = (yi - (j / e.width) as f64) * s[1];
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    let ab = directed(&pa.indices, &pb.indices);
    let ba = directed(&pb.indices, &pa.indices);
    let mut all: Vec<f64> = ab.iter().chain(&ba).copied().collect();
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    let k = ((0.95 * all.len() as f64).ceil() as usize).max(1);
    [ab.iter().sum::<f64>() / ab.len() as f64, assd, all[all.len() - 1], all[k - 1]]
}

fn c7_metrics_oracle() -> Outcome {
    let mut rng = SeededRng::new(707);
    let e = Extent::planar(64, 64);
    let mut mismatches = 0;
    for k in 0..50 {
        let s: Spacing3 = [[1.5, 1.5, 1.0], [1.0, 1.0, 1.0], [0.7, 1.3, 1.0]][k % 3];
        let a = random_mask(64, 64, &mut rng);
        let b = random_mask(64, 64, &mut rng);
        let got = surface_metrics(&a, &b, e, s).unwrap().unwrap();
        if [got.asd, got.assd, got.hd, got.hd95] != brute_surface(&a, &b, e, s) {
            mismatches += 1;
        }
    }
    let a = random_mask(64, 64, &mut rng);
    let same = surface_metrics(&a, &a, e, [1.5, 1.5, 1.0]).unwrap().unwrap();
    let identical_zero = [same.asd, same.assd, same.hd, same.hd95] == [0.0; 4];
    let e8 = Extent::planar(8, 8);
    let mut p = vec![false; 64];
    let mut q = vec![false; 64];
    p[0] = true;
    q[4 * 8 + 3] = true;
    let pts = surface_metrics(&p, &q, e8, [1.0, 1.0, 1.0]).unwrap().unwrap();
    let five = pts.hd == 5.0 && pts.assd == 5.0;
    outcome(
        mismatches == 0 && identical_zero && five,
        format!("{mismatches}/50 mismatches vs brute force; identical → 0: {identical_zero}; (0,0)/(3,4) → 5 mm: {five}"),
    )
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

/// Two-sided tail probability of Student's t with `df` degrees of freedom,
/// by integrating the density after the map `u = |t| + s/(1−s)`.
fn t_tail_quadrature(t: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let log_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |u: f64| (log_c - (df + 1.0) / 2.0 * (1.0 + u * u / df).ln()).exp();
    let t = t.abs();
    let g = |s: f64| {
        if s >= 1.0 {
            return 0.0;
        }
        let u = t + s / (1.0 - s);
        density(u) / ((1.0 - s) * (1.0 - s))
    };
    2.0 * simpson(&g, 0.0, 1.0, 1e-13)
}

fn c8_welch_oracle() -> Outcome {
    let mut rng = SeededRng::new(808);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (nx, ny) = (3 + rng.below(30), 3 + rng.below(30));
        let shift = rng.uniform_range(-1.0, 1.0);
        let sy = rng.uniform_range(0.3, 3.0);
        let x: Vec<f64> = (0..nx).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..ny).map(|_| shift + sy * rng.normal()).collect();
        let r = welch_t_test(&x, &y).unwrap();
        worst = worst.max((r.p - t_tail_quadrature(r.t, r.df)).abs());
    }
    let x = [1.0, 2.0, 4.0, 7.0];
    let same = welch_t_test(&x, &x).unwrap();
    let identical = same.t == 0.0 && same.p == 1.0;
    outcome(
        worst <= 1e-6 && identical,
        format!("max |p − quadrature| = {worst:.2e} over 20 pairs; identical samples t=0, p=1: {identical}"),
    )
}

fn c9_gradient_check() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let specs = [
        (ConvUNetSpec::new(1, 2, 1, 4), None),
        (
            ConvUNetSpec {
                time_conditioned: true,
                batch_norm: false,
                ..ConvUNetSpec::new(2, 2, 1, 2)
            },
            Some(vec![3.0, 700.0]),
        ),
    ];
    for (k, (spec, ts)) in specs.iter().enumerate() {
        let layout = Layout::new(spec).unwrap();
        let mut rng = SeededRng::new(900 + k as u64);
        let (mut p, b) = layout.init::<f64>(&mut rng);
        let n = 2;
        let x = Tensor::from_vec(n, 1, 8, 8, (0..n * 64).map(|_| rng.normal()).collect());
        let (y, cache) = layout.forward(&p, &b, &x, ts.as_deref(), Mode::Train).unwrap();
        let up: Vec<f64> = (0..y.data.len()).map(|_| rng.normal()).collect();
        let up = Tensor::from_vec(y.n, y.c, y.h, y.w, up);
        let mut g = vec![0.0; layout.n_params];
        layout.backward(&p, &cache, &up, &mut g).unwrap();
        let pattern = cache.activation_pattern();
        let h = 1e-4;
        let (mut checked, mut worst) = (0usize, 0.0f64);
        for _ in 0..200 {
            let i = rng.below(layout.n_params);
            let orig = p[i];
            let mut loss = |v: f64| {
                p[i] = v;
                let (y, c) = layout.forward(&p, &b, &x, ts.as_deref(), Mode::Train).unwrap();
                (dot(&y.data, &up.data), c.activation_pattern() == pattern)
            };
            let (lp, okp) = loss(orig + h);
            let (lm, okm) = loss(orig - h);
            p[i] = orig;
            if okp && okm {
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
                checked += 1;
            }
        }
        pass &= checked >= 100 && worst < 1e-3;
        lines.push(format!("net {k}: {checked} params, worst rel {worst:.2e}"));
    }
    outcome(pass, lines.join("; "))
}

/// Everything the end-to-end criteria read from one experiment run.
struct Run {
    root: PathBuf,
    arms: BTreeMap<Arm, ArmOutcome>,
    divergence: (f64, f64),
    seconds: f64,
}

fn run_experiment(root: &Path) -> Run {
    let _ = std::fs::remove_dir_all(root);
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 2024;
    let mut exp = Experiment::new(cfg.clone(), root).unwrap();
    let mut arms = BTreeMap::new();
    for arm in Arm::ALL {
        let out = exp.run_arm(arm).unwrap();
        arms.insert(arm, out);
    }
    exp.save_manifest(&root.join("manifest.json")).unwrap();
    let ds = exp.datasets().unwrap();
    let (model, hash) = exp.denoiser(&ds).unwrap();
    let adapted = exp.adapt_cases(&model, &hash, &ds.target_test, refdiff_core::DomainTag::AdaptedB).unwrap();
    let view = |cases: &[refdiff_core::CaseRecord]| -> Vec<Grid2D> {
        cases.iter().map(|c| denormalize_unit(&network_input(&cfg, &c.image).unwrap())).collect()
    };
    let (src, raw, ad) = (view(&ds.source_test), view(&ds.target_test), view(&adapted));
    let (src, raw, ad): (Vec<&Grid2D>, Vec<&Grid2D>, Vec<&Grid2D>) = (src.iter().collect(), raw.iter().collect(), ad.iter().collect());
    let divergence = (
        histogram_divergence(&src, &ad, 64).unwrap(),
        histogram_divergence(&src, &raw, 64).unwrap(),
    );
    Run {
        root: root.to_path_buf(),
        arms,
        divergence,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Per-case value of `m` averaged over the foreground classes that have a
/// counted value; cases with none are dropped.
fn case_means(reports: &[MetricReport], m: Metric) -> Vec<f64> {
    reports
        .iter()
        .filter_map(|r| {
            let v: Vec<f64> = Class::FOREGROUND
                .iter()
                .filter_map(|&c| r.get(c, m).filter(|v| v.counts()).and_then(|v| v.value))
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Lower-is-better metric improved from `reference` to `candidate` with
/// Welch p < 0.01.
fn improves(candidate: &[MetricReport], reference: &[MetricReport], m: Metric) -> (bool, String) {
    let (c, r) = (case_means(candidate, m), case_means(reference, m));
    let w = welch_t_test(&c, &r).unwrap();
    let ok = mean(&c) < mean(&r) && w.p < 0.01;
    (ok, format!("{} {:.3}→{:.3} p={:.1e}", m.name(), mean(&r), mean(&c), w.p))
}

fn c10_end_to_end(run: &Run) -> Outcome {
    let base = &run.arms[&Arm::Baseline];
    let src_dsc = mean(&case_means(&base.reference, Metric::Dsc));
    let tgt_dsc = mean(&case_means(&base.reports, Metric::Dsc));
    let drop_ok = src_dsc - tgt_dsc >= 0.05;
    let da = &run.arms[&Arm::Da];
    let (da_hd, da_hd_s) = improves(&da.reports, &base.reports, Metric::Hd95);
    let (da_as, da_as_s) = improves(&da.reports, &base.reports, Metric::Assd);
    let (mixed, dg) = (&run.arms[&Arm::Mixed], &run.arms[&Arm::Dg]);
    let (mx_hd, mx_hd_s) = improves(&mixed.reports, &dg.reports, Metric::Hd95);
    let (mx_as, mx_as_s) = improves(&mixed.reports, &dg.reports, Metric::Assd);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    // The budget is stated for eight cores; on fewer it is reported only.
    let budget_ok = cores < 8 || run.seconds <= 45.0 * 60.0;
    outcome(
        drop_ok && da_hd && da_as && mx_hd && mx_as && budget_ok,
        format!(
            "(a) DSC source {src_dsc:.3} → target {tgt_dsc:.3} [{}]; (b) DA vs baseline: {da_hd_s}, {da_as_s} [{}]; \
             (c) mixed vs DG: {mx_hd_s}, {mx_as_s} [{}]; {:.1} min on {cores} core(s)",
            if drop_ok { "ok" } else { "fail" },
            if da_hd && da_as { "ok" } else { "fail" },
            if mx_hd && mx_as { "ok" } else { "fail" },
            run.seconds / 60.0
        ),
    )
}

fn c11_alignment(run: &Run) -> Outcome {
    let (adapted, raw) = run.divergence;
    outcome(
        adapted < raw,
        format!("divergence to source: adapted target {adapted:.4}, raw target {raw:.4}"),
    )
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism(first: &Run, second: &Run) -> Outcome {
    let (a, b) = (csv_files(&first.root), csv_files(&second.root));
    let mut differing = Vec::new();
    for rel in &a {
        if std::fs::read(first.root.join(rel)).ok() != std::fs::read(second.root.join(rel)).ok() {
            differing.push(rel.display().to_string());
        }
    }
    outcome(
        a == b && !a.is_empty() && differing.is_empty(),
        format!("{} CSV files compared, {} differ {:?}", a.len(), differing.len(), differing),
    )
}

fn main() {
    let wanted: Option<Vec<u32>> = std::env::var("REFDIFF_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let on = |k: u32| wanted.as_ref().map_or(true, |w| w.contains(&k));
    let mut failures = 0;
    let mut report = |k: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {k:>2} {status} {name} ({:.1}s): {}", t0.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    let unit: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "filter algebra", c1_filter_algebra),
        (2, "reparameterisation identity", c2_reparameterisation),
        (3, "schedule correctness", c3_schedules),
        (4, "analytic-denoiser sampling", c4_analytic_sampling),
        (5, "guidance gradient", c5_guidance_gradient),
        (6, "guidance monotonicity", c6_guidance_monotonicity),
        (7, "metrics oracle", c7_metrics_oracle),
        (8, "Welch oracle", c8_welch_oracle),
        (9, "network gradient check", c9_gradient_check),
    ];
    for (k, name, f) in unit {
        if on(k) {
            report(k, name, &mut || f());
        }
    }
    if on(10) || on(11) || on(12) {
        let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        let first = run_experiment(&base.join("acceptance-run-a"));
        if on(10) {
            report(10, "end-to-end direction", &mut || c10_end_to_end(&first));
        }
        if on(11) {
            report(11, "alignment direction", &mut || c11_alignment(&first));
        }
        if on(12) {
            let second = run_experiment(&base.join("acceptance-run-b"));
            report(12, "determinism", &mut || c12_determinism(&first, &second));
        }
    }
    if failures == 0 {
        println!("all selected criteria passed");
        return;
    }
    println!("{failures} criterion/criteria failed");
    // Red criteria are reported, not hidden; strict mode turns them into a
    // failing exit status for gating.
    if std::env::var_os("REFDIFF_ACCEPT_STRICT").is_some() {
        std::process::exit(1);
    }
}
