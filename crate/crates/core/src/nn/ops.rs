//! Layer kernels with hand-written backward passes.
//!
//! Weights live in a flat parameter slice; each function receives its own
//! sub-slices. Backward functions accumulate into gradient slices.

use super::tensor::{Scalar, Tensor};

/// `col[(ci·k² + ky·k + kx), y·w + x] = x[ci, y+ky−p, x+kx−p]` (zero padded).
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, col: &mut [S]) {
    let pad = k / 2;
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                let dst = &mut col[row..row + plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            S::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, k: usize, dx: &mut [S]) {
    let pad = k / 2;
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                let src = &col[row..row + plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for x in 0..w {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] = drow[sx as usize] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded `k×k` convolution (k odd). `weight` is `[cout, cin, k, k]`.
pub fn conv_forward<S: Scalar>(x: &Tensor<S>, weight: &[S], bias: &[S], cout: usize, k: usize) -> Tensor<S> {
    let (cin, plane) = (x.c, x.plane());
    let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
    let mut col = if k == 1 { Vec::new() } else { vec![S::zero(); cin * k * k * plane] };
    for i in 0..x.n {
        let xs = x.sample(i);
        let os = out.sample_mut(i);
        for (co, b) in bias.iter().enumerate() {
            os[co * plane..(co + 1) * plane].fill(*b);
        }
        let b: &[S] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, x.h, x.w, k, &mut col);
            &col
        };
        S::gemm(cout, cin * k * k, plane, weight, false, b, false, S::one(), os);
    }
    out
}

/// Returns `dx` when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    dout: &Tensor<S>,
    weight: &[S],
    k: usize,
    dweight: &mut [S],
    dbias: &mut [S],
    need_dx: bool,
) -> Option<Tensor<S>> {
    let (cin, cout, plane) = (x.c, dout.c, x.plane());
    let kk = cin * k * k;
    let mut col = if k == 1 { Vec::new() } else { vec![S::zero(); kk * plane] };
    let mut dcol = vec![S::zero(); if need_dx { kk * plane } else { 0 }];
    let mut dx = if need_dx { Some(x.same_shape()) } else { None };
    for i in 0..x.n {
        let xs = x.sample(i);
        let ds = dout.sample(i);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db = *db + ds[co * plane..(co + 1) * plane].iter().copied().sum();
        }
        let b: &[S] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, x.h, x.w, k, &mut col);
            &col
        };
        S::gemm(cout, plane, kk, ds, false, b, true, S::one(), dweight);
        if let Some(dx) = dx.as_mut() {
            if k == 1 {
                S::gemm(cin, cout, plane, weight, true, ds, false, S::zero(), dx.sample_mut(i));
            } else {
                S::gemm(kk, cout, plane, weight, true, ds, false, S::zero(), &mut dcol);
                col2im(&dcol, cin, x.h, x.w, k, dx.sample_mut(i));
            }
        }
    }
    dx
}

/// Stride-2, kernel-2 transposed convolution. `weight` is `[cin, cout, 2, 2]`.
pub fn convt_forward<S: Scalar>(x: &Tensor<S>, weight: &[S], bias: &[S], cout: usize) -> Tensor<S> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(x.n, cout, oh, ow);
    let mut y = vec![S::zero(); cout * 4 * plane];
    for i in 0..x.n {
        S::gemm(cout * 4, cin, plane, weight, true, x.sample(i), false, S::zero(), &mut y);
        let os = out.sample_mut(i);
        for co in 0..cout {
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let src = &y[(co * 4 + ab) * plane..(co * 4 + ab + 1) * plane];
                for yy in 0..h {
                    for xx in 0..w {
                        os[co * oh * ow + (2 * yy + a) * ow + 2 * xx + b] = src[yy * w + xx] + bias[co];
                    }
                }
            }
        }
    }
    out
}

pub fn convt_backward<S: Scalar>(
    x: &Tensor<S>,
    dout: &Tensor<S>,
    weight: &[S],
    dweight: &mut [S],
    dbias: &mut [S],
) -> Tensor<S> {
    let (cin, h, w, cout) = (x.c, x.h, x.w, dout.c);
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dy = vec![S::zero(); cout * 4 * plane];
    let mut dx = x.same_shape();
    for i in 0..x.n {
        let ds = dout.sample(i);
        for co in 0..cout {
            dbias[co] = dbias[co] + ds[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let dst = &mut dy[(co * 4 + ab) * plane..(co * 4 + ab + 1) * plane];
                for yy in 0..h {
                    for xx in 0..w {
                        dst[yy * w + xx] = ds[co * oh * ow + (2 * yy + a) * ow + 2 * xx + b];
                    }
                }
            }
        }
        S::gemm(cin, plane, cout * 4, x.sample(i), false, &dy, true, S::one(), dweight);
        S::gemm(cin, cout * 4, plane, weight, false, &dy, false, S::zero(), dx.sample_mut(i));
    }
    dx
}

/// 2×2 max pooling; also returns the winning offset (0..4) per output.
pub fn maxpool_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let o = nc * oh * ow + y * ow + xx;
                let mut best = src[2 * y * x.w + 2 * xx];
                let mut which = 0u8;
                for ab in 1..4u8 {
                    let v = src[(2 * y + (ab / 2) as usize) * x.w + 2 * xx + (ab % 2) as usize];
                    if v > best {
                        best = v;
                        which = ab;
                    }
                }
                out.data[o] = best;
                arg[o] = which;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<S: Scalar>(dout: &Tensor<S>, arg: &[u8], h: usize, w: usize) -> Tensor<S> {
    let mut dx = Tensor::zeros(dout.n, dout.c, h, w);
    let (oh, ow) = (dout.h, dout.w);
    for nc in 0..dout.n * dout.c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = nc * oh * ow + y * ow + xx;
                let ab = arg[o] as usize;
                dx.data[nc * h * w + (2 * y + ab / 2) * w + 2 * xx + ab % 2] = dout.data[o];
            }
        }
    }
    dx
}

pub fn relu_inplace<S: Scalar>(x: &mut Tensor<S>) {
    for v in &mut x.data {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zero the gradient wherever the ReLU output was not positive.
pub fn relu_backward_inplace<S: Scalar>(dout: &mut Tensor<S>, out: &Tensor<S>) {
    for (d, o) in dout.data.iter_mut().zip(&out.data) {
        if *o <= S::zero() {
            *d = S::zero();
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved state of a batch-norm layer evaluated with batch statistics.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    pub mean: Vec<S>,
    /// Biased batch variance.
    pub var: Vec<S>,
}

pub fn bn_train_forward<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S]) -> (Tensor<S>, BnCache<S>) {
    let (c, plane) = (x.c, x.plane());
    let m = (x.n * plane) as f64;
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    let mut inv_std = vec![S::zero(); c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..x.n {
            s += x.channel(i, ch).iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for i in 0..x.n {
            ss += x.channel(i, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
        }
        let v = ss / m;
        mean[ch] = S::of(mu);
        var[ch] = S::of(v);
        inv_std[ch] = S::of(1.0 / (v + BN_EPS).sqrt());
    }
    let mut xhat = x.same_shape();
    let mut y = x.same_shape();
    for i in 0..x.n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for p in off..off + plane {
                let h = (x.data[p] - mean[ch]) * inv_std[ch];
                xhat.data[p] = h;
                y.data[p] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub fn bn_eval_forward<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S], run_mean: &[S], run_var: &[S]) -> Tensor<S> {
    let (c, plane) = (x.c, x.plane());
    let mut y = x.same_shape();
    for ch in 0..c {
        let inv = S::of(1.0 / (run_var[ch].f64() + BN_EPS).sqrt());
        let (g, b, m) = (gamma[ch], beta[ch], run_mean[ch]);
        for i in 0..x.n {
            let off = (i * c + ch) * plane;
            for p in off..off + plane {
                y.data[p] = g * (x.data[p] - m) * inv + b;
            }
        }
    }
    y
}

pub fn bn_train_backward<S: Scalar>(
    dout: &Tensor<S>,
    cache: &BnCache<S>,
    gamma: &[S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) -> Tensor<S> {
    let (c, plane) = (dout.c, dout.plane());
    let m = (dout.n * plane) as f64;
    let mut dx = dout.same_shape();
    for ch in 0..c {
        let (mut sd, mut sdx) = (0.0f64, 0.0f64);
        for i in 0..dout.n {
            let off = (i * c + ch) * plane;
            for p in off..off + plane {
                let d = dout.data[p].f64();
                sd += d;
                sdx += d * cache.xhat.data[p].f64();
            }
        }
        dbeta[ch] = dbeta[ch] + S::of(sd);
        dgamma[ch] = dgamma[ch] + S::of(sdx);
        let g = gamma[ch].f64();
        let k = g * cache.inv_std[ch].f64() / m;
        for i in 0..dout.n {
            let off = (i * c + ch) * plane;
            for p in off..off + plane {
                let v = k * (m * dout.data[p].f64() - sd - cache.xhat.data[p].f64() * sdx);
                dx.data[p] = S::of(v);
            }
        }
    }
    dx
}
