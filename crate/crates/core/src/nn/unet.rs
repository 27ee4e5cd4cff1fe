//! Encoder–decoder network with skip connections.
//!
//! Each level is a double convolution (3×3 conv → batch norm → ReLU, twice).
//! Encoder levels are separated by 2× max pooling, the bridge runs at
//! `bottleneck_mult × base_filters` channels, and each decoder level
//! upsamples with a stride-2 transposed convolution, concatenates the
//! matching encoder output (skip first) and applies a double convolution. A
//! 1×1 convolution produces the output channels.
//!
//! With `time_conditioned`, a sinusoidal embedding of the timestep passes
//! through a dense layer with ReLU, and every block adds its own dense
//! projection of that vector channel-wise right after its first convolution.
//!
//! Initialisation: convolution and dense weights are normal with standard
//! deviation `√(2/fan_in)` (`fan_in = cin·k²` or the input width); the
//! transposed convolutions and the output head use `√(1/cin)`. Biases and
//! batch-norm shifts start at zero, batch-norm scales at one.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ops::{self, BnCache};
use super::tensor::{Scalar, Tensor};
use crate::rng::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("input {h}x{w} is not divisible by 2^{depth}")]
    Indivisible { h: usize, w: usize, depth: usize },
    #[error("expected {expected} input channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("time conditioning requires one timestep per batch item")]
    MissingTime,
    #[error("parameter vector has {got} entries, spec needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("upstream gradient shape does not match the output")]
    GradShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvUNetSpec {
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_conditioned: bool,
    pub batch_norm: bool,
    pub bottleneck_mult: usize,
}

impl ConvUNetSpec {
    pub fn new(depth: usize, base_filters: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            depth,
            base_filters,
            in_channels,
            out_channels,
            time_conditioned: false,
            batch_norm: true,
            bottleneck_mult: 1 << depth,
        }
    }

    /// Four levels, 64 base filters, one input channel, four classes.
    pub fn reference_segmenter() -> Self {
        Self::new(4, 64, 1, 4)
    }

    /// Segmenter used at 64² by default.
    pub fn desk_segmenter() -> Self {
        Self::new(3, 8, 1, 4)
    }

    /// Time-conditioned noise predictor; two outputs when the variance is
    /// learned.
    pub fn desk_denoiser(base_filters: usize, learn_sigma: bool) -> Self {
        Self {
            time_conditioned: true,
            batch_norm: false,
            ..Self::new(3, base_filters, 1, if learn_sigma { 2 } else { 1 })
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.depth == 0 || self.depth > 8 {
            return Err(NetError::Spec(format!("depth {} outside [1, 8]", self.depth)));
        }
        if self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 || self.bottleneck_mult == 0 {
            return Err(NetError::Spec("channel counts must be positive".into()));
        }
        if self.in_channels > 1 << 12 || self.out_channels > 1 << 12 || self.base_filters > 1 << 12 {
            return Err(NetError::Spec("channel counts above 4096".into()));
        }
        if self.base_filters.checked_mul(self.bottleneck_mult).map_or(true, |c| c > 1 << 16) {
            return Err(NetError::Spec("bottleneck too wide".into()));
        }
        Ok(())
    }

    pub fn level_filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn bottleneck_filters(&self) -> usize {
        self.base_filters * self.bottleneck_mult
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_filters
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).map(|l| l.n_params).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Range<usize>,
    b: Range<usize>,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone)]
struct Dense {
    w: Range<usize>,
    b: Range<usize>,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: Range<usize>,
    beta: Range<usize>,
    run_mean: Range<usize>,
    run_var: Range<usize>,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    temb: Option<Dense>,
    bn1: Option<Norm>,
    conv2: Conv,
    bn2: Option<Norm>,
}

#[derive(Debug, Clone)]
struct Up {
    w: Range<usize>,
    b: Range<usize>,
    cout: usize,
}

#[derive(Default)]
struct Alloc {
    params: usize,
    buffers: usize,
}

impl Alloc {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.params..self.params + n;
        self.params += n;
        r
    }

    fn buffer(&mut self, n: usize) -> Range<usize> {
        let r = self.buffers..self.buffers + n;
        self.buffers += n;
        r
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> Conv {
        Conv {
            w: self.take(cout * cin * k * k),
            b: self.take(cout),
            cin,
            cout,
            k,
        }
    }

    fn dense(&mut self, din: usize, dout: usize) -> Dense {
        Dense {
            w: self.take(din * dout),
            b: self.take(dout),
            din,
            dout,
        }
    }

    fn norm(&mut self, c: usize) -> Norm {
        Norm {
            gamma: self.take(c),
            beta: self.take(c),
            run_mean: self.buffer(c),
            run_var: self.buffer(c),
        }
    }

    fn block(&mut self, cin: usize, cout: usize, spec: &ConvUNetSpec) -> Block {
        let conv1 = self.conv(cin, cout, 3);
        let temb = spec.time_conditioned.then(|| self.dense(spec.time_dim(), cout));
        let bn1 = spec.batch_norm.then(|| self.norm(cout));
        let conv2 = self.conv(cout, cout, 3);
        let bn2 = spec.batch_norm.then(|| self.norm(cout));
        Block {
            conv1,
            temb,
            bn1,
            conv2,
            bn2,
        }
    }
}

/// Parameter layout of a network, derived from its spec.
#[derive(Debug, Clone)]
pub struct Layout {
    spec: ConvUNetSpec,
    time: Option<Dense>,
    enc: Vec<Block>,
    bridge: Block,
    ups: Vec<Up>,
    dec: Vec<Block>,
    head: Conv,
    pub n_params: usize,
    pub n_buffers: usize,
}

/// Whether batch norm uses batch statistics (training) or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BlockCache<S> {
    x: Tensor<S>,
    bn1: Option<BnCache<S>>,
    h1: Tensor<S>,
    bn2: Option<BnCache<S>>,
    out: Tensor<S>,
}

/// Activations saved by a forward pass for the backward pass.
pub struct ForwardCache<S> {
    mode: Mode,
    emb: Option<Vec<S>>,
    e1: Option<Vec<S>>,
    enc: Vec<BlockCache<S>>,
    pools: Vec<(Vec<u8>, usize, usize)>,
    bridge: BlockCache<S>,
    up_in: Vec<Tensor<S>>,
    dec: Vec<BlockCache<S>>,
    head_in: Tensor<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Batch means and biased variances of every batch-norm layer, in
    /// layout order.
    fn batch_stats(&self) -> Vec<&BnCache<S>> {
        self.enc
            .iter()
            .chain(std::iter::once(&self.bridge))
            .chain(self.dec.iter())
            .flat_map(|b| b.bn1.iter().chain(b.bn2.iter()))
            .collect()
    }

    /// Signature of every ReLU and pooling decision; two passes with equal
    /// signatures lie in the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut word = 0u64;
        let mut n = 0;
        let mut push = |b: bool| {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                bits.push(word);
                word = 0;
                n = 0;
            }
        };
        let mut block = |b: &BlockCache<S>| {
            b.h1.data.iter().for_each(|v| push(*v > S::zero()));
            b.out.data.iter().for_each(|v| push(*v > S::zero()));
        };
        self.enc.iter().for_each(&mut block);
        block(&self.bridge);
        self.dec.iter().for_each(&mut block);
        if let Some(e1) = &self.e1 {
            e1.iter().for_each(|v| push(*v > S::zero()));
        }
        for (arg, _, _) in &self.pools {
            arg.iter().for_each(|&a| {
                push(a & 1 == 1);
                push(a & 2 == 2);
            });
        }
        bits.push(word);
        bits
    }
}

fn normal_fill<S: Scalar>(out: &mut [S], std: f64, rng: &mut SeededRng) {
    for v in out {
        *v = S::of(std * rng.normal());
    }
}

/// Sinusoidal embedding `[cos(t·f_i), sin(t·f_i)]` with
/// `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = (t * f).cos();
        e[half + i] = (t * f).sin();
    }
    e
}

impl Layout {
    pub fn new(spec: &ConvUNetSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut a = Alloc::default();
        let time = spec
            .time_conditioned
            .then(|| a.dense(spec.time_dim(), spec.time_dim()));
        let mut enc = Vec::new();
        let mut cin = spec.in_channels;
        for level in 0..spec.depth {
            let c = spec.level_filters(level);
            enc.push(a.block(cin, c, spec));
            cin = c;
        }
        let bridge = a.block(cin, spec.bottleneck_filters(), spec);
        let mut prev = spec.bottleneck_filters();
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for level in (0..spec.depth).rev() {
            let c = spec.level_filters(level);
            ups.push(Up {
                w: a.take(prev * c * 4),
                b: a.take(c),
                cout: c,
            });
            dec.push(a.block(2 * c, c, spec));
            prev = c;
        }
        let head = a.conv(spec.base_filters, spec.out_channels, 1);
        Ok(Self {
            spec: spec.clone(),
            time,
            enc,
            bridge,
            ups,
            dec,
            head,
            n_params: a.params,
            n_buffers: a.buffers,
        })
    }

    pub fn spec(&self) -> &ConvUNetSpec {
        &self.spec
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.enc.iter().chain(std::iter::once(&self.bridge)).chain(self.dec.iter())
    }

    /// Fresh parameters and buffers.
    pub fn init<S: Scalar>(&self, rng: &mut SeededRng) -> (Vec<S>, Vec<S>) {
        let mut p = vec![S::zero(); self.n_params];
        let mut buf = vec![S::zero(); self.n_buffers];
        let conv = |c: &Conv, p: &mut [S], rng: &mut SeededRng, std: f64| normal_fill(&mut p[c.w.clone()], std, rng);
        if let Some(d) = &self.time {
            normal_fill(&mut p[d.w.clone()], (2.0 / d.din as f64).sqrt(), rng);
        }
        // Walk the layout in allocation order so the stream is stable.
        let init_block = |b: &Block, p: &mut [S], buf: &mut [S], rng: &mut SeededRng| {
            conv(&b.conv1, p, rng, (2.0 / (b.conv1.cin * 9) as f64).sqrt());
            if let Some(d) = &b.temb {
                normal_fill(&mut p[d.w.clone()], (1.0 / d.din as f64).sqrt(), rng);
            }
            for n in b.bn1.iter().chain(b.bn2.iter()) {
                p[n.gamma.clone()].fill(S::one());
                buf[n.run_var.clone()].fill(S::one());
            }
            conv(&b.conv2, p, rng, (2.0 / (b.conv2.cin * 9) as f64).sqrt());
        };
        for b in &self.enc {
            init_block(b, &mut p, &mut buf, rng);
        }
        init_block(&self.bridge, &mut p, &mut buf, rng);
        let mut cin = self.spec.bottleneck_filters();
        for (u, b) in self.ups.iter().zip(&self.dec) {
            normal_fill(&mut p[u.w.clone()], (1.0 / cin as f64).sqrt(), rng);
            init_block(b, &mut p, &mut buf, rng);
            cin = u.cout;
        }
        conv(&self.head, &mut p, rng, (1.0 / self.head.cin as f64).sqrt());
        (p, buf)
    }

    /// Indices of the output head's weights (not biases).
    pub fn head_weights(&self) -> Range<usize> {
        self.head.w.clone()
    }

    pub fn head_bias(&self) -> Range<usize> {
        self.head.b.clone()
    }

    fn check_input<S: Scalar>(&self, x: &Tensor<S>, t: Option<&[f64]>) -> Result<(), NetError> {
        let f = 1 << self.spec.depth;
        if x.h % f != 0 || x.w % f != 0 || x.h == 0 || x.w == 0 {
            return Err(NetError::Indivisible {
                h: x.h,
                w: x.w,
                depth: self.spec.depth,
            });
        }
        if x.c != self.spec.in_channels {
            return Err(NetError::Channels {
                expected: self.spec.in_channels,
                got: x.c,
            });
        }
        if self.spec.time_conditioned && t.map_or(true, |t| t.len() != x.n) {
            return Err(NetError::MissingTime);
        }
        Ok(())
    }

    fn block_forward<S: Scalar>(
        &self,
        b: &Block,
        p: &[S],
        buf: &[S],
        x: Tensor<S>,
        e1: Option<&[S]>,
        mode: Mode,
    ) -> BlockCache<S> {
        let mut z1 = ops::conv_forward(&x, &p[b.conv1.w.clone()], &p[b.conv1.b.clone()], b.conv1.cout, b.conv1.k);
        if let (Some(d), Some(e1)) = (&b.temb, e1) {
            let plane = z1.plane();
            for i in 0..z1.n {
                let mut add = p[d.b.clone()].to_vec();
                S::gemm(d.dout, d.din, 1, &p[d.w.clone()], false, &e1[i * d.din..(i + 1) * d.din], false, S::one(), &mut add);
                let s = z1.sample_mut(i);
                for (c, a) in add.iter().enumerate() {
                    s[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v + *a);
                }
            }
        }
        let norm = |z: &Tensor<S>, n: &Option<Norm>| -> (Tensor<S>, Option<BnCache<S>>) {
            match (n, mode) {
                (None, _) => (z.clone(), None),
                (Some(n), Mode::Train) => {
                    let (y, c) = ops::bn_train_forward(z, &p[n.gamma.clone()], &p[n.beta.clone()]);
                    (y, Some(c))
                }
                (Some(n), Mode::Eval) => (
                    ops::bn_eval_forward(z, &p[n.gamma.clone()], &p[n.beta.clone()], &buf[n.run_mean.clone()], &buf[n.run_var.clone()]),
                    None,
                ),
            }
        };
        let (mut h1, bn1) = norm(&z1, &b.bn1);
        ops::relu_inplace(&mut h1);
        let z2 = ops::conv_forward(&h1, &p[b.conv2.w.clone()], &p[b.conv2.b.clone()], b.conv2.cout, b.conv2.k);
        let (mut out, bn2) = norm(&z2, &b.bn2);
        ops::relu_inplace(&mut out);
        BlockCache {
            x,
            bn1,
            h1,
            bn2,
            out,
        }
    }

    /// Forward pass. `t` carries one (already scaled) timestep per batch
    /// item for time-conditioned networks.
    pub fn forward<S: Scalar>(
        &self,
        params: &[S],
        buffers: &[S],
        x: &Tensor<S>,
        t: Option<&[f64]>,
        mode: Mode,
    ) -> Result<(Tensor<S>, ForwardCache<S>), NetError> {
        if params.len() != self.n_params {
            return Err(NetError::ParamCount {
                expected: self.n_params,
                got: params.len(),
            });
        }
        if buffers.len() != self.n_buffers {
            return Err(NetError::ParamCount {
                expected: self.n_buffers,
                got: buffers.len(),
            });
        }
        self.check_input(x, t)?;
        let (emb, e1) = match (&self.time, t) {
            (Some(d), Some(ts)) => {
                let emb: Vec<S> = ts
                    .iter()
                    .flat_map(|&t| timestep_embedding(t, d.din))
                    .map(S::of)
                    .collect();
                let mut e1 = Vec::with_capacity(x.n * d.dout);
                for _ in 0..x.n {
                    e1.extend_from_slice(&params[d.b.clone()]);
                }
                for i in 0..x.n {
                    S::gemm(d.dout, d.din, 1, &params[d.w.clone()], false, &emb[i * d.din..(i + 1) * d.din], false, S::one(), &mut e1[i * d.dout..(i + 1) * d.dout]);
                }
                e1.iter_mut().for_each(|v| {
                    if *v < S::zero() {
                        *v = S::zero()
                    }
                });
                (Some(emb), Some(e1))
            }
            _ => (None, None),
        };
        let e1s = e1.as_deref();
        let mut enc = Vec::with_capacity(self.spec.depth);
        let mut pools = Vec::with_capacity(self.spec.depth);
        let mut cur = x.clone();
        for b in &self.enc {
            let cache = self.block_forward(b, params, buffers, cur, e1s, mode);
            let (pooled, arg) = ops::maxpool_forward(&cache.out);
            pools.push((arg, cache.out.h, cache.out.w));
            enc.push(cache);
            cur = pooled;
        }
        let bridge = self.block_forward(&self.bridge, params, buffers, cur, e1s, mode);
        let mut cur = bridge.out.clone();
        let mut up_in = Vec::with_capacity(self.spec.depth);
        let mut dec = Vec::with_capacity(self.spec.depth);
        for (k, (u, b)) in self.ups.iter().zip(&self.dec).enumerate() {
            let up = ops::convt_forward(&cur, &params[u.w.clone()], &params[u.b.clone()], u.cout);
            let skip = &enc[self.spec.depth - 1 - k].out;
            let cat = concat(skip, &up);
            up_in.push(cur);
            let cache = self.block_forward(b, params, buffers, cat, e1s, mode);
            cur = cache.out.clone();
            dec.push(cache);
        }
        let out = ops::conv_forward(&cur, &params[self.head.w.clone()], &params[self.head.b.clone()], self.head.cout, self.head.k);
        Ok((
            out,
            ForwardCache {
                mode,
                emb,
                e1,
                enc,
                pools,
                bridge,
                up_in,
                dec,
                head_in: cur,
            },
        ))
    }

    fn block_backward<S: Scalar>(
        &self,
        b: &Block,
        p: &[S],
        g: &mut [S],
        c: &BlockCache<S>,
        mut dout: Tensor<S>,
        de1: Option<&mut [S]>,
        e1: Option<&[S]>,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        ops::relu_backward_inplace(&mut dout, &c.out);
        let dz2 = match (&b.bn2, &c.bn2) {
            (Some(n), Some(bc)) => bn_backward(p, g, n, bc, &dout),
            _ => dout,
        };
        let (w2, b2) = split_grads(g, &b.conv2);
        let mut dh1 = ops::conv_backward(&c.h1, &dz2, &p[b.conv2.w.clone()], b.conv2.k, w2, b2, true).expect("dx requested");
        ops::relu_backward_inplace(&mut dh1, &c.h1);
        let dz1 = match (&b.bn1, &c.bn1) {
            (Some(n), Some(bc)) => bn_backward(p, g, n, bc, &dh1),
            _ => dh1,
        };
        if let (Some(d), Some(de1), Some(e1)) = (&b.temb, de1, e1) {
            let plane = dz1.plane();
            for i in 0..dz1.n {
                let s = dz1.sample(i);
                let dadd: Vec<S> = (0..d.dout)
                    .map(|ch| s[ch * plane..(ch + 1) * plane].iter().copied().sum())
                    .collect();
                for (gb, v) in g[d.b.clone()].iter_mut().zip(&dadd) {
                    *gb = *gb + *v;
                }
                S::gemm(d.dout, 1, d.din, &dadd, false, &e1[i * d.din..(i + 1) * d.din], false, S::one(), &mut g[d.w.clone()]);
                S::gemm(d.din, d.dout, 1, &p[d.w.clone()], true, &dadd, false, S::one(), &mut de1[i * d.din..(i + 1) * d.din]);
            }
        }
        let (w1, b1) = split_grads(g, &b.conv1);
        ops::conv_backward(&c.x, &dz1, &p[b.conv1.w.clone()], b.conv1.k, w1, b1, need_dx)
    }

    /// Reverse-mode gradient of `Σ dout ⊙ output` with respect to the
    /// parameters, accumulated into `grads`. Requires a cache from a
    /// training-mode pass when the network has batch norm.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        cache: &ForwardCache<S>,
        dout: &Tensor<S>,
        grads: &mut [S],
    ) -> Result<(), NetError> {
        if grads.len() != self.n_params {
            return Err(NetError::ParamCount {
                expected: self.n_params,
                got: grads.len(),
            });
        }
        if dout.c != self.head.cout || dout.h != cache.head_in.h || dout.w != cache.head_in.w || dout.n != cache.head_in.n {
            return Err(NetError::GradShape);
        }
        if self.spec.batch_norm && cache.mode == Mode::Eval {
            return Err(NetError::Spec("backward needs a training-mode forward pass".into()));
        }
        let e1 = cache.e1.as_deref();
        let mut de1 = e1.map(|e| vec![S::zero(); e.len()]);
        let (hw, hb) = split_grads(grads, &self.head);
        let mut cur = ops::conv_backward(&cache.head_in, dout, &params[self.head.w.clone()], self.head.k, hw, hb, true).expect("dx");
        let depth = self.spec.depth;
        let mut skip_grads: Vec<Option<Tensor<S>>> = (0..depth).map(|_| None).collect();
        for k in (0..depth).rev() {
            let b = &self.dec[k];
            let u = &self.ups[k];
            let dcat = self
                .block_backward(b, params, grads, &cache.dec[k], cur, de1.as_deref_mut(), e1, true)
                .expect("dx");
            let skip_c = cache.enc[depth - 1 - k].out.c;
            let (dskip, dup) = split_channels(&dcat, skip_c);
            skip_grads[depth - 1 - k] = Some(dskip);
            let (gw, gb) = (u.w.clone(), u.b.clone());
            let (lo, hi) = grads.split_at_mut(gb.start);
            cur = ops::convt_backward(&cache.up_in[k], &dup, &params[u.w.clone()], &mut lo[gw], &mut hi[..gb.len()]);
        }
        let mut cur = self
            .block_backward(&self.bridge, params, grads, &cache.bridge, cur, de1.as_deref_mut(), e1, true)
            .expect("dx");
        for level in (0..depth).rev() {
            let (arg, h, w) = &cache.pools[level];
            let mut d = ops::maxpool_backward(&cur, arg, *h, *w);
            let skip = skip_grads[level].take().expect("filled by decoder");
            d.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a = *a + *b);
            let need_dx = level > 0;
            match self.block_backward(&self.enc[level], params, grads, &cache.enc[level], d, de1.as_deref_mut(), e1, need_dx) {
                Some(dx) => cur = dx,
                None => break,
            }
        }
        if let (Some(d), Some(de1), Some(emb), Some(e1)) = (&self.time, de1, &cache.emb, e1) {
            for i in 0..e1.len() / d.dout {
                let mut dpre: Vec<S> = de1[i * d.dout..(i + 1) * d.dout].to_vec();
                for (v, e) in dpre.iter_mut().zip(&e1[i * d.dout..(i + 1) * d.dout]) {
                    if *e <= S::zero() {
                        *v = S::zero();
                    }
                }
                for (gb, v) in grads[d.b.clone()].iter_mut().zip(&dpre) {
                    *gb = *gb + *v;
                }
                S::gemm(d.dout, 1, d.din, &dpre, false, &emb[i * d.din..(i + 1) * d.din], false, S::one(), &mut grads[d.w.clone()]);
            }
        }
        Ok(())
    }

    /// Fold the batch statistics of a training pass into the running
    /// estimates: `r ← (1−m)·r + m·batch` with the unbiased variance.
    pub fn update_running_stats<S: Scalar>(&self, buffers: &mut [S], cache: &ForwardCache<S>) {
        let m = ops::BN_MOMENTUM;
        let norms: Vec<&Norm> = self
            .blocks()
            .flat_map(|b| b.bn1.iter().chain(b.bn2.iter()))
            .collect();
        let stats = cache.batch_stats();
        let count = |bc: &BnCache<S>| (bc.xhat.n * bc.xhat.plane()) as f64;
        for (n, bc) in norms.iter().zip(stats) {
            let k = count(bc);
            let unbias = if k > 1.0 { k / (k - 1.0) } else { 1.0 };
            for (i, (rm, rv)) in n.run_mean.clone().zip(n.run_var.clone()).enumerate() {
                buffers[rm] = S::of((1.0 - m) * buffers[rm].f64() + m * bc.mean[i].f64());
                buffers[rv] = S::of((1.0 - m) * buffers[rv].f64() + m * bc.var[i].f64() * unbias);
            }
        }
    }
}

fn split_grads<'a, S>(g: &'a mut [S], c: &Conv) -> (&'a mut [S], &'a mut [S]) {
    debug_assert_eq!(c.w.end, c.b.start);
    let (lo, hi) = g.split_at_mut(c.b.start);
    (&mut lo[c.w.clone()], &mut hi[..c.b.len()])
}

fn bn_backward<S: Scalar>(p: &[S], g: &mut [S], n: &Norm, bc: &BnCache<S>, dout: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(n.gamma.end, n.beta.start);
    let (lo, hi) = g.split_at_mut(n.beta.start);
    ops::bn_train_backward(dout, bc, &p[n.gamma.clone()], &mut lo[n.gamma.clone()], &mut hi[..n.beta.len()])
}

fn concat<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let s = out.sample_mut(i);
        let na = a.sample(i).len();
        s[..na].copy_from_slice(a.sample(i));
        s[na..].copy_from_slice(b.sample(i));
    }
    out
}

fn split_channels<S: Scalar>(x: &Tensor<S>, first: usize) -> (Tensor<S>, Tensor<S>) {
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - first, x.h, x.w);
    for i in 0..x.n {
        let s = x.sample(i);
        let na = first * x.plane();
        a.sample_mut(i).copy_from_slice(&s[..na]);
        b.sample_mut(i).copy_from_slice(&s[na..]);
    }
    (a, b)
}
