//! Training loops for the noise predictor and the segmenter.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, DiffusionMeta, ModelKind, TrainingMeta};
use super::denoiser::{sigmoid, NeuralDenoiser, Segmenter};
use super::tensor::Tensor;
use super::unet::{ConvUNetSpec, Mode, NetError};
use super::{batch_of, Network};
use crate::grid::{Class, Grid2D, LabelMap};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, ScheduleError, ScheduleKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss {loss}")]
    Diverged { epoch: usize, iteration: usize, loss: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Hand the network to the checkpoint callback every this many epochs;
    /// 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config("Adam moments must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let step = (self.lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t))) as f32;
        let eps = (self.cfg.eps * (1.0 - b2.powi(self.t)).sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Per-iteration losses. `simple` is the noise-regression term alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub simple: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,simple\n");
        for (i, (l, m)) in self.loss.iter().zip(&self.simple).enumerate() {
            s.push_str(&format!("{},{:.6},{:.6}\n", i + 1, l, m));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTraining {
    pub train: TrainConfig,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub learn_sigma: bool,
    /// Weight of the variational term relative to the per-step average.
    pub vlb_weight: f64,
}

impl DenoiserTraining {
    pub fn desk(seed: u64) -> Self {
        Self {
            train: TrainConfig {
                epochs: 100,
                batch_size: 8,
                learning_rate: 1e-3,
                adam: AdamConfig::default(),
                seed,
                checkpoint_every: 0,
            },
            schedule: ScheduleKind::Linear,
            steps: 1000,
            learn_sigma: true,
            vlb_weight: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterTraining {
    pub train: TrainConfig,
}

impl SegmenterTraining {
    pub fn desk(seed: u64) -> Self {
        Self {
            train: TrainConfig {
                epochs: 60,
                batch_size: 8,
                learning_rate: 1e-3,
                adam: AdamConfig::default(),
                seed,
                checkpoint_every: 0,
            },
        }
    }
}

fn check_finite(loss: f64, epoch: usize, iteration: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { epoch, iteration, loss })
    }
}

fn same_shapes(mut shapes: impl Iterator<Item = (usize, usize)>) -> Result<(), TrainError> {
    let first = shapes.next().ok_or_else(|| TrainError::Config("empty dataset".into()))?;
    if shapes.all(|s| s == first) {
        Ok(())
    } else {
        Err(TrainError::Config("dataset images differ in shape".into()))
    }
}

/// Loss and upstream gradient of the noise-prediction objective for one
/// batch. `out` has one or two channels; the variational term only reaches
/// the variance channel (the mean is treated as a constant there).
pub fn denoiser_loss(
    out: &Tensor<f32>,
    y0: &Tensor<f32>,
    y_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    ts: &[usize],
    sched: &NoiseSchedule,
    vlb_weight: f64,
) -> (f64, f64, Tensor<f32>) {
    let plane = out.plane();
    let count = (out.n * plane) as f64;
    let mut dout = out.same_shape();
    let mut simple = 0.0;
    let mut vlb = 0.0;
    let learn_sigma = out.c == 2;
    let w = vlb_weight * sched.steps() as f64;
    for (i, &t) in ts.iter().enumerate() {
        let o = out.sample(i);
        let (y0s, yts, es) = (y0.sample(i), y_t.sample(i), eps.sample(i));
        let d = dout.sample_mut(i);
        let (c0, ct) = sched.posterior_mean_coefs(t);
        let (lb, lp) = (sched.log_beta(t), sched.log_posterior_variance(t));
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        for p in 0..plane {
            let e_hat = o[p] as f64;
            let diff = e_hat - es[p] as f64;
            simple += diff * diff;
            d[p] = (2.0 * diff / count) as f32;
            if !learn_sigma {
                continue;
            }
            let v = sigmoid(o[plane + p] as f64);
            let lv = v * lb + (1.0 - v) * lp;
            let mu_p = inv_sqrt_alpha * (yts[p] as f64 - eps_coef * e_hat);
            let (term, dlv) = if t == 1 {
                let r2 = (y0s[p] as f64 - mu_p).powi(2) * (-lv).exp();
                (0.5 * ((2.0 * PI).ln() + lv + r2), 0.5 * (1.0 - r2))
            } else {
                let mu_q = c0 * y0s[p] as f64 + ct * yts[p] as f64;
                let r2 = (mu_q - mu_p).powi(2) * (-lv).exp();
                let ratio = (lp - lv).exp();
                (0.5 * (-1.0 + lv - lp + ratio + r2), 0.5 * (1.0 - ratio - r2))
            };
            vlb += term / LN_2;
            d[plane + p] = (w * dlv / LN_2 * (lb - lp) * v * (1.0 - v) / count) as f32;
        }
    }
    let simple = simple / count;
    (simple + w * vlb / count, simple, dout)
}

/// Train a noise predictor on images in the working range `[−1, 1]`.
pub fn train_denoiser(
    images: &[Grid2D],
    spec: &ConvUNetSpec,
    cfg: &DenoiserTraining,
    on_checkpoint: &mut dyn FnMut(usize, &Network),
) -> Result<(NeuralDenoiser, TrainLog), TrainError> {
    cfg.train.validate()?;
    same_shapes(images.iter().map(|g| g.shape()))?;
    if !(cfg.vlb_weight >= 0.0) {
        return Err(TrainError::Config("vlb weight must be non-negative".into()));
    }
    let sched = NoiseSchedule::build(cfg.schedule, cfg.steps)?;
    let diffusion = DiffusionMeta {
        schedule: cfg.schedule,
        steps: cfg.steps,
        learn_sigma: cfg.learn_sigma,
    };
    let mut rng = SeededRng::new(cfg.train.seed);
    let mut net = Network::new(spec, &mut rng)?;
    NeuralDenoiser::new(net.clone(), diffusion.clone())?;
    let layout = net.layout().clone();
    let mut adam = Adam::new(layout.n_params, cfg.train.learning_rate, cfg.train.adam);
    let mut grads = vec![0.0f32; layout.n_params];
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let (w, h) = images[0].shape();
    for epoch in 1..=cfg.train.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.train.batch_size) {
            let y0 = batch_of(&chunk.iter().map(|&i| &images[i]).collect::<Vec<_>>());
            let ts: Vec<usize> = chunk.iter().map(|_| 1 + rng.below(cfg.steps)).collect();
            let mut eps = Tensor::zeros(chunk.len(), 1, h, w);
            eps.data.iter_mut().for_each(|v| *v = rng.normal() as f32);
            let mut y_t = y0.clone();
            for (i, &t) in ts.iter().enumerate() {
                let ab = sched.alpha_bar(t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                let e = eps.sample(i).to_vec();
                for (y, e) in y_t.sample_mut(i).iter_mut().zip(e) {
                    *y = (a * *y as f64 + b * e as f64) as f32;
                }
            }
            let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
            let (out, cache) = layout.forward(&net.params, &net.buffers, &y_t, Some(&tf), Mode::Train)?;
            let (loss, simple, dout) = denoiser_loss(&out, &y0, &y_t, &eps, &ts, &sched, cfg.vlb_weight);
            check_finite(loss, epoch, log.loss.len() + 1)?;
            grads.fill(0.0);
            layout.backward(&net.params, &cache, &dout, &mut grads)?;
            if spec.batch_norm {
                layout.update_running_stats(&mut net.buffers, &cache);
            }
            adam.step(&mut net.params, &grads);
            log.loss.push(loss);
            log.simple.push(simple);
        }
        if epoch % 10 == 0 || epoch == cfg.train.epochs {
            log::info!("denoiser epoch {epoch}: loss {:.5}", log.loss.last().copied().unwrap_or(f64::NAN));
        }
        if cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0 {
            on_checkpoint(epoch, &net);
        }
    }
    Ok((NeuralDenoiser::new(net, diffusion)?, log))
}

/// Cross-entropy plus soft Dice over the foreground classes, with the
/// gradient with respect to the logits.
pub fn segmentation_loss(logits: &Tensor<f32>, labels: &[&LabelMap]) -> (f64, Tensor<f32>) {
    let (n, k, plane) = (logits.n, logits.c, logits.plane());
    let count = (n * plane) as f64;
    let mut probs = vec![0.0f64; n * k * plane];
    let mut ce = 0.0;
    for i in 0..n {
        let s = logits.sample(i);
        let g = labels[i].data();
        for p in 0..plane {
            let m = (0..k).map(|c| s[c * plane + p] as f64).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (s[c * plane + p] as f64 - m).exp()).sum();
            for c in 0..k {
                probs[(i * k + c) * plane + p] = (s[c * plane + p] as f64 - m).exp() / z;
            }
            ce -= (s[g[p] as usize * plane + p] as f64 - m) - z.ln();
        }
    }
    ce /= count;
    // Soft Dice per foreground class over the whole batch.
    let fg = &Class::FOREGROUND;
    let mut inter = vec![0.0; k];
    let mut denom = vec![0.0; k];
    for i in 0..n {
        let g = labels[i].data();
        for cls in fg {
            let c = cls.id() as usize;
            for p in 0..plane {
                let pr = probs[(i * k + c) * plane + p];
                let gt = (g[p] as usize == c) as u8 as f64;
                inter[c] += pr * gt;
                denom[c] += pr + gt;
            }
        }
    }
    let mut dice_loss = 0.0;
    for cls in fg {
        let c = cls.id() as usize;
        let dice = if denom[c] > 0.0 { 2.0 * inter[c] / denom[c] } else { 1.0 };
        dice_loss += (1.0 - dice) / fg.len() as f64;
    }
    let mut dz = logits.same_shape();
    let mut a = vec![0.0; k];
    for i in 0..n {
        let g = labels[i].data();
        let d = dz.sample_mut(i);
        for p in 0..plane {
            for cls in fg {
                let c = cls.id() as usize;
                let gt = (g[p] as usize == c) as u8 as f64;
                a[c] = if denom[c] > 0.0 {
                    -(2.0 * gt / denom[c] - 2.0 * inter[c] / (denom[c] * denom[c])) / fg.len() as f64
                } else {
                    0.0
                };
            }
            let dot: f64 = (0..k).map(|c| probs[(i * k + c) * plane + p] * a[c]).sum();
            for c in 0..k {
                let pr = probs[(i * k + c) * plane + p];
                let gt = (g[p] as usize == c) as u8 as f64;
                d[c * plane + p] = ((pr - gt) / count + pr * (a[c] - dot)) as f32;
            }
        }
    }
    (ce + dice_loss, dz)
}

/// Train a segmenter on preprocessed images and their label maps.
pub fn train_segmenter(
    data: &[(Grid2D, LabelMap)],
    spec: &ConvUNetSpec,
    cfg: &SegmenterTraining,
    on_checkpoint: &mut dyn FnMut(usize, &Network),
) -> Result<(Segmenter, TrainLog), TrainError> {
    cfg.train.validate()?;
    same_shapes(data.iter().map(|(g, _)| g.shape()))?;
    if data.iter().any(|(g, l)| g.shape() != l.shape()) {
        return Err(TrainError::Config("image and label shapes differ".into()));
    }
    let mut rng = SeededRng::new(cfg.train.seed);
    let mut net = Network::new(spec, &mut rng)?;
    Segmenter::new(net.clone())?;
    let layout = net.layout().clone();
    let mut adam = Adam::new(layout.n_params, cfg.train.learning_rate, cfg.train.adam);
    let mut grads = vec![0.0f32; layout.n_params];
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.train.batch_size) {
            let x = batch_of(&chunk.iter().map(|&i| &data[i].0).collect::<Vec<_>>());
            let labels: Vec<&LabelMap> = chunk.iter().map(|&i| &data[i].1).collect();
            let (out, cache) = layout.forward(&net.params, &net.buffers, &x, None, Mode::Train)?;
            let (loss, dout) = segmentation_loss(&out, &labels);
            check_finite(loss, epoch, log.loss.len() + 1)?;
            grads.fill(0.0);
            layout.backward(&net.params, &cache, &dout, &mut grads)?;
            if spec.batch_norm {
                layout.update_running_stats(&mut net.buffers, &cache);
            }
            adam.step(&mut net.params, &grads);
            log.loss.push(loss);
            log.simple.push(loss);
        }
        if epoch % 10 == 0 || epoch == cfg.train.epochs {
            log::info!("segmenter epoch {epoch}: loss {:.5}", log.loss.last().copied().unwrap_or(f64::NAN));
        }
        if cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0 {
            on_checkpoint(epoch, &net);
        }
    }
    Ok((Segmenter::new(net)?, log))
}

impl NeuralDenoiser {
    pub fn to_checkpoint(&self, training: Option<TrainingMeta>) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Denoiser,
            network: self.network().clone(),
            diffusion: Some(self.diffusion().clone()),
            training,
            meta: Default::default(),
        }
    }
}

impl Segmenter {
    pub fn to_checkpoint(&self, training: Option<TrainingMeta>) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Segmenter,
            network: self.network().clone(),
            diffusion: None,
            training,
            meta: Default::default(),
        }
    }
}
