use super::checkpoint::{Checkpoint, DiffusionMeta, ModelKind};
use super::tensor::Tensor;
use super::unet::NetError;
use super::{batch_of, Network};
use crate::engine::{Denoiser, DenoiserOutput, EngineError};
use crate::grid::{Class, Grid2D, LabelMap};
use crate::schedule::NoiseSchedule;

/// Trained noise predictor. Channel 0 is `ε̂`; with a learned variance,
/// channel 1 passes through a logistic to give the interpolation weight.
#[derive(Debug, Clone)]
pub struct NeuralDenoiser {
    net: Network,
    diffusion: DiffusionMeta,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NeuralDenoiser {
    pub fn new(net: Network, diffusion: DiffusionMeta) -> Result<Self, NetError> {
        let spec = net.spec();
        let want = if diffusion.learn_sigma { 2 } else { 1 };
        if !spec.time_conditioned || spec.in_channels != 1 || spec.out_channels != want {
            return Err(NetError::Spec(format!(
                "denoiser needs a time-conditioned 1→{want} channel network"
            )));
        }
        Ok(Self { net, diffusion })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, NetError> {
        match (ck.kind, ck.diffusion) {
            (ModelKind::Denoiser, Some(d)) => Self::new(ck.network, d),
            _ => Err(NetError::Spec("checkpoint does not hold a denoiser".into())),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn diffusion(&self) -> &DiffusionMeta {
        &self.diffusion
    }

    /// Evaluate a batch of equally shaped grids at one timestep.
    pub fn evaluate_batch(
        &self,
        y_t: &[&Grid2D],
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<DenoiserOutput>, EngineError> {
        sched.check(t)?;
        if sched.model_steps() != self.diffusion.steps {
            return Err(EngineError::Denoiser(format!(
                "model trained with {} steps, schedule derives from {}",
                self.diffusion.steps,
                sched.model_steps()
            )));
        }
        if y_t.is_empty() {
            return Ok(Vec::new());
        }
        let x = batch_of(y_t);
        let ts = vec![sched.model_timestep(t) as f64; y_t.len()];
        let out = self
            .net
            .predict(&x, Some(&ts))
            .map_err(|e| EngineError::Denoiser(e.to_string()))?;
        let (w, h) = y_t[0].shape();
        let spacing = y_t[0].spacing();
        let grid = |data: Vec<f32>| Grid2D::from_vec(w, h, spacing, data).map_err(EngineError::from);
        (0..y_t.len())
            .map(|i| {
                let eps_hat = grid(out.channel(i, 0).to_vec())?;
                let var_logits = if self.diffusion.learn_sigma {
                    Some(grid(out.channel(i, 1).iter().map(|&v| sigmoid(v as f64) as f32).collect())?)
                } else {
                    None
                };
                Ok(DenoiserOutput { eps_hat, var_logits })
            })
            .collect()
    }
}

impl Denoiser for NeuralDenoiser {
    fn evaluate(&self, y_t: &Grid2D, t: usize, sched: &NoiseSchedule) -> Result<DenoiserOutput, EngineError> {
        Ok(self.evaluate_batch(&[y_t], t, sched)?.remove(0))
    }
}

/// Trained four-class segmentation network.
#[derive(Debug, Clone)]
pub struct Segmenter {
    net: Network,
}

/// Per-pixel argmax over class channels; ties go to the lower class id.
pub fn argmax_labels(logits: &Tensor<f32>, i: usize) -> Vec<u8> {
    let plane = logits.plane();
    let s = logits.sample(i);
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..logits.c {
                if s[c * plane + p] > s[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

impl Segmenter {
    pub fn new(net: Network) -> Result<Self, NetError> {
        let spec = net.spec();
        if spec.time_conditioned || spec.in_channels != 1 || spec.out_channels != Class::COUNT {
            return Err(NetError::Spec(format!(
                "segmenter needs a 1→{} channel network without time input",
                Class::COUNT
            )));
        }
        Ok(Self { net })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, NetError> {
        match ck.kind {
            ModelKind::Segmenter => Self::new(ck.network),
            ModelKind::Denoiser => Err(NetError::Spec("checkpoint does not hold a segmenter".into())),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn logits(&self, images: &[&Grid2D]) -> Result<Tensor<f32>, NetError> {
        self.net.predict(&batch_of(images), None)
    }

    /// Label maps for preprocessed images, computed in eval mode so the
    /// result does not depend on batch composition.
    pub fn segment_batch(&self, images: &[&Grid2D]) -> Result<Vec<LabelMap>, NetError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(images)?;
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                LabelMap::from_vec(img.width(), img.height(), img.spacing(), argmax_labels(&logits, i))
                    .map_err(|e| NetError::Spec(e.to_string()))
            })
            .collect()
    }

    pub fn segment(&self, image: &Grid2D) -> Result<LabelMap, NetError> {
        Ok(self.segment_batch(&[image])?.remove(0))
    }
}
