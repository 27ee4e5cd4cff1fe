//! Small convolutional networks: the time-conditioned noise predictor and
//! the segmenter share one U-Net implementation.

pub mod checkpoint;
pub mod denoiser;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod unet;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, DiffusionMeta,
    ModelKind, TrainingMeta,
};
pub use denoiser::{argmax_labels, NeuralDenoiser, Segmenter};
pub use tensor::{Scalar, Tensor};
pub use train::{train_denoiser, train_segmenter, DenoiserTraining, SegmenterTraining, TrainError, TrainLog};
pub use unet::{ConvUNetSpec, Layout, Mode, NetError};

use crate::grid::Grid2D;
use crate::rng::SeededRng;

/// A U-Net with its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Network {
    layout: Layout,
    pub params: Vec<f32>,
    pub buffers: Vec<f32>,
}

impl Network {
    pub fn new(spec: &ConvUNetSpec, rng: &mut SeededRng) -> Result<Self, NetError> {
        let layout = Layout::new(spec)?;
        let (params, buffers) = layout.init(rng);
        Ok(Self {
            layout,
            params,
            buffers,
        })
    }

    pub fn from_parts(spec: &ConvUNetSpec, params: Vec<f32>, buffers: Vec<f32>) -> Result<Self, NetError> {
        let layout = Layout::new(spec)?;
        for (expected, got) in [(layout.n_params, params.len()), (layout.n_buffers, buffers.len())] {
            if expected != got {
                return Err(NetError::ParamCount { expected, got });
            }
        }
        Ok(Self {
            layout,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &ConvUNetSpec {
        self.layout.spec()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, x: &Tensor<f32>, t: Option<&[f64]>) -> Result<Tensor<f32>, NetError> {
        self.layout
            .forward(&self.params, &self.buffers, x, t, Mode::Eval)
            .map(|(y, _)| y)
    }
}

/// Stack single-channel grids of equal shape into a batch.
pub fn batch_of(images: &[&Grid2D]) -> Tensor<f32> {
    let (w, h) = images.first().map_or((0, 0), |g| g.shape());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for g in images {
        assert_eq!(g.shape(), (w, h), "batch images must share a shape");
        data.extend_from_slice(g.data());
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}
