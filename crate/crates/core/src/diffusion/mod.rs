//! Pixel-space diffusion: schedule, UNet with PLACE cross-attention,
//! trainer and PLMS sampler.

mod model;
mod params;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use model::{LayoutMode, ModelConfig, PlaceModel, TEXT_EMBEDDING};
pub use params::{Bound, ParamId, ParamStore};
pub use sampler::{plms_loop, plms_sample, plms_timesteps, PlmsStep, SampleOutput, SampleRequest, DEFAULT_GUIDANCE, DEFAULT_SAMPLE_STEPS};
pub use schedule::{NoiseSchedule, TimeEmbedding, DEFAULT_TIMESTEPS};
pub use train::{compute_gradients, FreeExample, Gradients, LabeledExample, LossWeights, StepReport, TrainConfig, Trainer, CAPTION_DROPOUT};
pub use unet::{AlphaMode, BlockTrace, Conditioning, UNet, UNetConfig, UNetOutput};

use crate::fusion_attention::FusionError;
use crate::layout_control::LayoutError;
use crate::losses::LossError;
use crate::text_semantics::TextError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} out of range for a {steps}-step schedule")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("no layout control map for attention resolution {0}")]
    MissingResolutionLcm(usize),
    #[error("non-finite activation in the network output")]
    NonFiniteActivation,
    #[error("{steps} sampling steps exceed the {schedule}-step schedule")]
    StepsExceedSchedule { steps: usize, schedule: usize },
    #[error("invalid sampling request: {0}")]
    Sampling(String),
    #[error(transparent)]
    Graph(#[from] place_autograd::Error),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Loss(#[from] LossError),
}
