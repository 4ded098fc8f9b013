//! The denoising block: variance schedule, sinusoidal step embedding, a
//! convolutional noise predictor, the noise-prediction loss and reverse
//! samplers used for mask-conditioned missing-value recovery.

mod loss;
mod predictor;
mod sampler;
mod schedule;
mod timestep;
pub mod train;

pub use loss::{ddpm_loss, ddpm_loss_seeded, ddpm_loss_traced, draw_noised, NoisedSample};
pub use predictor::{BoundPredictor, NoiseModel, NoisePredictor, NoisePredictorConfig};
pub use sampler::{
    recover_missing, reverse_step, sample_chain, sample_unconditional, Recovery,
    ReverseSamplerConfig, SamplerMode,
};
pub use schedule::{forward_noise, forward_noise_iterated, DiffusionSchedule};
pub use timestep::{timestep_embed, TimestepEmbeddingConfig};
