use rand::Rng;

use super::predictor::{NoiseModel, NoisePredictor};
use super::schedule::{forward_noise, DiffusionSchedule};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{rng_for, standard_normal};
use crate::tensor::{Real, Tensor};

/// The noised input, step and injected noise for one training example.
#[derive(Debug, Clone)]
pub struct NoisedSample<T> {
    pub step: usize,
    pub noise: Tensor<T>,
    pub noised: Tensor<T>,
}

/// Draw `s ~ U{1..S}` and `ε ~ N(0, I)` from a per-sample seed and noise `x0`.
pub fn draw_noised<T: Real>(
    x0: &Tensor<T>,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<NoisedSample<T>> {
    let mut rng = rng_for(seed, 0);
    let step = rng.random_range(1..=schedule.steps());
    let noise = standard_normal(&mut rng, x0.shape());
    let noised = forward_noise(x0, step, schedule, &noise)?;
    Ok(NoisedSample { step, noise, noised })
}

/// Mean squared noise-prediction error of one sample, traced for training.
pub fn ddpm_loss_traced<T: Real>(
    g: &mut Graph<T>,
    net: &NoisePredictor,
    store: &ParamStore<T>,
    sample: &NoisedSample<T>,
) -> Result<Var> {
    let x = g.constant(sample.noised.clone());
    let pred = net.forward(g, store, x, sample.step)?;
    let eps = g.constant(sample.noise.clone());
    let diff = g.sub(eps, pred)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Mean over all coordinates of `(ε − ε_θ(x_s, s))²`, with one explicit seed
/// per sample.
pub fn ddpm_loss_seeded<T: Real, M: NoiseModel<T>>(
    batch: &[(Tensor<T>, u64)],
    model: &M,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("ddpm loss over an empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x0, seed) in batch {
        let s = draw_noised(x0, schedule, *seed)?;
        let pred = model.predict(&s.noised, s.step)?;
        if pred.shape() != x0.shape() {
            return Err(Error::shape("ddpm_loss", pred.shape(), x0.shape()));
        }
        total += s
            .noise
            .data()
            .iter()
            .zip(pred.data())
            .map(|(&e, &p)| (e - p).f64().powi(2))
            .sum::<f64>();
        count += x0.len();
    }
    Ok(total / count as f64)
}

/// [`ddpm_loss_seeded`] with per-sample seeds derived from `seed` and the
/// sample's position in the batch.
pub fn ddpm_loss<T: Real, M: NoiseModel<T>>(
    batch: &[Tensor<T>],
    model: &M,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    let seeded: Vec<(Tensor<T>, u64)> = batch
        .iter()
        .enumerate()
        .map(|(i, x)| (x.clone(), crate::rng::derive_seed(seed, i as u64)))
        .collect();
    ddpm_loss_seeded(&seeded, model, schedule)
}
