//! Stand-alone training of the noise predictor on clean windows.

use rand::Rng;
use rayon::prelude::*;

use super::loss::{ddpm_loss_traced, draw_noised};
use super::predictor::NoisePredictor;
use super::schedule::DiffusionSchedule;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{average_grads, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct DenoiserTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Minimize the noise-prediction loss. Returns the per-step batch loss.
///
/// On a non-finite loss the update is skipped and an error returned, so
/// `store` keeps the last finite parameters.
pub fn train_denoiser<T: Real>(
    net: &NoisePredictor,
    store: &mut ParamStore<T>,
    data: &[Tensor<T>],
    schedule: &DiffusionSchedule,
    opts: &DenoiserTrainOptions,
) -> Result<Vec<f64>> {
    if data.is_empty() && opts.steps > 0 {
        return Err(Error::Usage("no training windows for the denoiser".into()));
    }
    let mut opt = Adam::new(opts.adam.clone());
    let mut pick = rng_for(opts.seed, u64::MAX);
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<(usize, u64)> = (0..opts.batch_size.max(1))
            .map(|j| {
                let idx = pick.random_range(0..data.len());
                (idx, derive_seed(opts.seed, (step * opts.batch_size + j) as u64))
            })
            .collect();
        let frozen_store: &ParamStore<T> = store;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&(idx, seed)| -> Result<_> {
                let sample = draw_noised(&data[idx], schedule, seed)?;
                let mut g = Graph::new();
                let loss = ddpm_loss_traced(&mut g, net, frozen_store, &sample)?;
                let value = g.value(loss).item().f64();
                Ok((value, g.backward(loss)?.into_params()))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("denoiser loss {loss} at step {step}")));
        }
        let grads = average_grads(results.into_iter().map(|r| r.1).collect());
        opt.step(store, &grads)?;
        curve.push(loss);
    }
    Ok(curve)
}
