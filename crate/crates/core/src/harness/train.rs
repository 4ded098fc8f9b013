use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::artifacts::{load_bundle, save_bundle, Layout, RunLog};
use super::config::RunConfig;
use super::pipeline::{fill_inputs, prepare, streams, CacheStatus, Denoiser, Fill, Prepared};
use crate::autodiff::Graph;
use crate::data::WindowedDataset;
use crate::diffusion::train::{train_denoiser, DenoiserTrainOptions};
use crate::diffusion::{DiffusionSchedule, NoisePredictor};
use crate::embedding::CalendarIndex;
use crate::error::{Error, Result};
use crate::model::{masked_l1_loss, Forecaster};
use crate::optim::{average_grads, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_for};
use crate::stdf;
use crate::stllm;
use crate::tensor::Tensor;

pub const DENOISER_KIND: &str = "denoiser";
pub const FORECASTER_KIND: &str = "forecaster";

/// Summary of a `prepare` run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareOutcome {
    pub status: CacheStatus,
    pub samples: [usize; 3],
}

pub fn cmd_prepare(cfg: &RunConfig, out: &Path) -> Result<PrepareOutcome> {
    let layout = Layout::new(out);
    let mut log = RunLog::open(out, "prepare")?;
    let (p, status) = prepare(cfg, &layout.cache())?;
    let samples = [p.splits.train.len(), p.splits.val.len(), p.splits.test.len()];
    log.line(format!(
        // paths are relative to the output directory so logs compare across runs
        "cache {} in cache/: train/val/test samples {:?}, segments {:?}",
        match status {
            CacheStatus::Hit => "hit",
            CacheStatus::Built => "built",
        },
        samples,
        p.splits.segments
    ));
    Ok(PrepareOutcome { status, samples })
}

fn prepare_logged(cfg: &RunConfig, layout: &Layout, log: &mut RunLog) -> Result<Prepared> {
    let (p, status) = prepare(cfg, &layout.cache())?;
    log.line(format!("prepared data ({status:?}), config hash {}", cfg.config_hash()));
    Ok(p)
}

/// Fully observed training input windows, the denoiser's training set.
fn denoiser_data(ds: &WindowedDataset) -> Vec<Tensor<f32>> {
    ds.samples
        .iter()
        .filter(|s| s.mask.iter().all(|&m| m))
        .map(|s| s.input.cast())
        .collect()
}

/// Train a fresh noise predictor on `prepared`'s training windows.
pub fn fit_denoiser(cfg: &RunConfig, prepared: &Prepared) -> Result<(Denoiser, Vec<f64>)> {
    let schedule = cfg.schedule()?;
    let mut store = ParamStore::<f32>::new();
    let net = NoisePredictor::new(
        cfg.predictor_config(),
        &mut store,
        &mut rng_for(cfg.seed, streams::DENOISER),
    )?;
    let data = denoiser_data(&prepared.splits.train);
    if data.is_empty() && cfg.denoiser_train_steps > 0 {
        return Err(Error::Usage("no fully observed training windows to fit the denoiser on".into()));
    }
    let opts = DenoiserTrainOptions {
        steps: cfg.denoiser_train_steps,
        batch_size: cfg.denoiser_batch_size,
        adam: AdamConfig {
            lr: cfg.denoiser_lr,
            ..Default::default()
        },
        seed: derive_seed(cfg.seed, streams::DENOISER),
    };
    let curve = train_denoiser(&net, &mut store, &data, &schedule, &opts)?;
    store.set_frozen_all(true);
    let denoiser = Denoiser {
        net,
        store,
        schedule,
        sampler: cfg.sampler_config(cfg.seed),
    };
    Ok((denoiser, curve))
}

pub fn cmd_train_denoiser(cfg: &RunConfig, out: &Path) -> Result<Vec<f64>> {
    let layout = Layout::new(out);
    let mut log = RunLog::open(out, "train-denoiser")?;
    let prepared = prepare_logged(cfg, &layout, &mut log)?;
    let (d, curve) = fit_denoiser(cfg, &prepared)?;
    let hash = cfg.config_hash();
    save_bundle(layout.denoiser(), DENOISER_KIND, &hash, &d.store)?;
    let betas = Tensor::new(&[d.schedule.steps()], d.schedule.betas().to_vec())?;
    stdf::write(layout.denoiser().join("schedule.stdf"), &betas)?;
    let rows = curve.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]);
    write_csv(&layout.file("denoiser_curve.csv"), &["step", "loss"], rows)?;
    log.line(format!(
        "trained denoiser for {} steps, final loss {}",
        curve.len(),
        curve.last().map_or("n/a".into(), |l| format!("{l:.6}"))
    ));
    Ok(curve)
}

/// Load the frozen denoiser saved by `train-denoiser` under this config.
pub fn load_denoiser(cfg: &RunConfig, layout: &Layout) -> Result<Denoiser> {
    let dir = layout.denoiser();
    let mut store = load_bundle::<f32>(&dir, DENOISER_KIND, &cfg.config_hash())?;
    store.set_frozen_all(true);
    let net = NoisePredictor::bind(cfg.predictor_config(), &store)?;
    let betas = stdf::read::<f64>(dir.join("schedule.stdf"))?;
    Ok(Denoiser {
        net,
        store,
        schedule: DiffusionSchedule::from_betas(betas.into_vec())?,
        sampler: cfg.sampler_config(cfg.seed),
    })
}

/// Model-ready samples of one split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
    pub calendars: Vec<Vec<CalendarIndex>>,
    pub target_masks: Vec<Vec<bool>>,
}

impl Batch {
    pub fn build(ds: &WindowedDataset, fill: Fill<'_>, seed: u64) -> Result<Self> {
        Ok(Self {
            inputs: fill_inputs(ds, fill, seed)?,
            targets: ds.samples.iter().map(|s| s.target.cast()).collect(),
            calendars: ds.calendars(),
            target_masks: ds.samples.iter().map(|s| s.target_mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `[B, z, N, d]` predictions in f64.
    pub fn predict(&self, model: &Forecaster, store: &ParamStore<f32>) -> Result<Tensor<f64>> {
        let outs = (0..self.len())
            .into_par_iter()
            .map(|i| Ok(model.predict(store, &self.inputs[i], &self.calendars[i])?.cast::<f64>()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&outs)
    }

    /// Masked MAE of `model` on this batch, in normalized units.
    pub fn mae(&self, model: &Forecaster, store: &ParamStore<f32>) -> Result<f64> {
        let pred = self.predict(model, store)?;
        let target = Tensor::stack(&self.targets.iter().map(|t| t.cast::<f64>()).collect::<Vec<_>>())?;
        let mask: Vec<bool> = self.target_masks.concat();
        crate::metrics::mae(&target, &pred, Some(&mask))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            adam: cfg.adam(),
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            patience: cfg.patience,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

/// Minimize the masked L1 loss with Adam, shuffling each epoch, and keep
/// the parameters with the best validation MAE. Stops after `patience`
/// epochs without improvement. Frozen parameters are never updated.
pub fn train_forecaster(
    model: &Forecaster,
    store: &mut ParamStore<f32>,
    train: &Batch,
    val: &Batch,
    opts: &TrainOptions,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    let mut opt = Adam::new(opts.adam.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (val.mae(model, store)?, store.clone(), 0usize);
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng_for(derive_seed(opts.seed, streams::SHUFFLE), epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let params: &ParamStore<f32> = store;
            let results = chunk
                .par_iter()
                .map(|&i| -> Result<_> {
                    let mut g = Graph::new();
                    let x = g.constant(train.inputs[i].clone());
                    let y = model.forward(&mut g, params, x, &train.calendars[i])?;
                    let loss = masked_l1_loss(&mut g, y, &train.targets[i], &train.target_masks[i])?;
                    let value = g.value(loss).item() as f64;
                    Ok((value, g.backward(loss)?.into_params()))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch_loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
            if !batch_loss.is_finite() {
                *store = best.1;
                return Err(Error::Diverged(format!(
                    "training loss {batch_loss} in epoch {epoch}; kept the best parameters"
                )));
            }
            loss_sum += batch_loss * chunk.len() as f64;
            opt.step(store, &average_grads(results.into_iter().map(|r| r.1).collect()))?;
        }
        let val_mae = val.mae(model, store)?;
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mae,
        });
        if val_mae < best.0 {
            best = (val_mae, store.clone(), epoch);
        } else if epoch - best.2 >= opts.patience {
            break;
        }
    }
    *store = best.1;
    Ok(curve)
}

/// A fresh forecaster for `cfg`, with the transformer frozen if asked.
pub fn init_forecaster(cfg: &RunConfig, nodes: usize) -> Result<(Forecaster, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Forecaster::new(
        cfg.forecaster_config(nodes)?,
        &mut store,
        &mut rng_for(cfg.seed, streams::INIT),
    )?;
    if cfg.freeze_llm && cfg.enable_llm_block {
        store.set_frozen_prefix(stllm::PREFIX, true);
    }
    Ok((model, store))
}

/// Train and validate a forecaster on prepared data.
pub fn fit_forecaster(
    cfg: &RunConfig,
    prepared: &Prepared,
    denoiser: Option<&Denoiser>,
) -> Result<(Forecaster, ParamStore<f32>, Vec<EpochRecord>)> {
    let fill = denoiser.map_or(Fill::Zero, Fill::Recover);
    let train = Batch::build(&prepared.splits.train, fill, cfg.seed)?;
    let val = Batch::build(&prepared.splits.val, fill, cfg.seed)?;
    let (model, mut store) = init_forecaster(cfg, prepared.nodes)?;
    let curve = train_forecaster(&model, &mut store, &train, &val, &TrainOptions::from_config(cfg))?;
    Ok((model, store, curve))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<EpochRecord>> {
    let layout = Layout::new(out);
    let mut log = RunLog::open(out, "train")?;
    let denoiser = if cfg.enable_denoise {
        if !layout.denoiser().join(super::artifacts::BUNDLE_MANIFEST).exists() {
            return Err(Error::Config(format!(
                "enable_denoise is set but no denoiser bundle exists at {}; run train-denoiser first",
                layout.denoiser().display()
            )));
        }
        Some(load_denoiser(cfg, &layout)?)
    } else {
        None
    };
    let prepared = prepare_logged(cfg, &layout, &mut log)?;
    let (_, store, curve) = fit_forecaster(cfg, &prepared, denoiser.as_ref())?;
    save_bundle(layout.forecaster(), FORECASTER_KIND, &cfg.config_hash(), &store)?;
    let rows = curve.iter().map(|r| vec![r.epoch.to_string(), r.train_loss.to_string(), r.val_mae.to_string()]);
    write_csv(&layout.file("train_curve.csv"), &["epoch", "train_loss", "val_mae"], rows)?;
    for r in &curve {
        log.line(format!("epoch {}: train loss {:.6}, validation MAE {:.6}", r.epoch, r.train_loss, r.val_mae));
    }
    let best = curve.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
    log.line(format!(
        "trained {} epochs (llm block {}, denoise {}, freeze_llm {}), best validation MAE {best:.6}",
        curve.len(),
        cfg.enable_llm_block,
        cfg.enable_denoise,
        cfg.freeze_llm
    ));
    Ok(curve)
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
