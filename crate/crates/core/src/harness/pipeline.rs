//! Shared plumbing between commands: data preparation and input filling.

use std::path::Path;

use chrono::NaiveDateTime;
use rayon::prelude::*;

use super::config::{DataFormat, RunConfig};
use crate::data::cache::{self, source_hash, CacheKey};
use crate::data::{fit_apply_normalizer, inject_missing, parse_timestamp, split_chronological, Normalizer, SeriesSource, Splits, WindowedDataset};
use crate::diffusion::{recover_missing, BoundPredictor, DiffusionSchedule, NoisePredictor, ReverseSamplerConfig};
use crate::embedding::{slots_per_day, CalendarIndex};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Seed streams, so that different uses of the run seed never collide.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DENOISER: u64 = 3;
    pub const RECOVERY: u64 = 4;
    pub const CORRUPT: u64 = 5;
    pub const SWEEP: u64 = 100;
}

pub fn load_source(cfg: &RunConfig) -> Result<SeriesSource> {
    let start = || -> Result<NaiveDateTime> {
        parse_timestamp(&cfg.start).ok_or_else(|| Error::Config(format!("bad start timestamp {:?}", cfg.start)))
    };
    match cfg.data_format {
        DataFormat::Synthetic => cfg.synthetic().generate(),
        DataFormat::Csv => SeriesSource::read_csv(path(cfg)?, cfg.features, cfg.granularity_minutes),
        DataFormat::Stdf => {
            let src = SeriesSource::read_stdf(path(cfg)?, start()?, cfg.granularity_minutes)?;
            if src.features() != cfg.features {
                return Err(Error::Config(format!(
                    "STDF source has {} features, config says {}",
                    src.features(),
                    cfg.features
                )));
            }
            Ok(src)
        }
    }
}

fn path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_path
        .as_deref()
        .ok_or_else(|| Error::Config("data_path is required for file sources".into()))
}

/// Normalized splits ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub normalizer: Normalizer,
    pub nodes: usize,
    pub slots_per_day: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
}

/// Load prepared data from `cache_dir`, or build and cache it.
pub fn prepare(cfg: &RunConfig, cache_dir: &Path) -> Result<(Prepared, CacheStatus)> {
    cfg.validate()?;
    let src = load_source(cfg)?;
    let key = CacheKey {
        spec_hash: cfg.data_hash(),
        source_hash: source_hash(&src),
    };
    let slots = slots_per_day(cfg.granularity_minutes)?;
    if let Some((splits, normalizer)) = cache::load(cache_dir, &key)? {
        let prepared = Prepared {
            splits,
            normalizer,
            nodes: src.nodes(),
            slots_per_day: slots,
        };
        return Ok((prepared, CacheStatus::Hit));
    }
    let raw = split_chronological(&src, &cfg.window(), &cfg.split())?;
    let (splits, normalizer) = fit_apply_normalizer(&src, &raw)?;
    cache::save(cache_dir, &key, &splits, &normalizer)?;
    let prepared = Prepared {
        splits,
        normalizer,
        nodes: src.nodes(),
        slots_per_day: slots,
    };
    Ok((prepared, CacheStatus::Built))
}

/// A trained, frozen noise predictor with the sampler it runs under.
pub struct Denoiser {
    pub net: NoisePredictor,
    pub store: ParamStore<f32>,
    pub schedule: DiffusionSchedule,
    pub sampler: ReverseSamplerConfig,
}

/// How unobserved input entries are filled before the forecaster sees them.
#[derive(Clone, Copy)]
pub enum Fill<'a> {
    /// Leave them at 0, the training mean in normalized space.
    Zero,
    /// Per window, node and feature: mean of the observed steps.
    MeanImpute,
    /// Replacement-conditioned reverse diffusion.
    Recover(&'a Denoiser),
}

impl Fill<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Fill::Zero => "recovery_off",
            Fill::MeanImpute => "mean_impute",
            Fill::Recover(_) => "recovery_on",
        }
    }
}

fn mean_impute(x: &Tensor<f64>, mask: &[bool]) -> Tensor<f64> {
    let s = x.shape();
    let (m, f) = (s[0], s[1] * s[2]);
    let mut out = x.clone();
    for j in 0..f {
        let (sum, n) = (0..m)
            .filter(|&t| mask[t * f + j])
            .fold((0.0, 0usize), |(a, c), t| (a + x.data()[t * f + j], c + 1));
        let fill = if n > 0 { sum / n as f64 } else { 0.0 };
        for t in 0..m {
            if !mask[t * f + j] {
                out.data_mut()[t * f + j] = fill;
            }
        }
    }
    out
}

/// Model-ready `[m, N, d]` inputs for every sample of `ds`.
pub fn fill_inputs(ds: &WindowedDataset, fill: Fill<'_>, seed: u64) -> Result<Vec<Tensor<f32>>> {
    ds.samples
        .par_iter()
        .map(|s| match fill {
            Fill::Zero => Ok(s.input.cast()),
            Fill::MeanImpute => Ok(mean_impute(&s.input, &s.mask).cast()),
            Fill::Recover(d) => {
                let model = BoundPredictor {
                    net: &d.net,
                    store: &d.store,
                };
                let cfg = ReverseSamplerConfig {
                    seed: derive_seed(seed, streams::RECOVERY),
                    ..d.sampler.clone()
                };
                let r = recover_missing(&s.input.cast::<f32>(), &s.mask, &model, &d.schedule, &cfg, s.offset as u64)?;
                Ok(r.values)
            }
        })
        .collect()
}

/// Corrupt `ds` with the run's missing ratio (a no-op at 0).
pub fn corrupt(ds: &WindowedDataset, p: f64, seed: u64, stream: u64) -> Result<WindowedDataset> {
    inject_missing(ds, p, derive_seed(seed, stream))
}

/// Targets `[z, N, d]` in the training profile.
pub fn targets(ds: &WindowedDataset) -> Vec<Tensor<f32>> {
    ds.samples.iter().map(|s| s.target.cast()).collect()
}

pub fn calendars(ds: &WindowedDataset) -> Vec<Vec<CalendarIndex>> {
    ds.calendars()
}
