use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::predictor::NoiseModel;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Posterior-mean ancestral update.
    Ddpm,
    /// The update with the `√(1−α²)` denominator and an explicit residual term.
    Literal,
    /// Deterministic x0-prediction update, η-scaled noise.
    Ddim,
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" | "standard" | "standard_ddpm" => Ok(SamplerMode::Ddpm),
            "literal" => Ok(SamplerMode::Literal),
            "ddim" => Ok(SamplerMode::Ddim),
            other => Err(Error::Config(format!("unknown sampler mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseSamplerConfig {
    pub mode: SamplerMode,
    /// DDIM stochasticity, 0 = deterministic.
    pub eta: f64,
    /// Residual-noise scale for the literal mode; `None` uses the posterior std.
    pub delta: Option<f64>,
    /// Sub-sampled step count for DDIM chains; `None` runs every step.
    pub ddim_steps: Option<usize>,
    pub seed: u64,
}

impl Default for ReverseSamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Ddpm,
            eta: 0.0,
            delta: None,
            ddim_steps: None,
            seed: 0,
        }
    }
}

impl ReverseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0) {
                return Err(Error::Config(format!("delta must be >= 0, got {d}")));
            }
        }
        if self.ddim_steps == Some(0) {
            return Err(Error::Config("ddim_steps must be positive".into()));
        }
        Ok(())
    }

    /// Descending `(s, prev)` transitions of a full chain ending at step 0.
    pub fn timesteps(&self, schedule: &DiffusionSchedule) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let total = schedule.steps();
        let pts: Vec<usize> = match (self.mode, self.ddim_steps) {
            (SamplerMode::Ddim, Some(k)) if k < total => {
                let mut v: Vec<usize> = (0..=k)
                    .map(|i| ((i as f64) * total as f64 / k as f64).round() as usize)
                    .collect();
                v.dedup();
                v
            }
            _ => (0..=total).collect(),
        };
        Ok(pts.windows(2).rev().map(|w| (w[1], w[0])).collect())
    }
}

fn combine<T: Real>(x: &Tensor<T>, a: f64, eps: &Tensor<T>, b: f64) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::shape("reverse_step", x.shape(), eps.shape()));
    }
    let (a, b) = (T::c(a), T::c(b));
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&u, &v)| a * u + b * v)
        .collect();
    Tensor::new(x.shape(), data)
}

fn add_noise<T: Real>(x: Tensor<T>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if scale == 0.0 {
        return x;
    }
    let z = standard_normal::<T>(rng, x.shape());
    let c = T::c(scale);
    let mut x = x;
    for (xi, zi) in x.data_mut().iter_mut().zip(z.data()) {
        *xi += c * *zi;
    }
    x
}

/// One reverse transition from step `s` to `prev` (`prev < s`). The DDPM
/// modes require `prev = s − 1`; DDIM may skip steps.
pub fn reverse_step<T: Real, M: NoiseModel<T>>(
    x_s: &Tensor<T>,
    s: usize,
    prev: usize,
    model: &M,
    schedule: &DiffusionSchedule,
    cfg: &ReverseSamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if s == 0 || s > schedule.steps() || prev >= s {
        return Err(Error::Index {
            what: "reverse step",
            index: s,
            limit: schedule.steps() + 1,
        });
    }
    if cfg.mode != SamplerMode::Ddim && prev != s - 1 {
        return Err(Error::Config(format!(
            "{:?} sampling cannot skip from step {s} to {prev}",
            cfg.mode
        )));
    }
    let eps = model.predict(x_s, s)?;
    let alpha = schedule.alpha(s);
    let ab = schedule.alpha_bar(s);
    match cfg.mode {
        SamplerMode::Ddpm => {
            let inv = 1.0 / alpha.sqrt();
            let coef = schedule.beta(s) / (1.0 - ab).sqrt();
            let mean = combine(x_s, inv, &eps, -coef * inv)?;
            Ok(add_noise(mean, schedule.posterior_std(s), rng))
        }
        SamplerMode::Literal => {
            let inv = 1.0 / alpha.sqrt();
            let coef = (1.0 - alpha) / (1.0 - alpha * alpha).sqrt();
            let mean = combine(x_s, inv, &eps, -coef * inv)?;
            let delta = cfg.delta.unwrap_or_else(|| schedule.posterior_std(s));
            Ok(add_noise(mean, delta, rng))
        }
        SamplerMode::Ddim => {
            let ab_prev = schedule.alpha_bar(prev);
            let sigma = cfg.eta
                * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
                * (1.0 - ab / ab_prev).max(0.0).sqrt();
            // x0 = (x_s − √(1−ᾱ_s)·ε) / √ᾱ_s
            let x0 = combine(x_s, 1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt())?;
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let mean = combine(&x0, ab_prev.sqrt(), &eps, dir)?;
            Ok(add_noise(mean, sigma, rng))
        }
    }
}

/// Run a full reverse chain from `x_top` (noise at the chain's first step).
pub fn sample_chain<T: Real, M: NoiseModel<T>>(
    x_top: &Tensor<T>,
    model: &M,
    schedule: &DiffusionSchedule,
    cfg: &ReverseSamplerConfig,
    stream: u64,
) -> Result<Tensor<T>> {
    let mut rng = rng_for(cfg.seed, stream);
    let mut x = x_top.clone();
    for (s, prev) in cfg.timesteps(schedule)? {
        x = reverse_step(&x, s, prev, model, schedule, cfg, &mut rng)?;
    }
    Ok(x)
}

/// Draw pure noise of `shape` and run the chain.
pub fn sample_unconditional<T: Real, M: NoiseModel<T>>(
    shape: &[usize],
    model: &M,
    schedule: &DiffusionSchedule,
    cfg: &ReverseSamplerConfig,
    stream: u64,
) -> Result<Tensor<T>> {
    let mut rng = rng_for(cfg.seed ^ 0x5EED, stream);
    let x = standard_normal(&mut rng, shape);
    sample_chain(&x, model, schedule, cfg, stream)
}

#[derive(Debug, Clone)]
pub struct Recovery<T> {
    pub values: Tensor<T>,
    /// Set when no entry was observed and the chain ran unconditionally.
    pub unconditional: bool,
}

/// Fill unobserved entries (`mask = 0`) by reverse diffusion. After every
/// step the observed entries are replaced by the ground truth noised to the
/// matching level, and the result equals `x_obs` exactly where `mask = 1`.
pub fn recover_missing<T: Real, M: NoiseModel<T>>(
    x_obs: &Tensor<T>,
    mask: &[bool],
    model: &M,
    schedule: &DiffusionSchedule,
    cfg: &ReverseSamplerConfig,
    stream: u64,
) -> Result<Recovery<T>> {
    if mask.len() != x_obs.len() {
        return Err(Error::shape("recover_missing", x_obs.shape(), &[mask.len()]));
    }
    if mask.iter().all(|&m| m) {
        return Ok(Recovery {
            values: x_obs.clone(),
            unconditional: false,
        });
    }
    let unconditional = !mask.iter().any(|&m| m);
    if unconditional {
        log::warn!("recover_missing: no observed entries, sampling unconditionally");
    }
    let steps = cfg.timesteps(schedule)?;
    let mut rng = rng_for(cfg.seed, stream);
    let top = steps.first().map(|&(s, _)| s).unwrap_or(schedule.steps());
    let mut x = standard_normal::<T>(&mut rng, x_obs.shape());
    replace_observed(&mut x, x_obs, mask, schedule.alpha_bar(top), &mut rng);
    for (s, prev) in steps {
        x = reverse_step(&x, s, prev, model, schedule, cfg, &mut rng)?;
        if prev > 0 {
            replace_observed(&mut x, x_obs, mask, schedule.alpha_bar(prev), &mut rng);
        }
    }
    for ((xi, &oi), &m) in x.data_mut().iter_mut().zip(x_obs.data()).zip(mask) {
        if m {
            *xi = oi;
        }
    }
    Ok(Recovery {
        values: x,
        unconditional,
    })
}

fn replace_observed<T: Real>(
    x: &mut Tensor<T>,
    x_obs: &Tensor<T>,
    mask: &[bool],
    alpha_bar: f64,
    rng: &mut ChaCha8Rng,
) {
    let noise = standard_normal::<T>(rng, x_obs.shape());
    let (a, b) = (T::c(alpha_bar.sqrt()), T::c((1.0 - alpha_bar).sqrt()));
    for (i, xi) in x.data_mut().iter_mut().enumerate() {
        if mask[i] {
            *xi = a * x_obs.data()[i] + b * noise.data()[i];
        }
    }
}
