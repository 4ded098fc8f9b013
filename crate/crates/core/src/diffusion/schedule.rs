use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Variance schedule for `S` diffusion steps, indexed `1..=S`.
///
/// `alpha_bar(0)` is 1 so that step 0 denotes clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas spaced linearly from `beta_min` to `beta_max`.
    pub fn linear(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`; zero betas give a degenerate, noiseless chain.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::Index {
                what: "diffusion step",
                index: s,
                limit: self.steps() + 1,
            });
        }
        Ok(())
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        1.0 - self.betas[s - 1]
    }

    /// Cumulative product of alphas up to and including `s`; 1 at `s = 0`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bars[s]
    }

    /// Product recomputed from scratch, for cross-checking the cached value.
    pub fn alpha_bar_direct(&self, s: usize) -> f64 {
        self.betas[..s].iter().map(|b| 1.0 - b).product()
    }

    /// Standard deviation of the true posterior `q(x_{s-1} | x_s, x_0)`.
    pub fn posterior_std(&self, s: usize) -> f64 {
        let ab = self.alpha_bar(s);
        if ab >= 1.0 {
            return 0.0;
        }
        (self.beta(s) * (1.0 - self.alpha_bar(s - 1)) / (1.0 - ab)).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Closed-form marginal `x_s = √ᾱ_s·x0 + √(1−ᾱ_s)·ε`.
pub fn forward_noise<T: Real>(
    x0: &Tensor<T>,
    s: usize,
    schedule: &DiffusionSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check(s)?;
    if x0.shape() != noise.shape() {
        return Err(Error::shape("forward_noise", x0.shape(), noise.shape()));
    }
    let ab = schedule.alpha_bar(s);
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape(), data)
}

/// Apply single transitions `x_u = √α_u·x_{u−1} + √(1−α_u)·ε_u` for
/// `u = 1..=s`, one noise tensor per step.
pub fn forward_noise_iterated<T: Real>(
    x0: &Tensor<T>,
    schedule: &DiffusionSchedule,
    noises: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let s = noises.len();
    schedule.check(s)?;
    let mut x = x0.data().to_vec();
    for (u, eps) in (1..=s).zip(noises) {
        if eps.shape() != x0.shape() {
            return Err(Error::shape("forward_noise_iterated", x0.shape(), eps.shape()));
        }
        let a = schedule.alpha(u);
        let (ca, cb) = (T::c(a.sqrt()), T::c((1.0 - a).sqrt()));
        for (xi, &e) in x.iter_mut().zip(eps.data()) {
            *xi = ca * *xi + cb * e;
        }
    }
    Tensor::new(x0.shape(), x)
}
