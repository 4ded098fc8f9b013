use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepEmbeddingConfig {
    pub dim: usize,
    pub max_period: f64,
}

impl Default for TimestepEmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_period: 10_000.0,
        }
    }
}

impl TimestepEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "timestep embedding width must be even and positive, got {}",
                self.dim
            )));
        }
        if !(self.max_period > 1.0) {
            return Err(Error::Config(format!(
                "max_period must exceed 1, got {}",
                self.max_period
            )));
        }
        Ok(())
    }

    /// Frequencies `f_k = exp(−k·ln(max_period)/(dim/2))`.
    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half)
            .map(|k| (-(k as f64) * self.max_period.ln() / half as f64).exp())
            .collect()
    }
}

/// Sinusoidal embedding of a (possibly fractional) step index: cosines in
/// the first half, sines in the second.
pub fn timestep_embed<T: Real>(s: f64, cfg: &TimestepEmbeddingConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if !(s >= 0.0) {
        return Err(Error::Config(format!("step index must be >= 0, got {s}")));
    }
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(cfg.dim);
    out.extend(freqs.iter().map(|f| T::c((s * f).cos())));
    out.extend(freqs.iter().map(|f| T::c((s * f).sin())));
    Tensor::new(&[cfg.dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_zero() {
        let cfg = TimestepEmbeddingConfig {
            dim: 4,
            max_period: 10_000.0,
        };
        let e: Tensor<f64> = timestep_embed(0.0, &cfg).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn first_frequency_is_one() {
        let cfg = TimestepEmbeddingConfig {
            dim: 2,
            max_period: 10_000.0,
        };
        for s in [0.25, 1.0, 3.0, 17.5, 999.0] {
            let e: Tensor<f64> = timestep_embed(s, &cfg).unwrap();
            assert!((e.data()[0] - s.cos()).abs() < 1e-15);
            assert!((e.data()[1] - s.sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacent_steps_differ_in_leading_sine() {
        let cfg = TimestepEmbeddingConfig::default();
        let a: Tensor<f64> = timestep_embed(0.0, &cfg).unwrap();
        let b: Tensor<f64> = timestep_embed(1.0, &cfg).unwrap();
        assert_ne!(a.data()[cfg.dim / 2], b.data()[cfg.dim / 2]);
    }

    #[test]
    fn distinct_steps_map_to_distinct_vectors() {
        let cfg = TimestepEmbeddingConfig::default();
        let embs: Vec<Tensor<f64>> = (0..1000)
            .map(|s| timestep_embed(s as f64, &cfg).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(embs[i].max_abs_diff(&embs[j]) > 1e-6, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn odd_width_rejected() {
        let cfg = TimestepEmbeddingConfig {
            dim: 5,
            max_period: 100.0,
        };
        assert!(matches!(timestep_embed::<f64>(1.0, &cfg), Err(Error::Config(_))));
    }
}
