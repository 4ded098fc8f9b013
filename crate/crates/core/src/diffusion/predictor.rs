use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::timestep::{timestep_embed, TimestepEmbeddingConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePredictorConfig {
    /// Raw feature channels `d` of the data being denoised.
    pub channels: usize,
    pub hidden: usize,
    pub kernel_width: usize,
    pub timestep: TimestepEmbeddingConfig,
}

impl NoisePredictorConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            hidden: 32,
            kernel_width: 3,
            timestep: TimestepEmbeddingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.timestep.validate()?;
        if self.kernel_width % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel width must be odd, got {}",
                self.kernel_width
            )));
        }
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::Config("predictor widths must be positive".into()));
        }
        Ok(())
    }
}

/// Noise-prediction network `Conv(SiLU(Conv(x) + proj(emb(s))))` over
/// `[T, N, d]` windows.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub cfg: NoisePredictorConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    emb_w: ParamId,
    emb_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

impl NoisePredictor {
    pub fn new<T: Real>(
        cfg: NoisePredictorConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (w, d, h, e) = (cfg.kernel_width, cfg.channels, cfg.hidden, cfg.timestep.dim);
        let conv1_w = store.add("denoise.conv1.w", init_normal(rng, &[w, d, h], (1.0 / (w * d) as f64).sqrt()));
        let conv1_b = store.add("denoise.conv1.b", Tensor::zeros(&[h]));
        let emb_w = store.add("denoise.emb.w", init_normal(rng, &[e, h], (1.0 / e as f64).sqrt()));
        let emb_b = store.add("denoise.emb.b", Tensor::zeros(&[h]));
        let conv2_w = store.add("denoise.conv2.w", init_normal(rng, &[w, h, d], (1.0 / (w * h) as f64).sqrt()));
        let conv2_b = store.add("denoise.conv2.b", Tensor::zeros(&[d]));
        Ok(Self {
            cfg,
            conv1_w,
            conv1_b,
            emb_w,
            emb_b,
            conv2_w,
            conv2_b,
        })
    }

    /// Re-attach to an existing store (e.g. one loaded from disk).
    pub fn bind<T: Real>(cfg: NoisePredictorConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Config(format!("denoiser bundle lacks {name}")))
        };
        let net = Self {
            conv1_w: get("denoise.conv1.w")?,
            conv1_b: get("denoise.conv1.b")?,
            emb_w: get("denoise.emb.w")?,
            emb_b: get("denoise.emb.b")?,
            conv2_w: get("denoise.conv2.w")?,
            conv2_b: get("denoise.conv2.b")?,
            cfg,
        };
        let (w, d, h) = (net.cfg.kernel_width, net.cfg.channels, net.cfg.hidden);
        for (id, shape) in [(net.conv1_w, vec![w, d, h]), (net.conv2_w, vec![w, h, d])] {
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::shape("denoiser bundle", store.value(id).shape(), &shape));
            }
        }
        Ok(net)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        step: usize,
    ) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.channels {
            return Err(Error::shape("noise predictor", s, &[self.cfg.channels]));
        }
        let emb = timestep_embed::<T>(step as f64, &self.cfg.timestep)?;
        let emb = g.constant(emb.reshape(&[1, self.cfg.timestep.dim])?);
        let ew = g.param(store, self.emb_w);
        let eb = g.param(store, self.emb_b);
        let e = g.matmul(emb, ew)?;
        let e = g.add(e, eb)?;
        let e = g.reshape(e, &[self.cfg.hidden])?;

        let k1 = g.param(store, self.conv1_w);
        let b1 = g.param(store, self.conv1_b);
        let h = g.conv_time(x, k1)?;
        let h = g.add(h, b1)?;
        let h = g.add(h, e)?;
        let h = g.silu(h);

        let k2 = g.param(store, self.conv2_w);
        let b2 = g.param(store, self.conv2_b);
        let out = g.conv_time(h, k2)?;
        g.add(out, b2)
    }
}

/// Anything that can predict the noise in `x_s` at diffusion step `s`.
pub trait NoiseModel<T: Real>: Sync {
    fn predict(&self, x_s: &Tensor<T>, step: usize) -> Result<Tensor<T>>;
}

/// A [`NoisePredictor`] together with its parameter values.
pub struct BoundPredictor<'a, T> {
    pub net: &'a NoisePredictor,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> NoiseModel<T> for BoundPredictor<'_, T> {
    fn predict(&self, x_s: &Tensor<T>, step: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(x_s.clone());
        let y = self.net.forward(&mut g, self.store, x, step)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Real, F> NoiseModel<T> for F
where
    F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>> + Sync,
{
    fn predict(&self, x_s: &Tensor<T>, step: usize) -> Result<Tensor<T>> {
        self(x_s, step)
    }
}
