//! Transformer filter stack over space-time tokens and the regression head.
//!
//! Each block follows the post-norm residual form
//!
//! ```text
//! x̃ = RMSNorm(MultiHead(x)) + x
//! x̄ = FFN(RMSNorm(x̃)) + x̃
//! ```
//!
//! with unmasked attention and no positional terms inside the block.

mod head;

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use head::Head;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Prefix shared by every transformer parameter name.
pub const PREFIX: &str = "stllm.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayout {
    /// All `m·N` node-timesteps attend to each other.
    Joint,
    /// Temporal blocks (per node, over time) followed by spatial blocks
    /// (per timestep, over nodes).
    Factorized,
}

impl FromStr for AttentionLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "factorized" => Ok(Self::Factorized),
            other => Err(Error::Config(format!("unknown attention_layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StllmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff_ratio: usize,
    pub layout: AttentionLayout,
    pub norm_eps: f64,
}

impl StllmConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            layers: 4,
            heads: 8,
            d_ff_ratio: 4,
            layout: AttentionLayout::Joint,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff_ratio == 0 {
            return Err(Error::Config("layers and d_ff_ratio must be positive".into()));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be >= 0".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.hidden * self.d_ff_ratio
    }
}

/// Parameters of one attention + FFN block.
#[derive(Debug, Clone)]
pub struct Block {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gamma_attn: ParamId,
    pub gamma_ffn: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Block {
    fn new<T: Real>(name: &str, cfg: &StllmConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let (h, f) = (cfg.hidden, cfg.d_ff());
        let mut w = |suffix: &str, shape: &[usize]| store.add(format!("{name}.{suffix}"), init_normal(rng, shape, 0.02));
        let wq = w("wq", &[h, h]);
        let wk = w("wk", &[h, h]);
        let wv = w("wv", &[h, h]);
        let wo = w("wo", &[h, h]);
        let w1 = w("w1", &[h, f]);
        let w2 = w("w2", &[f, h]);
        Self {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            gamma_attn: store.add(format!("{name}.gamma_attn"), Tensor::ones(&[h])),
            gamma_ffn: store.add(format!("{name}.gamma_ffn"), Tensor::ones(&[h])),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[f])),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[h])),
        }
    }

    fn bind<T: Real>(name: &str, store: &ParamStore<T>) -> Result<Self> {
        let get = |suffix: &str| {
            store
                .find(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Config(format!("bundle lacks {name}.{suffix}")))
        };
        Ok(Self {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            gamma_attn: get("gamma_attn")?,
            gamma_ffn: get("gamma_ffn")?,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }
}

pub fn rmsnorm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, eps: f64) -> Result<Var> {
    g.rmsnorm(x, gamma, T::c(eps))
}

/// Unmasked multi-head self-attention over the second-to-last axis of
/// `x: […, L, d_h]`; leading axes are independent sequences.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &Block,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("multi_head_attention", &shape, &[]));
    }
    let (l, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("hidden width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let x3 = g.reshape(x, &[batch, l, d])?;

    let split = |g: &mut Graph<T>, w: ParamId| -> Result<Var> {
        let w = g.param(store, w);
        let p = g.matmul(x3, w)?;
        let p = g.reshape(p, &[batch, l, heads, dk])?;
        g.permute(p, &[0, 2, 1, 3])
    };
    let q = split(g, block.wq)?;
    let k = split(g, block.wk)?;
    let v = split(g, block.wv)?;

    let q = g.reshape(q, &[batch * heads, l, dk])?;
    let k = g.reshape(k, &[batch * heads, l, dk])?;
    let v = g.reshape(v, &[batch * heads, l, dk])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::c(1.0 / (dk as f64).sqrt()));
    let weights = g.softmax_last(scores);
    let ctx = g.matmul(weights, v)?;

    let ctx = g.reshape(ctx, &[batch, heads, l, dk])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, l, d])?;
    let wo = g.param(store, block.wo);
    let out = g.matmul(ctx, wo)?;
    g.reshape(out, &shape)
}

/// `max(0, x·W1 + b1)·W2 + b2`.
pub fn ffn<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, block: &Block, x: Var) -> Result<Var> {
    let w1 = g.param(store, block.w1);
    let b1 = g.param(store, block.b1);
    let w2 = g.param(store, block.w2);
    let b2 = g.param(store, block.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add(o, b2)
}

pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &Block,
    cfg: &StllmConfig,
    x: Var,
) -> Result<Var> {
    let a = multi_head_attention(g, store, block, cfg.heads, x)?;
    let ga = g.param(store, block.gamma_attn);
    let a = rmsnorm(g, a, ga, cfg.norm_eps)?;
    let x_tilde = g.add(a, x)?;
    let gf = g.param(store, block.gamma_ffn);
    let n = rmsnorm(g, x_tilde, gf, cfg.norm_eps)?;
    let f = ffn(g, store, block, n)?;
    g.add(f, x_tilde)
}

/// The block stack with its configuration.
#[derive(Debug, Clone)]
pub struct Stllm {
    pub cfg: StllmConfig,
    pub blocks: Vec<Block>,
}

impl Stllm {
    fn block_count(cfg: &StllmConfig) -> usize {
        match cfg.layout {
            AttentionLayout::Joint => cfg.layers,
            AttentionLayout::Factorized => 2 * cfg.layers,
        }
    }

    pub fn new<T: Real>(cfg: StllmConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..Self::block_count(&cfg))
            .map(|i| Block::new(&format!("{PREFIX}block{i}"), &cfg, store, rng))
            .collect();
        Ok(Self { cfg, blocks })
    }

    pub fn bind<T: Real>(cfg: StllmConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..Self::block_count(&cfg))
            .map(|i| Block::bind(&format!("{PREFIX}block{i}"), store))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, blocks })
    }

    /// `z: [m, N, d_h] → [m, N, d_h]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.hidden {
            return Err(Error::shape("stllm_forward", &shape, &[self.cfg.hidden]));
        }
        let (m, n, d) = (shape[0], shape[1], shape[2]);
        match self.cfg.layout {
            AttentionLayout::Joint => {
                let mut x = g.reshape(z, &[m * n, d])?;
                for b in &self.blocks {
                    x = block_forward(g, store, b, &self.cfg, x)?;
                }
                g.reshape(x, &shape)
            }
            AttentionLayout::Factorized => {
                let (temporal, spatial) = self.blocks.split_at(self.cfg.layers);
                // [N, m, d]: each node attends over its own timesteps
                let mut x = g.permute(z, &[1, 0, 2])?;
                for b in temporal {
                    x = block_forward(g, store, b, &self.cfg, x)?;
                }
                let mut x = g.permute(x, &[1, 0, 2])?;
                for b in spatial {
                    x = block_forward(g, store, b, &self.cfg, x)?;
                }
                Ok(x)
            }
        }
    }
}

/// Freeze or unfreeze every transformer parameter. Returns the count touched.
pub fn set_frozen<T: Real>(store: &mut ParamStore<T>, frozen: bool) -> usize {
    store.set_frozen_prefix(PREFIX, frozen)
}
