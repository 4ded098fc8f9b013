use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Per-node regression layer: the `m × d_h` block of each node is flattened
/// and mapped affinely to `z × d`.
#[derive(Debug, Clone)]
pub struct Head {
    pub input_len: usize,
    pub hidden: usize,
    pub output_len: usize,
    pub features: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    pub fn new<T: Real>(
        input_len: usize,
        hidden: usize,
        output_len: usize,
        features: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            "head.w",
            init_normal(rng, &[input_len * hidden, output_len * features], 0.02),
        );
        let b = store.add("head.b", Tensor::zeros(&[output_len * features]));
        Self {
            input_len,
            hidden,
            output_len,
            features,
            w,
            b,
        }
    }

    pub fn bind<T: Real>(
        input_len: usize,
        hidden: usize,
        output_len: usize,
        features: usize,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        let w = store
            .find("head.w")
            .ok_or_else(|| Error::Config("bundle lacks head.w".into()))?;
        let b = store
            .find("head.b")
            .ok_or_else(|| Error::Config("bundle lacks head.b".into()))?;
        let want = [input_len * hidden, output_len * features];
        if store.value(w).shape() != want {
            return Err(Error::shape("head", store.value(w).shape(), &want));
        }
        Ok(Self {
            input_len,
            hidden,
            output_len,
            features,
            w,
            b,
        })
    }

    /// `x̄: [m, N, d_h] → [z, N, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.input_len || s[2] != self.hidden {
            return Err(Error::shape("predict_head", &s, &[self.input_len, 0, self.hidden]));
        }
        let n = s[1];
        let per_node = g.permute(x, &[1, 0, 2])?;
        let flat = g.reshape(per_node, &[n, self.input_len * self.hidden])?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(flat, w)?;
        let y = g.add(y, b)?;
        let y = g.reshape(y, &[n, self.output_len, self.features])?;
        g.permute(y, &[1, 0, 2])
    }
}
