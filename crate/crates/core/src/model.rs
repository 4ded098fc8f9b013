//! The forecaster: embedding → optional transformer stack → regression head.
//!
//! Missing-value recovery runs before this, on the raw normalized windows,
//! so the forecaster itself only ever sees complete inputs.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::embedding::{CalendarIndex, EmbeddingConfig, EmbeddingLayer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stllm::{Head, Stllm, StllmConfig};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub embedding: EmbeddingConfig,
    /// `None` reduces the model to embedding + head.
    pub stllm: Option<StllmConfig>,
    pub output_len: usize,
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    pub cfg: ForecasterConfig,
    pub embed: EmbeddingLayer,
    pub stllm: Option<Stllm>,
    pub head: Head,
}

impl Forecaster {
    pub fn new<T: Real>(cfg: ForecasterConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::check(&cfg)?;
        let embed = EmbeddingLayer::new(cfg.embedding.clone(), store, rng)?;
        let stllm = cfg
            .stllm
            .clone()
            .map(|s| Stllm::new(s, store, rng))
            .transpose()?;
        let e = &cfg.embedding;
        let head = Head::new(e.input_len, e.hidden_dim(), cfg.output_len, e.features, store, rng);
        Ok(Self { cfg, embed, stllm, head })
    }

    pub fn bind<T: Real>(cfg: ForecasterConfig, store: &ParamStore<T>) -> Result<Self> {
        Self::check(&cfg)?;
        let embed = EmbeddingLayer::bind(cfg.embedding.clone(), store)?;
        let stllm = cfg.stllm.clone().map(|s| Stllm::bind(s, store)).transpose()?;
        let e = &cfg.embedding;
        let head = Head::bind(e.input_len, e.hidden_dim(), cfg.output_len, e.features, store)?;
        Ok(Self { cfg, embed, stllm, head })
    }

    fn check(cfg: &ForecasterConfig) -> Result<()> {
        cfg.embedding.validate()?;
        if cfg.output_len == 0 {
            return Err(Error::Config("output_len must be positive".into()));
        }
        if let Some(s) = &cfg.stllm {
            if s.hidden != cfg.embedding.hidden_dim() {
                return Err(Error::Config(format!(
                    "transformer width {} differs from hidden dimension 3·d_f + d_a = {}",
                    s.hidden,
                    cfg.embedding.hidden_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.embedding.hidden_dim()
    }

    /// `x: [m, N, d] → [z, N, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        calendar: &[CalendarIndex],
    ) -> Result<Var> {
        let z = self.embed.forward(g, store, x, calendar)?;
        let h = match &self.stllm {
            Some(s) => s.forward(g, store, z)?,
            None => z,
        };
        self.head.forward(g, store, h)
    }

    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, calendar: &[CalendarIndex]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv, calendar)?;
        Ok(g.value(y).clone())
    }

    /// `[B, m, N, d] → [B, z, N, d]`, one independent evaluation per sample.
    pub fn predict_batch<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        calendars: &[Vec<CalendarIndex>],
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[0] != calendars.len() {
            return Err(Error::shape("predict_batch", s, &[calendars.len()]));
        }
        let outs = (0..s[0])
            .into_par_iter()
            .map(|b| self.predict(store, &x.index_first(b)?, &calendars[b]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&outs)
    }
}

/// Mean absolute error between a traced prediction and a constant target.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// [`l1_loss`] over the entries where `mask` is true. With nothing
/// observed the loss is a constant 0 and carries no gradient.
pub fn masked_l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
    if mask.len() != target.len() {
        return Err(Error::shape("masked_l1_loss", target.shape(), &[mask.len()]));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == mask.len() {
        return l1_loss(g, pred, target);
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    let w = g.constant(Tensor::new(
        target.shape(),
        mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
    )?);
    let kept = g.mul(a, w)?;
    let s = g.sum(kept);
    Ok(g.scale(s, T::c(1.0 / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_probe, probe_loss, FdOptions, Oracle, Probe};
    use crate::rng::standard_normal;
    use crate::stllm::AttentionLayout;
    use rand::SeedableRng;

    fn cfg(nodes: usize, features: usize, llm: bool) -> ForecasterConfig {
        let embedding = EmbeddingConfig {
            d_f: 2,
            d_a: 2,
            slots_per_day: 24,
            input_len: 4,
            nodes,
            features,
        };
        let stllm = llm.then(|| StllmConfig {
            layers: 1,
            heads: 2,
            ..StllmConfig::new(embedding.hidden_dim())
        });
        ForecasterConfig {
            embedding,
            stllm,
            output_len: 3,
        }
    }

    fn calendar(m: usize) -> Vec<CalendarIndex> {
        (0..m)
            .map(|i| CalendarIndex {
                day_of_week: (i % 7) as u8,
                slot: (i * 5 % 24) as u16,
            })
            .collect()
    }

    struct EndToEnd<'a>(&'a Forecaster, &'a Tensor<f64>, &'a [CalendarIndex]);

    impl Probe for EndToEnd<'_> {
        fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
            let xv = g.constant(self.1.cast());
            let y = self.0.forward(g, p, xv, self.2)?;
            probe_loss(g, y, 2)
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        for layout in [AttentionLayout::Joint, AttentionLayout::Factorized] {
            let mut c = cfg(2, 1, true);
            c.stllm.as_mut().unwrap().layout = layout;
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let f = Forecaster::new(c, &mut store, &mut rng).unwrap();
            let x = standard_normal::<f64>(&mut rng, &[4, 2, 1]);
            let cal = calendar(4);
            let opts = FdOptions {
                oracle: Oracle::DoubleDouble,
                ..Default::default()
            };
            let report = finite_diff_check_probe(&EndToEnd(&f, &x, &cal), &store, &opts).unwrap();
            assert!(report.max_rel_error < 1e-4, "{layout:?}: {report:?}");
        }
    }

    #[test]
    fn masked_l1_ignores_unobserved_targets() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = Tensor::new(&[4], vec![0.0, 0.0, 100.0, 0.0]).unwrap();
        let l = masked_l1_loss(&mut g, p, &t, &[true, true, false, true]).unwrap();
        assert!((g.value(l).item() - 7.0 / 3.0).abs() < 1e-15);
        let full = masked_l1_loss(&mut g, p, &t, &[true; 4]).unwrap();
        assert!((g.value(full).item() - 104.0 / 4.0).abs() < 1e-15);
        let none = masked_l1_loss(&mut g, p, &t, &[false; 4]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }

    #[test]
    fn mismatched_transformer_width_is_rejected() {
        let mut c = cfg(2, 1, true);
        c.stllm.as_mut().unwrap().hidden = 12;
        let mut store = ParamStore::<f64>::new();
        let err = Forecaster::new(c, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bind_reproduces_predictions() {
        let c = cfg(3, 2, true);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Forecaster::new(c.clone(), &mut store, &mut rng).unwrap();
        let g = Forecaster::bind(c, &store).unwrap();
        let x = standard_normal::<f64>(&mut rng, &[4, 3, 2]);
        let cal = calendar(4);
        assert!(f.predict(&store, &x, &cal).unwrap().bit_eq(&g.predict(&store, &x, &cal).unwrap()));
    }

    #[test]
    fn batch_prediction_matches_single() {
        let c = cfg(2, 1, false);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Forecaster::new(c, &mut store, &mut rng).unwrap();
        let x = standard_normal::<f32>(&mut rng, &[3, 4, 2, 1]);
        let cals = vec![calendar(4); 3];
        let y = f.predict_batch(&store, &x, &cals).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2, 1]);
        let one = f.predict(&store, &x.index_first(1).unwrap(), &cals[1]).unwrap();
        assert!(y.index_first(1).unwrap().bit_eq(&one));
    }
}
