//! Hidden representation from raw windows: a feature projection, day-of-week
//! and time-of-day lookups, and a learnable adaptive array, concatenated in
//! that order along the channel axis.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DAYS_PER_WEEK: usize = 7;
const MINUTES_PER_DAY: u32 = 1440;

/// Number of time-of-day slots for a sampling granularity in minutes.
pub fn slots_per_day(granularity_minutes: u32) -> Result<usize> {
    if granularity_minutes == 0 || MINUTES_PER_DAY % granularity_minutes != 0 {
        return Err(Error::Config(format!(
            "granularity of {granularity_minutes} minutes does not divide a day"
        )));
    }
    Ok((MINUTES_PER_DAY / granularity_minutes) as usize)
}

/// Calendar position of one input timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalendarIndex {
    /// 0 = Monday … 6 = Sunday.
    pub day_of_week: u8,
    pub slot: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub d_f: usize,
    pub d_a: usize,
    pub slots_per_day: usize,
    pub input_len: usize,
    pub nodes: usize,
    pub features: usize,
}

impl EmbeddingConfig {
    pub fn hidden_dim(&self) -> usize {
        3 * self.d_f + self.d_a
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_f", self.d_f),
            ("d_a", self.d_a),
            ("slots_per_day", self.slots_per_day),
            ("input_len", self.input_len),
            ("nodes", self.nodes),
            ("features", self.features),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("embedding {name} must be positive")));
        }
        if MINUTES_PER_DAY as usize % self.slots_per_day != 0 {
            return Err(Error::Config(format!(
                "{} slots per day is not an integral granularity",
                self.slots_per_day
            )));
        }
        Ok(())
    }
}

/// Parameter handles for the embedding tables.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub cfg: EmbeddingConfig,
    pub w_feat: ParamId,
    pub b_feat: ParamId,
    pub day_of_week: ParamId,
    pub time_of_day: ParamId,
    pub adaptive: ParamId,
}

impl EmbeddingLayer {
    pub fn new<T: Real>(
        cfg: EmbeddingConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d_f = cfg.d_f;
        let w_feat = store.add("embed.w_feat", init_normal(rng, &[cfg.features, d_f], 0.02));
        let b_feat = store.add("embed.b_feat", Tensor::zeros(&[d_f]));
        let day_of_week = store.add("embed.day_of_week", init_normal(rng, &[DAYS_PER_WEEK, d_f], 0.02));
        let time_of_day = store.add(
            "embed.time_of_day",
            init_normal(rng, &[cfg.slots_per_day, d_f], 0.02),
        );
        let bound = 0.5 / (cfg.d_a as f64).sqrt();
        let adaptive = store.add(
            "embed.adaptive",
            init_uniform(rng, &[cfg.input_len, cfg.nodes, cfg.d_a], bound),
        );
        Ok(Self {
            cfg,
            w_feat,
            b_feat,
            day_of_week,
            time_of_day,
            adaptive,
        })
    }

    /// Re-attach to parameters already present in `store`.
    pub fn bind<T: Real>(cfg: EmbeddingConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        fn get<T: Real>(store: &ParamStore<T>, name: &'static str, shape: &[usize]) -> Result<ParamId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Config(format!("bundle lacks {name}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::shape(name, store.value(id).shape(), shape));
            }
            Ok(id)
        }
        let d_f = cfg.d_f;
        Ok(Self {
            w_feat: get(store, "embed.w_feat", &[cfg.features, d_f])?,
            b_feat: get(store, "embed.b_feat", &[d_f])?,
            day_of_week: get(store, "embed.day_of_week", &[DAYS_PER_WEEK, d_f])?,
            time_of_day: get(store, "embed.time_of_day", &[cfg.slots_per_day, d_f])?,
            adaptive: get(store, "embed.adaptive", &[cfg.input_len, cfg.nodes, cfg.d_a])?,
            cfg,
        })
    }

    /// Affine map of the feature axis, identical at every (time, node).
    pub fn embed_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let want = [self.cfg.input_len, self.cfg.nodes, self.cfg.features];
        if g.shape(x) != want {
            return Err(Error::shape("embed_features", g.shape(x), &want));
        }
        let w = g.param(store, self.w_feat);
        let b = g.param(store, self.b_feat);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// Day-of-week row concatenated with time-of-day row, broadcast to every node.
    pub fn embed_periodicity<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        calendar: &[CalendarIndex],
    ) -> Result<Var> {
        let (m, n, d_f) = (self.cfg.input_len, self.cfg.nodes, self.cfg.d_f);
        if calendar.len() != m {
            return Err(Error::shape("embed_periodicity", &[calendar.len()], &[m]));
        }
        let mut days = Vec::with_capacity(m * n);
        let mut slots = Vec::with_capacity(m * n);
        for c in calendar {
            for _ in 0..n {
                days.push(c.day_of_week as usize);
                slots.push(c.slot as usize);
            }
        }
        let tw = g.param(store, self.day_of_week);
        let td = g.param(store, self.time_of_day);
        let xw = g.gather_rows(tw, &days)?;
        let xd = g.gather_rows(td, &slots)?;
        let xw = g.reshape(xw, &[m, n, d_f])?;
        let xd = g.reshape(xd, &[m, n, d_f])?;
        g.concat_last(&[xw, xd])
    }

    pub fn adaptive<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Var {
        g.param(store, self.adaptive)
    }

    /// Feature ‖ periodicity ‖ adaptive, width `3·d_f + d_a`.
    pub fn assemble_hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        x_f: Var,
        x_p: Var,
        x_a: Var,
    ) -> Result<Var> {
        let widths = [
            (x_f, self.cfg.d_f),
            (x_p, 2 * self.cfg.d_f),
            (x_a, self.cfg.d_a),
        ];
        for (v, w) in widths {
            let s = g.shape(v);
            if s.last() != Some(&w) {
                return Err(Error::shape("assemble_hidden", s, &[w]));
            }
        }
        let z = g.concat_last(&[x_f, x_p, x_a])?;
        debug_assert_eq!(g.shape(z).last(), Some(&self.cfg.hidden_dim()));
        Ok(z)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        calendar: &[CalendarIndex],
    ) -> Result<Var> {
        let x_f = self.embed_features(g, store, x)?;
        let x_p = self.embed_periodicity(g, store, calendar)?;
        let x_a = self.adaptive(g, store);
        self.assemble_hidden(g, x_f, x_p, x_a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdOptions};
    use rand::SeedableRng;

    fn cfg(d_f: usize, d_a: usize, features: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            d_f,
            d_a,
            slots_per_day: 288,
            input_len: 3,
            nodes: 2,
            features,
        }
    }

    fn layer(c: EmbeddingConfig) -> (EmbeddingLayer, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = EmbeddingLayer::new(c, &mut store, &mut rng).unwrap();
        (l, store)
    }

    fn cal(pairs: &[(u8, u16)]) -> Vec<CalendarIndex> {
        pairs
            .iter()
            .map(|&(d, s)| CalendarIndex { day_of_week: d, slot: s })
            .collect()
    }

    #[test]
    fn slots_follow_granularity() {
        assert_eq!(slots_per_day(5).unwrap(), 288);
        assert_eq!(slots_per_day(60).unwrap(), 24);
        assert!(slots_per_day(7).is_err());
    }

    #[test]
    fn hidden_width_law() {
        assert_eq!(cfg(24, 80, 1).hidden_dim(), 152);
    }

    #[test]
    fn feature_embedding_examples() {
        let (l, mut store) = layer(cfg(2, 4, 1));
        store.set_value(l.w_feat, Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
        store.set_value(l.b_feat, Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 2, 1], 5.0));
        let y = l.embed_features(&mut g, &store, x).unwrap();
        for pair in g.value(y).data().chunks(2) {
            assert_eq!(pair, &[11.0, 14.0]);
        }

        store.set_value(l.w_feat, Tensor::zeros(&[1, 2])).unwrap();
        store.set_value(l.b_feat, Tensor::zeros(&[2])).unwrap();
        let y = l.embed_features(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::zeros(&[3, 2, 3]));
        assert!(matches!(l.embed_features(&mut g, &store, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_feature_embedding() {
        let (l, mut store) = layer(cfg(2, 4, 2));
        store.set_value(l.w_feat, Tensor::eye(2)).unwrap();
        store.set_value(l.b_feat, Tensor::zeros(&[2])).unwrap();
        let xin = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.5 - 1.0);
        let mut g = Graph::new();
        let x = g.constant(xin.clone());
        let y = l.embed_features(&mut g, &store, x).unwrap();
        assert!(g.value(y).bit_eq(&xin));
    }

    #[test]
    fn periodicity_is_direct_lookup() {
        let (l, store) = layer(cfg(3, 4, 1));
        let c = cal(&[(2, 100), (2, 100), (5, 7)]);
        let mut g = Graph::new();
        let p = l.embed_periodicity(&mut g, &store, &c).unwrap();
        let v = g.value(p);
        assert_eq!(v.shape(), &[3, 2, 6]);
        let tw = store.value(l.day_of_week);
        let td = store.value(l.time_of_day);
        let mut expect = tw.data()[2 * 3..3 * 3].to_vec();
        expect.extend_from_slice(&td.data()[100 * 3..101 * 3]);
        for node in 0..2 {
            assert_eq!(&v.data()[node * 6..node * 6 + 6], expect.as_slice());
        }
        // identical calendar rows -> identical output rows
        assert_eq!(&v.data()[..12], &v.data()[12..24]);

        let bad = cal(&[(7, 0), (0, 0), (0, 0)]);
        assert!(matches!(
            l.embed_periodicity(&mut g, &store, &bad),
            Err(Error::Index { index: 7, limit: 7, .. })
        ));
        let bad = cal(&[(0, 288), (0, 0), (0, 0)]);
        assert!(l.embed_periodicity(&mut g, &store, &bad).is_err());
    }

    #[test]
    fn zero_tables_give_zero_periodicity() {
        let (l, mut store) = layer(cfg(3, 4, 1));
        store.set_value(l.day_of_week, Tensor::zeros(&[7, 3])).unwrap();
        store.set_value(l.time_of_day, Tensor::zeros(&[288, 3])).unwrap();
        let mut g = Graph::new();
        let p = l.embed_periodicity(&mut g, &store, &cal(&[(1, 2), (3, 4), (5, 6)])).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 6]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assembled_segments_slice_back_exactly() {
        let (l, store) = layer(cfg(2, 5, 1));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 2, 1], |i| (i as f64).sin()));
        let c = cal(&[(0, 1), (0, 2), (0, 3)]);
        let x_f = l.embed_features(&mut g, &store, x).unwrap();
        let x_p = l.embed_periodicity(&mut g, &store, &c).unwrap();
        let x_a = l.adaptive(&mut g, &store);
        let z = l.assemble_hidden(&mut g, x_f, x_p, x_a).unwrap();
        let zv = g.value(z).clone();
        assert_eq!(zv.shape(), &[3, 2, 11]);
        assert!(zv.narrow_last(0, 2).unwrap().bit_eq(g.value(x_f)));
        assert!(zv.narrow_last(2, 6).unwrap().bit_eq(g.value(x_p)));
        assert!(zv.narrow_last(6, 11).unwrap().bit_eq(g.value(x_a)));
        assert!(matches!(
            l.assemble_hidden(&mut g, x_p, x_f, x_a),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn lookup_gradient_touches_only_indexed_rows() {
        let mut c = cfg(2, 2, 1);
        c.slots_per_day = 4;
        c.input_len = 2;
        let (l, store) = layer(c);
        let calendar = cal(&[(1, 3), (4, 3)]);
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.constant(Tensor::from_fn(&[2, 2, 1], |i| i as f64));
            let z = l.forward(g, s, x, &calendar)?;
            crate::autodiff::probe_loss(g, z, 3)
        };
        let mut g = Graph::new();
        let loss = build(&mut g, &store).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads.param(l.day_of_week).unwrap();
        for row in 0..7 {
            let nz = gw.data()[row * 2..row * 2 + 2].iter().any(|&v| v != 0.0);
            assert_eq!(nz, row == 1 || row == 4, "row {row}");
        }
        let gd = grads.param(l.time_of_day).unwrap();
        for row in 0..4 {
            let nz = gd.data()[row * 2..row * 2 + 2].iter().any(|&v| v != 0.0);
            assert_eq!(nz, row == 3, "slot {row}");
        }
        let rep = finite_diff_check(build, &store, &FdOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn periodicity_is_node_invariant_and_feature_independent() {
        let (l, store) = layer(cfg(2, 3, 1));
        let c = cal(&[(3, 10), (3, 11), (4, 12)]);
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[3, 2, 1], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[3, 2, 1], |i| -(i as f64) * 3.0));
        let za = l.forward(&mut g, &store, a, &c).unwrap();
        let zb = l.forward(&mut g, &store, b, &c).unwrap();
        let pa = g.value(za).narrow_last(2, 6).unwrap();
        let pb = g.value(zb).narrow_last(2, 6).unwrap();
        assert!(pa.bit_eq(&pb));
        for t in 0..3 {
            let row = &pa.data()[t * 8..t * 8 + 8];
            assert_eq!(&row[..4], &row[4..]);
        }
    }
}
