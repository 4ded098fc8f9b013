use serde::{Deserialize, Serialize};

use super::source::SeriesSource;
use super::window::{Splits, WindowedDataset};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-feature z-score transform fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit on the observed entries of `train`. A feature with zero spread
    /// gets std 1 so it maps to zeros.
    pub fn fit(train: &SeriesSource) -> Result<Self> {
        let d = train.features();
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        for (i, &v) in train.values.data().iter().enumerate() {
            if train.observed(i) {
                sum[i % d] += v;
                count[i % d] += 1;
            }
        }
        if let Some(f) = count.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("feature {f} has no observed training values")));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut ss = vec![0.0; d];
        for (i, &v) in train.values.data().iter().enumerate() {
            if train.observed(i) {
                ss[i % d] += (v - mean[i % d]).powi(2);
            }
        }
        let std = ss
            .iter()
            .zip(&count)
            .enumerate()
            .map(|(f, (s, &c))| {
                let sd = (s / c as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    log::warn!("feature {f} has zero variance in the training split; using std 1");
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn inverse_value(&self, feature: usize, v: f64) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    /// Apply to a tensor whose last axis is the feature axis.
    pub fn transform<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        self.map_features(t, |f, v| self.transform_value(f, v))
    }

    pub fn inverse<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        self.map_features(t, |f, v| self.inverse_value(f, v))
    }

    fn map_features<T: Real>(&self, t: &Tensor<T>, op: impl Fn(usize, f64) -> f64) -> Tensor<T> {
        let d = self.features();
        Tensor::from_fn(t.shape(), |i| T::c(op(i % d, t.data()[i].f64())))
    }

    /// Normalize a whole series; missing entries stay exactly 0.
    pub fn apply_series(&self, src: &SeriesSource) -> SeriesSource {
        let mut out = src.clone();
        let d = self.features();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            *v = if src.observed(i) { self.transform_value(i % d, *v) } else { 0.0 };
        }
        out
    }

    pub fn apply_dataset(&self, ds: &WindowedDataset) -> WindowedDataset {
        let mut out = ds.clone();
        for s in &mut out.samples {
            s.input = self.transform(&s.input);
            s.target = self.transform(&s.target);
            for (v, &m) in s.input.data_mut().iter_mut().zip(&s.mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.std);
        Tensor::new(&[2, self.features()], data).expect("two rows of d values")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] != 2 {
            return Err(Error::shape("normalizer", t.shape(), &[2, 0]));
        }
        let d = t.shape()[1];
        Ok(Self {
            mean: t.data()[..d].to_vec(),
            std: t.data()[d..].to_vec(),
        })
    }
}

/// Fit on the raw training segment and normalize every split.
pub fn fit_apply_normalizer(src: &SeriesSource, splits: &Splits) -> Result<(Splits, Normalizer)> {
    let seg = &splits.segments[0];
    let norm = Normalizer::fit(&src.slice(seg.start, seg.end)?)?;
    let out = Splits {
        train: norm.apply_dataset(&splits.train),
        val: norm.apply_dataset(&splits.val),
        test: norm.apply_dataset(&splits.test),
        segments: splits.segments.clone(),
    };
    Ok((out, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::source::parse_timestamp;

    fn series(values: Vec<f64>, d: usize) -> SeriesSource {
        let t = values.len() / d;
        let v = Tensor::new(&[t, 1, d], values).unwrap();
        SeriesSource::new(v, None, parse_timestamp("2024-01-01 00:00").unwrap(), 5).unwrap()
    }

    #[test]
    fn constant_feature_maps_to_zero_and_back() {
        let n = Normalizer::fit(&series(vec![5.0; 6], 1)).unwrap();
        assert_eq!(n.std, vec![1.0]);
        assert_eq!(n.transform_value(0, 5.0), 0.0);
        assert_eq!(n.inverse_value(0, 0.0), 5.0);
    }

    #[test]
    fn z_score_example() {
        // mean 10, population std 2
        let n = Normalizer::fit(&series(vec![8.0, 12.0, 8.0, 12.0], 1)).unwrap();
        assert_eq!((n.mean[0], n.std[0]), (10.0, 2.0));
        assert_eq!(n.transform_value(0, 14.0), 2.0);
    }

    #[test]
    fn missing_entries_are_ignored_when_fitting() {
        let mut s = series(vec![1.0, 100.0, 3.0], 1);
        s.mask = Some(vec![true, false, true]);
        let n = Normalizer::fit(&s).unwrap();
        assert_eq!(n.mean, vec![2.0]);
        assert_eq!(n.apply_series(&s).values.data()[1], 0.0);
    }

    #[test]
    fn tensor_round_trip() {
        let n = Normalizer {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 3.0],
        };
        assert_eq!(Normalizer::from_tensor(&n.to_tensor()).unwrap(), n);
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.3, 7.0, -4.0, 1e3]).unwrap();
        assert!(n.inverse(&n.transform(&x)).max_abs_diff(&x) < 1e-10);
    }
}
