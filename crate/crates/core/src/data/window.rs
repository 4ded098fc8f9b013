use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::source::SeriesSource;
use crate::embedding::CalendarIndex;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub output_len: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            input_len: 12,
            output_len: 12,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 || self.stride == 0 {
            return Err(Error::Config("input_len, output_len and stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.input_len + self.output_len
    }

    /// `⌊(T − m − z)/stride⌋ + 1`, or `None` when `T < m + z`.
    pub fn count(&self, steps: usize) -> Option<usize> {
        (steps >= self.span()).then(|| (steps - self.span()) / self.stride + 1)
    }
}

/// One input/target pair cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index of the first input step in the full series.
    pub offset: usize,
    /// `[m, N, d]`.
    pub input: Tensor<f64>,
    /// `[z, N, d]`.
    pub target: Tensor<f64>,
    pub calendar: Vec<CalendarIndex>,
    /// Per input entry; `false` = missing (value 0).
    pub mask: Vec<bool>,
    /// Per target entry; `false` = natively missing, excluded from metrics.
    pub target_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub spec: WindowSpec,
    pub samples: Vec<Sample>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[B, m, N, d]` in profile `T`.
    pub fn inputs<T: Real>(&self) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = self.samples.iter().map(|s| s.input.cast()).collect();
        Tensor::stack(&items)
    }

    /// `[B, z, N, d]` in profile `T`.
    pub fn targets<T: Real>(&self) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = self.samples.iter().map(|s| s.target.cast()).collect();
        Tensor::stack(&items)
    }

    pub fn calendars(&self) -> Vec<Vec<CalendarIndex>> {
        self.samples.iter().map(|s| s.calendar.clone()).collect()
    }

    pub fn target_mask(&self) -> Vec<bool> {
        self.samples.iter().flat_map(|s| s.target_mask.iter().copied()).collect()
    }

    /// Raw step indices touched by any sample (inputs and targets).
    pub fn step_range(&self) -> Option<Range<usize>> {
        let lo = self.samples.iter().map(|s| s.offset).min()?;
        let hi = self.samples.iter().map(|s| s.offset + self.spec.span()).max()?;
        Some(lo..hi)
    }
}

fn cut(src: &SeriesSource, base: usize, local: usize, spec: &WindowSpec) -> Result<Sample> {
    let (m, z) = (spec.input_len, spec.output_len);
    let f = src.frame_len();
    let (n, d) = (src.nodes(), src.features());
    let data = src.values.data();
    let input = Tensor::new(&[m, n, d], data[local * f..(local + m) * f].to_vec())?;
    let target = Tensor::new(&[z, n, d], data[(local + m) * f..(local + m + z) * f].to_vec())?;
    let mask = (local * f..(local + m) * f).map(|i| src.observed(i)).collect();
    let target_mask = ((local + m) * f..(local + m + z) * f).map(|i| src.observed(i)).collect();
    Ok(Sample {
        offset: base + local,
        input,
        target,
        calendar: (local..local + m).map(|t| src.calendar(t)).collect(),
        mask,
        target_mask,
    })
}

/// Slide a window over `src` at offsets `0, stride, …, T − m − z`. `base`
/// is added to every recorded offset (the position of `src` in a parent
/// series).
pub fn build_windows_at(src: &SeriesSource, spec: &WindowSpec, base: usize) -> Result<WindowedDataset> {
    spec.validate()?;
    let count = spec.count(src.len()).ok_or(Error::InsufficientData {
        have: src.len(),
        need: spec.span(),
    })?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| cut(src, base, i * spec.stride, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowedDataset { spec: *spec, samples })
}

pub fn build_windows(src: &SeriesSource, spec: &WindowSpec) -> Result<WindowedDataset> {
    build_windows_at(src, spec, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: [0.7, 0.1, 0.2] }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }

    /// Contiguous raw segments; boundaries are `round(T · cumulative ratio)`.
    pub fn segments(&self, steps: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let b1 = (steps as f64 * self.ratios[0]).round() as usize;
        let b2 = ((steps as f64 * (self.ratios[0] + self.ratios[1])).round() as usize).max(b1);
        Ok([0..b1, b1..b2.min(steps), b2.min(steps)..steps])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub segments: [Range<usize>; 3],
}

impl Splits {
    pub fn parts(&self) -> [(&'static str, &WindowedDataset); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Cut the raw series into train/val/test segments, then window each
/// segment on its own so that no sample straddles a boundary.
pub fn split_chronological(src: &SeriesSource, window: &WindowSpec, split: &SplitSpec) -> Result<Splits> {
    window.validate()?;
    let segments = split.segments(src.len())?;
    let names = ["train", "val", "test"];
    let mut parts = Vec::with_capacity(3);
    for (seg, name) in segments.iter().zip(names) {
        let ds = match window.count(seg.len()) {
            Some(_) => build_windows_at(&src.slice(seg.start, seg.end)?, window, seg.start)?,
            None => {
                return Err(Error::Config(format!(
                    "{name} split has {} steps, fewer than one window of {}",
                    seg.len(),
                    window.span()
                )))
            }
        };
        parts.push(ds);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits {
        train,
        val,
        test,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::source::parse_timestamp;

    fn ramp(steps: usize, nodes: usize) -> SeriesSource {
        let v = Tensor::from_fn(&[steps, nodes, 1], |i| i as f64);
        SeriesSource::new(v, None, parse_timestamp("2024-01-01 00:00").unwrap(), 5).unwrap()
    }

    #[test]
    fn window_counts_match_examples() {
        let spec = WindowSpec::default();
        assert_eq!(build_windows(&ramp(36, 2), &spec).unwrap().len(), 13);
        assert_eq!(build_windows(&ramp(24, 2), &spec).unwrap().len(), 1);
        assert!(matches!(
            build_windows(&ramp(23, 2), &spec),
            Err(Error::InsufficientData { have: 23, need: 24 })
        ));
    }

    #[test]
    fn windows_carry_the_right_frames() {
        let spec = WindowSpec {
            input_len: 2,
            output_len: 1,
            stride: 2,
        };
        let ds = build_windows(&ramp(7, 1), &spec).unwrap();
        assert_eq!(ds.len(), 3);
        let s = &ds.samples[1];
        assert_eq!(s.offset, 2);
        assert_eq!(s.input.data(), &[2.0, 3.0]);
        assert_eq!(s.target.data(), &[4.0]);
        assert_eq!(s.calendar[1].slot, 3);
    }

    #[test]
    fn split_segments_follow_ratios() {
        let segs = SplitSpec::default().segments(100).unwrap();
        assert_eq!(segs, [0..70, 70..80, 80..100]);
        let spec = WindowSpec {
            input_len: 2,
            output_len: 2,
            stride: 1,
        };
        let s = split_chronological(&ramp(100, 1), &spec, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (67, 7, 17));
        assert_eq!(s.test.samples[0].offset, 80);
        let again = split_chronological(&ramp(100, 1), &spec, &SplitSpec::default()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn empty_split_is_config_error() {
        let spec = WindowSpec::default();
        let r = split_chronological(&ramp(100, 1), &spec, &SplitSpec { ratios: [1.0, 0.0, 0.0] });
        assert!(matches!(r, Err(Error::Config(_))));
        let bad = SplitSpec { ratios: [0.5, 0.5, 0.5] };
        assert!(bad.validate().is_err());
    }
}
