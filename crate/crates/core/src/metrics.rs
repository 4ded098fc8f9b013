//! Point-forecast metrics, the historical-index baseline and horizon reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAPE_FLOOR: f64 = 1e-3;

fn check(y: &Tensor<f64>, yhat: &Tensor<f64>, mask: Option<&[bool]>) -> Result<()> {
    if y.shape() != yhat.shape() {
        return Err(Error::shape("metric", y.shape(), yhat.shape()));
    }
    if let Some(m) = mask {
        if m.len() != y.len() {
            return Err(Error::shape("metric mask", y.shape(), &[m.len()]));
        }
    }
    Ok(())
}

fn pairs<'a>(
    y: &'a Tensor<f64>,
    yhat: &'a Tensor<f64>,
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    y.data()
        .iter()
        .zip(yhat.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (&a, &b))| (a, b))
}

/// Running sums for MAE, RMSE and MAPE over one set of entries.
#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    n: usize,
    abs: f64,
    sq: f64,
    mape_n: usize,
    pct: f64,
}

impl Acc {
    fn push(&mut self, y: f64, yhat: f64, floor: f64) {
        let e = (yhat - y).abs();
        self.n += 1;
        self.abs += e;
        self.sq += e * e;
        if y.abs() > floor {
            self.mape_n += 1;
            self.pct += e / y.abs();
        }
    }

    fn mae(&self) -> f64 {
        self.abs / self.n as f64
    }

    fn rmse(&self) -> f64 {
        (self.sq / self.n as f64).sqrt()
    }

    fn mape(&self) -> Option<f64> {
        (self.mape_n > 0).then(|| 100.0 * self.pct / self.mape_n as f64)
    }
}

fn accumulate(y: &Tensor<f64>, yhat: &Tensor<f64>, mask: Option<&[bool]>, floor: f64) -> Result<Acc> {
    check(y, yhat, mask)?;
    let mut acc = Acc::default();
    for (a, b) in pairs(y, yhat, mask) {
        acc.push(a, b, floor);
    }
    if acc.n == 0 {
        return Err(Error::UndefinedMetric("no evaluated entries".into()));
    }
    Ok(acc)
}

/// Mean absolute error over entries where `mask` (if any) is true.
pub fn mae(y: &Tensor<f64>, yhat: &Tensor<f64>, mask: Option<&[bool]>) -> Result<f64> {
    Ok(accumulate(y, yhat, mask, 0.0)?.mae())
}

pub fn rmse(y: &Tensor<f64>, yhat: &Tensor<f64>, mask: Option<&[bool]>) -> Result<f64> {
    Ok(accumulate(y, yhat, mask, 0.0)?.rmse())
}

/// Mean of `|ŷ − y| / |y|` in percent, over entries with `|y| > floor`.
pub fn mape(y: &Tensor<f64>, yhat: &Tensor<f64>, mask: Option<&[bool]>, floor: f64) -> Result<f64> {
    if !(floor >= 0.0) {
        return Err(Error::Config(format!("MAPE floor must be >= 0, got {floor}")));
    }
    accumulate(y, yhat, mask, floor)?
        .mape()
        .ok_or_else(|| Error::UndefinedMetric(format!("no target exceeds the MAPE floor {floor}")))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiMode {
    /// Repeat the last input frame.
    #[default]
    Last,
    /// Copy the same time of day from one day earlier.
    Daily,
}

impl std::str::FromStr for HiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "daily" => Ok(Self::Daily),
            _ => Err(Error::Config(format!("unknown baseline mode {s:?}"))),
        }
    }
}

/// Historical-index forecast `[z, N, d]` from an input window `[m, N, d]`.
///
/// `Daily` predicts step `m−1+h` from input step `m−1+h − P·⌈h/P⌉` with
/// `P = slots_per_day`, i.e. the latest observed step at the same time of
/// day. It needs `m ≥ P`; shorter windows fall back to `Last` with a warning.
pub fn hi_baseline(input: &Tensor<f64>, z: usize, mode: HiMode, slots_per_day: usize) -> Result<Tensor<f64>> {
    let s = input.shape();
    if s.len() != 3 || s[0] == 0 || z == 0 {
        return Err(Error::shape("hi_baseline", s, &[z]));
    }
    let (m, f) = (s[0], s[1] * s[2]);
    let src = |h: usize| -> usize {
        match mode {
            HiMode::Daily if slots_per_day > 0 && m >= slots_per_day => {
                m - 1 + h - slots_per_day * h.div_ceil(slots_per_day)
            }
            _ => m - 1,
        }
    };
    if mode == HiMode::Daily && (slots_per_day == 0 || m < slots_per_day) {
        log::warn!("daily baseline needs {slots_per_day} input steps, window has {m}; using last value");
    }
    let data = input.data();
    let mut out = Vec::with_capacity(z * f);
    for h in 1..=z {
        let t = src(h);
        out.extend_from_slice(&data[t * f..(t + 1) * f]);
    }
    Tensor::new(&[z, s[1], s[2]], out)
}

/// `[B, m, N, d] → [B, z, N, d]`.
pub fn hi_baseline_batch(inputs: &Tensor<f64>, z: usize, mode: HiMode, slots_per_day: usize) -> Result<Tensor<f64>> {
    if inputs.rank() != 4 {
        return Err(Error::shape("hi_baseline_batch", inputs.shape(), &[0, 0, 0, 0]));
    }
    let outs = (0..inputs.shape()[0])
        .map(|b| hi_baseline(&inputs.index_first(b)?, z, mode, slots_per_day))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Normalized,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// Zero-based index into the forecast horizon.
    pub horizon: usize,
    /// Lead time, `(horizon + 1) · granularity`.
    pub minutes: u32,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub per_horizon: Vec<HorizonMetrics>,
    pub n: usize,
    pub units: Units,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ReportSpec {
    pub horizons: Vec<usize>,
    pub granularity_minutes: u32,
    pub mape_floor: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl ReportSpec {
    /// 15/30/60-minute rows at 5-minute granularity.
    pub fn standard(granularity_minutes: u32) -> Self {
        Self {
            horizons: vec![2, 5, 11],
            granularity_minutes,
            mape_floor: DEFAULT_MAPE_FLOOR,
            config_hash: String::new(),
            seed: 0,
        }
    }
}

fn assert_mae_le_rmse(mae: f64, rmse: f64) {
    // equality holds when every error has the same magnitude; allow roundoff
    assert!(
        mae <= rmse * (1.0 + 1e-12) + f64::MIN_POSITIVE,
        "MAE {mae} exceeds RMSE {rmse}"
    );
}

/// Metrics per requested horizon and pooled over every horizon.
///
/// `pred`, `target`: `[B, z, N, d]`. With a normalizer both are mapped back
/// to original units first. Entries with `mask == false` are skipped.
pub fn horizon_report(
    pred: &Tensor<f64>,
    target: &Tensor<f64>,
    mask: Option<&[bool]>,
    normalizer: Option<&Normalizer>,
    spec: &ReportSpec,
) -> Result<MetricsReport> {
    check(target, pred, mask)?;
    let s = target.shape();
    if s.len() != 4 {
        return Err(Error::shape("horizon_report", s, &[0, 0, 0, 0]));
    }
    let z = s[1];
    if let Some(&h) = spec.horizons.iter().find(|&&h| h >= z) {
        return Err(Error::Index {
            what: "horizon",
            index: h,
            limit: z,
        });
    }
    let (pred, target, units) = match normalizer {
        Some(n) => (n.inverse(pred), n.inverse(target), Units::Original),
        None => (pred.clone(), target.clone(), Units::Normalized),
    };
    let frame = s[2] * s[3];
    let mut per = vec![Acc::default(); z];
    let mut all = Acc::default();
    for (i, (&y, &p)) in target.data().iter().zip(pred.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        per[i / frame % z].push(y, p, spec.mape_floor);
        all.push(y, p, spec.mape_floor);
    }
    if all.n == 0 {
        return Err(Error::UndefinedMetric("no evaluated entries".into()));
    }
    let per_horizon = spec
        .horizons
        .iter()
        .map(|&h| {
            let a = per[h];
            let (mae, rmse) = if a.n > 0 { (a.mae(), a.rmse()) } else { (f64::NAN, f64::NAN) };
            if a.n > 0 {
                assert_mae_le_rmse(mae, rmse);
            }
            HorizonMetrics {
                horizon: h,
                minutes: (h as u32 + 1) * spec.granularity_minutes,
                mae,
                rmse,
                mape_pct: a.mape(),
                n: a.n,
            }
        })
        .collect();
    let (mae, rmse) = (all.mae(), all.rmse());
    assert_mae_le_rmse(mae, rmse);
    Ok(MetricsReport {
        mae,
        rmse,
        mape_pct: all.mape(),
        per_horizon,
        n: all.n,
        units,
        config_hash: spec.config_hash.clone(),
        seed: spec.seed,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per reported horizon.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["horizon", "minutes", "mae", "rmse", "mape_pct", "n"])
            .map_err(csv_err)?;
        for h in &self.per_horizon {
            w.write_record([
                h.horizon.to_string(),
                h.minutes.to_string(),
                h.mae.to_string(),
                h.rmse.to_string(),
                h.mape_pct.map(|v| v.to_string()).unwrap_or_default(),
                h.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
