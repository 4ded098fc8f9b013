use std::io::Read;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};

use crate::embedding::{slots_per_day, CalendarIndex};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

/// A `T × N × d` series on a regular time grid, with an optional mask of
/// natively missing entries (`false` = missing, value stored as 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSource {
    pub values: Tensor<f64>,
    pub mask: Option<Vec<bool>>,
    pub start: NaiveDateTime,
    pub granularity_minutes: u32,
}

impl SeriesSource {
    pub fn new(
        values: Tensor<f64>,
        mask: Option<Vec<bool>>,
        start: NaiveDateTime,
        granularity_minutes: u32,
    ) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape("series", values.shape(), &[0, 0, 0]));
        }
        slots_per_day(granularity_minutes)?;
        if let Some(m) = &mask {
            if m.len() != values.len() {
                return Err(Error::shape("series mask", values.shape(), &[m.len()]));
            }
        }
        Ok(Self {
            values,
            mask,
            start,
            granularity_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn frame_len(&self) -> usize {
        self.nodes() * self.features()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(t as i64 * self.granularity_minutes as i64)
    }

    /// Day of week (Monday = 0) and time-of-day slot of step `t`.
    pub fn calendar(&self, t: usize) -> CalendarIndex {
        let ts = self.timestamp(t);
        let minute = ts.hour() * 60 + ts.minute();
        CalendarIndex {
            day_of_week: ts.weekday().num_days_from_monday() as u8,
            slot: (minute / self.granularity_minutes) as u16,
        }
    }

    pub fn observed(&self, flat: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[flat])
    }

    /// Frame values `[t, ·, ·]` as a flat slice.
    pub fn frame(&self, t: usize) -> &[f64] {
        let f = self.frame_len();
        &self.values.data()[t * f..(t + 1) * f]
    }

    /// Steps `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Index {
                what: "series slice",
                index: end,
                limit: self.len(),
            });
        }
        let f = self.frame_len();
        let values = Tensor::new(
            &[end - start, self.nodes(), self.features()],
            self.values.data()[start * f..end * f].to_vec(),
        )?;
        Ok(Self {
            values,
            mask: self.mask.as_ref().map(|m| m[start * f..end * f].to_vec()),
            start: self.timestamp(start),
            granularity_minutes: self.granularity_minutes,
        })
    }

    /// CSV with a header row, a timestamp column and `N·d` value columns
    /// ordered node-major (`node0.f0, node0.f1, …`). Empty cells are missing.
    pub fn from_csv_reader<R: Read>(reader: R, features: usize, granularity_minutes: u32) -> Result<Self> {
        slots_per_day(granularity_minutes)?;
        if features == 0 {
            return Err(Error::Config("features must be positive".into()));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let ingest = |row: usize, column: usize, message: String| Error::Ingest { row, column, message };
        let width = rdr
            .headers()
            .map_err(|e| ingest(1, 0, e.to_string()))?
            .len();
        if width < 2 || (width - 1) % features != 0 {
            return Err(ingest(
                1,
                width,
                format!("{} value columns is not a multiple of {features} features", width.saturating_sub(1)),
            ));
        }
        let mut values = Vec::new();
        let mut mask = Vec::new();
        let mut start = None;
        let mut steps = 0usize;
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| ingest(row, 0, e.to_string()))?;
            if rec.len() != width {
                return Err(ingest(row, rec.len(), format!("expected {width} columns")));
            }
            let ts = parse_timestamp(&rec[0])
                .ok_or_else(|| ingest(row, 1, format!("unparseable timestamp {:?}", &rec[0])))?;
            let start = *start.get_or_insert(ts);
            let expected = start + Duration::minutes(steps as i64 * granularity_minutes as i64);
            if ts != expected {
                return Err(ingest(row, 1, format!("timestamp {ts} off the grid, expected {expected}")));
            }
            for (c, cell) in rec.iter().enumerate().skip(1) {
                let cell = cell.trim();
                if cell.is_empty() {
                    values.push(0.0);
                    mask.push(false);
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| ingest(row, c + 1, format!("not a number: {cell:?}")))?;
                if !v.is_finite() {
                    return Err(ingest(row, c + 1, format!("non-finite value {cell:?}")));
                }
                values.push(v);
                mask.push(true);
            }
            steps += 1;
        }
        let start = start.ok_or_else(|| ingest(2, 0, "no data rows".into()))?;
        let nodes = (width - 1) / features;
        let values = Tensor::new(&[steps, nodes, features], values)?;
        let mask = (!mask.iter().all(|&m| m)).then_some(mask);
        Self::new(values, mask, start, granularity_minutes)
    }

    pub fn read_csv(path: impl AsRef<Path>, features: usize, granularity_minutes: u32) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file), features, granularity_minutes)
    }

    /// Inverse of [`Self::from_csv_reader`]. Values print in shortest
    /// round-trip form, so reading the file back is bit-exact.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["timestamp".to_string()];
        for n in 0..self.nodes() {
            header.extend((0..self.features()).map(|f| format!("node{n}.f{f}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        let f = self.frame_len();
        for t in 0..self.len() {
            let mut rec = vec![self.timestamp(t).format("%Y-%m-%d %H:%M:%S").to_string()];
            rec.extend(self.frame(t).iter().enumerate().map(|(i, v)| {
                if self.observed(t * f + i) {
                    v.to_string()
                } else {
                    String::new()
                }
            }));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// A `[T, N, d]` STDF array; the time grid comes from the caller.
    pub fn read_stdf(path: impl AsRef<Path>, start: NaiveDateTime, granularity_minutes: u32) -> Result<Self> {
        let values = crate::stdf::read::<f64>(path)?;
        Self::new(values, None, start, granularity_minutes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn csv_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let v = Tensor::from_fn(&[5, 2, 2], |i| (i as f64).sqrt() - 1.0 / 7.0);
        let mut mask = vec![true; 20];
        mask[3] = false;
        let v = Tensor::new(&[5, 2, 2], v.data().iter().zip(&mask).map(|(x, &m)| if m { *x } else { 0.0 }).collect()).unwrap();
        let s = SeriesSource::new(v, Some(mask), ts("2024-02-28 23:00"), 30).unwrap();
        s.write_csv(&path).unwrap();
        let back = SeriesSource::read_csv(&path, 2, 30).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_with_missing_cells() {
        let text = "time,a,b\n2024-01-01 00:00:00,1.5,2\n2024-01-01 00:05:00,,4\n";
        let s = SeriesSource::from_csv_reader(text.as_bytes(), 1, 5).unwrap();
        assert_eq!(s.values.shape(), &[2, 2, 1]);
        assert_eq!(s.values.data(), &[1.5, 2.0, 0.0, 4.0]);
        assert_eq!(s.mask.as_deref(), Some(&[true, true, false, true][..]));
    }

    #[test]
    fn csv_errors_carry_row_and_column() {
        let bad = "time,a,b\n2024-01-01 00:00,1,2\n2024-01-01 00:05,1,x\n";
        match SeriesSource::from_csv_reader(bad.as_bytes(), 1, 5) {
            Err(Error::Ingest { row: 3, column: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let gap = "time,a\n2024-01-01 00:00,1\n2024-01-01 00:10,1\n";
        assert!(matches!(
            SeriesSource::from_csv_reader(gap.as_bytes(), 1, 5),
            Err(Error::Ingest { row: 3, column: 1, .. })
        ));
        let odd = "time,a,b,c\n2024-01-01 00:00,1,2,3\n";
        assert!(matches!(
            SeriesSource::from_csv_reader(odd.as_bytes(), 2, 5),
            Err(Error::Ingest { row: 1, .. })
        ));
    }

    #[test]
    fn calendar_uses_monday_zero() {
        // 2024-01-01 is a Monday
        let v = Tensor::zeros(&[300, 1, 1]);
        let s = SeriesSource::new(v, None, ts("2024-01-01 23:55"), 5).unwrap();
        assert_eq!(s.calendar(0), CalendarIndex { day_of_week: 0, slot: 287 });
        assert_eq!(s.calendar(1), CalendarIndex { day_of_week: 1, slot: 0 });
        let sun = SeriesSource::new(Tensor::zeros(&[1, 1, 1]), None, ts("2024-01-07T12:00:00"), 60).unwrap();
        assert_eq!(sun.calendar(0), CalendarIndex { day_of_week: 6, slot: 12 });
    }

    #[test]
    fn granularity_must_divide_a_day() {
        let v = Tensor::zeros(&[2, 1, 1]);
        assert!(SeriesSource::new(v, None, ts("2024-01-01 00:00"), 7).is_err());
    }
}
