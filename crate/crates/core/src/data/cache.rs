//! On-disk cache of prepared splits.
//!
//! A cache is a directory holding `manifest.txt` (key = value lines) and one
//! STDF file per split field. The manifest records the hashes the cache was
//! built from; a cache whose hashes don't match the caller's is stale and
//! reported as a miss, never loaded.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::normalize::Normalizer;
use super::source::SeriesSource;
use super::window::{Sample, Splits, WindowSpec, WindowedDataset};
use crate::embedding::CalendarIndex;
use crate::error::{Error, Result};
use crate::stdf;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const CACHE_FORMAT_VERSION: u32 = 1;

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// What a cache must have been built from to be reusable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub spec_hash: String,
    pub source_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of everything in a series that can change the prepared windows.
pub fn source_hash(src: &SeriesSource) -> String {
    let mut h = Sha256::new();
    h.update(stdf::encode(&src.values));
    match &src.mask {
        Some(m) => h.update(m.iter().map(|&b| b as u8).collect::<Vec<_>>()),
        None => h.update(b"no-mask"),
    }
    h.update(src.start.to_string().as_bytes());
    h.update(src.granularity_minutes.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn bool_tensor(shape: &[usize], bits: impl Iterator<Item = bool>) -> Result<Tensor<f32>> {
    Tensor::new(shape, bits.map(|b| if b { 1.0 } else { 0.0 }).collect())
}

fn write_split(dir: &Path, name: &str, ds: &WindowedDataset) -> Result<()> {
    let b = ds.len();
    let s = &ds.samples[0];
    let (m, z) = (ds.spec.input_len, ds.spec.output_len);
    let (n, d) = (s.input.shape()[1], s.input.shape()[2]);
    let path = |field: &str| dir.join(format!("{name}.{field}.stdf"));
    stdf::write(path("inputs"), &ds.inputs::<f64>()?)?;
    stdf::write(path("targets"), &ds.targets::<f64>()?)?;
    let mask = ds.samples.iter().flat_map(|s| s.mask.iter().copied());
    stdf::write(path("mask"), &bool_tensor(&[b, m, n, d], mask)?)?;
    let tmask = ds.samples.iter().flat_map(|s| s.target_mask.iter().copied());
    stdf::write(path("target_mask"), &bool_tensor(&[b, z, n, d], tmask)?)?;
    let cal: Vec<f64> = ds
        .samples
        .iter()
        .flat_map(|s| s.calendar.iter().flat_map(|c| [c.day_of_week as f64, c.slot as f64]))
        .collect();
    stdf::write(path("calendar"), &Tensor::new(&[b, m, 2], cal)?)?;
    let offsets = ds.samples.iter().map(|s| s.offset as f64).collect();
    stdf::write(path("offsets"), &Tensor::new(&[b], offsets)?)
}

fn read_field<T: crate::tensor::Real>(dir: &Path, name: &str, field: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let path = dir.join(format!("{name}.{field}.stdf"));
    let file = path.display().to_string();
    let bytes = fs::read(&path).map_err(|_| Error::Integrity {
        file: file.clone(),
        field: "missing file".into(),
    })?;
    let t = stdf::decode::<T>(&bytes, &file)?;
    if t.shape() != shape {
        return Err(Error::Integrity {
            file,
            field: format!("extents {:?}, expected {:?}", t.shape(), shape),
        });
    }
    Ok(t)
}

fn read_split(dir: &Path, name: &str, spec: WindowSpec, count: usize, n: usize, d: usize) -> Result<WindowedDataset> {
    let (m, z) = (spec.input_len, spec.output_len);
    let inputs = read_field::<f64>(dir, name, "inputs", &[count, m, n, d])?;
    let targets = read_field::<f64>(dir, name, "targets", &[count, z, n, d])?;
    let mask = read_field::<f32>(dir, name, "mask", &[count, m, n, d])?;
    let tmask = read_field::<f32>(dir, name, "target_mask", &[count, z, n, d])?;
    let cal = read_field::<f64>(dir, name, "calendar", &[count, m, 2])?;
    let offsets = read_field::<f64>(dir, name, "offsets", &[count])?;
    let (fi, ft) = (m * n * d, z * n * d);
    let samples = (0..count)
        .map(|b| {
            Ok(Sample {
                offset: offsets.data()[b] as usize,
                input: inputs.index_first(b)?,
                target: targets.index_first(b)?,
                calendar: cal.data()[b * m * 2..(b + 1) * m * 2]
                    .chunks(2)
                    .map(|c| CalendarIndex {
                        day_of_week: c[0] as u8,
                        slot: c[1] as u16,
                    })
                    .collect(),
                mask: mask.data()[b * fi..(b + 1) * fi].iter().map(|&v| v != 0.0).collect(),
                target_mask: tmask.data()[b * ft..(b + 1) * ft].iter().map(|&v| v != 0.0).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowedDataset { spec, samples })
}

/// Write `splits` and `norm` under `dir`, replacing any previous cache.
pub fn save(dir: impl AsRef<Path>, key: &CacheKey, splits: &Splits, norm: &Normalizer) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Drop the old manifest first so a crash mid-write leaves a miss, not a mix.
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
    }
    for (name, ds) in splits.parts() {
        write_split(dir, name, ds)?;
    }
    stdf::write(dir.join("normalizer.stdf"), &norm.to_tensor())?;

    let s = &splits.train.samples[0].input;
    let spec = splits.train.spec;
    let mut lines = vec![
        format!("format_version = {CACHE_FORMAT_VERSION}"),
        format!("spec_hash = {}", key.spec_hash),
        format!("source_hash = {}", key.source_hash),
        format!("input_len = {}", spec.input_len),
        format!("output_len = {}", spec.output_len),
        format!("stride = {}", spec.stride),
        format!("nodes = {}", s.shape()[1]),
        format!("features = {}", s.shape()[2]),
    ];
    for ((name, ds), seg) in splits.parts().into_iter().zip(&splits.segments) {
        lines.push(format!("{name}_samples = {}", ds.len()));
        lines.push(format!("{name}_segment = {}..{}", seg.start, seg.end));
    }
    let text = lines.join("\n") + "\n";
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}

fn parse_manifest(text: &str, file: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Integrity {
                file: file.to_string(),
                field: format!("malformed line {l:?}"),
            })?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Load a cache built for `key`. A missing or stale cache is `Ok(None)`;
/// a cache that matches but can't be read back is an integrity error.
pub fn load(dir: impl AsRef<Path>, key: &CacheKey) -> Result<Option<(Splits, Normalizer)>> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    let Ok(text) = fs::read_to_string(&manifest) else {
        return Ok(None);
    };
    let file = manifest.display().to_string();
    let kv = parse_manifest(&text, &file)?;
    let get = |k: &str| -> Result<&str> {
        kv.get(k).map(String::as_str).ok_or_else(|| Error::Integrity {
            file: file.clone(),
            field: k.to_string(),
        })
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Integrity {
            file: file.clone(),
            field: k.to_string(),
        })
    };
    if get("format_version")? != CACHE_FORMAT_VERSION.to_string()
        || get("spec_hash")? != key.spec_hash
        || get("source_hash")? != key.source_hash
    {
        return Ok(None);
    }
    let spec = WindowSpec {
        input_len: num("input_len")?,
        output_len: num("output_len")?,
        stride: num("stride")?,
    };
    let (n, d) = (num("nodes")?, num("features")?);
    let mut parts = Vec::with_capacity(3);
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(3);
    for name in SPLITS {
        parts.push(read_split(dir, name, spec, num(&format!("{name}_samples"))?, n, d)?);
        let field = format!("{name}_segment");
        let seg = get(&field)?
            .split_once("..")
            .and_then(|(a, b)| Some(a.parse().ok()?..b.parse().ok()?))
            .ok_or_else(|| Error::Integrity {
                file: file.clone(),
                field,
            })?;
        segments.push(seg);
    }
    let norm = Normalizer::from_tensor(&stdf::read(dir.join("normalizer.stdf"))?)?;
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let segments: [Range<usize>; 3] = segments.try_into().expect("three segments");
    Ok(Some((
        Splits {
            train,
            val,
            test,
            segments,
        },
        norm,
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::source::parse_timestamp;
    use crate::data::window::{split_chronological, SplitSpec};

    fn fixture() -> (Splits, Normalizer, CacheKey) {
        let v = Tensor::from_fn(&[60, 2, 1], |i| (i as f64 * 0.37).sin() * 1e3 + 1.0 / 3.0);
        let mut mask = vec![true; 120];
        mask[7] = false;
        let src = SeriesSource::new(v, Some(mask), parse_timestamp("2024-03-05 10:05").unwrap(), 5).unwrap();
        let spec = WindowSpec {
            input_len: 3,
            output_len: 2,
            stride: 2,
        };
        let splits = split_chronological(&src, &spec, &SplitSpec::default()).unwrap();
        let norm = Normalizer {
            mean: vec![0.1],
            std: vec![7.0],
        };
        let key = CacheKey {
            spec_hash: "abc".into(),
            source_hash: source_hash(&src),
        };
        (splits, norm, key)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (splits, norm, key) = fixture();
        save(dir.path(), &key, &splits, &norm).unwrap();
        let (back, nb) = load(dir.path(), &key).unwrap().expect("cache hit");
        assert_eq!(back.segments, splits.segments);
        for ((_, a), (_, b)) in splits.parts().into_iter().zip(back.parts()) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert!(x.input.bit_eq(&y.input) && x.target.bit_eq(&y.target));
                assert_eq!((x.offset, &x.calendar, &x.mask, &x.target_mask), (y.offset, &y.calendar, &y.mask, &y.target_mask));
            }
        }
        assert_eq!(nb, norm);
    }

    #[test]
    fn stale_or_absent_cache_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let (splits, norm, key) = fixture();
        assert!(load(dir.path(), &key).unwrap().is_none());
        save(dir.path(), &key, &splits, &norm).unwrap();
        let other = CacheKey {
            spec_hash: "abd".into(),
            ..key.clone()
        };
        assert!(load(dir.path(), &other).unwrap().is_none());
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let (splits, norm, key) = fixture();
        save(dir.path(), &key, &splits, &norm).unwrap();
        let f = dir.path().join("val.targets.stdf");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        match load(dir.path(), &key) {
            Err(Error::Integrity { file, field }) => {
                assert!(file.ends_with("val.targets.stdf"));
                assert_eq!(field, "payload length");
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn source_hash_sees_values_and_mask() {
        let start = parse_timestamp("2024-01-01 00:00").unwrap();
        let v = Tensor::from_fn(&[4, 1, 1], |i| i as f64);
        let a = SeriesSource::new(v.clone(), None, start, 5).unwrap();
        let b = SeriesSource::new(v.map(|x| x + 1e-12), None, start, 5).unwrap();
        let c = SeriesSource::new(v, Some(vec![true, true, false, true]), start, 5).unwrap();
        assert_ne!(source_hash(&a), source_hash(&b));
        assert_ne!(source_hash(&a), source_hash(&c));
        assert_eq!(source_hash(&a), source_hash(&a.clone()));
    }
}
