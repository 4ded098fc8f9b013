//! Parameter bundles and the run log.
//!
//! A bundle is a directory with `manifest.txt` and one `<param>.stdf` per
//! parameter, in store order. The manifest carries the hash of the config
//! that produced it; loading under a different config is refused.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stdf;
use crate::tensor::Real;

pub const BUNDLE_MANIFEST: &str = "manifest.txt";

pub fn save_bundle<T: Real>(dir: impl AsRef<Path>, kind: &str, config_hash: &str, store: &ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(store.len());
    let mut frozen = Vec::new();
    for (_, p) in store.iter() {
        stdf::write(dir.join(format!("{}.stdf", p.name)), &p.value)?;
        names.push(p.name.clone());
        if p.frozen {
            frozen.push(p.name.clone());
        }
    }
    let text = format!(
        "kind = {kind}\nconfig_hash = {config_hash}\nparams = {}\nfrozen = {}\n",
        names.join(","),
        frozen.join(",")
    );
    let path = dir.join(BUNDLE_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Load a bundle of `kind` written under `config_hash`.
pub fn load_bundle<T: Real>(dir: impl AsRef<Path>, kind: &str, config_hash: &str) -> Result<ParamStore<T>> {
    let dir = dir.as_ref();
    let mpath = dir.join(BUNDLE_MANIFEST);
    if !mpath.exists() {
        return Err(Error::Config(format!("no {kind} bundle at {}", dir.display())));
    }
    let kv = read_manifest(&mpath)?;
    let field = |k: &str| {
        kv.get(k).cloned().ok_or_else(|| Error::Integrity {
            file: mpath.display().to_string(),
            field: k.to_string(),
        })
    };
    if field("kind")? != kind {
        return Err(Error::Config(format!(
            "{} holds a {} bundle, expected {kind}",
            dir.display(),
            field("kind")?
        )));
    }
    let bundle = field("config_hash")?;
    if bundle != config_hash {
        return Err(Error::HashMismatch {
            config: config_hash.to_string(),
            bundle,
        });
    }
    let frozen = field("frozen")?;
    let frozen: Vec<&str> = frozen.split(',').filter(|s| !s.is_empty()).collect();
    let mut store = ParamStore::new();
    for name in field("params")?.split(',').filter(|s| !s.is_empty()) {
        let id = store.add(name, stdf::read::<T>(dir.join(format!("{name}.stdf")))?);
        store.get_mut(id).frozen = frozen.contains(&name);
    }
    Ok(store)
}

/// Append-only, timestamp-free log of what each command did, mirrored to
/// the `log` facade.
pub struct RunLog {
    file: File,
    command: &'static str,
}

impl RunLog {
    pub fn open(out: impl AsRef<Path>, command: &'static str) -> Result<Self> {
        let out = out.as_ref();
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("run.log");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, command })
    }

    pub fn line(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        log::info!("{}: {msg}", self.command);
        // The log is a convenience; failing to append must not fail the run.
        let _ = writeln!(self.file, "[{}] {msg}", self.command);
    }
}

/// Standard artifact locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("denoiser")
    }

    pub fn forecaster(&self) -> PathBuf {
        self.root.join("forecaster")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bundle_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 / 3.0));
        let b = store.add("b", Tensor::from_fn(&[1], |_| -0.0));
        store.get_mut(b).frozen = true;
        save_bundle(dir.path(), "forecaster", "h1", &store).unwrap();
        let back = load_bundle::<f32>(dir.path(), "forecaster", "h1").unwrap();
        assert!(back.bit_eq(&store));
        assert!(back.get(b).frozen);
        match load_bundle::<f32>(dir.path(), "forecaster", "h2") {
            Err(Error::HashMismatch { config, bundle }) => assert_eq!((config.as_str(), bundle.as_str()), ("h2", "h1")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_bundle::<f32>(dir.path(), "denoiser", "h1"), Err(Error::Config(_))));
        assert!(matches!(
            load_bundle::<f32>(dir.path().join("nope"), "denoiser", "h1"),
            Err(Error::Config(_))
        ));
    }
}
