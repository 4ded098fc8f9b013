use rand::Rng;
use rayon::prelude::*;

use super::window::WindowedDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Independently per input entry, with probability `p`, zero the value and
/// clear its mask bit. Targets are never touched. Each sample draws from a
/// stream keyed by its series offset, so the result does not depend on
/// processing order or on which split the sample belongs to.
pub fn inject_missing(ds: &WindowedDataset, p: f64, seed: u64) -> Result<WindowedDataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("missing ratio must lie in [0, 1], got {p}")));
    }
    let mut out = ds.clone();
    if p == 0.0 {
        return Ok(out);
    }
    out.samples.par_iter_mut().for_each(|s| {
        let mut rng = rng_for(seed, s.offset as u64);
        for (v, m) in s.input.data_mut().iter_mut().zip(s.mask.iter_mut()) {
            if rng.random::<f64>() < p {
                *v = 0.0;
                *m = false;
            }
        }
    });
    Ok(out)
}
