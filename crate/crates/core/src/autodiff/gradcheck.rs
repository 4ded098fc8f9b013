use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use super::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Precision the finite-difference side of a check is evaluated in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Oracle {
    /// Plain f64, like the analytic side.
    #[default]
    F64,
    /// Double-double. Deep or wide stacks accumulate enough f64 roundoff in
    /// the loss that `(f(θ+h) − f(θ−h)) / 2h` is noise for coordinates with
    /// small gradients; evaluating in ~106 bits removes that floor without
    /// touching the analytic gradients under test.
    DoubleDouble,
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per parameter, chosen with `seed`.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    pub oracle: Oracle,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            oracle: Oracle::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates skipped because a `±step` perturbation moved some
    /// `relu`/`abs` input across zero, where the function has no derivative.
    pub kinks_skipped: usize,
}

/// A scalar function of the parameters that can be traced at any precision.
pub trait Probe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &ParamStore<T>) -> Result<Var>;
}

fn eval<T: Real>(
    f: &impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
    params: &ParamStore<T>,
) -> Result<(T, Vec<bool>)> {
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Usage(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok((v.data()[0], g.kink_pattern()))
}

/// Compare reverse-mode gradients of the scalar built by `f` against central
/// differences over every non-frozen parameter coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Coordinates whose perturbation crosses a `relu`/`abs` kink are not
/// differentiable there and are counted in `kinks_skipped` instead.
/// `f` must be deterministic; two evaluations at the same point that differ
/// in any bit make the check invalid.
///
/// A closure can only be traced in f64; use [`finite_diff_check_probe`] for
/// [`Oracle::DoubleDouble`].
pub fn finite_diff_check<F>(f: F, params: &ParamStore<f64>, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if opts.oracle != Oracle::F64 {
        return Err(Error::Usage(
            "a closure is traced in f64 only; implement Probe for other oracles".into(),
        ));
    }
    let grads = analytic(&f, params, opts)?;
    numeric_compare(&f, params, &grads, opts)
}

/// [`finite_diff_check`] for a [`Probe`], honouring `opts.oracle`.
pub fn finite_diff_check_probe<P: Probe>(p: &P, params: &ParamStore<f64>, opts: &FdOptions) -> Result<FdReport> {
    let f64_eval = |g: &mut Graph<f64>, s: &ParamStore<f64>| p.eval(g, s);
    let grads = analytic(&f64_eval, params, opts)?;
    match opts.oracle {
        Oracle::F64 => numeric_compare(&f64_eval, params, &grads, opts),
        Oracle::DoubleDouble => numeric_compare(
            &|g: &mut Graph<TwoFloat>, s: &ParamStore<TwoFloat>| p.eval(g, s),
            params,
            &grads,
            opts,
        ),
    }
}

fn analytic(
    f: &impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    params: &ParamStore<f64>,
    opts: &FdOptions,
) -> Result<Gradients<f64>> {
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {}", opts.step)));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Usage(format!("loss must be scalar, got {:?}", g.shape(loss))));
    }
    let base = g.value(loss).item();
    let (again, _) = eval(f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    g.backward(loss)
}

fn numeric_compare<T: Real>(
    f: &impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
    params: &ParamStore<f64>,
    grads: &Gradients<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let mut work = params.cast::<T>();
    let (_, kinks) = eval(f, &work)?;
    let step = T::c(opts.step);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
    };
    for (id, p) in params.iter() {
        if p.frozen {
            if grads.param(id).is_some() {
                return Err(Error::GradCheck(format!(
                    "frozen parameter {} received a gradient",
                    p.name
                )));
            }
            continue;
        }
        let zeros;
        let analytic = match grads.param(id) {
            Some(t) => t.data(),
            None => {
                // Parameter unused by f: its gradient is identically zero.
                zeros = vec![0.0; p.value.len()];
                &zeros
            }
        };
        let n = p.value.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let (plus, kp) = eval(f, &work)?;
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let (minus, km) = eval(f, &work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            if kp != kinks || km != kinks {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = ((plus - minus) / (step + step)).f64();
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = p.name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    if report.coords_checked == 0 && report.kinks_skipped > 0 {
        return Err(Error::GradCheck("every checked coordinate sits on a kink".into()));
    }
    Ok(report)
}

/// Reduce `y` to a scalar as `Σ y ⊙ W` with fixed Gaussian weights `W`, so
/// that every output coordinate contributes a generic, non-cancelling term.
pub fn probe_loss<T: Real>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = crate::rng::standard_normal::<T>(&mut rng, &shape);
    let w = g.constant(w);
    let z = g.mul(y, w)?;
    Ok(g.sum(z))
}
