//! Finite-difference verification of every operation and module on fixed
//! tiny instances.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::artifacts::RunLog;
use crate::autodiff::{finite_diff_check, finite_diff_check_probe, probe_loss, FdOptions, FdReport, Graph, OpKind, Oracle, Probe, Var};
use crate::diffusion::{NoisePredictor, NoisePredictorConfig, TimestepEmbeddingConfig};
use crate::embedding::{CalendarIndex, EmbeddingConfig, EmbeddingLayer};
use crate::error::{Error, Result};
use crate::model::{Forecaster, ForecasterConfig};
use crate::params::ParamStore;
use crate::rng::standard_normal;
use crate::stllm::{AttentionLayout, Head, Stllm, StllmConfig};
use crate::tensor::{Real, Tensor};

pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub report: FdReport,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }

    pub fn failures(&self) -> Vec<&GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    pub fn worst(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.report.max_rel_error)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>12} {:>8} {:>6}  worst parameter", "check", "max rel err", "coords", "kinks");
        for e in &self.entries {
            let r = &e.report;
            let _ = writeln!(
                s,
                "{:<28} {:>12.3e} {:>8} {:>6}  {}[{}] {}",
                e.name,
                r.max_rel_error,
                r.coords_checked,
                r.kinks_skipped,
                r.worst_param,
                r.worst_index,
                if e.passed() { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{}",
            if self.passed() {
                format!("all checks below {THRESHOLD:e}")
            } else {
                let names: Vec<_> = self.failures().iter().map(|e| e.name.as_str()).collect();
                format!("FAILED: {}", names.join(", "))
            }
        );
        s
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Each case exercises exactly one operation (plus the final probe
/// reduction), so a broken rule shows up under its own name.
fn op_cases() -> Vec<(OpKind, Vec<Vec<usize>>, OpFn)> {
    vec![
        (OpKind::Add, vec![vec![2, 3], vec![3]], |g, v| g.add(v[0], v[1])),
        (OpKind::Sub, vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        (OpKind::Mul, vec![vec![2, 3], vec![3]], |g, v| g.mul(v[0], v[1])),
        (OpKind::Scale, vec![vec![2, 3]], |g, v| Ok(g.scale(v[0], 1.7))),
        (OpKind::MatMul, vec![vec![2, 3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        (OpKind::Transpose, vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
        (OpKind::Permute, vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        (OpKind::Reshape, vec![vec![2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4])),
        (OpKind::Softmax, vec![vec![2, 5]], |g, v| Ok(g.softmax_last(v[0]))),
        (OpKind::Relu, vec![vec![3, 4]], |g, v| Ok(g.relu(v[0]))),
        (OpKind::Silu, vec![vec![3, 4]], |g, v| Ok(g.silu(v[0]))),
        (OpKind::Abs, vec![vec![3, 4]], |g, v| Ok(g.abs(v[0]))),
        (OpKind::Square, vec![vec![3, 4]], |g, v| Ok(g.square(v[0]))),
        (OpKind::RmsNorm, vec![vec![2, 4], vec![4]], |g, v| g.rmsnorm(v[0], v[1], 1e-6)),
        (OpKind::Concat, vec![vec![2, 3], vec![2, 2]], |g, v| g.concat_last(&[v[0], v[1]])),
        (OpKind::Gather, vec![vec![5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])),
        (OpKind::ConvTime, vec![vec![5, 2, 3], vec![3, 3, 4]], |g, v| g.conv_time(v[0], v[1])),
        (OpKind::Sum, vec![vec![2, 3]], |g, v| Ok(g.sum(v[0]))),
        (OpKind::Mean, vec![vec![2, 3]], |g, v| Ok(g.mean(v[0]))),
    ]
}

fn check_op(kind: OpKind, shapes: &[Vec<usize>], f: OpFn, fault: Option<OpKind>, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("{}.{i}", kind.name()), standard_normal(&mut r, s)))
        .collect();
    finite_diff_check(
        |g, p| {
            if let Some(k) = fault {
                g.inject_fault(k);
            }
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
            let y = f(g, &vars)?;
            probe_loss(g, y, seed ^ 0xA5)
        },
        &store,
        &FdOptions::default(),
    )
}

/// Wraps a probe so every traced graph carries the injected fault.
struct Faulted<P>(Option<OpKind>, P);

impl<P: Probe> Probe for Faulted<P> {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        if let Some(k) = self.0 {
            g.inject_fault(k);
        }
        self.1.eval(g, p)
    }
}

fn calendar(m: usize, slots: usize) -> Vec<CalendarIndex> {
    (0..m)
        .map(|i| CalendarIndex {
            day_of_week: (i * 3 % 7) as u8,
            slot: ((i * 7 + 2) % slots) as u16,
        })
        .collect()
}

struct EmbedProbe(EmbeddingLayer, Tensor<f64>, Vec<CalendarIndex>);

impl Probe for EmbedProbe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        let x = g.constant(self.1.cast());
        let y = self.0.forward(g, p, x, &self.2)?;
        probe_loss(g, y, 31)
    }
}

struct PredictorProbe(NoisePredictor, Tensor<f64>, usize);

impl Probe for PredictorProbe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        let x = g.constant(self.1.cast());
        let y = self.0.forward(g, p, x, self.2)?;
        probe_loss(g, y, 32)
    }
}

struct StackProbe(Stllm, Tensor<f64>);

impl Probe for StackProbe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        let z = g.constant(self.1.cast());
        let y = self.0.forward(g, p, z)?;
        probe_loss(g, y, 33)
    }
}

struct HeadProbe(Head, Tensor<f64>);

impl Probe for HeadProbe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        let h = g.constant(self.1.cast());
        let y = self.0.forward(g, p, h)?;
        probe_loss(g, y, 34)
    }
}

struct ForecastProbe(Forecaster, Tensor<f64>, Vec<CalendarIndex>);

impl Probe for ForecastProbe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        let x = g.constant(self.1.cast());
        let y = self.0.forward(g, p, x, &self.2)?;
        probe_loss(g, y, 35)
    }
}

fn dd() -> FdOptions {
    FdOptions {
        oracle: Oracle::DoubleDouble,
        ..Default::default()
    }
}

fn stack_entry(name: &str, cfg: StllmConfig, z_shape: &[usize], opts: &FdOptions, fault: Option<OpKind>, seed: u64) -> Result<GradcheckEntry> {
    let mut store = ParamStore::new();
    let s = Stllm::new(cfg, &mut store, &mut rng(seed))?;
    let z = standard_normal(&mut rng(seed + 1), z_shape);
    Ok(GradcheckEntry {
        name: name.into(),
        report: finite_diff_check_probe(&Faulted(fault, StackProbe(s, z)), &store, opts)?,
    })
}

/// Per-operation and per-module checks. Module checks use the
/// double-double oracle; the 17-layer stack samples 4 coordinates per
/// parameter, everything else checks every coordinate.
pub fn run_gradcheck(fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for (i, (kind, shapes, f)) in op_cases().into_iter().enumerate() {
        entries.push(GradcheckEntry {
            name: format!("op:{}", kind.name()),
            report: check_op(kind, &shapes, f, fault, 100 + i as u64)?,
        });
    }

    let ecfg = EmbeddingConfig {
        d_f: 2,
        d_a: 3,
        slots_per_day: 24,
        input_len: 3,
        nodes: 2,
        features: 2,
    };
    let mut store = ParamStore::new();
    let embed = EmbeddingLayer::new(ecfg, &mut store, &mut rng(1))?;
    let x = standard_normal(&mut rng(2), &[3, 2, 2]);
    entries.push(GradcheckEntry {
        name: "module:embedding".into(),
        report: finite_diff_check_probe(&Faulted(fault, EmbedProbe(embed, x, calendar(3, 24))), &store, &dd())?,
    });

    let pcfg = NoisePredictorConfig {
        channels: 2,
        hidden: 4,
        kernel_width: 3,
        timestep: TimestepEmbeddingConfig {
            dim: 4,
            ..Default::default()
        },
    };
    let mut store = ParamStore::new();
    let net = NoisePredictor::new(pcfg, &mut store, &mut rng(3))?;
    let x = standard_normal(&mut rng(4), &[5, 2, 2]);
    entries.push(GradcheckEntry {
        name: "module:diffusion_predictor".into(),
        report: finite_diff_check_probe(&Faulted(fault, PredictorProbe(net, x, 37)), &store, &dd())?,
    });

    let tiny = StllmConfig {
        layers: 1,
        heads: 2,
        ..StllmConfig::new(8)
    };
    entries.push(stack_entry("module:stllm_joint", tiny.clone(), &[3, 2, 8], &dd(), fault, 5)?);
    let factorized = StllmConfig {
        layout: AttentionLayout::Factorized,
        ..tiny
    };
    entries.push(stack_entry("module:stllm_factorized", factorized, &[3, 2, 8], &dd(), fault, 7)?);
    let parity = StllmConfig {
        layers: 17,
        heads: 32,
        ..StllmConfig::new(32)
    };
    let sampled = FdOptions {
        max_coords_per_param: Some(4),
        seed: 14,
        ..dd()
    };
    entries.push(stack_entry("module:stllm_17x32", parity, &[2, 3, 32], &sampled, fault, 11)?);

    let mut store = ParamStore::new();
    let head = Head::new(3, 4, 2, 2, &mut store, &mut rng(9));
    let h = standard_normal(&mut rng(10), &[3, 2, 4]);
    entries.push(GradcheckEntry {
        name: "module:head".into(),
        report: finite_diff_check_probe(&Faulted(fault, HeadProbe(head, h)), &store, &dd())?,
    });

    let fcfg = ForecasterConfig {
        embedding: EmbeddingConfig {
            d_f: 2,
            d_a: 2,
            slots_per_day: 24,
            input_len: 4,
            nodes: 2,
            features: 1,
        },
        stllm: Some(StllmConfig {
            layers: 1,
            heads: 2,
            ..StllmConfig::new(8)
        }),
        output_len: 3,
    };
    let mut store = ParamStore::new();
    let model = Forecaster::new(fcfg, &mut store, &mut rng(12))?;
    let x = standard_normal(&mut rng(13), &[4, 2, 1]);
    entries.push(GradcheckEntry {
        name: "module:forecaster".into(),
        report: finite_diff_check_probe(&Faulted(fault, ForecastProbe(model, x, calendar(4, 24))), &store, &dd())?,
    });
    Ok(GradcheckReport { entries })
}

/// Run every check, write `gradcheck.txt`, and fail with a gradient-check
/// error naming the failing checks if any exceeds the threshold.
pub fn cmd_gradcheck(out: &Path, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut log = RunLog::open(out, "gradcheck")?;
    if let Some(k) = fault {
        log.line(format!("injecting a fault into the backward rule of {}", k.name()));
    }
    let report = run_gradcheck(fault)?;
    let text = report.render();
    let path = out.join("gradcheck.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    for line in text.lines() {
        log.line(line);
    }
    if !report.passed() {
        let names: Vec<_> = report.failures().iter().map(|e| e.name.clone()).collect();
        return Err(Error::GradCheck(format!(
            "relative error above {THRESHOLD:e} in {}",
            names.join(", ")
        )));
    }
    Ok(report)
}
