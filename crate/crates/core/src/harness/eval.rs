use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::{load_bundle, Layout, RunLog};
use super::config::RunConfig;
use super::pipeline::{corrupt, prepare, streams, Denoiser, Fill, Prepared};
use super::train::{fit_denoiser, fit_forecaster, load_denoiser, write_csv, Batch, FORECASTER_KIND};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::metrics::{hi_baseline_batch, horizon_report, MetricsReport, ReportSpec};
use crate::model::Forecaster;
use crate::params::ParamStore;
use crate::stdf;
use crate::tensor::Tensor;

fn report_spec(cfg: &RunConfig) -> ReportSpec {
    ReportSpec {
        horizons: cfg.horizons.clone(),
        granularity_minutes: cfg.granularity_minutes,
        mape_floor: cfg.mape_floor,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
    }
}

fn stacked_targets(ds: &WindowedDataset) -> Result<(Tensor<f64>, Vec<bool>)> {
    Ok((ds.targets::<f64>()?, ds.target_mask()))
}

/// Forecast `ds` and score it in original units. Returns the report and the
/// predictions (original units).
pub fn evaluate(
    cfg: &RunConfig,
    prepared: &Prepared,
    model: &Forecaster,
    store: &ParamStore<f32>,
    ds: &WindowedDataset,
    fill: Fill<'_>,
) -> Result<(MetricsReport, Tensor<f64>)> {
    let batch = Batch::build(ds, fill, cfg.seed)?;
    let pred = batch.predict(model, store)?;
    let (target, mask) = stacked_targets(ds)?;
    let report = horizon_report(&pred, &target, Some(&mask), Some(&prepared.normalizer), &report_spec(cfg))?;
    Ok((report, prepared.normalizer.inverse(&pred)))
}

/// The historical-index baseline scored through the same path as the model.
pub fn evaluate_baseline(cfg: &RunConfig, prepared: &Prepared, ds: &WindowedDataset, fill: Fill<'_>) -> Result<MetricsReport> {
    let batch = Batch::build(ds, fill, cfg.seed)?;
    let inputs = Tensor::stack(&batch.inputs.iter().map(|t| t.cast::<f64>()).collect::<Vec<_>>())?;
    let pred = hi_baseline_batch(&inputs, cfg.output_len, cfg.hi_mode, prepared.slots_per_day)?;
    let (target, mask) = stacked_targets(ds)?;
    horizon_report(&pred, &target, Some(&mask), Some(&prepared.normalizer), &report_spec(cfg))
}

fn load_forecaster(cfg: &RunConfig, layout: &Layout, nodes: usize) -> Result<(Forecaster, ParamStore<f32>)> {
    let store = load_bundle::<f32>(layout.forecaster(), FORECASTER_KIND, &cfg.config_hash())?;
    let model = Forecaster::bind(cfg.forecaster_config(nodes)?, &store)?;
    Ok((model, store))
}

fn fill_for<'a>(cfg: &RunConfig, denoiser: Option<&'a Denoiser>) -> Fill<'a> {
    match denoiser {
        Some(d) if cfg.enable_denoise => Fill::Recover(d),
        _ => Fill::Zero,
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub model: MetricsReport,
    pub baseline: MetricsReport,
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalOutcome> {
    let layout = Layout::new(out);
    let mut log = RunLog::open(out, "eval")?;
    let (prepared, _) = prepare(cfg, &layout.cache())?;
    let (model, store) = load_forecaster(cfg, &layout, prepared.nodes)?;
    let denoiser = if cfg.enable_denoise {
        Some(load_denoiser(cfg, &layout)?)
    } else {
        None
    };
    let test = corrupt(&prepared.splits.test, cfg.missing_ratio, cfg.seed, streams::CORRUPT)?;
    let fill = fill_for(cfg, denoiser.as_ref());
    let (report, pred) = evaluate(cfg, &prepared, &model, &store, &test, fill)?;
    let baseline = evaluate_baseline(cfg, &prepared, &test, fill)?;
    report.write_json(layout.file("metrics.json"))?;
    report.write_csv(layout.file("per_horizon.csv"))?;
    baseline.write_json(layout.file("baseline_metrics.json"))?;
    stdf::write(layout.file("predictions.stdf"), &pred)?;
    log.line(format!(
        "test MAE {:.6} RMSE {:.6} over {} entries; HI ({:?}) MAE {:.6}; missing ratio {}",
        report.mae, report.rmse, report.n, cfg.hi_mode, baseline.mae, cfg.missing_ratio
    ));
    Ok(EvalOutcome { model: report, baseline })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub missing_ratio: f64,
    /// Fraction of test input entries actually dropped.
    pub realized_ratio: f64,
    pub recovery_on_mae: f64,
    pub recovery_off_mae: f64,
    pub mean_impute_mae: f64,
}

fn realized_ratio(clean: &WindowedDataset, corrupted: &WindowedDataset) -> f64 {
    let (mut dropped, mut total) = (0usize, 0usize);
    for (a, b) in clean.samples.iter().zip(&corrupted.samples) {
        for (&x, &y) in a.mask.iter().zip(&b.mask) {
            total += 1;
            dropped += usize::from(x && !y);
        }
    }
    dropped as f64 / total.max(1) as f64
}

/// Paired comparison over the missing-ratio grid: every arm sees the same
/// corrupted test inputs at each ratio.
pub fn sweep_missing(
    cfg: &RunConfig,
    prepared: &Prepared,
    model: &Forecaster,
    store: &ParamStore<f32>,
    denoiser: &Denoiser,
) -> Result<Vec<SweepRow>> {
    if let Some(p) = cfg.sweep_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("sweep ratio {p} outside [0, 1]")));
    }
    let clean = &prepared.splits.test;
    cfg.sweep_grid
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ds = corrupt(clean, p, cfg.seed, streams::SWEEP + i as u64)?;
            let mae = |fill| evaluate(cfg, prepared, model, store, &ds, fill).map(|(r, _)| r.mae);
            Ok(SweepRow {
                missing_ratio: p,
                realized_ratio: realized_ratio(clean, &ds),
                recovery_on_mae: mae(Fill::Recover(denoiser))?,
                recovery_off_mae: mae(Fill::Zero)?,
                mean_impute_mae: mae(Fill::MeanImpute)?,
            })
        })
        .collect()
}

pub fn cmd_sweep_missing(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let layout = Layout::new(out);
    let mut log = RunLog::open(out, "sweep-missing")?;
    let (prepared, _) = prepare(cfg, &layout.cache())?;
    let (model, store) = load_forecaster(cfg, &layout, prepared.nodes)?;
    let denoiser = load_denoiser(cfg, &layout)?;
    let rows = sweep_missing(cfg, &prepared, &model, &store, &denoiser)?;
    let csv_rows = rows.iter().map(|r| {
        vec![
            r.missing_ratio.to_string(),
            r.realized_ratio.to_string(),
            r.recovery_on_mae.to_string(),
            r.recovery_off_mae.to_string(),
            r.mean_impute_mae.to_string(),
        ]
    });
    write_csv(
        &layout.file("sweep.csv"),
        &["missing_ratio", "realized_ratio", "recovery_on_mae", "recovery_off_mae", "mean_impute_mae"],
        csv_rows,
    )?;
    for r in &rows {
        log.line(format!(
            "p={}: recovery on {:.6}, off {:.6}, mean-impute {:.6}",
            r.missing_ratio, r.recovery_on_mae, r.recovery_off_mae, r.mean_impute_mae
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub enable_denoise: bool,
    pub enable_llm_block: bool,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub epochs: usize,
}

/// Train and evaluate the four (denoise × transformer) combinations on the
/// same data, test corruption and seed.
pub fn cmd_ablation(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let layout = Layout::new(out);
    let mut log = RunLog::open(out, "ablation")?;
    let (prepared, _) = prepare(cfg, &layout.cache())?;
    let (denoiser, _) = fit_denoiser(cfg, &prepared)?;
    let test = corrupt(&prepared.splits.test, cfg.missing_ratio, cfg.seed, streams::CORRUPT)?;
    let mut rows = Vec::with_capacity(4);
    for (enable_denoise, enable_llm_block) in [(false, false), (true, false), (false, true), (true, true)] {
        let variant = match (enable_denoise, enable_llm_block) {
            (false, false) => "embedding + head",
            (true, false) => "+ denoise",
            (false, true) => "+ transformer",
            (true, true) => "+ denoise + transformer",
        };
        let c = RunConfig {
            enable_denoise,
            enable_llm_block,
            ..cfg.clone()
        };
        let d = enable_denoise.then_some(&denoiser);
        let (model, store, curve) = fit_forecaster(&c, &prepared, d)?;
        let (r, _) = evaluate(&c, &prepared, &model, &store, &test, fill_for(&c, d))?;
        log.line(format!("{variant}: MAE {:.6} RMSE {:.6} after {} epochs", r.mae, r.rmse, curve.len()));
        rows.push(AblationRow {
            variant: variant.to_string(),
            enable_denoise,
            enable_llm_block,
            mae: r.mae,
            rmse: r.rmse,
            mape_pct: r.mape_pct,
            epochs: curve.len(),
        });
    }
    let csv_rows = rows.iter().map(|r| {
        vec![
            r.variant.clone(),
            r.enable_denoise.to_string(),
            r.enable_llm_block.to_string(),
            r.mae.to_string(),
            r.rmse.to_string(),
            r.mape_pct.map(|v| v.to_string()).unwrap_or_default(),
            r.epochs.to_string(),
        ]
    });
    write_csv(
        &layout.file("ablation.csv"),
        &["variant", "enable_denoise", "enable_llm_block", "mae", "rmse", "mape_pct", "epochs"],
        csv_rows,
    )?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "missing_ratio": cfg.missing_ratio,
        "rows": rows,
    }))
    .expect("rows serialize");
    let path = layout.file("ablation.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
