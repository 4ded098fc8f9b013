use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::cache::sha256_hex;
use crate::data::{SplitSpec, SyntheticSpec, WindowSpec};
use crate::diffusion::{
    DiffusionSchedule, NoisePredictorConfig, ReverseSamplerConfig, SamplerMode, TimestepEmbeddingConfig,
};
use crate::embedding::{slots_per_day, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::metrics::HiMode;
use crate::model::ForecasterConfig;
use crate::optim::AdamConfig;
use crate::stllm::{AttentionLayout, StllmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Synthetic,
    Csv,
    Stdf,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "csv" => Ok(Self::Csv),
            "stdf" => Ok(Self::Stdf),
            _ => Err(Error::Config(format!("unknown data format {s:?}"))),
        }
    }
}

/// Everything a run depends on, as one flat key = value TOML document.
/// Unknown keys are rejected so that typos don't silently fall back to
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_format: DataFormat,
    /// CSV or STDF source; ignored for synthetic data.
    pub data_path: Option<PathBuf>,
    pub features: usize,
    pub granularity_minutes: u32,
    /// First timestamp for STDF and synthetic series.
    pub start: String,
    pub synthetic_nodes: usize,
    pub synthetic_steps: usize,
    pub synthetic_level: f64,
    pub synthetic_daily_amplitude: f64,
    pub synthetic_weekly_amplitude: f64,
    pub synthetic_noise_std: f64,
    pub synthetic_seed: u64,

    pub input_len: usize,
    pub output_len: usize,
    pub stride: usize,
    pub split_ratios: [f64; 3],
    /// Fraction of input entries dropped before recovery at evaluation.
    pub missing_ratio: f64,
    pub seed: u64,

    pub d_f: usize,
    pub d_a: usize,

    pub llm_layers: usize,
    pub llm_heads: usize,
    pub llm_ffn_ratio: usize,
    pub llm_layout: AttentionLayout,
    pub llm_norm_eps: f64,

    pub beta_min: f64,
    pub beta_max: f64,
    pub diffusion_steps: usize,
    pub sampler: SamplerMode,
    pub ddim_steps: Option<usize>,
    pub eta: f64,
    pub delta: Option<f64>,
    pub denoiser_hidden: usize,
    pub denoiser_kernel: usize,
    pub denoiser_timestep_dim: usize,
    pub denoiser_train_steps: usize,
    pub denoiser_batch_size: usize,
    pub denoiser_lr: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,

    pub enable_denoise: bool,
    pub enable_llm_block: bool,
    pub freeze_llm: bool,

    pub hi_mode: HiMode,
    pub mape_floor: f64,
    pub horizons: Vec<usize>,
    pub sweep_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        Self {
            data_format: DataFormat::Synthetic,
            data_path: None,
            features: syn.features,
            granularity_minutes: syn.granularity_minutes,
            start: syn.start,
            synthetic_nodes: syn.nodes,
            synthetic_steps: syn.steps,
            synthetic_level: syn.level,
            synthetic_daily_amplitude: syn.daily_amplitude,
            synthetic_weekly_amplitude: syn.weekly_amplitude,
            synthetic_noise_std: syn.noise_std,
            synthetic_seed: syn.seed,
            input_len: 12,
            output_len: 12,
            stride: 1,
            split_ratios: SplitSpec::default().ratios,
            missing_ratio: 0.0,
            seed: 0,
            d_f: 8,
            d_a: 24,
            llm_layers: 2,
            llm_heads: 4,
            llm_ffn_ratio: 4,
            llm_layout: AttentionLayout::Joint,
            llm_norm_eps: 1e-6,
            beta_min: 1e-4,
            beta_max: 0.02,
            diffusion_steps: 1000,
            sampler: SamplerMode::Ddim,
            ddim_steps: Some(50),
            eta: 0.0,
            delta: None,
            denoiser_hidden: 32,
            denoiser_kernel: 3,
            denoiser_timestep_dim: 32,
            denoiser_train_steps: 2000,
            denoiser_batch_size: 8,
            denoiser_lr: 3e-3,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 50,
            patience: 10,
            enable_denoise: true,
            enable_llm_block: true,
            freeze_llm: false,
            hi_mode: HiMode::Last,
            mape_floor: crate::metrics::DEFAULT_MAPE_FLOOR,
            horizons: vec![2, 5, 11],
            sweep_grid: vec![0.0, 0.001, 0.002, 0.003, 0.004, 0.005],
        }
    }
}

/// The subset of the config that determines the prepared data.
#[derive(Serialize)]
struct DataKey<'a> {
    data_format: DataFormat,
    data_path: &'a Option<PathBuf>,
    features: usize,
    granularity_minutes: u32,
    start: &'a str,
    synthetic: Option<SyntheticSpec>,
    window: WindowSpec,
    split: [f64; 3],
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Read a config file. A relative `data_path` is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data_path, path.parent()) {
            if p.is_relative() {
                cfg.data_path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate_values(&self) -> Result<()> {
        self.window().validate()?;
        self.split().validate()?;
        slots_per_day(self.granularity_minutes)?;
        if !(0.0..=1.0).contains(&self.missing_ratio) {
            return Err(Error::Config(format!("missing_ratio {} outside [0, 1]", self.missing_ratio)));
        }
        if let Some(p) = self.sweep_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("sweep ratio {p} outside [0, 1]")));
        }
        if let Some(h) = self.horizons.iter().find(|&&h| h >= self.output_len) {
            return Err(Error::Config(format!(
                "horizon index {h} not below output_len {}",
                self.output_len
            )));
        }
        if self.batch_size == 0 || self.denoiser_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.features == 0 {
            return Err(Error::Config("features must be positive".into()));
        }
        self.sampler_config(0).validate()?;
        self.predictor_config().validate()?;
        if self.enable_llm_block {
            self.stllm_config().validate()?;
        }
        Ok(())
    }

    /// Value checks plus existence of every referenced path.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        if self.data_format != DataFormat::Synthetic {
            let p = self
                .data_path
                .as_ref()
                .ok_or_else(|| Error::Config(format!("data_format {:?} needs data_path", self.data_format)))?;
            if !p.exists() {
                return Err(Error::Config(format!("data_path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with the seed left out so that
    /// seed sweeps share data caches and compare against the same config.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("struct").remove("seed");
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn data_hash(&self) -> String {
        let key = DataKey {
            data_format: self.data_format,
            data_path: &self.data_path,
            features: self.features,
            granularity_minutes: self.granularity_minutes,
            start: &self.start,
            synthetic: (self.data_format == DataFormat::Synthetic).then(|| self.synthetic()),
            window: self.window(),
            split: self.split_ratios,
        };
        sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            nodes: self.synthetic_nodes,
            features: self.features,
            steps: self.synthetic_steps,
            granularity_minutes: self.granularity_minutes,
            level: self.synthetic_level,
            daily_amplitude: self.synthetic_daily_amplitude,
            weekly_amplitude: self.synthetic_weekly_amplitude,
            noise_std: self.synthetic_noise_std,
            seed: self.synthetic_seed,
            start: self.start.clone(),
        }
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len,
            output_len: self.output_len,
            stride: self.stride,
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            ratios: self.split_ratios,
        }
    }

    pub fn embedding_config(&self, nodes: usize) -> Result<EmbeddingConfig> {
        Ok(EmbeddingConfig {
            d_f: self.d_f,
            d_a: self.d_a,
            slots_per_day: slots_per_day(self.granularity_minutes)?,
            input_len: self.input_len,
            nodes,
            features: self.features,
        })
    }

    pub fn stllm_config(&self) -> StllmConfig {
        StllmConfig {
            hidden: 3 * self.d_f + self.d_a,
            layers: self.llm_layers,
            heads: self.llm_heads,
            d_ff_ratio: self.llm_ffn_ratio,
            layout: self.llm_layout,
            norm_eps: self.llm_norm_eps,
        }
    }

    pub fn forecaster_config(&self, nodes: usize) -> Result<ForecasterConfig> {
        Ok(ForecasterConfig {
            embedding: self.embedding_config(nodes)?,
            stllm: self.enable_llm_block.then(|| self.stllm_config()),
            output_len: self.output_len,
        })
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.beta_min, self.beta_max, self.diffusion_steps)
    }

    pub fn predictor_config(&self) -> NoisePredictorConfig {
        NoisePredictorConfig {
            channels: self.features,
            hidden: self.denoiser_hidden,
            kernel_width: self.denoiser_kernel,
            timestep: TimestepEmbeddingConfig {
                dim: self.denoiser_timestep_dim,
                ..Default::default()
            },
        }
    }

    pub fn sampler_config(&self, seed: u64) -> ReverseSamplerConfig {
        ReverseSamplerConfig {
            mode: self.sampler,
            eta: self.eta,
            delta: self.delta,
            ddim_steps: self.ddim_steps,
            seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}
