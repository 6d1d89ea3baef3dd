//! Run configuration: JSON file, `--set path=value` overrides and the
//! `INTENT_FORECAST_SEED` environment variable.

use std::path::{Path, PathBuf};

use intent_forecast::classifier::ClassifierArchitecture;
use intent_forecast::evaluation::{ConfidenceConfig, QMC_POINTS};
use intent_forecast::forecaster::ForecasterArchitecture;
use intent_forecast::mhi::MhiParams;
use intent_forecast::neural::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "INTENT_FORECAST_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub noise_sigma: f64,
    /// Also write per-frame mask PNGs (large).
    pub masks: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 120,
            noise_sigma: 0.05,
            masks: false,
        }
    }
}

/// Spacing of the sliding windows, in 0.02 s steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Classifier training and calibration windows (each needs two MHIs).
    pub classifier_stride: usize,
    /// Forecaster and wait-GMM training windows.
    pub forecaster_stride: usize,
    /// Test windows.
    pub eval_stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            classifier_stride: 5,
            forecaster_stride: 1,
            eval_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub architecture: ClassifierArchitecture,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            architecture: ClassifierArchitecture {
                mhi_width: 32,
                mhi_height: 32,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 800,
                validation_interval: 100,
                learning_rate: 1e-3,
                batch_size: 16,
                seed: 0,
            },
        }
    }
}

/// Grid searched by `train sweep`; the best validation loss wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    pub hidden_widths: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![3e-4, 1e-3],
            hidden_widths: vec![64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    pub architecture: ForecasterArchitecture,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            architecture: ForecasterArchitecture::default(),
            train: TrainConfig {
                steps: 2000,
                validation_interval: 200,
                learning_rate: 1e-3,
                batch_size: 32,
                seed: 0,
            },
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { k_min: 1, k_max: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub confidence: ConfidenceConfig,
    /// Sharpness levels reported as K̄ rows.
    pub levels: Vec<f64>,
    pub qmc_points: usize,
    /// Test windows drawn as contour plots.
    pub contour_plots: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            confidence: ConfidenceConfig::default(),
            levels: vec![0.68, 0.95, 0.99],
            qmc_points: QMC_POINTS,
            contour_plots: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Everything a run writes lives here.
    pub run_dir: PathBuf,
    /// Dataset location; `run_dir/data` when unset.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub windows: WindowConfig,
    pub mhi: MhiParams,
    pub classifier: ClassifierConfig,
    pub forecaster: ForecasterConfig,
    pub gmm: GmmConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("run"),
            data_dir: None,
            synth: SynthConfig::default(),
            windows: WindowConfig::default(),
            mhi: MhiParams {
                width: 32,
                height: 32,
                ..Default::default()
            },
            classifier: ClassifierConfig::default(),
            forecaster: ForecasterConfig::default(),
            gmm: GmmConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file, then `--set` overrides, then the seed
    /// environment variable.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("serialisable");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            let file_value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}='{s}' is not an unsigned integer"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: intent_forecast::Error| CliError::Usage(e.to_string());
        self.mhi.validate().map_err(usage)?;
        self.classifier.architecture.validate().map_err(usage)?;
        self.classifier.train.validate().map_err(usage)?;
        self.forecaster.train.validate().map_err(usage)?;
        self.evaluation.confidence.validate().map_err(usage)?;
        if self.classifier.architecture.mhi_width != self.mhi.width
            || self.classifier.architecture.mhi_height != self.mhi.height
        {
            return Err(CliError::Usage(
                "classifier MHI size must match mhi.width x mhi.height".into(),
            ));
        }
        if self.windows.classifier_stride == 0
            || self.windows.forecaster_stride == 0
            || self.windows.eval_stride == 0
        {
            return Err(CliError::Usage("window strides must be positive".into()));
        }
        if self.gmm.k_min == 0 || self.gmm.k_min > self.gmm.k_max {
            return Err(CliError::Usage(
                "GMM K range must satisfy 1 <= k_min <= k_max".into(),
            ));
        }
        if self
            .evaluation
            .levels
            .iter()
            .any(|l| !(*l > 0.0 && *l < 1.0))
        {
            return Err(CliError::Usage("levels must lie in (0, 1)".into()));
        }
        if self.evaluation.qmc_points == 0 {
            return Err(CliError::Usage("qmc_points must be positive".into()));
        }
        if self.synth.noise_sigma < 0.0 {
            return Err(CliError::Usage("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.run_dir.join("data"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.run_dir.join("models")
    }

    pub fn outputs_dir(&self) -> PathBuf {
        self.run_dir.join("outputs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.run_dir.join("reports")
    }

    /// Seed of one model or stage, stable across runs.
    pub fn derived_seed(&self, label: &str) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h)
    }

    /// Writes the resolved configuration into the run directory.
    pub fn snapshot(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.run_dir)?;
        let json = serde_json::to_string_pretty(self).expect("serialisable");
        std::fs::write(self.run_dir.join("config.json"), json + "\n")?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Usage(format!(
            "override '{assignment}' must look like key.path=value"
        ))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = slot.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("'{}' is not a section", keys[..i].join(".")))
        })?;
        if !obj.contains_key(*key) {
            return Err(CliError::Usage(format!(
                "unknown config key '{}'",
                keys[..=i].join(".")
            )));
        }
        slot = obj.get_mut(*key).expect("checked");
    }
    *slot = value;
    Ok(())
}
