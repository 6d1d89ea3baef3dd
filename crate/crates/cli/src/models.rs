//! Model bundles on disk: `.ifnn` weights, JSON metadata and training logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use intent_forecast::classifier::{
    apply_calibration, Calibrator, ClassifierMetadata, ClassifierModel,
};
use intent_forecast::forecaster::{ForecastModel, ForecasterMetadata, LogEntry, ModelTag};
use intent_forecast::mixture::GmmPerHorizon;
use intent_forecast::motion_states::{MotionState, SubMachine};
use intent_forecast::neural::{read_networks, write_networks, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn classifier_path(dir: &Path, m: SubMachine) -> PathBuf {
    dir.join(format!("classifier_{m}.ifnn"))
}

pub fn forecaster_path(dir: &Path, tag: ModelTag) -> PathBuf {
    dir.join(format!("forecaster_{tag}.ifnn"))
}

pub fn calibration_path(dir: &Path, m: SubMachine) -> PathBuf {
    dir.join(format!("calibration_{m}.json"))
}

pub fn wait_gmm_path(dir: &Path) -> PathBuf {
    dir.join("wait_gmm.json")
}

/// `x.ifnn` → `x.json` / `x_log.csv`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing {what}: {}",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_classifier(
    path: &Path,
    model: &ClassifierModel,
    meta: &ClassifierMetadata,
    log: &[LogEntry],
) -> CliResult<()> {
    let nets = model.networks();
    write_networks(BufWriter::new(File::create(path)?), &nets)?;
    write_json(&sibling(path, ".json"), meta)?;
    write_log(&sibling(path, "_log.csv"), log)
}

pub fn load_classifier(
    dir: &Path,
    m: SubMachine,
) -> CliResult<(ClassifierModel, ClassifierMetadata)> {
    let path = classifier_path(dir, m);
    require(&path, &format!("classifier for sub-machine '{m}'"))?;
    let nets = read_networks(BufReader::new(File::open(&path)?))?;
    let meta: ClassifierMetadata = read_json(&sibling(&path, ".json"))?;
    Ok((ClassifierModel::from_networks(m, nets)?, meta))
}

/// Metadata plus training summary of a forecaster bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecasterBundleInfo {
    pub metadata: ForecasterMetadata,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub best_step: usize,
    pub best_validation_loss: f64,
}

pub fn save_forecaster(
    path: &Path,
    model: &ForecastModel,
    info: &ForecasterBundleInfo,
    log: &[LogEntry],
) -> CliResult<()> {
    write_networks(
        BufWriter::new(File::create(path)?),
        &[("forecaster", &model.net)],
    )?;
    write_json(&sibling(path, ".json"), info)?;
    write_log(&sibling(path, "_log.csv"), log)
}

pub fn load_forecaster(dir: &Path, tag: ModelTag) -> CliResult<ForecastModel> {
    let path = forecaster_path(dir, tag);
    require(&path, &format!("forecaster for '{tag}'"))?;
    let mut nets = read_networks(BufReader::new(File::open(&path)?))?;
    if nets.len() != 1 {
        return Err(CliError::Data(format!(
            "{} holds {} networks, expected 1",
            path.display(),
            nets.len()
        )));
    }
    let info: ForecasterBundleInfo = read_json(&sibling(&path, ".json"))?;
    if info.metadata.state != tag {
        return Err(CliError::Data(format!(
            "{} is tagged '{}', expected '{tag}'",
            path.display(),
            info.metadata.state
        )));
    }
    Ok(ForecastModel::from_network(
        tag,
        nets.remove(0).1,
        &info.metadata,
    )?)
}

/// Calibration map plus the decision whether to apply it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub machine: SubMachine,
    pub use_calibration: bool,
    pub deviation_uncalibrated: f64,
    pub deviation_calibrated: f64,
    pub map: serde_json::Value,
}

pub struct LoadedCalibration {
    pub calibrator: Calibrator,
    pub use_calibration: bool,
}

impl LoadedCalibration {
    pub fn apply(&self, p: &[f64]) -> CliResult<Vec<f64>> {
        if self.use_calibration {
            Ok(apply_calibration(&self.calibrator, p)?)
        } else {
            Ok(p.to_vec())
        }
    }
}

pub fn load_calibration(dir: &Path, m: SubMachine) -> CliResult<LoadedCalibration> {
    let path = calibration_path(dir, m);
    require(&path, &format!("calibration for sub-machine '{m}'"))?;
    let file: CalibrationFile = read_json(&path)?;
    let calibrator = Calibrator::from_json(m, &file.map.to_string())?;
    Ok(LoadedCalibration {
        calibrator,
        use_calibration: file.use_calibration,
    })
}

pub fn load_wait_gmm(dir: &Path) -> CliResult<GmmPerHorizon> {
    let path = wait_gmm_path(dir);
    require(&path, "wait-state GMM (run fit-wait)")?;
    Ok(GmmPerHorizon::from_json(&std::fs::read_to_string(path)?)?)
}

/// Everything the ensemble needs.
pub struct ModelSet {
    pub classifiers: BTreeMap<SubMachine, (ClassifierModel, LoadedCalibration)>,
    pub forecasters: BTreeMap<MotionState, ForecastModel>,
    pub wait: GmmPerHorizon,
    pub baseline: ForecastModel,
}

impl ModelSet {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let mut classifiers = BTreeMap::new();
        for m in SubMachine::ALL {
            let (model, _) = load_classifier(dir, m)?;
            classifiers.insert(m, (model, load_calibration(dir, m)?));
        }
        let mut forecasters = BTreeMap::new();
        for s in MotionState::FORECASTED {
            forecasters.insert(s, load_forecaster(dir, ModelTag::State(s))?);
        }
        Ok(Self {
            classifiers,
            forecasters,
            wait: load_wait_gmm(dir)?,
            baseline: load_forecaster(dir, ModelTag::Baseline)?,
        })
    }
}
