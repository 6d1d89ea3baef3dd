//! Dataset synthesis, training, calibration and wait-state GMM fitting.

use intent_forecast::classifier::{
    choose_calibration, train_classifier, ClassifierInput, ClassifierMetadata, ClassifierModel,
    ClassifierSample,
};
use intent_forecast::data_synth::{write_scene_files, DatasetManifest, Split};
use intent_forecast::forecaster::{
    train_forecaster, ForecasterArchitecture, ModelTag, TrainedForecaster,
};
use intent_forecast::mixture::select_wait_gmm;
use intent_forecast::motion_states::{sub_label, MotionState, SubMachine};
use intent_forecast::neural::TrainConfig;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{
    classifier_input, forecast_pairs, horizon_points, Dataset, Window, MANIFEST_FILE,
};
use crate::error::{CliError, CliResult};
use crate::models::{
    calibration_path, classifier_path, forecaster_path, load_classifier, save_classifier,
    save_forecaster, wait_gmm_path, write_json, CalibrationFile, ForecasterBundleInfo,
};

pub fn synth(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let (manifest, scenes) =
        DatasetManifest::synthesize(cfg.synth.scenes, cfg.seed, cfg.synth.noise_sigma)?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let cams = cfg.synth.masks.then_some(manifest.cameras.as_slice());
    for s in &scenes {
        write_scene_files(&dir, s, cams)?;
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_json()? + "\n")?;
    log::info!("wrote {} scenes to {}", scenes.len(), dir.display());
    Ok(manifest)
}

/// Classifier inputs of one split, tagged with the window's leaf state.
pub struct LabelledInputs {
    pub leaves: Vec<MotionState>,
    pub inputs: Vec<ClassifierInput>,
}

impl LabelledInputs {
    pub fn build(ds: &Dataset, cfg: &RunConfig, split: Split) -> CliResult<Self> {
        let windows = ds.windows(split, cfg.windows.classifier_stride)?;
        let inputs = windows
            .iter()
            .map(|w| classifier_input(ds, w, &cfg.mhi))
            .collect::<CliResult<_>>()?;
        Ok(Self {
            leaves: windows.iter().map(|w| w.sample.leaf).collect(),
            inputs,
        })
    }

    /// Samples to which `machine` applies.
    pub fn samples(&self, machine: SubMachine) -> Vec<ClassifierSample> {
        self.leaves
            .iter()
            .zip(&self.inputs)
            .filter_map(|(&leaf, input)| {
                sub_label(leaf, machine).map(|l| ClassifierSample {
                    input: input.clone(),
                    label: l.class(),
                })
            })
            .collect()
    }
}

/// Training and validation inputs shared by the four classifiers.
pub struct ClassifierData {
    pub train: LabelledInputs,
    pub validation: LabelledInputs,
}

impl ClassifierData {
    pub fn build(ds: &Dataset, cfg: &RunConfig) -> CliResult<Self> {
        Ok(Self {
            train: LabelledInputs::build(ds, cfg, Split::Train)?,
            validation: LabelledInputs::build(ds, cfg, Split::Validation)?,
        })
    }
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: seed.wrapping_add(train.seed),
        ..train.clone()
    }
}

pub fn train_classifier_cmd(
    cfg: &RunConfig,
    data: &ClassifierData,
    machine: SubMachine,
) -> CliResult<ClassifierModel> {
    let train = data.train.samples(machine);
    let validation = data.validation.samples(machine);
    let config = seeded(
        &cfg.classifier.train,
        cfg.derived_seed(&format!("classifier/{machine}")),
    );
    log::info!(
        "training classifier '{machine}' on {} samples ({} validation)",
        train.len(),
        validation.len()
    );
    let trained = train_classifier(
        machine,
        &train,
        &validation,
        &cfg.classifier.architecture,
        &config,
    )?;
    let meta = ClassifierMetadata {
        machine,
        seed: config.seed,
        architecture: cfg.classifier.architecture.clone(),
        train: config,
        best_step: trained.best_step,
        use_calibration: false,
    };
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir)?;
    save_classifier(
        &classifier_path(&dir, machine),
        &trained.model,
        &meta,
        &trained.log,
    )?;
    log::info!(
        "classifier '{machine}': best validation loss {:.4} at step {}",
        trained.best_validation_loss,
        trained.best_step
    );
    Ok(trained.model)
}

fn tag_states(tag: ModelTag) -> Vec<MotionState> {
    match tag {
        ModelTag::State(s) => vec![s],
        ModelTag::Baseline => MotionState::ALL.to_vec(),
    }
}

fn fit_forecaster(
    cfg: &RunConfig,
    train: &[Window<'_>],
    validation: &[Window<'_>],
    tag: ModelTag,
    arch: &ForecasterArchitecture,
    learning_rate: f64,
) -> CliResult<TrainedForecaster> {
    let states = tag_states(tag);
    let tp = forecast_pairs(train, &states)?;
    let vp = forecast_pairs(validation, &states)?;
    if tp.is_empty() || vp.is_empty() {
        return Err(CliError::Data(format!(
            "no '{tag}' windows in the training or validation split"
        )));
    }
    let mut config = seeded(
        &cfg.forecaster.train,
        cfg.derived_seed(&format!("forecaster/{tag}")),
    );
    config.learning_rate = learning_rate;
    log::info!(
        "training forecaster '{tag}' ({:?}, lr {learning_rate}) on {} pairs ({} validation)",
        arch.hidden,
        tp.len(),
        vp.len()
    );
    Ok(train_forecaster(tag, &tp, &vp, arch, &config)?)
}

fn save_trained_forecaster(
    cfg: &RunConfig,
    tag: ModelTag,
    arch: &ForecasterArchitecture,
    lr: f64,
    t: &TrainedForecaster,
) -> CliResult<()> {
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir)?;
    let info = ForecasterBundleInfo {
        metadata: t.model.metadata(),
        hidden: arch.hidden.clone(),
        train: TrainConfig {
            learning_rate: lr,
            ..seeded(
                &cfg.forecaster.train,
                cfg.derived_seed(&format!("forecaster/{tag}")),
            )
        },
        best_step: t.best_step,
        best_validation_loss: t.best_validation_loss,
    };
    save_forecaster(&forecaster_path(&dir, tag), &t.model, &info, &t.log)?;
    log::info!(
        "forecaster '{tag}': best validation NLL {:.4} at step {}",
        t.best_validation_loss,
        t.best_step
    );
    Ok(())
}

/// Trains the forecaster of `tag` with the configured architecture. The
/// wait state has no network and is fitted as a GMM instead.
pub fn train_forecaster_cmd(cfg: &RunConfig, ds: &Dataset, tag: ModelTag) -> CliResult<()> {
    if tag == ModelTag::State(MotionState::Wait) {
        log::info!("the wait state is forecast by a GMM; fitting it instead");
        return fit_wait(cfg, ds);
    }
    let train = ds.windows(Split::Train, cfg.windows.forecaster_stride)?;
    let validation = ds.windows(Split::Validation, cfg.windows.forecaster_stride)?;
    let arch = &cfg.forecaster.architecture;
    let lr = cfg.forecaster.train.learning_rate;
    let t = fit_forecaster(cfg, &train, &validation, tag, arch, lr)?;
    save_trained_forecaster(cfg, tag, arch, lr, &t)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    learning_rate: f64,
    hidden_width: usize,
    best_step: usize,
    best_validation_loss: f64,
}

/// Grid search over learning rate and hidden width; keeps the candidate
/// with the lowest validation NLL.
pub fn sweep_cmd(cfg: &RunConfig, ds: &Dataset, tag: ModelTag) -> CliResult<()> {
    if tag == ModelTag::State(MotionState::Wait) {
        return Err(CliError::Usage(
            "the wait state has no network to sweep".into(),
        ));
    }
    let sweep = &cfg.forecaster.sweep;
    if sweep.learning_rates.is_empty() || sweep.hidden_widths.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let train = ds.windows(Split::Train, cfg.windows.forecaster_stride)?;
    let validation = ds.windows(Split::Validation, cfg.windows.forecaster_stride)?;
    let depth = cfg.forecaster.architecture.hidden.len().max(1);
    let mut rows = Vec::new();
    let mut best: Option<(f64, ForecasterArchitecture, f64, TrainedForecaster)> = None;
    for &lr in &sweep.learning_rates {
        for &width in &sweep.hidden_widths {
            let arch = ForecasterArchitecture {
                hidden: vec![width; depth],
            };
            let t = fit_forecaster(cfg, &train, &validation, tag, &arch, lr)?;
            rows.push(SweepRow {
                learning_rate: lr,
                hidden_width: width,
                best_step: t.best_step,
                best_validation_loss: t.best_validation_loss,
            });
            if best.as_ref().is_none_or(|b| t.best_validation_loss < b.0) {
                best = Some((t.best_validation_loss, arch, lr, t));
            }
        }
    }
    let (_, arch, lr, t) = best.expect("non-empty grid");
    save_trained_forecaster(cfg, tag, &arch, lr, &t)?;
    let mut w = csv::Writer::from_path(cfg.models_dir().join(format!("sweep_{tag}.csv")))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fits the calibration map of every sub-machine on the validation split.
pub fn calibrate(cfg: &RunConfig, validation: &LabelledInputs) -> CliResult<()> {
    let dir = cfg.models_dir();
    for machine in SubMachine::ALL {
        let (model, mut meta) = load_classifier(&dir, machine)?;
        let samples = validation.samples(machine);
        let probs = samples
            .iter()
            .map(|s| model.predict(&s.input))
            .collect::<intent_forecast::Result<Vec<_>>>()?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let choice = choose_calibration(machine, &probs, &labels)?;
        let map: serde_json::Value = serde_json::from_str(&choice.calibrator.to_json()?)?;
        write_json(
            &calibration_path(&dir, machine),
            &CalibrationFile {
                machine,
                use_calibration: choice.use_calibration,
                deviation_uncalibrated: choice.deviation_uncalibrated,
                deviation_calibrated: choice.deviation_calibrated,
                map,
            },
        )?;
        meta.use_calibration = choice.use_calibration;
        write_json(
            &classifier_path(&dir, machine).with_extension("json"),
            &meta,
        )?;
        log::info!(
            "calibration '{machine}': Q-Q deviation {:.4} uncalibrated, {:.4} calibrated, using {}",
            choice.deviation_uncalibrated,
            choice.deviation_calibrated,
            if choice.use_calibration {
                "calibrated"
            } else {
                "raw"
            }
        );
    }
    Ok(())
}

/// Fits the per-horizon wait-state GMM, choosing K on validation.
pub fn fit_wait(cfg: &RunConfig, ds: &Dataset) -> CliResult<()> {
    let train = ds.windows(Split::Train, cfg.windows.forecaster_stride)?;
    let validation = ds.windows(Split::Validation, cfg.windows.forecaster_stride)?;
    let wait = |ws: &[Window<'_>]| -> Vec<Vec<intent_forecast::geometry::Point2>> {
        let sel: Vec<&Window<'_>> = ws
            .iter()
            .filter(|w| w.sample.leaf == MotionState::Wait)
            .collect();
        horizon_points(&sel)
    };
    let (tp, vp) = (wait(&train), wait(&validation));
    if tp[0].is_empty() || vp[0].is_empty() {
        return Err(CliError::Data(
            "no wait windows in the training or validation split".into(),
        ));
    }
    let (gmm, selection) = select_wait_gmm(
        &tp,
        &vp,
        cfg.gmm.k_min..=cfg.gmm.k_max,
        cfg.derived_seed("wait-gmm"),
    )?;
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(wait_gmm_path(&dir), gmm.to_json()? + "\n")?;
    write_json(&dir.join("wait_gmm_selection.json"), &selection)?;
    log::info!(
        "wait GMM fitted on {} windows; K per horizon {:?}",
        tp[0].len(),
        selection.iter().map(|s| s.k).collect::<Vec<_>>()
    );
    Ok(())
}
