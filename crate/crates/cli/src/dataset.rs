//! Loading a synthetic dataset and turning its scenes into model inputs.

use std::path::Path;

use intent_forecast::classifier::ClassifierInput;
use intent_forecast::data_synth::{
    build_samples, window_mhi, DatasetManifest, Scene, Split, WindowSample,
};
use intent_forecast::forecaster::ForecastPair;
use intent_forecast::geometry::Point2;
use intent_forecast::mhi::MhiParams;
use intent_forecast::motion_states::MotionState;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

/// A window together with the scene it came from.
pub struct Window<'a> {
    pub scene: &'a Scene,
    pub sample: WindowSample,
}

impl Dataset {
    /// Reads the manifest and regenerates its scenes, which are fully
    /// determined by their scripts and seeds.
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Data(format!(
                "cannot read dataset manifest {}: {e}",
                path.display()
            ))
        })?;
        let manifest = DatasetManifest::from_json(&text)?;
        let scenes = manifest.regenerate()?;
        Ok(Self { manifest, scenes })
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &Scene> + '_ {
        self.scenes
            .iter()
            .zip(&self.manifest.scenes)
            .filter(move |(_, e)| e.split == split)
            .map(|(s, _)| s)
    }

    /// Windows of every scene in `split`, every `stride` steps.
    pub fn windows(&self, split: Split, stride: usize) -> CliResult<Vec<Window<'_>>> {
        let mut out = Vec::new();
        let mut any_scene = false;
        for scene in self.scenes_in(split) {
            any_scene = true;
            for sample in build_samples(scene, stride)? {
                out.push(Window { scene, sample });
            }
        }
        if !any_scene {
            return Err(CliError::Data(format!(
                "the dataset has no '{}' split",
                split.as_str()
            )));
        }
        if out.is_empty() {
            return Err(CliError::Data(format!(
                "the '{}' split has no usable windows",
                split.as_str()
            )));
        }
        Ok(out)
    }
}

/// Classifier input of a window: one MHI per synthetic camera plus the ego
/// trajectory.
pub fn classifier_input(
    ds: &Dataset,
    w: &Window<'_>,
    mhi: &MhiParams,
) -> CliResult<ClassifierInput> {
    let cams = &ds.manifest.cameras;
    if cams.len() != 2 {
        return Err(CliError::Data(format!(
            "expected two cameras, manifest lists {}",
            cams.len()
        )));
    }
    let m1 = window_mhi(w.scene, w.sample.step, &cams[0], mhi)?;
    let m2 = window_mhi(w.scene, w.sample.step, &cams[1], mhi)?;
    Ok(ClassifierInput::new(&m1, &m2, &w.sample.input_ego)?)
}

pub fn forecast_pair(w: &Window<'_>) -> CliResult<ForecastPair> {
    Ok(ForecastPair::from_trajectories(
        &w.sample.input_ego,
        &w.sample.truth_ego,
    )?)
}

/// Ego-frame pairs of the windows whose current state is in `states`.
pub fn forecast_pairs(
    windows: &[Window<'_>],
    states: &[MotionState],
) -> CliResult<Vec<ForecastPair>> {
    windows
        .iter()
        .filter(|w| states.contains(&w.sample.leaf))
        .map(forecast_pair)
        .collect()
}

/// Ego ground truth of the given windows, grouped by horizon.
pub fn horizon_points(windows: &[&Window<'_>]) -> Vec<Vec<Point2>> {
    let n = intent_forecast::geometry::FORECAST_LEN;
    let mut out: Vec<Vec<Point2>> = (0..n).map(|_| Vec::with_capacity(windows.len())).collect();
    for w in windows {
        for (h, s) in w.sample.truth_ego.samples.iter().enumerate() {
            out[h].push(s.position);
        }
    }
    out
}
