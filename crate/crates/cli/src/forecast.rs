//! Ensemble and baseline forecasts for the test windows.

use std::collections::BTreeMap;
use std::path::Path;

use intent_forecast::classifier::apply_calibration;
use intent_forecast::data_synth::Split;
use intent_forecast::forecaster::{BivariateNormal, GaussianForecast};
use intent_forecast::geometry::{forecast_offsets, Mat2, Point2, FORECAST_LEN};
use intent_forecast::mixture::{build_ensemble, Component, Mixture, MixtureForecast};
use intent_forecast::motion_states::{compose_probabilities, MotionState, SubMachine};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{classifier_input, Dataset};
use crate::error::{CliError, CliResult};
use crate::models::ModelSet;

pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const PROBABILITIES_FILE: &str = "probabilities.csv";

pub const ENSEMBLE: &str = "ensemble";
pub const BASELINE: &str = "baseline";

/// One mixture component of one horizon of one window, world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub window: usize,
    pub scene_id: u32,
    pub step: usize,
    pub state: MotionState,
    pub model: String,
    pub horizon_s: f64,
    pub component: usize,
    pub weight: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
    pub truth_x: f64,
    pub truth_y: f64,
}

/// Class probability of one window; `machine` is a sub-machine or
/// `composed` for the six leaf states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub window: usize,
    pub scene_id: u32,
    pub state: MotionState,
    pub machine: String,
    pub class: String,
    /// Network output.
    pub uncalibrated: f64,
    /// After the isotonic map.
    pub calibrated: f64,
    /// Value fed to the ensemble, one of the two above.
    pub used: f64,
}

pub const COMPOSED: &str = "composed";

fn mixture_rows(
    out: &mut Vec<ForecastRow>,
    base: &ForecastRow,
    forecast: &MixtureForecast,
    truth: &[Point2],
) {
    for (h, (mix, hs)) in forecast.horizons.iter().zip(forecast_offsets()).enumerate() {
        for (k, c) in mix.components().iter().enumerate() {
            let cov = c.normal.cov.0;
            out.push(ForecastRow {
                horizon_s: hs,
                component: k,
                weight: c.weight,
                mean_x: c.normal.mean.x,
                mean_y: c.normal.mean.y,
                cov_xx: cov[0][0],
                cov_xy: cov[0][1],
                cov_yy: cov[1][1],
                truth_x: truth[h].x,
                truth_y: truth[h].y,
                ..base.clone()
            });
        }
    }
}

/// Classifies every test window, builds the ensemble and the baseline
/// forecast, and writes both in the world frame.
pub fn forecast(cfg: &RunConfig, ds: &Dataset, models: &ModelSet) -> CliResult<()> {
    let windows = ds.windows(Split::Test, cfg.windows.eval_stride)?;
    let mut rows = Vec::new();
    let mut prob_rows = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let input = classifier_input(ds, w, &cfg.mhi)?;
        let mut used: BTreeMap<SubMachine, Vec<f64>> = BTreeMap::new();
        let mut raw: BTreeMap<SubMachine, Vec<f64>> = BTreeMap::new();
        let mut calibrated: BTreeMap<SubMachine, Vec<f64>> = BTreeMap::new();
        for (&m, (model, cal)) in &models.classifiers {
            let p = model.predict(&input)?;
            let pc = apply_calibration(&cal.calibrator, &p)?;
            let q = if cal.use_calibration {
                pc.clone()
            } else {
                p.clone()
            };
            for (c, name) in m.classes().iter().enumerate() {
                prob_rows.push(ProbabilityRow {
                    window: i,
                    scene_id: w.sample.scene_id,
                    state: w.sample.leaf,
                    machine: m.as_str().into(),
                    class: name.to_string(),
                    uncalibrated: p[c],
                    calibrated: pc[c],
                    used: q[c],
                });
            }
            raw.insert(m, p);
            calibrated.insert(m, pc);
            used.insert(m, q);
        }
        let compose = |p: &BTreeMap<SubMachine, Vec<f64>>| {
            compose_probabilities(
                &p[&SubMachine::Wm],
                &p[&SubMachine::St],
                &p[&SubMachine::Lr],
                &p[&SubMachine::Ssm],
            )
        };
        let probs = compose(&used)?;
        let probs_raw = compose(&raw)?;
        let probs_cal = compose(&calibrated)?;
        for s in MotionState::ALL {
            prob_rows.push(ProbabilityRow {
                window: i,
                scene_id: w.sample.scene_id,
                state: w.sample.leaf,
                machine: COMPOSED.into(),
                class: s.as_str().into(),
                uncalibrated: probs_raw.get(s),
                calibrated: probs_cal.get(s),
                used: probs.get(s),
            });
        }

        let mut per_state: BTreeMap<MotionState, GaussianForecast> = BTreeMap::new();
        for (&s, model) in &models.forecasters {
            per_state.insert(s, model.forecast(&w.sample.input_ego)?);
        }
        let ensemble = build_ensemble(&probs, &per_state, &models.wait)?
            .to_world(w.sample.origin, w.sample.heading)?;
        let baseline = MixtureForecast::single(&models.baseline.forecast(&w.sample.input_ego)?)?
            .to_world(w.sample.origin, w.sample.heading)?;

        let truth: Vec<Point2> = w.sample.truth_world.positions().collect();
        let base = ForecastRow {
            window: i,
            scene_id: w.sample.scene_id,
            step: w.sample.step,
            state: w.sample.leaf,
            model: ENSEMBLE.into(),
            horizon_s: 0.0,
            component: 0,
            weight: 0.0,
            mean_x: 0.0,
            mean_y: 0.0,
            cov_xx: 0.0,
            cov_xy: 0.0,
            cov_yy: 0.0,
            truth_x: 0.0,
            truth_y: 0.0,
        };
        mixture_rows(&mut rows, &base, &ensemble, &truth);
        let base = ForecastRow {
            model: BASELINE.into(),
            ..base
        };
        mixture_rows(&mut rows, &base, &baseline, &truth);
    }
    let dir = cfg.outputs_dir();
    std::fs::create_dir_all(&dir)?;
    write_rows(&dir.join(FORECASTS_FILE), &rows)?;
    write_rows(&dir.join(PROBABILITIES_FILE), &prob_rows)?;
    log::info!("forecast {} test windows", windows.len());
    Ok(())
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// A forecast read back from disk.
#[derive(Debug, Clone)]
pub struct WindowForecast {
    pub window: usize,
    pub scene_id: u32,
    pub state: MotionState,
    pub mixtures: Vec<Mixture>,
    pub truth: Vec<Point2>,
}

/// Scene, true state, per-horizon components and truth of one window.
type Parts = (u32, MotionState, Vec<Vec<Component>>, Vec<Point2>);

/// Groups forecast rows into per-model, per-window mixtures.
pub fn group_forecasts(rows: &[ForecastRow]) -> CliResult<BTreeMap<String, Vec<WindowForecast>>> {
    let mut parts: BTreeMap<(String, usize), Parts> = BTreeMap::new();
    let offsets = forecast_offsets();
    for r in rows {
        let h = offsets
            .iter()
            .position(|o| (o - r.horizon_s).abs() < 1e-9)
            .ok_or_else(|| CliError::Data(format!("unknown horizon {}", r.horizon_s)))?;
        let entry = parts.entry((r.model.clone(), r.window)).or_insert_with(|| {
            (
                r.scene_id,
                r.state,
                vec![Vec::new(); FORECAST_LEN],
                vec![Point2::ORIGIN; FORECAST_LEN],
            )
        });
        let normal = BivariateNormal::new(
            Point2::new(r.mean_x, r.mean_y),
            Mat2::new(r.cov_xx, r.cov_xy, r.cov_xy, r.cov_yy),
        )?;
        entry.2[h].push(Component {
            weight: r.weight,
            normal,
        });
        entry.3[h] = Point2::new(r.truth_x, r.truth_y);
    }
    let mut out: BTreeMap<String, Vec<WindowForecast>> = BTreeMap::new();
    for ((model, window), (scene_id, state, comps, truth)) in parts {
        if comps.iter().any(|c| c.is_empty()) {
            return Err(CliError::Data(format!(
                "window {window} of '{model}' lacks horizons"
            )));
        }
        let mixtures = comps
            .into_iter()
            .map(Mixture::new)
            .collect::<intent_forecast::Result<_>>()?;
        out.entry(model).or_default().push(WindowForecast {
            window,
            scene_id,
            state,
            mixtures,
            truth,
        });
    }
    Ok(out)
}
