//! Command-line pipeline: synthesise a dataset, train the classifiers and
//! forecasters, calibrate, fit the wait-state GMM, forecast the test split,
//! evaluate, and emit tables and plots.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod forecast;
pub mod models;
pub mod plots;

use intent_forecast::evaluation::read_metrics_csv;
use intent_forecast::forecaster::ModelTag;
use intent_forecast::motion_states::{MotionState, SubMachine};

use crate::commands::ClassifierData;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::forecast::{group_forecasts, read_rows, ForecastRow, FORECASTS_FILE};
use crate::models::ModelSet;

/// Rebuilds tables and figures from `reports/metrics.csv` and the stored
/// forecasts.
pub fn report(cfg: &RunConfig) -> CliResult<()> {
    let path = cfg.reports_dir().join(evaluate::METRICS_FILE);
    let file = std::fs::File::open(&path).map_err(|e| {
        CliError::Data(format!(
            "cannot read {} (run evaluate first): {e}",
            path.display()
        ))
    })?;
    let rows = read_metrics_csv(std::io::BufReader::new(file))?;
    evaluate::write_tables(cfg, &rows)?;
    let forecasts: Vec<ForecastRow> = read_rows(&cfg.outputs_dir().join(FORECASTS_FILE))?;
    plots::write_plots(cfg, &rows, &group_forecasts(&forecasts)?)
}

/// Evaluates the stored forecasts and writes every report.
pub fn evaluate_and_report(cfg: &RunConfig) -> CliResult<()> {
    let rows = evaluate::evaluate(cfg)?;
    evaluate::write_tables(cfg, &rows)?;
    let forecasts: Vec<ForecastRow> = read_rows(&cfg.outputs_dir().join(FORECASTS_FILE))?;
    plots::write_plots(cfg, &rows, &group_forecasts(&forecasts)?)
}

/// Every stage in order. With `sweep`, each forecaster is chosen by the
/// configured grid search.
pub fn run_pipeline(cfg: &RunConfig, sweep: bool) -> CliResult<()> {
    cfg.snapshot()?;
    commands::synth(cfg)?;
    let ds = Dataset::load(&cfg.data_dir())?;
    let data = ClassifierData::build(&ds, cfg)?;
    for m in SubMachine::ALL {
        commands::train_classifier_cmd(cfg, &data, m)?;
    }
    commands::calibrate(cfg, &data.validation)?;
    drop(data);
    let mut tags: Vec<ModelTag> = MotionState::FORECASTED
        .iter()
        .map(|&s| ModelTag::State(s))
        .collect();
    tags.push(ModelTag::Baseline);
    for tag in tags {
        if sweep {
            commands::sweep_cmd(cfg, &ds, tag)?;
        } else {
            commands::train_forecaster_cmd(cfg, &ds, tag)?;
        }
    }
    commands::fit_wait(cfg, &ds)?;
    let models = ModelSet::load(&cfg.models_dir())?;
    forecast::forecast(cfg, &ds, &models)?;
    evaluate_and_report(cfg)
}
