//! Metrics over the written forecasts, and the derived tables.

use std::collections::BTreeMap;

use intent_forecast::evaluation::{
    aggregate_sharpness, brier, confidence_level_with, f1_scores, hdr_regions, positional_accuracy,
    qq_curve, reliability_from_levels, stream_rng, write_metrics_csv, ConfusionMatrix, MetricRow,
};
use intent_forecast::geometry::{forecast_offsets, Point2, FORECAST_LEN};
use intent_forecast::mixture::find_mode;
use intent_forecast::motion_states::{MotionState, SubMachine};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::forecast::{
    group_forecasts, read_rows, write_rows, ForecastRow, ProbabilityRow, WindowForecast, COMPOSED,
    FORECASTS_FILE, PROBABILITIES_FILE,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPLETE: &str = "complete";
/// Horizons drawn in the reliability diagrams.
pub const PLOT_HORIZONS: [f64; 3] = [0.5, 1.5, 2.5];

/// Per-pair quantities that every subset metric is built from.
struct PairStats {
    state: MotionState,
    /// `[h]` confidence level of the ground truth.
    levels: Vec<f64>,
    /// `[h][level]` HDR area.
    kappa: Vec<Vec<f64>>,
    /// `[h]` (mode, truth)
    modes: Vec<(Point2, Point2)>,
}

fn pair_stats(cfg: &RunConfig, model_index: u64, f: &WindowForecast) -> CliResult<PairStats> {
    let conf = &cfg.evaluation.confidence;
    let mut levels = Vec::with_capacity(FORECAST_LEN);
    let mut kappa = Vec::with_capacity(FORECAST_LEN);
    let mut modes = Vec::with_capacity(FORECAST_LEN);
    for (h, mix) in f.mixtures.iter().enumerate() {
        let stream = (model_index << 40) | ((f.window as u64) * FORECAST_LEN as u64 + h as u64);
        let mut rng = stream_rng(
            cfg.derived_seed("confidence").wrapping_add(conf.seed),
            stream,
        );
        levels.push(confidence_level_with(
            mix,
            f.truth[h],
            conf.n_samples,
            &mut rng,
        ));
        let regions = hdr_regions(mix, &cfg.evaluation.levels, cfg.evaluation.qmc_points)?;
        kappa.push(regions.iter().map(|r| r.area).collect());
        modes.push((find_mode(mix), f.truth[h]));
    }
    Ok(PairStats {
        state: f.state,
        levels,
        kappa,
        modes,
    })
}

fn subset_rows(
    cfg: &RunConfig,
    model: &str,
    subset: &str,
    stats: &[&PairStats],
    rows: &mut Vec<MetricRow>,
) -> CliResult<()> {
    let alphas = &cfg.evaluation.confidence.alphas;
    let by_h: Vec<Vec<f64>> = (0..FORECAST_LEN)
        .map(|h| stats.iter().map(|s| s.levels[h]).collect())
        .collect();
    let rel = reliability_from_levels(&by_h, alphas)?;
    let metric = |name: &str| format!("{model}.{name}");
    rows.push(MetricRow::new(
        &metric("windows"),
        subset,
        stats.len() as f64,
    ));
    rows.push(MetricRow::new(&metric("gamma_max"), subset, rel.gamma_max));
    rows.push(MetricRow::new(
        &metric("gamma_mean"),
        subset,
        rel.gamma_mean,
    ));
    let offsets = forecast_offsets();
    for (j, &nominal) in rel.curve.nominal.iter().enumerate() {
        let mean = rel.curve.observed.iter().map(|o| o[j]).sum::<f64>() / FORECAST_LEN as f64;
        rows.push(MetricRow::new(&metric("coverage"), subset, mean).at_level(nominal));
    }
    for &ph in &PLOT_HORIZONS {
        let h = offsets
            .iter()
            .position(|o| (o - ph).abs() < 1e-9)
            .expect("on grid");
        for (j, &nominal) in rel.curve.nominal.iter().enumerate() {
            rows.push(
                MetricRow::new(&metric("coverage"), subset, rel.curve.observed[h][j])
                    .at_horizon(ph)
                    .at_level(nominal),
            );
        }
    }
    for (li, &level) in cfg.evaluation.levels.iter().enumerate() {
        let per_h: Vec<f64> = (0..FORECAST_LEN)
            .map(|h| stats.iter().map(|s| s.kappa[h][li]).sum::<f64>() / stats.len() as f64)
            .collect();
        rows.push(
            MetricRow::new(&metric("sharpness"), subset, aggregate_sharpness(&per_h)?)
                .at_level(level),
        );
        for (h, k) in per_h.iter().enumerate() {
            rows.push(
                MetricRow::new(&metric("kappa"), subset, *k)
                    .at_horizon(offsets[h])
                    .at_level(level),
            );
        }
    }
    let pairs: Vec<Vec<(Point2, Point2)>> = (0..FORECAST_LEN)
        .map(|h| stats.iter().map(|s| s.modes[h]).collect())
        .collect();
    let acc = positional_accuracy(&pairs)?;
    rows.push(MetricRow::new(&metric("asaee"), subset, acc.asaee));
    for (h, e) in acc.aee.iter().enumerate() {
        rows.push(MetricRow::new(&metric("aee"), subset, *e).at_horizon(offsets[h]));
    }
    Ok(())
}

fn trajectory_rows(
    cfg: &RunConfig,
    grouped: &BTreeMap<String, Vec<WindowForecast>>,
) -> CliResult<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (mi, (model, forecasts)) in grouped.iter().enumerate() {
        log::info!("evaluating '{model}' on {} windows", forecasts.len());
        let stats = forecasts
            .iter()
            .map(|f| pair_stats(cfg, mi as u64, f))
            .collect::<CliResult<Vec<_>>>()?;
        let all: Vec<&PairStats> = stats.iter().collect();
        subset_rows(cfg, model, COMPLETE, &all, &mut rows)?;
        for s in MotionState::ALL {
            let sub: Vec<&PairStats> = stats.iter().filter(|p| p.state == s).collect();
            if !sub.is_empty() {
                subset_rows(cfg, model, s.as_str(), &sub, &mut rows)?;
            }
        }
    }
    Ok(rows)
}

/// Probability variants reported for the classifiers.
const VARIANTS: [&str; 3] = ["uncalibrated", "calibrated", "used"];

fn pick(r: &ProbabilityRow, variant: &str) -> f64 {
    match variant {
        "uncalibrated" => r.uncalibrated,
        "calibrated" => r.calibrated,
        _ => r.used,
    }
}

fn classifier_rows(probs: &[ProbabilityRow]) -> CliResult<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut groups: BTreeMap<(&str, usize), Vec<&ProbabilityRow>> = BTreeMap::new();
    for r in probs {
        groups
            .entry((r.machine.as_str(), r.window))
            .or_default()
            .push(r);
    }
    let mut machines: Vec<(String, Vec<&'static str>)> = SubMachine::ALL
        .iter()
        .map(|m| (m.as_str().to_string(), m.classes().to_vec()))
        .collect();
    machines.push((
        COMPOSED.into(),
        MotionState::ALL.iter().map(|s| s.as_str()).collect(),
    ));
    for variant in VARIANTS {
        for (machine, classes) in &machines {
            let mut cm = ConfusionMatrix::new(classes.len());
            let mut per_class: Vec<(Vec<f64>, Vec<bool>)> =
                vec![(Vec::new(), Vec::new()); classes.len()];
            let mut qq_pairs = Vec::new();
            for ((m, _), rs) in groups.range((machine.as_str(), 0)..=(machine.as_str(), usize::MAX))
            {
                debug_assert_eq!(*m, machine.as_str());
                let leaf = rs[0].state;
                let truth = if machine == COMPOSED {
                    Some(leaf.index())
                } else {
                    let sm = SubMachine::ALL
                        .iter()
                        .find(|s| s.as_str() == machine)
                        .expect("known");
                    intent_forecast::motion_states::sub_label(leaf, *sm).map(|l| l.class())
                };
                let Some(truth) = truth else { continue };
                let p: Vec<f64> = rs.iter().map(|r| pick(r, variant)).collect();
                let predicted = p
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
                cm.add(truth, predicted)?;
                for (c, &pc) in p.iter().enumerate() {
                    per_class[c].0.push(pc.clamp(0.0, 1.0));
                    per_class[c].1.push(c == truth);
                    qq_pairs.push((pc.clamp(0.0, 1.0), c == truth));
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let prefix = format!("classifier_{variant}");
            let (micro, macro_) = f1_scores(&cm)?;
            rows.push(MetricRow::new(
                &format!("{prefix}.f1_micro"),
                machine,
                micro,
            ));
            rows.push(MetricRow::new(
                &format!("{prefix}.f1_macro"),
                machine,
                macro_,
            ));
            for (c, (p, l)) in per_class.iter().enumerate() {
                rows.push(MetricRow::new(
                    &format!("{prefix}.brier"),
                    &format!("{machine}:{}", classes[c]),
                    brier(p, l)?,
                ));
            }
            for t in 0..classes.len() {
                for q in 0..classes.len() {
                    rows.push(MetricRow::new(
                        &format!("{prefix}.confusion"),
                        &format!("{machine}:{}>{}", classes[t], classes[q]),
                        cm.get(t, q) as f64,
                    ));
                }
            }
            let edges: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            for pt in qq_curve(&qq_pairs, &edges)? {
                rows.push(
                    MetricRow::new(&format!("{prefix}.qq"), machine, pt.observed)
                        .at_level(pt.predicted),
                );
            }
        }
    }
    Ok(rows)
}

/// Computes every metric from `outputs/` and writes `reports/metrics.csv`.
pub fn evaluate(cfg: &RunConfig) -> CliResult<Vec<MetricRow>> {
    let out = cfg.outputs_dir();
    let forecasts: Vec<ForecastRow> = read_rows(&out.join(FORECASTS_FILE))?;
    let probs: Vec<ProbabilityRow> = read_rows(&out.join(PROBABILITIES_FILE))?;
    if forecasts.is_empty() {
        return Err(CliError::Data(
            "no forecasts to evaluate (run forecast first)".into(),
        ));
    }
    let grouped = group_forecasts(&forecasts)?;
    let mut rows = trajectory_rows(cfg, &grouped)?;
    rows.extend(classifier_rows(&probs)?);
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    write_metrics_csv(
        std::io::BufWriter::new(std::fs::File::create(dir.join(METRICS_FILE))?),
        &rows,
    )?;
    Ok(rows)
}

/// Looks up one value in a metric table.
pub fn lookup(
    rows: &[MetricRow],
    metric: &str,
    state: &str,
    horizon: Option<f64>,
    level: Option<f64>,
) -> Option<f64> {
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() < 1e-9,
        _ => false,
    };
    rows.iter()
        .find(|r| {
            r.metric == metric
                && r.state == state
                && close(r.horizon_s, horizon)
                && close(r.level, level)
        })
        .map(|r| r.value)
}

/// Forecast summary: one row per model and metric, one column per subset.
#[derive(Debug, Serialize)]
struct Table2Row {
    model: String,
    metric: String,
    complete: Option<f64>,
    wait: Option<f64>,
    left: Option<f64>,
    right: Option<f64>,
    start: Option<f64>,
    stop: Option<f64>,
    #[serde(rename = "move")]
    move_: Option<f64>,
}

/// Classifier summary: F1 per sub-machine and Brier score per class.
#[derive(Debug, Serialize)]
struct Table1Row {
    variant: String,
    machine: String,
    class: String,
    f1_micro: Option<f64>,
    f1_macro: Option<f64>,
    brier: Option<f64>,
}

pub fn write_tables(cfg: &RunConfig, rows: &[MetricRow]) -> CliResult<()> {
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    let mut t2 = Vec::new();
    for model in [crate::forecast::BASELINE, crate::forecast::ENSEMBLE] {
        let mut metrics: Vec<(String, String, Option<f64>)> = vec![
            ("gamma_max".into(), "gamma_max".into(), None),
            ("gamma_mean".into(), "gamma_mean".into(), None),
        ];
        for &l in &cfg.evaluation.levels {
            metrics.push((format!("sharpness({l})"), "sharpness".into(), Some(l)));
        }
        metrics.push(("asaee".into(), "asaee".into(), None));
        for (label, name, level) in metrics {
            let m = format!("{model}.{name}");
            let v = |s: &str| lookup(rows, &m, s, None, level);
            t2.push(Table2Row {
                model: model.into(),
                metric: label,
                complete: v(COMPLETE),
                wait: v("wait"),
                left: v("left"),
                right: v("right"),
                start: v("start"),
                stop: v("stop"),
                move_: v("move"),
            });
        }
    }
    write_rows(&dir.join("table2.csv"), &t2)?;

    let mut t1 = Vec::new();
    for variant in VARIANTS {
        let prefix = format!("classifier_{variant}");
        for m in SubMachine::ALL {
            let f1 = |k: &str| lookup(rows, &format!("{prefix}.{k}"), m.as_str(), None, None);
            for class in m.classes() {
                t1.push(Table1Row {
                    variant: variant.into(),
                    machine: m.as_str().into(),
                    class: class.to_string(),
                    f1_micro: f1("f1_micro"),
                    f1_macro: f1("f1_macro"),
                    brier: lookup(
                        rows,
                        &format!("{prefix}.brier"),
                        &format!("{m}:{class}"),
                        None,
                        None,
                    ),
                });
            }
        }
    }
    write_rows(&dir.join("table1.csv"), &t1)
}
