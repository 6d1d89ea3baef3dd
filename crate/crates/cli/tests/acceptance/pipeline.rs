//! End-to-end runs of the `intent-forecast` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use intent_forecast::evaluation::{read_metrics_csv, MetricRow};

use crate::Outcome;

struct Run {
    metrics: Result<Vec<u8>, String>,
    elapsed: Duration,
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run_pipeline(tag: &str) -> Run {
    let dir = std::env::temp_dir().join(format!(
        "intent-forecast-acceptance-{}-{tag}",
        std::process::id()
    ));
    let _ = std::fs::remove_dir_all(&dir);
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_intent-forecast"))
        .arg("run")
        .arg("--config")
        .arg(workspace().join("configs/acceptance.json"))
        .arg("--run-dir")
        .arg(&dir)
        .args(["--seed", "1"])
        .env_remove("INTENT_FORECAST_SEED")
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status();
    let elapsed = start.elapsed();
    let metrics = match status {
        Ok(s) if s.success() => {
            std::fs::read(dir.join("reports/metrics.csv")).map_err(|e| e.to_string())
        }
        Ok(s) => Err(format!("pipeline exited with {s}")),
        Err(e) => Err(e.to_string()),
    };
    let _ = std::fs::remove_dir_all(&dir);
    Run { metrics, elapsed }
}

fn first_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline("a"))
}

fn value(rows: &[MetricRow], metric: &str, state: &str) -> Result<f64, String> {
    rows.iter()
        .find(|r| {
            r.metric == metric && r.state == state && r.horizon_s.is_none() && r.level.is_none()
        })
        .map(|r| r.value)
        .ok_or_else(|| format!("{metric}/{state} missing from metrics.csv"))
}

pub fn ensemble_beats_baseline() -> Result<Outcome, String> {
    let run = first_run();
    let bytes = run.metrics.as_ref().map_err(Clone::clone)?;
    let rows = read_metrics_csv(bytes.as_slice()).map_err(|e| e.to_string())?;
    let ensemble = value(&rows, "ensemble.gamma_mean", "complete")?;
    let baseline = value(&rows, "baseline.gamma_mean", "complete")?;
    // coverage above nominal means the baseline is underconfident for waiting cyclists
    let wait: Vec<f64> = rows
        .iter()
        .filter(|r| r.metric == "baseline.coverage" && r.state == "wait" && r.horizon_s.is_none())
        .filter_map(|r| r.level.map(|q| r.value - q))
        .collect();
    if wait.is_empty() {
        return Err("no baseline wait coverage rows".into());
    }
    let excess = wait.iter().sum::<f64>() / wait.len() as f64;
    let above = wait.iter().filter(|&&d| d > 0.0).count();
    Ok(Outcome {
        pass: ensemble < baseline && above == wait.len(),
        detail: format!(
            "gamma_mean ensemble {ensemble:.4} vs baseline {baseline:.4}; baseline wait coverage above nominal \
             at {above}/{} levels (mean {excess:+.3})",
            wait.len()
        ),
        elapsed: Some(run.elapsed),
    })
}

pub fn reproducible_run() -> Result<Outcome, String> {
    let a = first_run();
    let b = run_pipeline("b");
    let (ma, mb) = (a.metrics.as_ref().map_err(Clone::clone)?, b.metrics?);
    let identical = *ma == mb;
    let within = b.elapsed <= 2 * a.elapsed;
    Ok(Outcome {
        pass: identical && within,
        detail: format!(
            "metrics.csv {} ({} bytes), second run {:.1} s vs first {:.1} s",
            if identical {
                "byte-identical"
            } else {
                "differs"
            },
            ma.len(),
            b.elapsed.as_secs_f64(),
            a.elapsed.as_secs_f64()
        ),
        elapsed: Some(b.elapsed),
    })
}
