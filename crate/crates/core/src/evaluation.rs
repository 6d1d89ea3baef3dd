//! Metrics for classifiers and for arbitrary 2-D forecast densities.
//!
//! Density metrics rest on the confidence level of a point y under D: the
//! probability mass of `{z : D(z) ≥ D(y)}`, estimated by sampling from D.
//! A point lies in the highest-density region of mass 1−α iff its level is
//! at most 1−α.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::BivariateNormal;
use crate::geometry::{forecast_offsets, Point2, FORECAST_LEN};

/// Any distribution that can be evaluated and sampled.
pub trait Density2 {
    fn density(&self, y: Point2) -> f64;
    fn sample(&self, rng: &mut dyn RngCore) -> Point2;
    /// Box holding all but a negligible part of the mass.
    fn bounding_box(&self) -> (Point2, Point2);
}

impl Density2 for BivariateNormal {
    fn density(&self, y: Point2) -> f64 {
        BivariateNormal::density(self, y)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Point2 {
        BivariateNormal::sample(self, rng)
    }

    fn bounding_box(&self) -> (Point2, Point2) {
        let s = 6.0 * self.max_sigma();
        (
            Point2::new(self.mean.x - s, self.mean.y - s),
            Point2::new(self.mean.x + s, self.mean.y + s),
        )
    }
}

/// `{0.01, 0.02, …, 0.99}`
pub fn alpha_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub n_samples: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            alphas: alpha_grid(),
            seed: 0,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1000 {
            return Err(Error::InvalidParameter(format!(
                "at least 1000 confidence samples are needed, got {}",
                self.n_samples
            )));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidParameter("alphas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Generator for the `index`-th evaluation of a run: same seed, own stream.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Fraction of `n` draws z ~ D with `D(z) ≥ D(y)`.
pub fn confidence_level_with(d: &dyn Density2, y: Point2, n: usize, rng: &mut dyn RngCore) -> f64 {
    let dy = d.density(y);
    let hits = (0..n).filter(|_| d.density(d.sample(rng)) >= dy).count();
    hits as f64 / n as f64
}

pub fn confidence_level(d: &dyn Density2, y: Point2, cfg: &ConfidenceConfig) -> Result<f64> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    Ok(confidence_level_with(d, y, cfg.n_samples, &mut rng))
}

/// Confidence levels of many `(density, ground truth)` pairs; pair `i` uses
/// stream `stream_base + i`.
pub fn confidence_levels<D: Density2>(
    pairs: &[(D, Point2)],
    cfg: &ConfidenceConfig,
    stream_base: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, (d, y))| {
            let mut rng = stream_rng(cfg.seed, stream_base + i as u64);
            confidence_level_with(d, *y, cfg.n_samples, &mut rng)
        })
        .collect())
}

/// Observed coverage per horizon against nominal levels `1−α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    /// Nominal levels `1−α`, ascending.
    pub nominal: Vec<f64>,
    /// `observed[h][j]` = f_o at horizon h and level `nominal[j]`.
    pub observed: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub curve: ReliabilityCurve,
    /// Γ̂: max |1−α − f_o| over horizons and levels.
    pub gamma_max: f64,
    /// Γ̄: mean |1−α − f_o| over horizons and levels.
    pub gamma_mean: f64,
}

/// f_o, Γ̂ and Γ̄ from per-horizon confidence levels.
pub fn reliability_from_levels(levels: &[Vec<f64>], alphas: &[f64]) -> Result<ReliabilityReport> {
    if levels.is_empty() {
        return Err(Error::InsufficientData("no horizons to evaluate".into()));
    }
    let mut nominal: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
    nominal.sort_by(f64::total_cmp);
    let mut observed = Vec::with_capacity(levels.len());
    let (mut max, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for (h, lv) in levels.iter().enumerate() {
        if lv.is_empty() {
            return Err(Error::InsufficientData(format!("horizon {h} has no pairs")));
        }
        let mut sorted = lv.clone();
        sorted.sort_by(f64::total_cmp);
        let row: Vec<f64> = nominal
            .iter()
            .map(|&q| sorted.partition_point(|&l| l <= q) as f64 / sorted.len() as f64)
            .collect();
        for (q, f) in nominal.iter().zip(&row) {
            let dev = (q - f).abs();
            max = max.max(dev);
            sum += dev;
            count += 1;
        }
        observed.push(row);
    }
    Ok(ReliabilityReport {
        curve: ReliabilityCurve { nominal, observed },
        gamma_max: max,
        gamma_mean: sum / count as f64,
    })
}

/// Reliability of per-horizon `(density, ground truth)` pairs.
pub fn reliability<D: Density2>(
    pairs: &[Vec<(D, Point2)>],
    cfg: &ConfidenceConfig,
) -> Result<ReliabilityReport> {
    cfg.validate()?;
    let mut levels = Vec::with_capacity(pairs.len());
    let mut base = 0u64;
    for ph in pairs {
        if ph.is_empty() {
            return Err(Error::InsufficientData("empty horizon".into()));
        }
        levels.push(confidence_levels(ph, cfg, base)?);
        base += ph.len() as u64;
    }
    reliability_from_levels(&levels, &cfg.alphas)
}

/// Halton radical inverse of `index` in `base`.
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let b = base as f64;
    while index > 0 {
        f /= b;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// First `n` points of the 2-D Halton sequence (bases 2 and 3), skipping the
/// origin.
pub fn halton_2d(n: usize) -> Vec<(f64, f64)> {
    (1..=n as u64)
        .map(|i| (halton(i, 2), halton(i, 3)))
        .collect()
}

pub const QMC_POINTS: usize = 1 << 14;

/// Highest-density region of a given mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdrRegion {
    pub level: f64,
    /// Density on the region boundary.
    pub threshold: f64,
    /// κ, m².
    pub area: f64,
}

/// HDR regions for several levels from one qMC pass.
///
/// Halton points cover the density's bounding box; points are ranked by
/// density and the region of mass `level` is the smallest top set whose
/// integrated density reaches `level` times the integrated total.
pub fn hdr_regions(d: &dyn Density2, levels: &[f64], n_points: usize) -> Result<Vec<HdrRegion>> {
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "level {l} is outside (0, 1)"
        )));
    }
    if n_points == 0 {
        return Err(Error::InvalidParameter(
            "qMC needs at least one point".into(),
        ));
    }
    let (lo, hi) = d.bounding_box();
    let (wx, wy) = (hi.x - lo.x, hi.y - lo.y);
    let cell = wx * wy / n_points as f64;
    let mut values: Vec<f64> = halton_2d(n_points)
        .into_iter()
        .map(|(u, v)| d.density(Point2::new(lo.x + u * wx, lo.y + v * wy)))
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidDistribution(
            "density vanishes on its bounding box".into(),
        ));
    }
    let mut cum = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for v in &values {
        acc += v;
        cum.push(acc);
    }
    Ok(levels
        .iter()
        .map(|&level| {
            let k = cum
                .partition_point(|&c| c < level * total)
                .min(values.len() - 1);
            HdrRegion {
                level,
                threshold: values[k],
                area: (k + 1) as f64 * cell,
            }
        })
        .collect())
}

/// κ(1−α): area of the highest-density region of mass `level`.
pub fn sharpness(d: &dyn Density2, level: f64, n_points: usize) -> Result<f64> {
    Ok(hdr_regions(d, &[level], n_points)?[0].area)
}

fn check_all_horizons(n: usize) -> Result<()> {
    if n != FORECAST_LEN {
        return Err(Error::InsufficientData(format!(
            "expected values for all {FORECAST_LEN} horizons, got {n}"
        )));
    }
    Ok(())
}

/// `K̄ = (1/25) Σ_h κ̄_h / h`, m²/s.
pub fn aggregate_sharpness(kappa: &[f64]) -> Result<f64> {
    check_all_horizons(kappa.len())?;
    Ok(kappa
        .iter()
        .zip(forecast_offsets())
        .map(|(k, h)| k / h)
        .sum::<f64>()
        / FORECAST_LEN as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Mean Euclidean error per horizon, m.
    pub aee: Vec<f64>,
    /// `(1/25) Σ_h AEE_h / h`, m/s.
    pub asaee: f64,
}

/// AEE and ASAEE from per-horizon `(mode, ground truth)` pairs.
pub fn positional_accuracy(pairs: &[Vec<(Point2, Point2)>]) -> Result<AccuracyReport> {
    check_all_horizons(pairs.len())?;
    let mut aee = Vec::with_capacity(FORECAST_LEN);
    for (h, ph) in pairs.iter().enumerate() {
        if ph.is_empty() {
            return Err(Error::InsufficientData(format!("horizon {h} has no pairs")));
        }
        aee.push(ph.iter().map(|(w, y)| w.distance(*y)).sum::<f64>() / ph.len() as f64);
    }
    let asaee = aee
        .iter()
        .zip(forecast_offsets())
        .map(|(e, h)| e / h)
        .sum::<f64>()
        / FORECAST_LEN as f64;
    Ok(AccuracyReport { aee, asaee })
}

/// `(1/N) Σ (p − l)²`
pub fn brier(p: &[f64], l: &[bool]) -> Result<f64> {
    if p.len() != l.len() {
        return Err(Error::MalformedInput(format!(
            "{} predictions for {} labels",
            p.len(),
            l.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::InsufficientData("no predictions".into()));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::MalformedInput(
            "probabilities must lie in [0, 1]".into(),
        ));
    }
    Ok(p.iter()
        .zip(l)
        .map(|(&p, &l)| (p - if l { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        / p.len() as f64)
}

/// Square count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::MalformedInput(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(Self {
            n,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(n: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::MalformedInput(
                "truth and predictions differ in length".into(),
            ));
        }
        let mut m = Self::new(n);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::MalformedInput(format!(
                "class index out of range for {} classes",
                self.n
            )));
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.n).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

/// `(F1_micro, F1_macro)` with `F1 = 2PR/(P+R)`.
pub fn f1_scores(confusion: &ConfusionMatrix) -> Result<(f64, f64)> {
    if confusion.total() == 0 {
        return Err(Error::InsufficientData("confusion matrix is empty".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for c in 0..confusion.n {
        let (t, f, n) = confusion.class_counts(c);
        let (t, f, n) = (t as f64, f as f64, n as f64);
        tp += t;
        fp += f;
        fneg += n;
        p_sum += ratio(t, t + f);
        r_sum += ratio(t, t + n);
    }
    let k = confusion.n as f64;
    let micro = harmonic(ratio(tp, tp + fp), ratio(tp, tp + fneg));
    let macro_ = harmonic(p_sum / k, r_sum / k);
    Ok((micro, macro_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    /// Mean predicted probability in the bin.
    pub predicted: f64,
    /// Observed frequency of correctness in the bin.
    pub observed: f64,
    pub count: usize,
}

/// Binned predicted probability vs. observed frequency. Bins are
/// `[e_i, e_{i+1})`, the last one closed; empty bins are omitted.
pub fn qq_curve(pairs: &[(f64, bool)], edges: &[f64]) -> Result<Vec<QqPoint>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "bin edges must be increasing, at least two".into(),
        ));
    }
    let nb = edges.len() - 1;
    let mut sums = vec![(0.0, 0usize, 0usize); nb];
    for &(p, ok) in pairs {
        if p < edges[0] || p > edges[nb] {
            continue;
        }
        let b = (edges.partition_point(|&e| e <= p)).clamp(1, nb) - 1;
        sums[b].0 += p;
        sums[b].1 += ok as usize;
        sums[b].2 += 1;
    }
    Ok(sums
        .into_iter()
        .filter(|s| s.2 > 0)
        .map(|(p, k, n)| QqPoint {
            predicted: p / n as f64,
            observed: k as f64 / n as f64,
            count: n,
        })
        .collect())
}

/// One line of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub state: String,
    pub horizon_s: Option<f64>,
    pub level: Option<f64>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, state: &str, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            state: state.to_string(),
            horizon_s: None,
            level: None,
            value,
        }
    }

    pub fn at_horizon(mut self, h: f64) -> Self {
        self.horizon_s = Some(h);
        self
    }

    pub fn at_level(mut self, level: f64) -> Self {
        self.level = Some(level);
        self
    }
}

/// CSV with columns `metric, state, horizon_s, level, value`.
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(reader: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
