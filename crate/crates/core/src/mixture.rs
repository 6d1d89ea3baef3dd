//! Weighted Gaussian mixtures: the static wait-state GMM and the
//! state-probability weighted ensemble of specialised forecasts.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Density2;
use crate::forecaster::{BivariateNormal, GaussianForecast, EPS_SIGMA};
use crate::geometry::{forecast_offsets, gaussian_to_world, Heading, Mat2, Point2, FORECAST_LEN};
use crate::motion_states::{MotionState, StateProbabilities};

/// Mixture weights must sum to one within this tolerance.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;
/// Mode search step, metres.
pub const MODE_GRID: f64 = 0.01;
pub const EM_MAX_ITER: usize = 200;
/// Stop when the mean per-sample log-likelihood improves by less than this.
pub const EM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub normal: BivariateNormal,
}

/// `Σ w_k N(y; μ_k, S_k)` at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    components: Vec<Component>,
}

impl Mixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidDistribution(
                "mixture without components".into(),
            ));
        }
        if components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::InvalidDistribution("negative mixture weight".into()));
        }
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "mixture weights sum to {sum}"
            )));
        }
        Ok(Self { components })
    }

    pub fn single(normal: BivariateNormal) -> Self {
        Self {
            components: vec![Component {
                weight: 1.0,
                normal,
            }],
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn log_density(&self, y: Point2) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight.ln() - c.normal.nll(y).total - (2.0 * std::f64::consts::PI).ln())
            .collect();
        log_sum_exp(&logs)
    }

    /// Maps every component from ego to world coordinates.
    pub fn to_world(&self, origin: Point2, heading: Heading) -> Result<Mixture> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let (mu, cov) = gaussian_to_world(c.normal.mean, &c.normal.cov, origin, heading)?;
                Ok(Component {
                    weight: c.weight,
                    normal: BivariateNormal::new(mu, cov)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mixture { components })
    }
}

impl Density2 for Mixture {
    fn density(&self, y: Point2) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * c.normal.density(y))
            .sum()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Point2 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty");
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        chosen.normal.sample(rng)
    }

    fn bounding_box(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let s = self
            .components
            .iter()
            .map(|c| c.normal.max_sigma())
            .fold(0.0, f64::max);
        for c in &self.components {
            let m = c.normal.mean;
            lo = Point2::new(lo.x.min(m.x - 6.0 * s), lo.y.min(m.y - 6.0 * s));
            hi = Point2::new(hi.x.max(m.x + 6.0 * s), hi.y.max(m.y + 6.0 * s));
        }
        (lo, hi)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mixture_density(mix: &Mixture, y: Point2) -> f64 {
    mix.density(y)
}

/// `n` draws: component ∝ weight, then `μ + L z`.
pub fn sample_mixture(mix: &Mixture, n: usize, seed: u64) -> Vec<Point2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| mix.sample(&mut rng)).collect()
}

/// Best component mean, refined by coordinate ascent on a 0.01 m grid.
pub fn find_mode(mix: &Mixture) -> Point2 {
    let mut best = mix.components[0].normal.mean;
    let mut best_d = mix.density(best);
    for c in &mix.components[1..] {
        let d = mix.density(c.normal.mean);
        if d > best_d {
            best = c.normal.mean;
            best_d = d;
        }
    }
    let steps = [
        Point2::new(MODE_GRID, 0.0),
        Point2::new(-MODE_GRID, 0.0),
        Point2::new(0.0, MODE_GRID),
        Point2::new(0.0, -MODE_GRID),
    ];
    // a 0.01 m walk never needs more steps than the envelope is wide
    let (lo, hi) = mix.bounding_box();
    let limit = (((hi.x - lo.x) + (hi.y - lo.y)) / MODE_GRID) as usize + 1;
    for _ in 0..limit {
        let mut moved = false;
        for s in steps {
            let p = best + s;
            let d = mix.density(p);
            if d > best_d {
                best = p;
                best_d = d;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    best
}

/// Clips eigenvalues below `floor` (the constrained MLE for covariances with
/// a lower bound on their spectrum).
pub fn floor_covariance(cov: Mat2, floor: f64) -> Mat2 {
    let a = cov.0[0][0];
    let b = 0.5 * (cov.0[0][1] + cov.0[1][0]);
    let c = cov.0[1][1];
    let (l1, l2) = Mat2::new(a, b, b, c).symmetric_eigenvalues();
    if l1 >= floor {
        return Mat2::new(a, b, b, c);
    }
    // eigenvector of the larger eigenvalue
    let (vx, vy) = if b.abs() > 1e-300 {
        (l2 - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = (vx * vx + vy * vy).sqrt();
    let (ux, uy) = (vx / n, vy / n);
    let hi = l2.max(floor);
    let lo = floor;
    Mat2::new(
        hi * ux * ux + lo * uy * uy,
        (hi - lo) * ux * uy,
        (hi - lo) * ux * uy,
        hi * uy * uy + lo * ux * ux,
    )
}

/// Output of one EM run.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mixture: Mixture,
    /// Mean per-sample log-likelihood after every EM iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

fn kmeans_init(points: &[Point2], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // k-means++ seeding followed by Lloyd iterations
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (*p - *c).norm().powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next]);
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    (*p - centers[a])
                        .norm()
                        .total_cmp(&(*p - centers[b]).norm())
                })
                .expect("k >= 1");
            if best != assign[i] {
                assign[i] = best;
                changed = true;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for (p, &a) in points.iter().zip(&assign) {
                if a == j {
                    sx += p.x;
                    sy += p.y;
                    n += 1;
                }
            }
            if n > 0 {
                *c = Point2::new(sx / n as f64, sy / n as f64);
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

fn weighted_moments(points: &[Point2], resp: &[f64]) -> (f64, Point2, Mat2) {
    let nk: f64 = resp.iter().sum();
    let (mut mx, mut my) = (0.0, 0.0);
    for (p, r) in points.iter().zip(resp) {
        mx += r * p.x;
        my += r * p.y;
    }
    let mu = Point2::new(mx / nk, my / nk);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (p, r) in points.iter().zip(resp) {
        let d = *p - mu;
        sxx += r * d.x * d.x;
        sxy += r * d.x * d.y;
        syy += r * d.y * d.y;
    }
    (nk, mu, Mat2::new(sxx / nk, sxy / nk, sxy / nk, syy / nk))
}

fn mean_log_likelihood(mix: &Mixture, points: &[Point2]) -> f64 {
    points.iter().map(|p| mix.log_density(*p)).sum::<f64>() / points.len() as f64
}

/// Expectation-maximisation with k-means++ / Lloyd initialisation and
/// covariances floored at `EPS_SIGMA²`.
pub fn fit_gmm(points: &[Point2], k: usize, seed: u64) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be positive".into()));
    }
    if points.len() < 10 * k {
        return Err(Error::InsufficientData(format!(
            "GMM with K={k} needs at least {} samples, got {}",
            10 * k,
            points.len()
        )));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::MalformedInput("non-finite GMM sample".into()));
    }
    let floor = EPS_SIGMA * EPS_SIGMA;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assign = kmeans_init(points, k, &mut rng);

    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let resp: Vec<f64> = assign
            .iter()
            .map(|&a| if a == j { 1.0 } else { 0.0 })
            .collect();
        let nk: f64 = resp.iter().sum();
        let (w, mu, cov) = if nk >= 2.0 {
            let (nk, mu, cov) = weighted_moments(points, &resp);
            (nk / n as f64, mu, cov)
        } else {
            let all = vec![1.0; n];
            let (_, _, cov) = weighted_moments(points, &all);
            let mu = if nk > 0.0 {
                weighted_moments(points, &resp).1
            } else {
                points[rng.random_range(0..n)]
            };
            ((nk.max(1.0)) / n as f64, mu, cov)
        };
        components.push(Component {
            weight: w,
            normal: BivariateNormal::new(mu, floor_covariance(cov, floor))?,
        });
    }
    let wsum: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= wsum;
    }
    let mut mix = Mixture::new(components)?;
    let mut history = vec![mean_log_likelihood(&mix, points)];
    let mut resp = vec![vec![0.0; n]; k];
    let mut iterations = 0;
    for _ in 0..EM_MAX_ITER {
        iterations += 1;
        // E-step
        for (i, p) in points.iter().enumerate() {
            let logs: Vec<f64> = mix
                .components
                .iter()
                .map(|c| {
                    if c.weight > 0.0 {
                        c.weight.ln() - c.normal.nll(*p).total
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let lse = log_sum_exp(&logs);
            for j in 0..k {
                resp[j][i] = (logs[j] - lse).exp();
            }
        }
        // M-step
        let mut next = Vec::with_capacity(k);
        for (j, old) in mix.components.iter().enumerate() {
            let nk: f64 = resp[j].iter().sum();
            if nk < 1e-10 {
                next.push(Component {
                    weight: 0.0,
                    normal: old.normal,
                });
                continue;
            }
            let (nk, mu, cov) = weighted_moments(points, &resp[j]);
            next.push(Component {
                weight: nk / n as f64,
                normal: BivariateNormal::new(mu, floor_covariance(cov, floor))?,
            });
        }
        let wsum: f64 = next.iter().map(|c| c.weight).sum();
        for c in &mut next {
            c.weight /= wsum;
        }
        mix = Mixture::new(next)?;
        let ll = mean_log_likelihood(&mix, points);
        let prev = *history.last().expect("non-empty");
        history.push(ll);
        if !ll.is_finite() {
            return Err(Error::InvalidDistribution(
                "EM log-likelihood is not finite".into(),
            ));
        }
        if ll - prev < EM_TOLERANCE {
            break;
        }
    }
    Ok(GmmFit {
        mixture: mix,
        log_likelihood: history,
        iterations,
    })
}

/// Static wait-state forecast: one mixture per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPerHorizon {
    pub horizons: Vec<Mixture>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentJson {
    w: f64,
    mu: [f64; 2],
    cov: [[f64; 2]; 2],
}

fn horizon_key(h: f64) -> String {
    format!("{h:.1}")
}

impl GmmPerHorizon {
    /// `{horizon_s: [{w, mu: [x, y], cov: [[..], [..]]}, ...]}`
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, Vec<ComponentJson>> = forecast_offsets()
            .iter()
            .zip(&self.horizons)
            .map(|(&h, m)| {
                (
                    horizon_key(h),
                    m.components
                        .iter()
                        .map(|c| ComponentJson {
                            w: c.weight,
                            mu: [c.normal.mean.x, c.normal.mean.y],
                            cov: c.normal.cov.0,
                        })
                        .collect(),
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<ComponentJson>> = serde_json::from_str(json)?;
        let mut horizons = Vec::with_capacity(FORECAST_LEN);
        for h in forecast_offsets() {
            let comps = map.remove(&horizon_key(h)).ok_or_else(|| {
                Error::MalformedInput(format!("GMM lacks horizon {}", horizon_key(h)))
            })?;
            let components = comps
                .into_iter()
                .map(|c| {
                    Ok(Component {
                        weight: c.w,
                        normal: BivariateNormal::new(Point2::new(c.mu[0], c.mu[1]), Mat2(c.cov))?,
                    })
                })
                .collect::<Result<_>>()?;
            horizons.push(Mixture::new(components)?);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::MalformedInput(format!(
                "GMM has unexpected horizon '{extra}'"
            )));
        }
        Ok(Self { horizons })
    }
}

/// Per-horizon result of [`select_wait_gmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub horizon_s: f64,
    pub k: usize,
    /// `(K, mean validation log-likelihood)` for every K that could be fitted.
    pub scores: Vec<(usize, f64)>,
}

/// Fits a GMM with a fixed K at every horizon.
pub fn fit_wait_gmm(samples: &[Vec<Point2>], k: usize, seed: u64) -> Result<GmmPerHorizon> {
    check_horizons(samples)?;
    let horizons = samples
        .iter()
        .enumerate()
        .map(|(h, pts)| Ok(fit_gmm(pts, k, seed.wrapping_add(h as u64))?.mixture))
        .collect::<Result<_>>()?;
    Ok(GmmPerHorizon { horizons })
}

fn check_horizons(samples: &[Vec<Point2>]) -> Result<()> {
    if samples.len() != FORECAST_LEN {
        return Err(Error::MalformedInput(format!(
            "expected samples for {FORECAST_LEN} horizons, got {}",
            samples.len()
        )));
    }
    Ok(())
}

/// Chooses K per horizon by mean validation log-likelihood.
pub fn select_wait_gmm(
    train: &[Vec<Point2>],
    validation: &[Vec<Point2>],
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<(GmmPerHorizon, Vec<KSelection>)> {
    check_horizons(train)?;
    check_horizons(validation)?;
    let offsets = forecast_offsets();
    let mut horizons = Vec::with_capacity(FORECAST_LEN);
    let mut report = Vec::with_capacity(FORECAST_LEN);
    for h in 0..FORECAST_LEN {
        if validation[h].is_empty() {
            return Err(Error::InsufficientData(format!(
                "no validation samples at horizon {}",
                offsets[h]
            )));
        }
        let mut best: Option<(usize, f64, Mixture)> = None;
        let mut scores = Vec::new();
        for k in k_range.clone() {
            let fit = match fit_gmm(&train[h], k, seed.wrapping_add(h as u64)) {
                Ok(f) => f,
                Err(Error::InsufficientData(_)) => continue,
                Err(e) => return Err(e),
            };
            let ll = mean_log_likelihood(&fit.mixture, &validation[h]);
            scores.push((k, ll));
            if best.as_ref().is_none_or(|b| ll > b.1) {
                best = Some((k, ll, fit.mixture));
            }
        }
        let (k, _, mix) = best.ok_or_else(|| {
            Error::InsufficientData(format!(
                "too few wait samples at horizon {} for any K",
                offsets[h]
            ))
        })?;
        horizons.push(mix);
        report.push(KSelection {
            horizon_s: offsets[h],
            k,
            scores,
        });
    }
    Ok((GmmPerHorizon { horizons }, report))
}

/// Ensemble forecast: one mixture per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureForecast {
    pub horizons: Vec<Mixture>,
}

impl MixtureForecast {
    pub fn single(forecast: &GaussianForecast) -> Result<Self> {
        let horizons = forecast
            .horizons
            .iter()
            .map(|g| Ok(Mixture::single(g.to_normal()?)))
            .collect::<Result<_>>()?;
        Ok(Self { horizons })
    }

    pub fn to_world(&self, origin: Point2, heading: Heading) -> Result<Self> {
        let horizons = self
            .horizons
            .iter()
            .map(|m| m.to_world(origin, heading))
            .collect::<Result<_>>()?;
        Ok(Self { horizons })
    }
}

/// `D = Σ_s p_s F_s`, where the wait term is the static GMM. States with
/// zero weight are left out.
pub fn build_ensemble(
    probs: &StateProbabilities,
    forecasts: &BTreeMap<MotionState, GaussianForecast>,
    wait: &GmmPerHorizon,
) -> Result<MixtureForecast> {
    let mut horizons = Vec::with_capacity(FORECAST_LEN);
    for h in 0..FORECAST_LEN {
        let mut components = Vec::new();
        for s in MotionState::ALL {
            let p = probs.get(s);
            if p <= 0.0 {
                continue;
            }
            if s == MotionState::Wait {
                let m = wait
                    .horizons
                    .get(h)
                    .ok_or_else(|| Error::MalformedInput("wait GMM has too few horizons".into()))?;
                components.extend(m.components.iter().map(|c| Component {
                    weight: p * c.weight,
                    normal: c.normal,
                }));
            } else {
                let f = forecasts
                    .get(&s)
                    .ok_or_else(|| Error::InvalidState(format!("no forecast for state '{s}'")))?;
                let g = f.horizons.get(h).ok_or_else(|| {
                    Error::MalformedInput(format!("forecast for '{s}' has too few horizons"))
                })?;
                components.push(Component {
                    weight: p,
                    normal: g.to_normal()?,
                });
            }
        }
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= sum;
        }
        horizons.push(Mixture::new(components)?);
    }
    Ok(MixtureForecast { horizons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn normal(mx: f64, my: f64, s: f64) -> BivariateNormal {
        BivariateNormal::new(Point2::new(mx, my), Mat2::diag(s * s, s * s)).unwrap()
    }

    fn two(a: BivariateNormal, wa: f64, b: BivariateNormal) -> Mixture {
        Mixture::new(vec![
            Component {
                weight: wa,
                normal: a,
            },
            Component {
                weight: 1.0 - wa,
                normal: b,
            },
        ])
        .unwrap()
    }

    #[test]
    fn density_examples() {
        let g = normal(1.0, 2.0, 0.7);
        let single = Mixture::single(g);
        let y = Point2::new(0.3, 2.2);
        assert_eq!(mixture_density(&single, y), g.density(y));
        let same = two(normal(0.0, 0.0, 1.0), 0.5, normal(0.0, 0.0, 1.0));
        let tau = 2.0 * std::f64::consts::PI;
        assert!((mixture_density(&same, Point2::ORIGIN) - 1.0 / tau).abs() < 1e-15);
        let d = 1.3;
        let apart = two(normal(d, 0.0, 1.0), 0.5, normal(-d, 0.0, 1.0));
        let expected = (-d * d / 2.0).exp() / tau;
        assert!((mixture_density(&apart, Point2::ORIGIN) - expected).abs() < 1e-15);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let g = normal(0.0, 0.0, 1.0);
        assert!(Mixture::new(vec![Component {
            weight: 0.7,
            normal: g
        }])
        .is_err());
        assert!(Mixture::new(vec![]).is_err());
    }

    #[test]
    fn sampling_examples() {
        let g = normal(2.0, -1.0, 1.5);
        let pts = sample_mixture(&Mixture::single(g), 100_000, 3);
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
        let tol = 3.0 * 1.5 / n.sqrt();
        assert!((mx - 2.0).abs() < tol && (my + 1.0).abs() < tol);

        let tight = Mixture::single(normal(1.0, 1.0, EPS_SIGMA));
        for p in sample_mixture(&tight, 1000, 9) {
            assert!(p.distance(Point2::new(1.0, 1.0)) < 5.0 * EPS_SIGMA);
        }
        assert_eq!(sample_mixture(&tight, 50, 1), sample_mixture(&tight, 50, 1));
    }

    #[test]
    fn mode_examples() {
        let g = BivariateNormal::new(Point2::new(0.123, -4.567), Mat2::new(2.0, 0.3, 0.3, 1.0))
            .unwrap();
        assert_eq!(find_mode(&Mixture::single(g)), g.mean);

        let sep = two(normal(0.0, 0.0, 0.1), 0.4, normal(1.0, 0.0, 0.1));
        assert!(find_mode(&sep).distance(Point2::new(1.0, 0.0)) <= 0.01);

        let close = two(normal(0.5, 0.0, 1.0), 0.5, normal(-0.5, 0.0, 1.0));
        assert!(find_mode(&close).norm() <= 0.01);
    }

    #[test]
    fn single_component_em_is_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nx = Normal::new(1.0, 0.5).unwrap();
        let ny = Normal::new(-2.0, 0.2).unwrap();
        let pts: Vec<Point2> = (0..500)
            .map(|_| Point2::new(nx.sample(&mut rng), ny.sample(&mut rng)))
            .collect();
        let fit = fit_gmm(&pts, 1, 0).unwrap();
        let c = fit.mixture.components()[0];
        let all = vec![1.0; pts.len()];
        let (_, mu, cov) = weighted_moments(&pts, &all);
        assert!(c.normal.mean.distance(mu) < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.normal.cov.0[i][j] - cov.0[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_cluster_em() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let pts: Vec<Point2> = (0..400)
            .map(|i| {
                let cx = if i % 2 == 0 { 5.0 } else { -5.0 };
                Point2::new(cx + noise.sample(&mut rng), noise.sample(&mut rng))
            })
            .collect();
        let fit = fit_gmm(&pts, 2, 1).unwrap();
        let mut comps = fit.mixture.components().to_vec();
        comps.sort_by(|a, b| a.normal.mean.x.total_cmp(&b.normal.mean.x));
        assert!(comps[0].normal.mean.distance(Point2::new(-5.0, 0.0)) < 0.05);
        assert!(comps[1].normal.mean.distance(Point2::new(5.0, 0.0)) < 0.05);
        for c in comps {
            assert!((c.weight - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn nested_models_do_not_lose_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Point2> = (0..300)
            .map(|_| Point2::new(n.sample(&mut rng), n.sample(&mut rng)))
            .collect();
        let l1 = mean_log_likelihood(&fit_gmm(&pts, 1, 0).unwrap().mixture, &pts);
        let l2 = mean_log_likelihood(&fit_gmm(&pts, 2, 0).unwrap().mixture, &pts);
        assert!(l2 >= l1 - 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let pts = vec![Point2::ORIGIN; 19];
        assert!(matches!(
            fit_gmm(&pts, 2, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn degenerate_samples_get_floored() {
        let pts: Vec<Point2> = (0..50)
            .map(|i| Point2::new(i as f64 * 0.1, i as f64 * 0.2))
            .collect();
        let fit = fit_gmm(&pts, 1, 0).unwrap();
        let (lo, _) = fit.mixture.components()[0]
            .normal
            .cov
            .symmetric_eigenvalues();
        assert!(lo >= EPS_SIGMA * EPS_SIGMA * (1.0 - 1e-6));
        let still = vec![Point2::new(3.0, 3.0); 20];
        assert!(fit_gmm(&still, 1, 0).is_ok());
    }

    #[test]
    fn gmm_json_round_trip() {
        let m = two(normal(0.0, 0.0, 1.0), 0.25, normal(1.0, 2.0, 0.5));
        let gmm = GmmPerHorizon {
            horizons: vec![m; FORECAST_LEN],
        };
        let json = gmm.to_json().unwrap();
        assert!(json.contains("\"2.5\""));
        assert_eq!(GmmPerHorizon::from_json(&json).unwrap(), gmm);
    }

    #[test]
    fn ensemble_weights_follow_probabilities() {
        use crate::forecaster::HorizonGaussian;
        let f = GaussianForecast {
            horizons: vec![
                HorizonGaussian {
                    mu: Point2::new(1.0, 0.0),
                    sigma_x: 1.0,
                    sigma_y: 1.0,
                    rho: 0.0,
                };
                FORECAST_LEN
            ],
        };
        let forecasts: BTreeMap<_, _> = MotionState::FORECASTED
            .iter()
            .map(|&s| (s, f.clone()))
            .collect();
        let wait = GmmPerHorizon {
            horizons: vec![two(normal(0.0, 0.0, 0.1), 0.5, normal(0.0, 1.0, 0.1)); FORECAST_LEN],
        };
        let p = StateProbabilities {
            p: [0.4, 0.6, 0.0, 0.0, 0.0, 0.0],
        };
        let ens = build_ensemble(&p, &forecasts, &wait).unwrap();
        let w: Vec<f64> = ens.horizons[0]
            .components()
            .iter()
            .map(|c| c.weight)
            .collect();
        assert_eq!(w.len(), 3);
        assert!(
            (w[0] - 0.2).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15 && (w[2] - 0.6).abs() < 1e-15
        );
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mode_beats_component_means(ax in -3.0..3.0f64, ay in -3.0..3.0f64, bx in -3.0..3.0f64,
                                      s1 in 0.1..2.0f64, s2 in 0.1..2.0f64, w in 0.05..0.95f64) {
            let mix = two(normal(ax, ay, s1), w, normal(bx, 0.0, s2));
            let mode = find_mode(&mix);
            let dm = mix.density(mode);
            for c in mix.components() {
                prop_assert!(dm >= mix.density(c.normal.mean));
            }
        }

        #[test]
        fn floored_covariance_is_spd(a in 0.0..4.0f64, c in 0.0..4.0f64, t in -1.0..1.0f64) {
            let b = t * (a * c).sqrt();
            let f = floor_covariance(Mat2::new(a, b, b, c), 1e-6);
            let (lo, _) = f.symmetric_eigenvalues();
            prop_assert!(lo >= 1e-6 * (1.0 - 1e-6));
            prop_assert!(f.cholesky().is_ok());
        }
    }
}
