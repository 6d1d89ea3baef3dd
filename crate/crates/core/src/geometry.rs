//! Coordinate frames, trajectory containers and the world/ego transform.
//!
//! The ego frame is centred on the cyclist's current position and rotated so
//! that the movement direction points along +x:
//!
//! ```text
//! ego = R(phi) * (world - origin),   R = [[cos, sin], [-sin, cos]]
//! ```

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spacing of the input grid in seconds (50 Hz).
pub const INPUT_STEP: f64 = 0.02;
/// Spacing of the forecast grid in seconds.
pub const FORECAST_STEP: f64 = 0.1;
/// Number of samples in an input window, including the current one.
pub const INPUT_LEN: usize = 51;
/// Number of forecast horizons.
pub const FORECAST_LEN: usize = 25;

/// Number of 50 Hz steps between two forecast horizons.
pub const STEPS_PER_HORIZON: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (*self - other).norm()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Mat2([[a11, a12], [a21, a22]])
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, b)
    }

    pub fn rotation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Mat2::new(c, s, -s, c)
    }

    pub fn transpose(&self) -> Mat2 {
        let m = self.0;
        Mat2::new(m[0][0], m[1][0], m[0][1], m[1][1])
    }

    pub fn det(&self) -> f64 {
        let m = self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn mul(&self, rhs: &Mat2) -> Mat2 {
        let a = self.0;
        let b = rhs.0;
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = self.0;
        Point2::new(m[0][0] * p.x + m[0][1] * p.y, m[1][0] * p.x + m[1][1] * p.y)
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        let m = self.0;
        Mat2::new(m[0][0] * s, m[0][1] * s, m[1][0] * s, m[1][1] * s)
    }

    pub fn add(&self, rhs: &Mat2) -> Mat2 {
        let a = self.0;
        let b = rhs.0;
        Mat2::new(
            a[0][0] + b[0][0],
            a[0][1] + b[0][1],
            a[1][0] + b[1][0],
            a[1][1] + b[1][1],
        )
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> (f64, f64) {
        let m = self.0;
        let mean = 0.5 * (m[0][0] + m[1][1]);
        let half_diff = 0.5 * (m[0][0] - m[1][1]);
        let r = half_diff.hypot(0.5 * (m[0][1] + m[1][0]));
        (mean - r, mean + r)
    }

    /// Lower Cholesky factor `(l11, l21, l22)`; fails unless the matrix is
    /// symmetric positive definite.
    pub fn cholesky(&self) -> Result<Cholesky2> {
        let m = self.0;
        let scale = m[0][0].abs().max(m[1][1].abs());
        if (m[0][1] - m[1][0]).abs() > 1e-9 * scale {
            return Err(Error::InvalidCovariance(format!(
                "matrix is not symmetric: {:?}",
                m
            )));
        }
        let a = m[0][0];
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidCovariance(format!(
                "non-positive leading entry {a}"
            )));
        }
        let l11 = a.sqrt();
        let l21 = m[1][0] / l11;
        let rem = m[1][1] - l21 * l21;
        if !(rem > 0.0) || !rem.is_finite() {
            return Err(Error::InvalidCovariance(format!(
                "matrix is not positive definite: {:?}",
                m
            )));
        }
        Ok(Cholesky2 {
            l11,
            l21,
            l22: rem.sqrt(),
        })
    }
}

/// Lower-triangular factor `L` with `S = L Lᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cholesky2 {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

impl Cholesky2 {
    /// Solves `L z = e`.
    pub fn solve_lower(&self, e: Point2) -> Point2 {
        let z1 = e.x / self.l11;
        let z2 = (e.y - self.l21 * z1) / self.l22;
        Point2::new(z1, z2)
    }

    /// Squared Mahalanobis distance `eᵀ S⁻¹ e`.
    pub fn mahalanobis_sq(&self, e: Point2) -> f64 {
        let z = self.solve_lower(e);
        z.x * z.x + z.y * z.y
    }

    /// `ln det S = 2 Σ ln L_kk`.
    pub fn ln_det(&self) -> f64 {
        2.0 * (self.l11.ln() + self.l22.ln())
    }

    /// Maps a standard normal draw to `L z`.
    pub fn transform(&self, z: Point2) -> Point2 {
        Point2::new(self.l11 * z.x, self.l21 * z.x + self.l22 * z.y)
    }
}

/// Fixed sampling grids shared by every trajectory in the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub input_offsets: Vec<f64>,
    pub forecast_offsets: Vec<f64>,
}

impl TimeGrid {
    /// 51 input offsets `0, -0.02, …, -1.0` and 25 horizons `0.1, …, 2.5`.
    pub fn canonical() -> Self {
        Self {
            input_offsets: input_offsets(),
            forecast_offsets: forecast_offsets(),
        }
    }
}

pub fn input_offsets() -> Vec<f64> {
    (0..INPUT_LEN).map(|i| -(i as f64) * INPUT_STEP).collect()
}

pub fn forecast_offsets() -> Vec<f64> {
    (1..=FORECAST_LEN)
        .map(|i| i as f64 * FORECAST_STEP)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    World,
    Ego,
}

impl Frame {
    pub fn as_str(&self) -> &'static str {
        match self {
            Frame::World => "world",
            Frame::Ego => "ego",
        }
    }
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "world" => Ok(Frame::World),
            "ego" => Ok(Frame::Ego),
            other => Err(Error::MalformedInput(format!("unknown frame '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub offset: f64,
    pub position: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frame: Frame,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn new(frame: Frame, samples: Vec<Sample>) -> Self {
        Self { frame, samples }
    }

    /// Builds a trajectory from positions aligned with `offsets`.
    pub fn from_positions(frame: Frame, offsets: &[f64], positions: &[Point2]) -> Result<Self> {
        if offsets.len() != positions.len() {
            return Err(Error::MalformedInput(format!(
                "{} offsets for {} positions",
                offsets.len(),
                positions.len()
            )));
        }
        let samples = offsets
            .iter()
            .zip(positions)
            .map(|(&offset, &position)| Sample { offset, position })
            .collect();
        Ok(Self { frame, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point2> + '_ {
        self.samples.iter().map(|s| s.position)
    }

    /// Checks that the offsets equal `grid` (to 1e-9 s) and, for ego-frame
    /// input windows, that the sample at offset 0 sits at the origin.
    pub fn check_grid(&self, grid: &[f64]) -> Result<()> {
        if self.samples.len() != grid.len() {
            return Err(Error::MalformedInput(format!(
                "trajectory has {} samples, grid expects {}",
                self.samples.len(),
                grid.len()
            )));
        }
        for (s, &g) in self.samples.iter().zip(grid) {
            if (s.offset - g).abs() > 1e-9 {
                return Err(Error::MalformedInput(format!(
                    "offset {} does not match grid value {}",
                    s.offset, g
                )));
            }
            if !s.position.is_finite() {
                return Err(Error::MalformedInput("non-finite position".into()));
            }
        }
        Ok(())
    }

    /// Flattened `[x0, y0, x1, y1, …]` in sample order.
    pub fn flatten(&self) -> Vec<f64> {
        self.samples
            .iter()
            .flat_map(|s| [s.position.x, s.position.y])
            .collect()
    }
}

/// Movement direction in radians, normalised to `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Heading(f64);

impl Heading {
    pub fn new(phi: f64) -> Self {
        Heading(wrap_angle(phi))
    }

    pub fn radians(&self) -> f64 {
        self.0
    }

    /// Rotation taking world offsets into the ego frame.
    pub fn to_ego(&self) -> Mat2 {
        Mat2::rotation(self.0)
    }
}

pub fn wrap_angle(phi: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = (phi + PI).rem_euclid(two_pi) - PI;
    if w >= PI {
        w -= two_pi;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadingEstimate {
    pub heading: Heading,
    /// Set when the displacement was below the standstill threshold.
    pub degenerate: bool,
}

/// Endpoint-mean displacement window and standstill threshold.
pub const HEADING_WINDOW: usize = 5;
pub const STANDSTILL_THRESHOLD: f64 = 0.05;

/// Direction of the displacement between the mean of the five oldest and
/// the mean of the five newest samples.
pub fn estimate_heading(world_input: &Trajectory) -> Result<HeadingEstimate> {
    if world_input.len() < 2 * HEADING_WINDOW {
        return Err(Error::MalformedInput(format!(
            "heading needs at least {} samples, got {}",
            2 * HEADING_WINDOW,
            world_input.len()
        )));
    }
    let mut samples = world_input.samples.clone();
    samples.sort_by(|a, b| a.offset.total_cmp(&b.offset));
    let mean = |s: &[Sample]| {
        let sum = s.iter().fold(Point2::ORIGIN, |acc, v| acc + v.position);
        sum * (1.0 / s.len() as f64)
    };
    let oldest = mean(&samples[..HEADING_WINDOW]);
    let newest = mean(&samples[samples.len() - HEADING_WINDOW..]);
    let d = newest - oldest;
    if !d.is_finite() {
        return Err(Error::MalformedInput("non-finite position".into()));
    }
    if d.norm() < STANDSTILL_THRESHOLD {
        return Ok(HeadingEstimate {
            heading: Heading::new(0.0),
            degenerate: true,
        });
    }
    Ok(HeadingEstimate {
        heading: Heading::new(d.y.atan2(d.x)),
        degenerate: false,
    })
}

pub fn point_to_ego(p: Point2, origin: Point2, heading: Heading) -> Point2 {
    heading.to_ego().apply(p - origin)
}

pub fn point_to_world(p: Point2, origin: Point2, heading: Heading) -> Point2 {
    heading.to_ego().transpose().apply(p) + origin
}

pub fn world_to_ego(traj: &Trajectory, origin: Point2, heading: Heading) -> Result<Trajectory> {
    if traj.frame != Frame::World {
        return Err(Error::MalformedInput(
            "world_to_ego expects a world-frame trajectory".into(),
        ));
    }
    map_positions(traj, Frame::Ego, |p| point_to_ego(p, origin, heading))
}

pub fn ego_to_world(traj: &Trajectory, origin: Point2, heading: Heading) -> Result<Trajectory> {
    if traj.frame != Frame::Ego {
        return Err(Error::MalformedInput(
            "ego_to_world expects an ego-frame trajectory".into(),
        ));
    }
    map_positions(traj, Frame::World, |p| point_to_world(p, origin, heading))
}

fn map_positions(
    traj: &Trajectory,
    frame: Frame,
    f: impl Fn(Point2) -> Point2,
) -> Result<Trajectory> {
    let mut samples = Vec::with_capacity(traj.len());
    for s in &traj.samples {
        if !s.position.is_finite() || !s.offset.is_finite() {
            return Err(Error::MalformedInput("non-finite sample".into()));
        }
        samples.push(Sample {
            offset: s.offset,
            position: f(s.position),
        });
    }
    Ok(Trajectory { frame, samples })
}

/// Maps an ego-frame Gaussian `(mu, cov)` into world coordinates:
/// `mu_w = Rᵀ mu + origin`, `cov_w = Rᵀ cov R`.
pub fn gaussian_to_world(
    mu: Point2,
    cov: &Mat2,
    origin: Point2,
    heading: Heading,
) -> Result<(Point2, Mat2)> {
    cov.cholesky()?;
    let r = heading.to_ego();
    let rt = r.transpose();
    let mut cov_w = rt.mul(cov).mul(&r);
    // Re-symmetrise rounding noise.
    let off = 0.5 * (cov_w.0[0][1] + cov_w.0[1][0]);
    cov_w.0[0][1] = off;
    cov_w.0[1][0] = off;
    Ok((rt.apply(mu) + origin, cov_w))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    scene_id: String,
    offset_s: f64,
    x_m: f64,
    y_m: f64,
    frame: Frame,
}

/// Writes trajectories as `scene_id, offset_s, x_m, y_m, frame` CSV rows.
pub fn write_trajectory_csv<W: Write>(writer: W, rows: &[(&str, &Trajectory)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (scene_id, traj) in rows {
        for s in &traj.samples {
            w.serialize(TrajectoryRow {
                scene_id: scene_id.to_string(),
                offset_s: s.offset,
                x_m: s.position.x,
                y_m: s.position.y,
                frame: traj.frame,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads trajectory CSV rows, grouped by scene id in order of appearance.
pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Vec<(String, Trajectory)>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out: Vec<(String, Trajectory)> = Vec::new();
    for row in r.deserialize() {
        let row: TrajectoryRow = row?;
        let sample = Sample {
            offset: row.offset_s,
            position: Point2::new(row.x_m, row.y_m),
        };
        match out.last_mut() {
            Some((id, traj)) if *id == row.scene_id => {
                if traj.frame != row.frame {
                    return Err(Error::MalformedInput(format!(
                        "scene {} mixes frames",
                        row.scene_id
                    )));
                }
                traj.samples.push(sample);
            }
            _ => out.push((row.scene_id, Trajectory::new(row.frame, vec![sample]))),
        }
    }
    Ok(out)
}
