//! Synthetic cyclist scenes: scripted kinematics at 50 Hz, top-down
//! silhouette rendering, sliding-window samples and scene-level splits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_heading, forecast_offsets, input_offsets, world_to_ego, Frame, Heading, Point2,
    Sample, Trajectory, FORECAST_LEN, INPUT_LEN, STEPS_PER_HORIZON,
};
use crate::mhi::{
    build_roi, generate_mhi, mask_file_name, write_mask_png, BoundingBox, MaskFrame, MaskSequence,
    MhiParams, MotionHistoryImage,
};
use crate::motion_states::{
    derive_sub_labels, write_labels_csv, LabelRow, LabelVector, MotionState,
};

/// Simulation step, seconds.
pub const SCENE_STEP: f64 = 0.02;
/// Steps of history before the current sample.
pub const HISTORY_STEPS: usize = INPUT_LEN - 1;
/// Steps from the current sample to the last forecast horizon.
pub const FUTURE_STEPS: usize = FORECAST_LEN * STEPS_PER_HORIZON;

/// One piece of a scenario. Turn direction follows from the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state: MotionState,
    pub duration: f64,
    /// Speed for move and turn segments, m/s.
    #[serde(default)]
    pub speed: f64,
    /// Acceleration magnitude for start and stop segments, m/s².
    #[serde(default)]
    pub acceleration: f64,
    /// Radius for turn segments, m.
    #[serde(default)]
    pub turn_radius: f64,
}

impl Segment {
    pub fn wait(duration: f64) -> Self {
        Self::new(MotionState::Wait, duration)
    }

    pub fn start(duration: f64, acceleration: f64) -> Self {
        Self {
            acceleration,
            ..Self::new(MotionState::Start, duration)
        }
    }

    pub fn stop(duration: f64, acceleration: f64) -> Self {
        Self {
            acceleration,
            ..Self::new(MotionState::Stop, duration)
        }
    }

    pub fn moving(duration: f64, speed: f64) -> Self {
        Self {
            speed,
            ..Self::new(MotionState::Move, duration)
        }
    }

    pub fn turn(state: MotionState, duration: f64, speed: f64, turn_radius: f64) -> Self {
        Self {
            speed,
            turn_radius,
            ..Self::new(state, duration)
        }
    }

    fn new(state: MotionState, duration: f64) -> Self {
        Self {
            state,
            duration,
            speed: 0.0,
            acceleration: 0.0,
            turn_radius: 0.0,
        }
    }
}

/// Whether `to` may follow `from` in a script.
pub fn transition_allowed(from: MotionState, to: MotionState) -> bool {
    use MotionState::*;
    from == to
        || matches!(
            (from, to),
            (Wait, Start)
                | (Start, Move | Left | Right | Stop)
                | (Move, Stop | Left | Right)
                | (Left, Move | Stop | Right)
                | (Right, Move | Stop | Left)
                | (Stop, Wait | Start)
        )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub initial_position: Point2,
    /// Initial direction of travel, radians.
    pub initial_heading: f64,
    pub segments: Vec<Segment>,
}

impl ScenarioScript {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self {
            initial_position: Point2::ORIGIN,
            initial_heading: 0.0,
            segments,
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidScript("script has no segments".into()));
        }
        if !self.initial_position.is_finite() || !self.initial_heading.is_finite() {
            return Err(Error::InvalidScript("non-finite initial pose".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(Error::InvalidScript(format!(
                    "segment {i} has duration {}",
                    s.duration
                )));
            }
            let bad = match s.state {
                MotionState::Wait => false,
                MotionState::Start | MotionState::Stop => !(s.acceleration > 0.0),
                MotionState::Move => !(s.speed >= 0.0),
                MotionState::Left | MotionState::Right => !(s.speed > 0.0 && s.turn_radius > 0.0),
            };
            if bad
                || !(s.speed.is_finite() && s.acceleration.is_finite() && s.turn_radius.is_finite())
            {
                return Err(Error::InvalidScript(format!(
                    "segment {i} ({}) has invalid parameters",
                    s.state
                )));
            }
            if i > 0 {
                let prev = self.segments[i - 1].state;
                if !transition_allowed(prev, s.state) {
                    return Err(Error::InvalidScript(format!(
                        "illegal transition {prev} -> {} at segment {i}",
                        s.state
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Kinematics {
    pos: Point2,
    heading: f64,
    speed: f64,
}

/// Closed-form state `tau` seconds into `seg`.
fn advance(seg: &Segment, k0: Kinematics, tau: f64) -> Kinematics {
    let dir = Point2::new(k0.heading.cos(), k0.heading.sin());
    match seg.state {
        MotionState::Wait => Kinematics { speed: 0.0, ..k0 },
        MotionState::Start => {
            let s = k0.speed * tau + 0.5 * seg.acceleration * tau * tau;
            Kinematics {
                pos: k0.pos + dir * s,
                heading: k0.heading,
                speed: k0.speed + seg.acceleration * tau,
            }
        }
        MotionState::Stop => {
            let t_stop = k0.speed / seg.acceleration;
            let t = tau.min(t_stop);
            let s = k0.speed * t - 0.5 * seg.acceleration * t * t;
            Kinematics {
                pos: k0.pos + dir * s,
                heading: k0.heading,
                speed: (k0.speed - seg.acceleration * tau).max(0.0),
            }
        }
        MotionState::Move => Kinematics {
            pos: k0.pos + dir * (seg.speed * tau),
            heading: k0.heading,
            speed: seg.speed,
        },
        MotionState::Left | MotionState::Right => {
            let sign = if seg.state == MotionState::Left {
                1.0
            } else {
                -1.0
            };
            let omega = sign * seg.speed / seg.turn_radius;
            let th = k0.heading + omega * tau;
            let r = seg.speed / omega;
            Kinematics {
                pos: k0.pos
                    + Point2::new(
                        r * (th.sin() - k0.heading.sin()),
                        r * (k0.heading.cos() - th.cos()),
                    ),
                heading: th,
                speed: seg.speed,
            }
        }
    }
}

/// Simulated scene sampled every 0.02 s, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u32,
    /// Noisy positions (what a detector reports).
    pub positions: Vec<Point2>,
    /// Noise-free positions.
    pub clean: Vec<Point2>,
    /// True direction of travel per step, radians.
    pub headings: Vec<f64>,
    pub speeds: Vec<f64>,
    pub labels: Vec<MotionState>,
    /// False for scenes without a cyclist (renders empty masks).
    pub visible: bool,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * SCENE_STEP
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * SCENE_STEP
    }

    /// Copy of the scene with the cyclist removed from the imagery.
    pub fn without_cyclist(mut self) -> Self {
        self.visible = false;
        self
    }

    /// Largest distance between consecutive clean positions.
    pub fn max_step_displacement(&self) -> f64 {
        self.clean
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .fold(0.0, f64::max)
    }

    /// Most frequent label over the admissible window steps (all steps for
    /// scenes too short for a window); ties go to the earlier state in
    /// `MotionState::ALL`.
    pub fn dominant_state(&self) -> MotionState {
        let range = admissible_steps(self.len()).unwrap_or(0..self.len());
        let mut counts = [0usize; 6];
        for &l in &self.labels[range] {
            counts[l.index()] += 1;
        }
        let mut best = 0;
        for i in 1..6 {
            if counts[i] > counts[best] {
                best = i;
            }
        }
        MotionState::ALL[best]
    }

    pub fn world_trajectory(&self) -> Trajectory {
        Trajectory::new(
            Frame::World,
            self.positions
                .iter()
                .enumerate()
                .map(|(k, &p)| Sample {
                    offset: self.time(k),
                    position: p,
                })
                .collect(),
        )
    }
}

/// Integrates `script` and adds isotropic Gaussian noise of `noise_sigma`.
pub fn generate_scene(
    scene_id: u32,
    script: &ScenarioScript,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scene> {
    script.validate()?;
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise sigma {noise_sigma} is negative"
        )));
    }
    let total = script.duration();
    let n = (total / SCENE_STEP + 1e-9).floor() as usize + 1;

    let mut starts = Vec::with_capacity(script.segments.len());
    let mut k = Kinematics {
        pos: script.initial_position,
        heading: script.initial_heading,
        speed: 0.0,
    };
    let mut t0 = 0.0;
    let mut ends = Vec::with_capacity(script.segments.len());
    for seg in &script.segments {
        starts.push((t0, k));
        k = advance(seg, k, seg.duration);
        t0 += seg.duration;
        ends.push(t0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut scene = Scene {
        scene_id,
        positions: Vec::with_capacity(n),
        clean: Vec::with_capacity(n),
        headings: Vec::with_capacity(n),
        speeds: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        visible: true,
    };
    let mut j = 0;
    for step in 0..n {
        let t = step as f64 * SCENE_STEP;
        // a step on a boundary belongs to the segment that ends there
        while j + 1 < script.segments.len() && t > ends[j] + 1e-9 {
            j += 1;
        }
        let (ts, k0) = starts[j];
        let kin = advance(&script.segments[j], k0, (t - ts).max(0.0));
        let noisy = if noise_sigma > 0.0 {
            kin.pos + Point2::new(noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            kin.pos
        };
        scene.clean.push(kin.pos);
        scene.positions.push(noisy);
        scene.headings.push(kin.heading);
        scene.speeds.push(kin.speed);
        scene.labels.push(script.segments[j].state);
    }
    Ok(scene)
}

/// Top-down camera grid centred on a world point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    /// Rotation of the image axes against the world axes, radians.
    pub rotation: f64,
}

pub fn default_cameras() -> [CameraSpec; 2] {
    [
        CameraSpec {
            width: 128,
            height: 128,
            meters_per_pixel: 0.06,
            rotation: 0.0,
        },
        CameraSpec {
            width: 96,
            height: 96,
            meters_per_pixel: 0.08,
            rotation: PI / 6.0,
        },
    ]
}

/// Person ellipse semi-axes (along, across heading) and bicycle rectangle
/// size, metres.
const PERSON_AXES: (f64, f64) = (0.3, 0.22);
const BIKE_SIZE: (f64, f64) = (1.8, 0.45);

impl CameraSpec {
    /// Continuous pixel coordinates of world point `p`; pixel `(u, v)`
    /// covers `[u, u+1) × [v, v+1)`.
    pub fn project(&self, center: Point2, p: Point2) -> (f64, f64) {
        let d = p - center;
        let (s, c) = self.rotation.sin_cos();
        let x = c * d.x + s * d.y;
        let y = -s * d.x + c * d.y;
        (
            x / self.meters_per_pixel + self.width as f64 / 2.0,
            -y / self.meters_per_pixel + self.height as f64 / 2.0,
        )
    }

    fn unproject(&self, center: Point2, u: f64, v: f64) -> Point2 {
        let x = (u - self.width as f64 / 2.0) * self.meters_per_pixel;
        let y = -(v - self.height as f64 / 2.0) * self.meters_per_pixel;
        let (s, c) = self.rotation.sin_cos();
        center + Point2::new(c * x - s * y, s * x + c * y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.meters_per_pixel > 0.0) {
            return Err(Error::InvalidParameter(
                "camera needs a positive size and scale".into(),
            ));
        }
        Ok(())
    }

    /// Binary silhouettes of a cyclist at `pos` heading `heading`; also
    /// reports whether a silhouette was cut by the frame border.
    pub fn render(&self, center: Point2, pose: Option<(Point2, f64)>) -> (MaskFrame, bool) {
        let mut frame = MaskFrame::zeros(self.width, self.height);
        let Some((pos, heading)) = pose else {
            return (frame, false);
        };
        let (hs, hc) = heading.sin_cos();
        let reach = 0.5 * BIKE_SIZE.0.hypot(BIKE_SIZE.1) + self.meters_per_pixel;
        let (cu, cv) = self.project(center, pos);
        let r = reach / self.meters_per_pixel;
        let mut clipped = false;
        let u0 = (cu - r).floor() as i64;
        let u1 = (cu + r).ceil() as i64;
        let v0 = (cv - r).floor() as i64;
        let v1 = (cv + r).ceil() as i64;
        for v in v0..=v1 {
            for u in u0..=u1 {
                let w = self.unproject(center, u as f64 + 0.5, v as f64 + 0.5) - pos;
                let along = hc * w.x + hs * w.y;
                let across = -hs * w.x + hc * w.y;
                let person =
                    (along / PERSON_AXES.0).powi(2) + (across / PERSON_AXES.1).powi(2) <= 1.0;
                let bike = along.abs() <= BIKE_SIZE.0 / 2.0 && across.abs() <= BIKE_SIZE.1 / 2.0;
                if !(person || bike) {
                    continue;
                }
                if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
                    clipped = true;
                    continue;
                }
                if person {
                    frame.set(u as usize, v as usize, 0, true);
                }
                if bike {
                    frame.set(u as usize, v as usize, 1, true);
                }
            }
        }
        (frame, clipped)
    }
}

#[derive(Debug, Clone)]
pub struct RenderedMasks {
    pub sequence: MaskSequence,
    /// Set when any silhouette left the camera footprint.
    pub clipped: bool,
}

/// Masks for `steps` of `scene` seen by `camera` centred on `center`.
pub fn render_masks(
    scene: &Scene,
    camera: &CameraSpec,
    center: Point2,
    steps: std::ops::Range<usize>,
) -> Result<RenderedMasks> {
    camera.validate()?;
    if steps.is_empty() || steps.end > scene.len() {
        return Err(Error::InvalidParameter(format!(
            "steps {steps:?} outside scene of {} steps",
            scene.len()
        )));
    }
    let mut clipped = false;
    let frames = steps
        .map(|k| {
            let pose = scene.visible.then(|| (scene.clean[k], scene.headings[k]));
            let (f, c) = camera.render(center, pose);
            clipped |= c;
            f
        })
        .collect();
    Ok(RenderedMasks {
        sequence: MaskSequence::new(frames)?,
        clipped,
    })
}

/// MHI of one camera for the window ending at `step`: the camera is centred
/// on the current position and the ROI is built from the newest frame.
pub fn window_mhi(
    scene: &Scene,
    step: usize,
    camera: &CameraSpec,
    params: &MhiParams,
) -> Result<MotionHistoryImage> {
    params.validate()?;
    if step + 1 < params.m {
        return Err(Error::InvalidParameter(format!(
            "step {step} has fewer than M={} frames of history",
            params.m
        )));
    }
    let masks = render_masks(
        scene,
        camera,
        scene.clean[step],
        step + 1 - params.m..step + 1,
    )?;
    let newest = masks.sequence.frames.last().expect("non-empty");
    let full = BoundingBox::new(0.0, 0.0, camera.width as f64, camera.height as f64)?;
    let roi = match (newest.channel_bbox(0), newest.channel_bbox(1)) {
        (Some(p), Some(b)) => build_roi(&p, &b, params.f_b)?,
        (Some(only), None) | (None, Some(only)) => build_roi(&only, &only, params.f_b)?,
        (None, None) => full,
    };
    generate_mhi(&masks.sequence, &roi, params.width, params.height)
}

/// One sliding-window sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub scene_id: u32,
    pub step: usize,
    pub leaf: MotionState,
    pub labels: Vec<LabelVector>,
    pub origin: Point2,
    pub heading: Heading,
    pub heading_degenerate: bool,
    pub input_world: Trajectory,
    pub truth_world: Trajectory,
    pub input_ego: Trajectory,
    pub truth_ego: Trajectory,
}

/// Current-sample steps that have a full input window and a full future.
pub fn admissible_steps(n_steps: usize) -> Option<std::ops::Range<usize>> {
    (n_steps > HISTORY_STEPS + FUTURE_STEPS).then(|| HISTORY_STEPS..n_steps - FUTURE_STEPS)
}

/// Number of windows of a scene of `duration` seconds at stride 1.
pub fn window_count(duration: f64) -> usize {
    let n = (duration / SCENE_STEP + 1e-9).floor() as usize + 1;
    admissible_steps(n).map_or(0, |r| r.len())
}

/// Builds one sample for the window whose current sample is `step`.
pub fn build_sample(scene: &Scene, step: usize) -> Result<WindowSample> {
    let range = admissible_steps(scene.len())
        .filter(|r| r.contains(&step))
        .ok_or_else(|| Error::InvalidParameter(format!("step {step} is not admissible")))?;
    debug_assert!(range.contains(&step));
    let input: Vec<Point2> = (0..INPUT_LEN).map(|j| scene.positions[step - j]).collect();
    let truth: Vec<Point2> = (1..=FORECAST_LEN)
        .map(|h| scene.positions[step + h * STEPS_PER_HORIZON])
        .collect();
    let input_world = Trajectory::from_positions(Frame::World, &input_offsets(), &input)?;
    let truth_world = Trajectory::from_positions(Frame::World, &forecast_offsets(), &truth)?;
    let est = estimate_heading(&input_world)?;
    let origin = scene.positions[step];
    let leaf = scene.labels[step];
    Ok(WindowSample {
        scene_id: scene.scene_id,
        step,
        leaf,
        labels: derive_sub_labels(leaf, leaf.is_turn())?,
        origin,
        heading: est.heading,
        heading_degenerate: est.degenerate,
        input_ego: world_to_ego(&input_world, origin, est.heading)?,
        truth_ego: world_to_ego(&truth_world, origin, est.heading)?,
        input_world,
        truth_world,
    })
}

/// Windows at every `stride`-th admissible step. Scenes shorter than 3.5 s
/// yield nothing and log a warning.
pub fn build_samples(scene: &Scene, stride: usize) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be positive".into()));
    }
    let Some(range) = admissible_steps(scene.len()) else {
        log::warn!(
            "scene {} lasts {:.2} s, too short for a window; skipped",
            scene.scene_id,
            scene.duration()
        );
        return Ok(Vec::new());
    };
    range
        .step_by(stride)
        .map(|k| build_sample(scene, k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Scenes per dominant state below which a stratum is pooled with the other
/// small strata.
pub const MIN_STRATUM: usize = 5;

/// Scene-level split stratified by dominant state.
///
/// Scenes of each stratum are shuffled with `seed`, then assigned one by one
/// to the split furthest below its target share of that stratum.
pub fn split_dataset(
    scenes: &[(u32, MotionState)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<BTreeMap<u32, Split>> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split ratios {ratios:?} must sum to 1"
        )));
    }
    if scenes.len() < MIN_STRATUM {
        return Err(Error::InsufficientData(format!(
            "need at least {MIN_STRATUM} scenes to split, got {}",
            scenes.len()
        )));
    }
    let mut ids: Vec<u32> = scenes.iter().map(|s| s.0).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::MalformedInput("duplicate scene id".into()));
    }
    let mut strata: BTreeMap<Option<MotionState>, Vec<u32>> = BTreeMap::new();
    let mut by_state: BTreeMap<MotionState, Vec<u32>> = BTreeMap::new();
    for &(id, s) in scenes {
        by_state.entry(s).or_default().push(id);
    }
    for (s, mut members) in by_state {
        members.sort_unstable();
        let key = (members.len() >= MIN_STRATUM).then_some(s);
        strata.entry(key).or_default().extend(members);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let mut counts = [0usize; 3];
        let n = members.len() as f64;
        for (i, id) in members.iter().enumerate() {
            let placed = i as f64 + 1.0;
            let best = (0..3)
                .max_by(|&a, &b| {
                    let da = ratios[a] * placed - counts[a] as f64;
                    let db = ratios[b] * placed - counts[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("three splits");
            counts[best] += 1;
            out.insert(*id, Split::ALL[best]);
        }
        debug_assert_eq!(counts.iter().sum::<usize>() as f64, n);
    }
    Ok(out)
}

/// Scenario families of the default corpus.
pub const FAMILIES: [&str; 6] = [
    "waiting",
    "departure",
    "arrival",
    "cruise",
    "left_turn",
    "right_turn",
];

/// Randomised script of family `i % 6`.
pub fn corpus_script(i: usize, rng: &mut ChaCha8Rng) -> ScenarioScript {
    let heading = rng.random_range(-PI..PI);
    let origin = Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
    let speed = rng.random_range(3.0..6.0);
    let segments = match i % FAMILIES.len() {
        0 => vec![Segment::wait(rng.random_range(4.0..6.0))],
        1 => {
            let a = rng.random_range(1.0..2.0);
            let t = rng.random_range(1.5..2.5);
            vec![
                Segment::wait(rng.random_range(1.5..3.0)),
                Segment::start(t, a),
                Segment::moving(rng.random_range(1.5..2.5), a * t),
            ]
        }
        2 => {
            let a = rng.random_range(1.5..2.5);
            vec![
                Segment::moving(rng.random_range(1.5..2.5), speed),
                Segment::stop(speed / a, a),
                Segment::wait(rng.random_range(1.5..2.5)),
            ]
        }
        3 => vec![Segment::moving(rng.random_range(4.0..5.0), speed)],
        k => {
            let state = if k == 4 {
                MotionState::Left
            } else {
                MotionState::Right
            };
            let radius = rng.random_range(4.0..10.0);
            vec![
                Segment::moving(rng.random_range(1.2..2.0), speed),
                Segment::turn(state, 0.5 * PI * radius / speed, speed, radius),
                Segment::moving(rng.random_range(1.2..2.0), speed),
            ]
        }
    };
    ScenarioScript {
        initial_position: origin,
        initial_heading: heading,
        segments,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: u32,
    /// Noise seed of the scene (global seed + scene id).
    pub seed: u64,
    pub split: Split,
    pub dominant_state: MotionState,
    pub script: ScenarioScript,
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub noise_sigma: f64,
    pub ratios: [f64; 3],
    pub cameras: Vec<CameraSpec>,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    /// Default corpus of `n_scenes` scenes, split 60/20/20.
    pub fn synthesize(n_scenes: usize, seed: u64, noise_sigma: f64) -> Result<(Self, Vec<Scene>)> {
        if n_scenes == 0 {
            return Err(Error::InvalidParameter(
                "at least one scene is required".into(),
            ));
        }
        let mut scripts = Vec::with_capacity(n_scenes);
        let mut scenes = Vec::with_capacity(n_scenes);
        for i in 0..n_scenes {
            let id = i as u32;
            let scene_seed = seed.wrapping_add(id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let script = corpus_script(i, &mut rng);
            scenes.push(generate_scene(id, &script, noise_sigma, scene_seed)?);
            scripts.push((scene_seed, script));
        }
        let ratios = [0.6, 0.2, 0.2];
        let dominant: Vec<(u32, MotionState)> = scenes
            .iter()
            .map(|s| (s.scene_id, s.dominant_state()))
            .collect();
        let splits = split_dataset(&dominant, ratios, seed)?;
        let entries = scenes
            .iter()
            .zip(scripts)
            .map(|(s, (scene_seed, script))| SceneEntry {
                scene_id: s.scene_id,
                seed: scene_seed,
                split: splits[&s.scene_id],
                dominant_state: s.dominant_state(),
                script,
            })
            .collect();
        Ok((
            Self {
                format_version: MANIFEST_VERSION,
                seed,
                noise_sigma,
                ratios,
                cameras: default_cameras().to_vec(),
                scenes: entries,
            },
            scenes,
        ))
    }

    pub fn regenerate(&self) -> Result<Vec<Scene>> {
        self.scenes
            .iter()
            .map(|e| generate_scene(e.scene_id, &e.script, self.noise_sigma, e.seed))
            .collect()
    }

    pub fn split_of(&self, scene_id: u32) -> Option<Split> {
        self.scenes
            .iter()
            .find(|e| e.scene_id == scene_id)
            .map(|e| e.split)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(json)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Writes `trajectory.csv`, `labels.csv` and, when `cameras` is given, one
/// mask PNG per frame and camera (camera centred on the scene's mean
/// position) under `dir/{scene_id}/`.
pub fn write_scene_files(dir: &Path, scene: &Scene, cameras: Option<&[CameraSpec]>) -> Result<()> {
    let id = scene.scene_id.to_string();
    let sdir = dir.join(&id);
    std::fs::create_dir_all(&sdir)?;
    let traj = scene.world_trajectory();
    write_trajectory_csv_file(&sdir.join("trajectory.csv"), &id, &traj)?;
    let rows = scene
        .labels
        .iter()
        .enumerate()
        .map(|(k, &l)| LabelRow::new(&id, scene.time(k), l))
        .collect::<Result<Vec<_>>>()?;
    write_labels_csv(
        std::io::BufWriter::new(std::fs::File::create(sdir.join("labels.csv"))?),
        &rows,
    )?;
    if let Some(cams) = cameras {
        let n = scene.clean.len() as f64;
        let center = scene.clean.iter().fold(Point2::ORIGIN, |a, p| a + *p) * (1.0 / n);
        let mdir = sdir.join("masks");
        std::fs::create_dir_all(&mdir)?;
        for (ci, cam) in cams.iter().enumerate() {
            let masks = render_masks(scene, cam, center, 0..scene.len())?;
            if masks.clipped {
                log::warn!(
                    "scene {id}: silhouettes leave the footprint of camera {}",
                    ci + 1
                );
            }
            for (k, f) in masks.sequence.frames.iter().enumerate() {
                let file = std::fs::File::create(mdir.join(mask_file_name(&id, k, ci as u8 + 1)))?;
                write_mask_png(std::io::BufWriter::new(file), f)?;
            }
        }
    }
    Ok(())
}

fn write_trajectory_csv_file(path: &Path, id: &str, traj: &Trajectory) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    crate::geometry::write_trajectory_csv(f, &[(id, traj)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(segments: Vec<Segment>) -> ScenarioScript {
        ScenarioScript::new(segments)
    }

    #[test]
    fn wait_scene_is_fixed() {
        let s = generate_scene(0, &line(vec![Segment::wait(5.0)]), 0.0, 1).unwrap();
        assert_eq!(s.len(), 251);
        assert!(s.positions.iter().all(|p| *p == Point2::ORIGIN));
    }

    #[test]
    fn constant_velocity_steps() {
        let s = generate_scene(0, &line(vec![Segment::moving(1.0, 4.0)]), 0.0, 1).unwrap();
        for w in s.positions.windows(2) {
            assert!((w[1].x - w[0].x - 0.08).abs() < 1e-12);
            assert_eq!(w[1].y, 0.0);
        }
    }

    #[test]
    fn left_arc_endpoint() {
        let (r, v, t) = (5.0, 5.0, 1.57);
        let script = line(vec![Segment::turn(MotionState::Left, t, v, r)]);
        let s = generate_scene(0, &script, 0.0, 1).unwrap();
        let end = *s.clean.last().unwrap();
        assert!((v * t / r - PI / 2.0).abs() < 1e-3);
        let dtheta = v * s.duration() / r;
        assert!((s.headings.last().unwrap() - dtheta).abs() < 1e-12);
        // centre of the left-turn circle sits at (0, r)
        assert!((end.distance(Point2::new(0.0, r)) - r).abs() < 1e-6);
        let expected = Point2::new(r * dtheta.sin(), r * (1.0 - dtheta.cos()));
        assert!(end.distance(expected) < 1e-9);
    }

    #[test]
    fn ramps_follow_closed_form() {
        let script = line(vec![
            Segment::wait(1.0),
            Segment::start(2.0, 1.5),
            Segment::stop(3.0, 1.0),
        ]);
        let s = generate_scene(0, &script, 0.0, 1).unwrap();
        let at = |t: f64| (t / SCENE_STEP).round() as usize;
        assert!((s.speeds[at(2.0)] - 1.5).abs() < 1e-12);
        assert!((s.clean[at(3.0)].x - 0.5 * 1.5 * 4.0).abs() < 1e-12);
        // v0 = 3 m/s, decelerating at 1 m/s² stops after 3 s and 4.5 m
        assert!((s.clean[at(6.0)].x - (3.0 + 4.5)).abs() < 1e-9);
        assert_eq!(s.speeds[at(6.0)], 0.0);
        assert_eq!(s.labels[at(0.5)], MotionState::Wait);
        assert_eq!(s.labels[at(1.0)], MotionState::Wait);
        assert_eq!(s.labels[at(1.0) + 1], MotionState::Start);
    }

    #[test]
    fn illegal_transitions_are_rejected() {
        let bad = line(vec![Segment::wait(1.0), Segment::moving(1.0, 3.0)]);
        assert!(matches!(
            generate_scene(0, &bad, 0.0, 0),
            Err(Error::InvalidScript(_))
        ));
        let zero = line(vec![Segment::wait(0.0)]);
        assert!(matches!(
            generate_scene(0, &zero, 0.0, 0),
            Err(Error::InvalidScript(_))
        ));
    }

    #[test]
    fn noise_is_seeded() {
        let script = line(vec![Segment::moving(4.0, 4.0)]);
        let a = generate_scene(3, &script, 0.05, 10).unwrap();
        let b = generate_scene(3, &script, 0.05, 10).unwrap();
        let c = generate_scene(3, &script, 0.05, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.positions, c.positions);
        assert_eq!(a.clean, c.clean);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(3.5), 1);
        assert_eq!(window_count(4.5), 51);
        assert_eq!(window_count(3.0), 0);
        let s = generate_scene(0, &line(vec![Segment::moving(4.5, 3.0)]), 0.05, 2).unwrap();
        let samples = build_samples(&s, 1).unwrap();
        assert_eq!(samples.len(), 51);
        for w in &samples {
            assert_eq!(w.input_ego.samples[0].position, Point2::ORIGIN);
            assert_eq!(w.input_ego.samples[0].offset, 0.0);
        }
        let short = generate_scene(0, &line(vec![Segment::moving(3.0, 3.0)]), 0.0, 2).unwrap();
        assert!(build_samples(&short, 1).unwrap().is_empty());
    }

    #[test]
    fn sample_ground_truth_alignment() {
        let s = generate_scene(0, &line(vec![Segment::moving(4.0, 5.0)]), 0.0, 2).unwrap();
        let w = build_sample(&s, 60).unwrap();
        assert!(w.heading.radians().abs() < 1e-12);
        let first = w.truth_ego.samples[0].position;
        assert!((first.x - 0.5).abs() < 1e-9 && first.y.abs() < 1e-9);
        let last = w.input_ego.samples[INPUT_LEN - 1].position;
        assert!((last.x + 5.0).abs() < 1e-9);
    }

    #[test]
    fn standstill_masks_repeat() {
        let s = generate_scene(0, &line(vec![Segment::wait(1.0)]), 0.0, 0).unwrap();
        let cam = default_cameras()[0];
        let m = render_masks(&s, &cam, Point2::ORIGIN, 0..20).unwrap();
        assert!(!m.clipped);
        let first = &m.sequence.frames[0];
        assert!(first.channel_bbox(0).is_some() && first.channel_bbox(1).is_some());
        assert!(m.sequence.frames.iter().all(|f| f == first));
    }

    #[test]
    fn empty_scene_renders_nothing() {
        let s = generate_scene(0, &line(vec![Segment::moving(1.0, 3.0)]), 0.0, 0)
            .unwrap()
            .without_cyclist();
        let m = render_masks(&s, &default_cameras()[1], Point2::ORIGIN, 0..s.len()).unwrap();
        assert!(m
            .sequence
            .frames
            .iter()
            .all(|f| f.data().iter().all(|&v| v == 0)));
    }

    #[test]
    fn centroid_tracks_projection() {
        let script = ScenarioScript {
            initial_position: Point2::new(-1.5, 0.4),
            initial_heading: 0.3,
            segments: vec![Segment::moving(1.0, 3.0)],
        };
        let s = generate_scene(0, &script, 0.0, 0).unwrap();
        for cam in default_cameras() {
            let m = render_masks(&s, &cam, Point2::ORIGIN, 0..s.len()).unwrap();
            for (k, f) in m.sequence.frames.iter().enumerate() {
                let (cu, cv) = f.channel_centroid(0).unwrap();
                let (pu, pv) = cam.project(Point2::ORIGIN, s.clean[k]);
                assert!((cu - pu).hypot(cv - pv) < 1.0, "frame {k}");
            }
        }
    }

    #[test]
    fn clipping_is_flagged() {
        let s = generate_scene(0, &line(vec![Segment::moving(2.0, 5.0)]), 0.0, 0).unwrap();
        let m = render_masks(&s, &default_cameras()[0], Point2::ORIGIN, 0..s.len()).unwrap();
        assert!(m.clipped);
    }

    #[test]
    fn window_mhi_is_quantised() {
        let s = generate_scene(0, &line(vec![Segment::moving(1.5, 4.0)]), 0.0, 0).unwrap();
        let p = MhiParams {
            width: 32,
            height: 32,
            ..Default::default()
        };
        let mhi = window_mhi(&s, 60, &default_cameras()[0], &p).unwrap();
        assert!(mhi.data().contains(&1.0));
        for &v in mhi.data() {
            let k = (v as f64 * 50.0).round();
            assert!((v as f64 - k / 50.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_examples() {
        let same: Vec<(u32, MotionState)> = (0..10).map(|i| (i, MotionState::Move)).collect();
        let s = split_dataset(&same, [0.6, 0.2, 0.2], 3).unwrap();
        let count = |sp: Split| s.values().filter(|&&v| v == sp).count();
        assert_eq!(
            (
                count(Split::Train),
                count(Split::Validation),
                count(Split::Test)
            ),
            (6, 2, 2)
        );

        let mixed: Vec<(u32, MotionState)> = (0..20)
            .map(|i| {
                (
                    i,
                    if i % 2 == 0 {
                        MotionState::Wait
                    } else {
                        MotionState::Left
                    },
                )
            })
            .collect();
        let s = split_dataset(&mixed, [0.6, 0.2, 0.2], 3).unwrap();
        for sp in Split::ALL {
            let members: Vec<_> = mixed.iter().filter(|(id, _)| s[id] == sp).collect();
            let waits = members
                .iter()
                .filter(|(_, st)| *st == MotionState::Wait)
                .count() as i64;
            let others = members.len() as i64 - waits;
            assert!((waits - others).abs() <= 1, "{sp:?}");
        }
        assert_eq!(split_dataset(&mixed, [0.6, 0.2, 0.2], 3).unwrap(), s);
        assert!(matches!(
            split_dataset(&mixed[..4], [0.6, 0.2, 0.2], 3),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn manifest_regenerates_scenes() {
        let (m, scenes) = DatasetManifest::synthesize(12, 7, 0.05).unwrap();
        assert_eq!(m.scenes.len(), 12);
        assert_eq!(m.regenerate().unwrap(), scenes);
        let back = DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for (e, s) in m.scenes.iter().zip(&scenes) {
            assert!(s.duration() >= 3.5, "scene {}", e.scene_id);
        }
    }

    use proptest::prelude::{any, prop_assert, proptest};

    proptest! {
        #[test]
        fn corpus_scenes_are_continuous(i in 0usize..60, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let script = corpus_script(i, &mut rng);
            script.validate().unwrap();
            let s = generate_scene(0, &script, 0.0, seed).unwrap();
            let vmax = s.speeds.iter().copied().fold(0.0, f64::max);
            prop_assert!(s.max_step_displacement() <= vmax * SCENE_STEP + 1e-9);
            prop_assert!(s.duration() >= 3.5);
        }

        #[test]
        fn splits_are_disjoint_and_complete(n in 5usize..80, seed in any::<u64>()) {
            let scenes: Vec<(u32, MotionState)> = (0..n as u32).map(|i| (i, MotionState::ALL[(i as usize * 7) % 6])).collect();
            let s = split_dataset(&scenes, [0.6, 0.2, 0.2], seed).unwrap();
            prop_assert!(s.len() == n);
        }
    }
}
