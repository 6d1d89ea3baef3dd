//! Basic movement taxonomy and the state-machine subset algebra.
//!
//! ```text
//!           ┌ wait
//!  wm ──────┤            ┌ straight ── ssm: start | stop | move
//!           └ motion ────┤
//!                 (st)   └ turn ────── lr: left | right
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionState {
    Wait,
    Start,
    Stop,
    Move,
    Left,
    Right,
}

impl MotionState {
    pub const ALL: [MotionState; 6] = [
        MotionState::Wait,
        MotionState::Start,
        MotionState::Stop,
        MotionState::Move,
        MotionState::Left,
        MotionState::Right,
    ];

    /// States served by a Gaussian forecaster network (everything but wait).
    pub const FORECASTED: [MotionState; 5] = [
        MotionState::Start,
        MotionState::Stop,
        MotionState::Move,
        MotionState::Left,
        MotionState::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionState::Wait => "wait",
            MotionState::Start => "start",
            MotionState::Stop => "stop",
            MotionState::Move => "move",
            MotionState::Left => "left",
            MotionState::Right => "right",
        }
    }

    pub fn is_motion(self) -> bool {
        self != MotionState::Wait
    }

    pub fn is_turn(self) -> bool {
        matches!(self, MotionState::Left | MotionState::Right)
    }

    pub fn is_straight(self) -> bool {
        self.is_motion() && !self.is_turn()
    }
}

impl std::fmt::Display for MotionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MotionState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionState::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::MalformedInput(format!("unknown motion state '{s}'")))
    }
}

/// One of the four sub-state machines, each handled by its own classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubMachine {
    Wm,
    St,
    Lr,
    Ssm,
}

impl SubMachine {
    pub const ALL: [SubMachine; 4] = [
        SubMachine::Wm,
        SubMachine::St,
        SubMachine::Lr,
        SubMachine::Ssm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubMachine::Wm => "wm",
            SubMachine::St => "st",
            SubMachine::Lr => "lr",
            SubMachine::Ssm => "ssm",
        }
    }

    /// Class names in output order.
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            SubMachine::Wm => &["wait", "motion"],
            SubMachine::St => &["straight", "turn"],
            SubMachine::Lr => &["left", "right"],
            SubMachine::Ssm => &["start", "stop", "move"],
        }
    }

    pub fn n_classes(self) -> usize {
        self.classes().len()
    }

    pub fn class_index(self, name: &str) -> Option<usize> {
        self.classes().iter().position(|c| *c == name)
    }
}

impl std::fmt::Display for SubMachine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SubMachine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubMachine::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::MalformedInput(format!("unknown sub-machine '{s}'")))
    }
}

/// One-hot target for a sub-machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub machine: SubMachine,
    pub values: Vec<f64>,
}

impl LabelVector {
    pub fn one_hot(machine: SubMachine, class: usize) -> Self {
        let mut values = vec![0.0; machine.n_classes()];
        values[class] = 1.0;
        Self { machine, values }
    }

    pub fn class(&self) -> usize {
        self.values.iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    pub fn class_name(&self) -> &'static str {
        self.machine.classes()[self.class()]
    }
}

/// Labels for every sub-machine on the path from the root of the state
/// machine to `leaf`. `turning` marks a sample that is turning; it must agree
/// with the leaf (only `left`/`right` samples can turn).
pub fn derive_sub_labels(leaf: MotionState, turning: bool) -> Result<Vec<LabelVector>> {
    if turning && !leaf.is_turn() {
        return Err(Error::InconsistentLabel(format!(
            "a '{leaf}' sample cannot be turning"
        )));
    }
    let mut labels = Vec::with_capacity(3);
    if leaf == MotionState::Wait {
        labels.push(LabelVector::one_hot(SubMachine::Wm, 0));
        return Ok(labels);
    }
    labels.push(LabelVector::one_hot(SubMachine::Wm, 1));
    if leaf.is_turn() {
        labels.push(LabelVector::one_hot(SubMachine::St, 1));
        let lr = if leaf == MotionState::Left { 0 } else { 1 };
        labels.push(LabelVector::one_hot(SubMachine::Lr, lr));
    } else {
        labels.push(LabelVector::one_hot(SubMachine::St, 0));
        let ssm = match leaf {
            MotionState::Start => 0,
            MotionState::Stop => 1,
            _ => 2,
        };
        labels.push(LabelVector::one_hot(SubMachine::Ssm, ssm));
    }
    Ok(labels)
}

/// Label of `machine` for `leaf`, if the machine applies.
pub fn sub_label(leaf: MotionState, machine: SubMachine) -> Option<LabelVector> {
    derive_sub_labels(leaf, leaf.is_turn())
        .ok()?
        .into_iter()
        .find(|l| l.machine == machine)
}

/// Per-state weights over the six leaf states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateProbabilities {
    pub p: [f64; 6],
}

impl StateProbabilities {
    pub fn get(&self, s: MotionState) -> f64 {
        self.p[s.index()]
    }

    /// All mass on one state.
    pub fn certain(s: MotionState) -> Self {
        let mut p = [0.0; 6];
        p[s.index()] = 1.0;
        Self { p }
    }
}

fn check_distribution(name: &str, p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::InvalidDistribution(format!(
            "{name} has {} entries, expected {n}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidDistribution(format!(
            "{name} has negative or non-finite entries: {p:?}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// Multiplies probabilities along the state-machine path to each leaf and
/// renormalises the six products to sum to one.
pub fn compose_probabilities(
    p_wm: &[f64],
    p_st: &[f64],
    p_lr: &[f64],
    p_ssm: &[f64],
) -> Result<StateProbabilities> {
    check_distribution("p_wm", p_wm, 2)?;
    check_distribution("p_st", p_st, 2)?;
    check_distribution("p_lr", p_lr, 2)?;
    check_distribution("p_ssm", p_ssm, 3)?;

    let motion = p_wm[1];
    let straight = motion * p_st[0];
    let turn = motion * p_st[1];
    let mut p = [0.0; 6];
    p[MotionState::Wait.index()] = p_wm[0];
    p[MotionState::Start.index()] = straight * p_ssm[0];
    p[MotionState::Stop.index()] = straight * p_ssm[1];
    p[MotionState::Move.index()] = straight * p_ssm[2];
    p[MotionState::Left.index()] = turn * p_lr[0];
    p[MotionState::Right.index()] = turn * p_lr[1];
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(StateProbabilities { p })
}

/// One row of the labels CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub scene_id: String,
    pub offset_s: f64,
    pub leaf_state: MotionState,
    pub wm: Option<String>,
    pub st: Option<String>,
    pub lr: Option<String>,
    pub ssm: Option<String>,
}

impl LabelRow {
    pub fn new(scene_id: &str, offset_s: f64, leaf: MotionState) -> Result<Self> {
        let mut row = LabelRow {
            scene_id: scene_id.to_string(),
            offset_s,
            leaf_state: leaf,
            wm: None,
            st: None,
            lr: None,
            ssm: None,
        };
        for l in derive_sub_labels(leaf, leaf.is_turn())? {
            let name = Some(l.class_name().to_string());
            match l.machine {
                SubMachine::Wm => row.wm = name,
                SubMachine::St => row.st = name,
                SubMachine::Lr => row.lr = name,
                SubMachine::Ssm => row.ssm = name,
            }
        }
        Ok(row)
    }
}

/// Writes `scene_id, offset_s, leaf_state, wm, st, lr, ssm`; absent sub-labels
/// are empty fields.
pub fn write_labels_csv<W: Write>(writer: W, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: std::io::Read>(reader: R) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
