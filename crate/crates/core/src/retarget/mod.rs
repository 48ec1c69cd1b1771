//! Human-to-robot hand retargeting by keyvector matching.
//!
//! Fifteen keyvectors (vectors between named keypoints) are measured on the
//! human hand and matched on the robot hand by bounded least squares over
//! the independent joints. Close finger-to-thumb vectors are pulled tighter
//! than the human reference and close inter-finger vectors are pushed apart.

mod objective;
mod step;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finger::FingerError;
use crate::hand::{parse_keypoint_label, HandGeometry, DIGITS, DIGIT_NAMES, JOINTS};
use crate::kincore::SolverSettings;
use crate::math::RigidTransform;

pub use objective::{
    prepare_frame, residuals_and_jacobian, residuals_and_jacobian_without_chain_rule, PreparedFrame, RESIDUAL_ROWS,
};
pub(crate) use objective::couple;
pub use step::{retarget_step, RetargetState, StepReport};

pub const LANDMARKS: usize = 25;
pub const KEYVECTORS: usize = 15;
pub const LANDMARK_JOINTS: [&str; 5] = ["mc", "mcp", "pip", "dip", "tip"];
/// Human distances are floored here before normalization.
pub const MIN_DISTANCE: f64 = 1e-6;

/// Label of landmark `index` (digit-major, base to tip).
pub fn landmark_label(index: usize) -> String {
    format!("{}_{}", DIGIT_NAMES[index / 5], LANDMARK_JOINTS[index % 5])
}

pub fn landmark_index(label: &str) -> Option<usize> {
    let (digit, joint) = label.split_once('_')?;
    let d = DIGIT_NAMES.iter().position(|n| *n == digit)?;
    let j = LANDMARK_JOINTS.iter().position(|n| *n == joint)?;
    Some(5 * d + j)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetargetError {
    #[error("landmark '{0}' is not in the landmark map")]
    MissingLandmark(String),
    #[error("keypoint '{0}' is not a robot digit keypoint")]
    UnknownKeypoint(String),
    #[error("keyvector spec must have {KEYVECTORS} unique entries: {0}")]
    InvalidSpec(String),
    #[error("invalid retarget config: {0}")]
    InvalidConfig(String),
    #[error("retarget solve did not converge ({status}, cost {cost:.3e}); previous command held")]
    NoConvergence { status: String, cost: f64 },
    #[error("DIP coupling failed: {0}")]
    Coupling(#[from] FingerError),
    #[error(transparent)]
    Solver(#[from] crate::kincore::KinError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPose {
    #[serde(rename = "position_m")]
    pub position: Vector3<f64>,
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
}

impl Default for LandmarkPose {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl LandmarkPose {
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }
}

/// One glove sample: 25 landmark poses in the glove base frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanHandFrame {
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    pub landmarks: Vec<LandmarkPose>,
}

impl HumanHandFrame {
    pub fn position(&self, label: &str) -> Result<Vector3<f64>, RetargetError> {
        landmark_index(label)
            .and_then(|i| self.landmarks.get(i))
            .map(|l| l.position)
            .ok_or_else(|| RetargetError::MissingLandmark(label.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Membership {
    None,
    S1,
    S2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyvector {
    pub from: String,
    pub to: String,
    pub membership: Membership,
    /// Componentwise human-to-robot scaling, applied before normalization.
    pub beta: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyvectorSpec {
    pub keyvectors: Vec<Keyvector>,
}

impl KeyvectorSpec {
    /// Five MCP-to-tip vectors, four finger-tip-to-thumb-tip vectors and six
    /// vectors among the index, middle and ring PIPs and the pinky DIP.
    pub fn standard() -> Self {
        let mut kv = Vec::with_capacity(KEYVECTORS);
        let mut push = |from: String, to: String, membership| {
            kv.push(Keyvector {
                from,
                to,
                membership,
                beta: [1.0; 3],
            })
        };
        for name in DIGIT_NAMES {
            push(format!("{name}_mcp"), format!("{name}_tip"), Membership::None);
        }
        for name in &DIGIT_NAMES[1..] {
            push(format!("{name}_tip"), "thumb_tip".into(), Membership::S1);
        }
        let sep = ["index_pip", "middle_pip", "ring_pip", "pinky_dip"];
        for i in 0..sep.len() {
            for j in i + 1..sep.len() {
                push(sep[i].into(), sep[j].into(), Membership::S2);
            }
        }
        Self { keyvectors: kv }
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        if self.keyvectors.len() != KEYVECTORS {
            return Err(RetargetError::InvalidSpec(format!("got {}", self.keyvectors.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for k in &self.keyvectors {
            for label in [&k.from, &k.to] {
                if landmark_index(label).is_none() {
                    return Err(RetargetError::MissingLandmark(label.clone()));
                }
                if parse_keypoint_label(label).is_none() {
                    return Err(RetargetError::UnknownKeypoint(label.clone()));
                }
            }
            if k.from == k.to || !seen.insert((k.from.clone(), k.to.clone())) {
                return Err(RetargetError::InvalidSpec(format!("duplicate or degenerate {} -> {}", k.from, k.to)));
            }
            if k.membership == Membership::S1 && k.to != "thumb_tip" {
                return Err(RetargetError::InvalidSpec(format!("S1 vector {} must point to thumb_tip", k.from)));
            }
            if !k.beta.iter().all(|b| b.is_finite() && *b > 0.0) {
                return Err(RetargetError::InvalidSpec(format!("beta of {} -> {} must be positive", k.from, k.to)));
            }
        }
        Ok(())
    }

    /// Set every `beta` to the ratio of robot rest length to human length on `frame`.
    pub fn calibrate_beta(&mut self, frame: &HumanHandFrame, cfg: &RetargetConfig, g: &HandGeometry) -> Result<(), RetargetError> {
        let human = extract_keyvectors(frame, self, cfg)?;
        let rest = crate::hand::hand_fk(&crate::hand::HandJointState::default(), g);
        for (k, v) in self.keyvectors.iter_mut().zip(human) {
            let (fd, fk) = parse_keypoint_label(&k.from).ok_or_else(|| RetargetError::UnknownKeypoint(k.from.clone()))?;
            let (td, tk) = parse_keypoint_label(&k.to).ok_or_else(|| RetargetError::UnknownKeypoint(k.to.clone()))?;
            let robot = (rest.point(td, tk) - rest.point(fd, fk)).norm();
            let b = robot / v.norm().max(MIN_DISTANCE);
            k.beta = [b; 3];
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub far: f64,
    pub s1: f64,
    pub s2: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            far: 1.0,
            s1: 200.0,
            s2: 400.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetConfig {
    #[serde(rename = "epsilon_m")]
    pub epsilon: f64,
    #[serde(rename = "eta1_m")]
    pub eta1: f64,
    #[serde(rename = "eta2_m")]
    pub eta2: f64,
    pub lambda_smooth: f64,
    pub weights: BranchWeights,
    #[serde(rename = "q_lower_rad")]
    pub q_lower: Vec<f64>,
    #[serde(rename = "q_upper_rad")]
    pub q_upper: Vec<f64>,
    pub solver: SolverSettings,
    /// Glove base frame expressed in the robot hand frame; only the rotation matters.
    pub glove_to_hand: RigidTransform,
}

impl RetargetConfig {
    pub fn for_hand(g: &HandGeometry) -> Self {
        let mut q_lower = Vec::with_capacity(JOINTS);
        let mut q_upper = Vec::with_capacity(JOINTS);
        for d in 0..DIGITS {
            for [lo, hi] in g.limit_map.static_limits[d] {
                q_lower.push(lo);
                q_upper.push(hi);
            }
        }
        Self {
            epsilon: 0.02,
            eta1: 0.004,
            eta2: 0.02,
            lambda_smooth: 0.01,
            weights: BranchWeights::default(),
            q_lower,
            q_upper,
            solver: SolverSettings {
                max_iterations: 200,
                residual_tolerance: 1e-12,
                step_tolerance: 1e-12,
                initial_damping: 1e-3,
                finite_difference_step: 1e-6,
            },
            glove_to_hand: RigidTransform::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        let bad = |m: &str| Err(RetargetError::InvalidConfig(m.to_string()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon_m must be positive");
        }
        if !(self.eta1 >= 0.0) {
            return bad("eta1_m must be non-negative");
        }
        if !(self.eta2 > 0.0) {
            return bad("eta2_m must be positive");
        }
        if !(self.lambda_smooth >= 0.0) {
            return bad("lambda_smooth must be non-negative");
        }
        if self.q_lower.len() != JOINTS || self.q_upper.len() != JOINTS {
            return bad("q_lower_rad and q_upper_rad need 20 entries");
        }
        if self.q_lower.iter().zip(&self.q_upper).any(|(l, u)| !(l <= u)) {
            return bad("joint bounds are not ordered");
        }
        self.solver
            .validate()
            .map_err(|e| RetargetError::InvalidConfig(e.to_string()))
    }
}

/// Branch weight: close S1 and S2 vectors are emphasized.
pub fn weight(d: f64, membership: Membership, cfg: &RetargetConfig) -> f64 {
    if d > cfg.epsilon {
        return cfg.weights.far;
    }
    match membership {
        Membership::S1 => cfg.weights.s1,
        Membership::S2 => cfg.weights.s2,
        Membership::None => cfg.weights.far,
    }
}

/// Target magnitude along the unit human direction. `beta` is the scalar
/// gain of the keyvector along that direction.
pub fn target_length(d: f64, membership: Membership, beta: f64, cfg: &RetargetConfig) -> f64 {
    if d > cfg.epsilon {
        return beta * d;
    }
    match membership {
        Membership::S1 => cfg.eta1,
        Membership::S2 => cfg.eta2,
        Membership::None => beta * d,
    }
}

/// Human keyvectors in the robot hand frame.
pub fn extract_keyvectors(
    frame: &HumanHandFrame,
    spec: &KeyvectorSpec,
    cfg: &RetargetConfig,
) -> Result<Vec<Vector3<f64>>, RetargetError> {
    let rot = cfg.glove_to_hand.rotation_matrix();
    let lookup = |label: &str| -> Result<Vector3<f64>, RetargetError> {
        let i = landmark_index(label).ok_or_else(|| RetargetError::MissingLandmark(label.to_string()))?;
        frame
            .landmarks
            .get(i)
            .map(|l| l.position)
            .ok_or_else(|| RetargetError::MissingLandmark(label.to_string()))
    };
    spec.keyvectors
        .iter()
        .map(|k| Ok(rot * (lookup(&k.to)? - lookup(&k.from)?)))
        .collect()
}
