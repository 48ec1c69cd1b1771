//! Five digits mounted on a palm: whole-hand FK/IK, keypoints and the
//! flexion-dependent MCP abduction limits.
//!
//! Hand frame: x distal, y palmar, z toward the thumb side. Digits are
//! ordered thumb (0), index, middle, ring, pinky (4). For the thumb, `q1` is
//! the abduction angle of the base joint and the flexion stack has no MCP
//! abduction.

mod limits;
mod thumb;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finger::{
    finger_fk_detailed, finger_ik_detailed, link_keypoints, link_keypoints_jacobian, ActuatorState, DigitKeypoints,
    FingerError, FingerGeometry, FingerJointState, FkSolution, IkSolution, KEYPOINTS_PER_DIGIT,
};
use crate::math::{is_rotation, rot_axis, RigidTransform};

pub use limits::{clamp_command, coupled_mcp_limit, CoupledLimitMap, McpTaper};
pub use thumb::{thumb_fk, thumb_ik, thumb_residuals, ThumbAbduction};

pub const DIGITS: usize = 5;
pub const THUMB: usize = 0;
pub const JOINTS: usize = DIGITS * 4;
pub const ACTUATORS: usize = DIGITS * 3;
pub const DIGIT_NAMES: [&str; DIGITS] = ["thumb", "index", "middle", "ring", "pinky"];
pub const KEYPOINT_NAMES: [&str; KEYPOINTS_PER_DIGIT] = ["mcp", "pip", "dip", "tip"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandError {
    #[error("{}: {source}", DIGIT_NAMES[*.digit])]
    Digit {
        digit: usize,
        #[source]
        source: FingerError,
    },
    #[error("invalid hand geometry: {0}")]
    InvalidGeometry(String),
}

impl HandError {
    pub fn finger_error(&self) -> Option<&FingerError> {
        match self {
            HandError::Digit { source, .. } => Some(source),
            HandError::InvalidGeometry(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandJointState {
    pub digits: [FingerJointState; DIGITS],
}

impl HandJointState {
    /// Joint vector ordered digit-major: `[thumb q1..q4, index q1..q4, ...]`.
    pub fn to_array(&self) -> [f64; JOINTS] {
        let mut out = [0.0; JOINTS];
        for (d, q) in self.digits.iter().enumerate() {
            out[4 * d..4 * d + 4].copy_from_slice(&q.as_array());
        }
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), JOINTS, "hand joint vector needs {JOINTS} entries");
        let mut s = Self::default();
        for d in 0..DIGITS {
            s.digits[d] = FingerJointState::new(v[4 * d], v[4 * d + 1], v[4 * d + 2], v[4 * d + 3]);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandActuatorState {
    pub digits: [ActuatorState; DIGITS],
}

impl HandActuatorState {
    pub fn to_array(&self) -> [f64; ACTUATORS] {
        let mut out = [0.0; ACTUATORS];
        for (d, a) in self.digits.iter().enumerate() {
            out[3 * d..3 * d + 3].copy_from_slice(&a.as_array());
        }
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), ACTUATORS, "hand actuator vector needs {ACTUATORS} entries");
        let mut s = Self::default();
        for d in 0..DIGITS {
            s.digits[d] = ActuatorState::new(v[3 * d], v[3 * d + 1], v[3 * d + 2]);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub label: String,
    #[serde(rename = "position_m")]
    pub position: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandGeometry {
    pub digits: [FingerGeometry; DIGITS],
    /// Digit base frames in the hand frame.
    pub mounts: [RigidTransform; DIGITS],
    pub thumb_abduction: ThumbAbduction,
    pub palm_keypoints: Vec<LabeledPoint>,
    pub limit_map: CoupledLimitMap,
}

/// Every keypoint of the hand in the hand frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub digits: [DigitKeypoints; DIGITS],
    pub palm: Vec<LabeledPoint>,
}

impl KeypointSet {
    pub fn point(&self, digit: usize, keypoint: usize) -> Vector3<f64> {
        self.digits[digit].as_array()[keypoint]
    }

    /// `(label, position)` for every digit keypoint followed by the palm points.
    pub fn labeled(&self) -> Vec<(String, Vector3<f64>)> {
        let mut out = Vec::with_capacity(DIGITS * KEYPOINTS_PER_DIGIT + self.palm.len());
        for (d, kp) in self.digits.iter().enumerate() {
            for (k, p) in kp.as_array().iter().enumerate() {
                out.push((keypoint_label(d, k), *p));
            }
        }
        out.extend(self.palm.iter().map(|p| (p.label.clone(), p.position)));
        out
    }
}

pub fn keypoint_label(digit: usize, keypoint: usize) -> String {
    format!("{}_{}", DIGIT_NAMES[digit], KEYPOINT_NAMES[keypoint])
}

/// Inverse of [`keypoint_label`].
pub fn parse_keypoint_label(label: &str) -> Option<(usize, usize)> {
    let (digit, kp) = label.split_once('_')?;
    Some((
        DIGIT_NAMES.iter().position(|n| *n == digit)?,
        KEYPOINT_NAMES.iter().position(|n| *n == kp)?,
    ))
}

// Finger mounts of the reference hand: (position in the hand frame, scale).
const FINGER_MOUNTS: [([f64; 3], f64); 4] = [
    ([0.100, 0.0, 0.026], 1.0),
    ([0.104, 0.0, 0.004], 1.08),
    ([0.100, 0.0, -0.018], 1.0),
    ([0.090, 0.0, -0.038], 0.85),
];
const THUMB_BASE: [f64; 3] = [0.045, 0.012, 0.035];
const THUMB_SCALE: f64 = 0.95;

impl HandGeometry {
    /// Reference hand within a 255 x 118 x 77 mm envelope.
    pub fn reference() -> Self {
        let thumb_abduction = ThumbAbduction::reference(THUMB_SCALE);
        let mut thumb = FingerGeometry::reference(THUMB_SCALE);
        thumb.joint_limits[0] = thumb_abduction.range;

        let (s30, c30) = 30f64.to_radians().sin_cos();
        let x = Vector3::new(c30, 0.0, s30);
        let y = Vector3::new(s30, 0.0, -c30);
        let r0 = Matrix3::from_columns(&[x, y, x.cross(&y)]);
        let r_thumb = r0 * rot_axis(&Vector3::x(), 40f64.to_radians());
        let thumb_mount = RigidTransform::from_isometry(&nalgebra::Isometry3::from_parts(
            nalgebra::Translation3::new(THUMB_BASE[0], THUMB_BASE[1], THUMB_BASE[2]),
            nalgebra::UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_thumb)),
        ));

        let mut digits = vec![thumb];
        let mut mounts = vec![thumb_mount];
        for (pos, scale) in FINGER_MOUNTS {
            digits.push(FingerGeometry::reference(scale));
            mounts.push(RigidTransform {
                translation_m: pos,
                rotation_rpy_rad: [0.0; 3],
            });
        }
        let digits: [FingerGeometry; DIGITS] = digits.try_into().expect("five digits");
        let mounts: [RigidTransform; DIGITS] = mounts.try_into().expect("five mounts");

        let static_limits = std::array::from_fn(|d| digits[d].joint_limits);
        let tapers = std::array::from_fn(|d| {
            (d != THUMB).then(|| McpTaper {
                abduction_half_range_rad: digits[d].joint_limits[0][1],
                full_flexion_rad: digits[d].joint_limits[1][1],
            })
        });
        Self {
            digits,
            mounts,
            thumb_abduction,
            palm_keypoints: vec![
                LabeledPoint {
                    label: "wrist".into(),
                    position: Vector3::zeros(),
                },
                LabeledPoint {
                    label: "palm_center".into(),
                    position: Vector3::new(0.055, 0.0, 0.0),
                },
            ],
            limit_map: CoupledLimitMap { static_limits, tapers },
        }
    }

    pub fn validate(&self) -> Result<(), HandError> {
        for (d, g) in self.digits.iter().enumerate() {
            g.validate().map_err(|source| HandError::Digit { digit: d, source })?;
        }
        for (d, m) in self.mounts.iter().enumerate() {
            let finite = m.translation_m.iter().chain(&m.rotation_rpy_rad).all(|v| v.is_finite());
            if !finite || !is_rotation(&m.rotation_matrix(), 1e-9) {
                return Err(HandError::InvalidGeometry(format!("mount of {} is not rigid", DIGIT_NAMES[d])));
            }
        }
        let ab = &self.thumb_abduction;
        if (ab.axis.norm() - 1.0).abs() > 1e-9 || (ab.slider_direction.norm() - 1.0).abs() > 1e-9 {
            return Err(HandError::InvalidGeometry("thumb axes must be unit vectors".into()));
        }
        if !(ab.range[0] < ab.range[1]) || !(ab.travel[0] < ab.travel[1]) {
            return Err(HandError::InvalidGeometry("thumb abduction range or travel is empty".into()));
        }
        if ab.residual(0.0, 0.0).abs() > crate::finger::ZERO_CONFIG_TOLERANCE {
            return Err(HandError::InvalidGeometry("thumb abduction rest pose is inconsistent".into()));
        }
        if self.digits[THUMB].joint_limits[0] != ab.range {
            return Err(HandError::InvalidGeometry(
                "thumb q1 limits must equal the abduction range".into(),
            ));
        }
        self.limit_map.validate().map_err(HandError::InvalidGeometry)?;
        for d in 0..DIGITS {
            for j in 0..4 {
                let [lo, hi] = self.limit_map.static_limits[d][j];
                let [glo, ghi] = self.digits[d].joint_limits[j];
                if lo < glo || hi > ghi {
                    return Err(HandError::InvalidGeometry(format!(
                        "{} joint {}: command limits exceed the linkage range",
                        DIGIT_NAMES[d],
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rotation from the thumb flexion frame (after abduction) to the hand frame.
    fn thumb_rotation(&self, qa: f64) -> Matrix3<f64> {
        self.mounts[THUMB].rotation_matrix() * rot_axis(&self.thumb_abduction.axis, qa)
    }

    /// Rotation taking digit-local keypoints into the hand frame.
    fn digit_rotation(&self, digit: usize, q: &FingerJointState) -> Matrix3<f64> {
        if digit == THUMB {
            self.thumb_rotation(q.q1)
        } else {
            self.mounts[digit].rotation_matrix()
        }
    }
}

fn flexion_stack(digit: usize, q: &FingerJointState) -> FingerJointState {
    if digit == THUMB {
        FingerJointState { q1: 0.0, ..*q }
    } else {
        *q
    }
}

/// Keypoints of one digit in the hand frame.
pub fn digit_keypoints(digit: usize, q: &FingerJointState, g: &HandGeometry) -> DigitKeypoints {
    let r = g.digit_rotation(digit, q);
    let t = g.mounts[digit].translation();
    let local = link_keypoints(&flexion_stack(digit, q), &g.digits[digit]);
    DigitKeypoints {
        mcp: r * local.mcp + t,
        pip: r * local.pip + t,
        dip: r * local.dip + t,
        tip: r * local.tip + t,
    }
}

pub fn hand_fk(q: &HandJointState, g: &HandGeometry) -> KeypointSet {
    KeypointSet {
        digits: std::array::from_fn(|d| digit_keypoints(d, &q.digits[d], g)),
        palm: g.palm_keypoints.clone(),
    }
}

/// `jac[d][k][j]`: derivative of keypoint `k` of digit `d` with respect to its joint `j`,
/// all joints treated as independent.
pub fn hand_keypoint_jacobian(
    q: &HandJointState,
    g: &HandGeometry,
) -> [[[Vector3<f64>; 4]; KEYPOINTS_PER_DIGIT]; DIGITS] {
    std::array::from_fn(|d| {
        let qd = &q.digits[d];
        let r = g.digit_rotation(d, qd);
        let local = link_keypoints_jacobian(&flexion_stack(d, qd), &g.digits[d]);
        let mut jac: [[Vector3<f64>; 4]; KEYPOINTS_PER_DIGIT] =
            std::array::from_fn(|k| std::array::from_fn(|j| r * local[k][j]));
        if d == THUMB {
            let axis = g.mounts[THUMB].rotation_matrix() * g.thumb_abduction.axis;
            let origin = g.mounts[THUMB].translation();
            let kp = digit_keypoints(d, qd, g).as_array();
            for k in 0..KEYPOINTS_PER_DIGIT {
                jac[k][0] = axis.cross(&(kp[k] - origin));
            }
        }
        jac
    })
}

/// Forward transmission of one digit (thumb handled by its own model).
pub fn digit_fk(
    digit: usize,
    d: &ActuatorState,
    g: &HandGeometry,
    warm: Option<&FingerJointState>,
    alpha_seed: Option<f64>,
) -> Result<FkSolution, HandError> {
    let r = if digit == THUMB {
        thumb_fk(d, &g.digits[THUMB], &g.thumb_abduction, warm, alpha_seed)
    } else {
        finger_fk_detailed(d, &g.digits[digit], warm, alpha_seed)
    };
    r.map_err(|source| HandError::Digit { digit, source })
}

/// Inverse transmission of one digit.
pub fn digit_ik(
    digit: usize,
    q: &FingerJointState,
    g: &HandGeometry,
    warm: Option<&ActuatorState>,
    alpha_seed: Option<f64>,
) -> Result<IkSolution, HandError> {
    let r = if digit == THUMB {
        thumb_ik(q, &g.digits[THUMB], &g.thumb_abduction, warm, alpha_seed)
    } else {
        finger_ik_detailed(q, &g.digits[digit], warm, alpha_seed)
    };
    r.map_err(|source| HandError::Digit { digit, source })
}

fn first_error<T>(results: Vec<Result<T, HandError>>) -> Result<Vec<T>, HandError> {
    results.into_iter().collect()
}

/// All 15 screw commands for a (clamped) joint command; digits solve in parallel.
pub fn hand_ik(
    q_cmd: &HandJointState,
    g: &HandGeometry,
    warm: Option<&HandActuatorState>,
) -> Result<HandActuatorState, HandError> {
    let results: Vec<_> = (0..DIGITS)
        .into_par_iter()
        .map(|d| digit_ik(d, &q_cmd.digits[d], g, warm.map(|w| &w.digits[d]), None).map(|s| s.actuators))
        .collect();
    let v = first_error(results)?;
    Ok(HandActuatorState {
        digits: std::array::from_fn(|d| v[d]),
    })
}

/// Joint state reached by all 15 screws; digits solve in parallel.
pub fn hand_fk_actuators(
    d: &HandActuatorState,
    g: &HandGeometry,
    warm: Option<&HandJointState>,
) -> Result<HandJointState, HandError> {
    let results: Vec<_> = (0..DIGITS)
        .into_par_iter()
        .map(|i| digit_fk(i, &d.digits[i], g, warm.map(|w| &w.digits[i]), None).map(|s| s.joints))
        .collect();
    let v = first_error(results)?;
    Ok(HandJointState {
        digits: std::array::from_fn(|i| v[i]),
    })
}
