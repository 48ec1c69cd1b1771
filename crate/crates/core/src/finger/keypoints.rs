use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{FingerGeometry, FingerJointState};
use crate::math::{rot_y, rot_z};

pub const KEYPOINTS_PER_DIGIT: usize = 4;

/// Joint centres and fingertip of one digit, in the digit base frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitKeypoints {
    pub mcp: Vector3<f64>,
    pub pip: Vector3<f64>,
    pub dip: Vector3<f64>,
    pub tip: Vector3<f64>,
}

impl DigitKeypoints {
    pub fn as_array(&self) -> [Vector3<f64>; KEYPOINTS_PER_DIGIT] {
        [self.mcp, self.pip, self.dip, self.tip]
    }
}

pub fn link_keypoints(q: &FingerJointState, g: &FingerGeometry) -> DigitKeypoints {
    let r_mcp = rot_y(q.q1) * rot_z(q.q2);
    let r_pip = r_mcp * rot_z(q.q3);
    let r_dip = r_pip * rot_z(q.q4);
    let mcp = g.mcp_origin;
    let pip = mcp + r_mcp * g.pip_origin;
    let dip = pip + r_pip * g.dip_origin;
    let tip = dip + r_dip * g.tip_offset;
    DigitKeypoints { mcp, pip, dip, tip }
}

/// `jac[k][j]` is the derivative of keypoint `k` (mcp, pip, dip, tip) with
/// respect to joint `j` (q1..q4), treating all four joints as independent.
pub fn link_keypoints_jacobian(
    q: &FingerJointState,
    g: &FingerGeometry,
) -> [[Vector3<f64>; 4]; KEYPOINTS_PER_DIGIT] {
    let kp = link_keypoints(q, g);
    let ry = rot_y(q.q1);
    let axis_abd = Vector3::y();
    let axis_flex = ry * Vector3::z();
    let pts = kp.as_array();
    let mut jac = [[Vector3::zeros(); 4]; KEYPOINTS_PER_DIGIT];
    for (k, p) in pts.iter().enumerate() {
        // Joint j moves keypoint k only if the joint sits proximal to it.
        if k >= 1 {
            jac[k][0] = axis_abd.cross(&(p - kp.mcp));
            jac[k][1] = axis_flex.cross(&(p - kp.mcp));
        }
        if k >= 2 {
            jac[k][2] = axis_flex.cross(&(p - kp.pip));
        }
        if k >= 3 {
            jac[k][3] = axis_flex.cross(&(p - kp.dip));
        }
    }
    jac
}
