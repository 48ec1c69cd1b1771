//! Synthetic glove and wrist data built from the robot's own kinematics.

use std::f64::consts::PI;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;

use crate::armik::{ready_pose, ArmIkConfig, ArmModel};
use crate::hand::{clamp_command, hand_fk, HandGeometry, HandJointState, DIGITS, THUMB};
use crate::io::{ArmConfigFile, WristSample};
use crate::retarget::{couple, HumanHandFrame, KeyvectorSpec, LandmarkPose, RetargetConfig, RetargetError, LANDMARKS};
use crate::runtime::{ArmSetup, Mode, Session};

pub const GLOVE_RATE_HZ: f64 = 120.0;
pub const WRIST_RATE_HZ: f64 = 50.0;
/// Human hand size relative to the robot hand.
pub const HUMAN_SCALE: f64 = 1.1;
pub const PINCH_CYCLES: usize = 5;
/// Robot thumb-index tip distance at the closed end of the synthetic pinch.
pub const PINCH_ROBOT_GAP_M: f64 = 0.0115;

/// Thumb `[q1, q2, q3]` and index `[q2, q3]` of a pose with the two tips about 1 mm apart.
const PINCH_CONTACT: [f64; 5] = [0.87, -0.05, 1.6, 1.32, 1.37];

/// Clamps `q` into the coupled limits and sets every DIP from its PIP.
pub fn feasible_command(q: &HandJointState, g: &HandGeometry) -> Result<HandJointState, RetargetError> {
    let q = couple(&clamp_command(q, &g.limit_map), g)?.0;
    Ok(clamp_command(&q, &g.limit_map))
}

/// Uniform over the static box of the independent joints, then made feasible.
pub fn random_command(rng: &mut impl Rng, g: &HandGeometry) -> HandJointState {
    let mut q = HandJointState::default();
    for d in 0..DIGITS {
        let l = g.limit_map.static_limits[d];
        q.digits[d].q1 = rng.gen_range(l[0][0]..=l[0][1]);
        q.digits[d].q2 = rng.gen_range(l[1][0]..=l[1][1]);
        q.digits[d].q3 = rng.gen_range(l[2][0]..=l[2][1]);
    }
    feasible_command(&q, g).expect("coupling is defined on the whole PIP range")
}

/// Glove frame whose landmarks are the robot keypoints at `q`, scaled about
/// the hand origin. Each `mc` landmark is the digit's mount point.
pub fn synth_frame(q: &HandJointState, g: &HandGeometry, scale: f64, t: f64) -> HumanHandFrame {
    let kp = hand_fk(q, g);
    let mut landmarks = vec![LandmarkPose::default(); LANDMARKS];
    for d in 0..DIGITS {
        landmarks[5 * d].position = g.mounts[d].translation() * scale;
        for k in 0..4 {
            landmarks[5 * d + 1 + k].position = kp.point(d, k) * scale;
        }
    }
    HumanHandFrame { timestamp: t, landmarks }
}

/// Open hand at `s = 0`, thumb and index in contact at `s = 1`.
pub fn pinch_pose(s: f64, g: &HandGeometry) -> HandJointState {
    let p = PINCH_CONTACT;
    let mut q = HandJointState::default();
    q.digits[THUMB].q1 = s * p[0];
    q.digits[THUMB].q2 = s * p[1];
    q.digits[THUMB].q3 = s * p[2];
    q.digits[1].q2 = s * p[3];
    q.digits[1].q3 = s * p[4];
    feasible_command(&q, g).expect("pinch path is inside the limits")
}

pub fn tip_gap(q: &HandJointState, g: &HandGeometry, a: usize, b: usize) -> f64 {
    let kp = hand_fk(q, g);
    (kp.point(a, 3) - kp.point(b, 3)).norm()
}

/// Path parameter at which the robot thumb-index gap equals `gap`.
pub fn pinch_depth(gap: f64, g: &HandGeometry) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tip_gap(&pinch_pose(mid, g), g, THUMB, 1) > gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `PINCH_CYCLES` open-close cycles over `duration` seconds, sampled at the
/// glove rate. Returns the frames and the generating robot poses.
pub fn pinch_trajectory(g: &HandGeometry, duration: f64) -> (Vec<HumanHandFrame>, Vec<HandJointState>) {
    let depth = pinch_depth(PINCH_ROBOT_GAP_M, g);
    let period = duration / PINCH_CYCLES as f64;
    let n = (duration * GLOVE_RATE_HZ).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / GLOVE_RATE_HZ;
            let q = pinch_pose(depth * 0.5 * (1.0 - (2.0 * PI * t / period).cos()), g);
            (synth_frame(&q, g, HUMAN_SCALE, t), q)
        })
        .unzip()
}

/// Slow sway of the controller starting at the identity.
pub fn wrist_motion(duration: f64) -> Vec<WristSample> {
    let n = (duration * WRIST_RATE_HZ).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / WRIST_RATE_HZ;
            let w = 2.0 * PI * t / 4.0;
            let p = Vector3::new(0.05 * w.sin(), 0.03 * (1.0 - w.cos()), 0.02 * w.sin());
            let r = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, 0.2 * w.sin()));
            WristSample {
                timestamp: t,
                pose: if i == 0 {
                    Isometry3::identity()
                } else {
                    Isometry3::from_parts(Translation3::from(p), r)
                },
            }
        })
        .collect()
}

/// In-memory pinch session with the reference hand and arm.
pub fn pinch_session(duration: f64) -> Session {
    let g = HandGeometry::reference();
    let (glove, _) = pinch_trajectory(&g, duration);
    Session {
        hand_rate_hz: 100.0,
        arm_rate_hz: 50.0,
        mode: Mode::Replay,
        threads: 1,
        calibrate_on_first_frame: true,
        input_timeout_s: 0.1,
        retarget: RetargetConfig::for_hand(&g),
        keyvectors: KeyvectorSpec::standard(),
        geometry: g,
        glove,
        arm: Some(ArmSetup {
            config: ArmConfigFile::new(ArmModel::reference(), ArmIkConfig::default(), ready_pose()),
            wrist: wrist_motion(duration),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinch_reaches_requested_gap() {
        let g = HandGeometry::reference();
        let depth = pinch_depth(PINCH_ROBOT_GAP_M, &g);
        assert!(depth > 0.5 && depth < 1.0);
        assert_close!(tip_gap(&pinch_pose(depth, &g), &g, THUMB, 1), PINCH_ROBOT_GAP_M, 1e-9);
    }

    #[test]
    fn trajectory_crosses_epsilon() {
        let g = HandGeometry::reference();
        let (frames, poses) = pinch_trajectory(&g, 2.0);
        assert_eq!(frames.len(), 241);
        let human = |f: &HumanHandFrame| (f.position("thumb_tip").unwrap() - f.position("index_tip").unwrap()).norm();
        let gaps: Vec<f64> = frames.iter().map(human).collect();
        let min = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = gaps.iter().cloned().fold(0.0, f64::max);
        assert!(min < 0.02 && max > 0.02);
        assert_close!(min, HUMAN_SCALE * PINCH_ROBOT_GAP_M, 1e-4);
        for q in &poses {
            assert_eq!(clamp_command(q, &g.limit_map), *q);
        }
    }

    #[test]
    fn wrist_starts_at_identity() {
        let w = wrist_motion(1.0);
        assert_eq!(w[0].pose, Isometry3::identity());
        assert!(w.windows(2).all(|p| p[1].timestamp > p[0].timestamp));
    }
}
