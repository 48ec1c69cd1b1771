//! Weighted multi-task differential IK for a 7-DoF arm.
//!
//! Each control tick solves a small box-constrained QP for the joint velocity
//! that tracks a tool-pose error and an arm-angle (swivel) error, with
//! regularization and smoothing, inside velocity bounds that also keep the
//! next integrated position inside the joint limits.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{
    Cholesky, DMatrix, DVector, Isometry3, RowSVector, SMatrix, SVector, Translation3, UnitQuaternion, Vector3,
    Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{wrap_angle, RigidTransform};

pub const ARM_DOF: usize = 7;
pub type ArmVector = SVector<f64, ARM_DOF>;
pub type ToolJacobian = SMatrix<f64, 6, ARM_DOF>;
pub type AngleJacobian = RowSVector<f64, ARM_DOF>;

const ANGLE_FD_STEP: f64 = 1e-6;
const DEGENERATE_LENGTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArmError {
    #[error("shoulder-wrist axis is degenerate ({0})")]
    DegenerateAxis(&'static str),
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
    #[error("invalid arm IK config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmJoint {
    /// Joint frame in the parent frame at zero angle.
    pub origin: RigidTransform,
    /// Unit rotation axis in the joint frame.
    pub axis: [f64; 3],
    #[serde(rename = "limits_rad")]
    pub limits: [f64; 2],
    #[serde(rename = "velocity_limit_rad_s")]
    pub velocity_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub joints: Vec<ArmJoint>,
    /// Tool frame in the last joint frame.
    pub tool: RigidTransform,
    /// Joints whose frame origins serve as shoulder, elbow and wrist points.
    pub shoulder_joint: usize,
    pub elbow_joint: usize,
    pub wrist_joint: usize,
}

/// Modified DH row: `Rx(alpha) Tx(a) Tz(d)`.
fn dh_origin(a: f64, d: f64, alpha: f64) -> RigidTransform {
    RigidTransform {
        translation_m: [a, -alpha.sin() * d, alpha.cos() * d],
        rotation_rpy_rad: [alpha, 0.0, 0.0],
    }
}

impl ArmModel {
    /// A 7-DoF arm with FR3-like kinematics and limits.
    pub fn reference() -> Self {
        let dh = [
            (0.0, 0.333, 0.0),
            (0.0, 0.0, -FRAC_PI_2),
            (0.0, 0.316, FRAC_PI_2),
            (0.0825, 0.0, FRAC_PI_2),
            (-0.0825, 0.384, -FRAC_PI_2),
            (0.0, 0.0, FRAC_PI_2),
            (0.088, 0.0, FRAC_PI_2),
        ];
        let lower = [-2.7437, -1.7837, -2.9007, -3.0421, -2.8065, 0.5445, -3.0159];
        let upper = [2.7437, 1.7837, 2.9007, -0.1518, 2.8065, 4.5169, 3.0159];
        let vmax = [2.62, 2.62, 2.62, 2.62, 5.26, 4.18, 5.26];
        let joints = (0..ARM_DOF)
            .map(|i| ArmJoint {
                origin: dh_origin(dh[i].0, dh[i].1, dh[i].2),
                axis: [0.0, 0.0, 1.0],
                limits: [lower[i], upper[i]],
                velocity_limit: vmax[i],
            })
            .collect();
        Self {
            joints,
            tool: RigidTransform {
                translation_m: [0.0, 0.0, 0.107 + 0.1034],
                rotation_rpy_rad: [0.0, 0.0, -std::f64::consts::FRAC_PI_4],
            },
            shoulder_joint: 1,
            elbow_joint: 3,
            wrist_joint: 5,
        }
    }

    pub fn validate(&self) -> Result<(), ArmError> {
        let bad = |m: String| Err(ArmError::InvalidModel(m));
        if self.joints.len() != ARM_DOF {
            return bad(format!("need {ARM_DOF} joints, got {}", self.joints.len()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let n = Vector3::from(j.axis).norm();
            if (n - 1.0).abs() > 1e-9 {
                return bad(format!("joint {i} axis is not unit length"));
            }
            if !(j.limits[0] < j.limits[1]) {
                return bad(format!("joint {i} limits not ordered"));
            }
            if !(j.velocity_limit > 0.0) {
                return bad(format!("joint {i} velocity limit must be positive"));
            }
        }
        for (name, idx) in [
            ("shoulder_joint", self.shoulder_joint),
            ("elbow_joint", self.elbow_joint),
            ("wrist_joint", self.wrist_joint),
        ] {
            if idx >= ARM_DOF {
                return bad(format!("{name} out of range"));
            }
        }
        Ok(())
    }

    pub fn lower(&self) -> ArmVector {
        ArmVector::from_fn(|i, _| self.joints[i].limits[0])
    }

    pub fn upper(&self) -> ArmVector {
        ArmVector::from_fn(|i, _| self.joints[i].limits[1])
    }

    pub fn velocity_limits(&self) -> ArmVector {
        ArmVector::from_fn(|i, _| self.joints[i].velocity_limit)
    }
}

/// World frames of every joint (after its rotation) and of the tool.
pub struct ArmFrames {
    pub joints: [Isometry3<f64>; ARM_DOF],
    pub tool: Isometry3<f64>,
}

pub fn arm_fk(q: &ArmVector, model: &ArmModel) -> ArmFrames {
    let mut t = Isometry3::identity();
    let mut joints = [Isometry3::identity(); ARM_DOF];
    for (i, j) in model.joints.iter().enumerate() {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(j.axis));
        t = t * j.origin.to_isometry() * UnitQuaternion::from_axis_angle(&axis, q[i]);
        joints[i] = t;
    }
    ArmFrames {
        joints,
        tool: t * model.tool.to_isometry(),
    }
}

/// Geometric Jacobian of the tool frame: linear rows first, then angular.
pub fn tool_jacobian(q: &ArmVector, model: &ArmModel) -> ToolJacobian {
    let frames = arm_fk(q, model);
    let p = frames.tool.translation.vector;
    let mut j = ToolJacobian::zeros();
    for (i, joint) in model.joints.iter().enumerate() {
        let f = &frames.joints[i];
        let z = f.rotation * Vector3::from(joint.axis);
        let lin = z.cross(&(p - f.translation.vector));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// Position error followed by the rotation vector taking `current` to `target`, both in the base frame.
pub fn pose_error(current: &Isometry3<f64>, target: &Isometry3<f64>) -> Vector6<f64> {
    let dp = target.translation.vector - current.translation.vector;
    let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Signed swivel angle of elbow `e` about the line from `s` to `w`,
/// measured from the plane spanned by that line and `reference`.
pub fn swivel_angle(s: &Vector3<f64>, e: &Vector3<f64>, w: &Vector3<f64>, reference: &Vector3<f64>) -> Result<f64, ArmError> {
    let sw = w - s;
    let len = sw.norm();
    if len < DEGENERATE_LENGTH {
        return Err(ArmError::DegenerateAxis("shoulder and wrist coincide"));
    }
    let u = sw / len;
    let r = reference - u * u.dot(reference);
    if r.norm() < DEGENERATE_LENGTH {
        return Err(ArmError::DegenerateAxis("shoulder-wrist line is parallel to the reference direction"));
    }
    let se = e - s;
    let el = se - u * u.dot(&se);
    if el.norm() < DEGENERATE_LENGTH {
        return Err(ArmError::DegenerateAxis("elbow is collinear with shoulder and wrist"));
    }
    let r = r.normalize();
    Ok(u.dot(&r.cross(&el)).atan2(r.dot(&el)))
}

fn arm_angle_only(q: &ArmVector, model: &ArmModel, cfg: &ArmIkConfig) -> Result<f64, ArmError> {
    let f = arm_fk(q, model);
    let pos = |i: usize| f.joints[i].translation.vector;
    swivel_angle(
        &pos(model.shoulder_joint),
        &pos(model.elbow_joint),
        &pos(model.wrist_joint),
        &Vector3::from(cfg.reference_direction),
    )
}

/// Swivel angle and its central-difference Jacobian.
pub fn arm_angle(q: &ArmVector, model: &ArmModel, cfg: &ArmIkConfig) -> Result<(f64, AngleJacobian), ArmError> {
    let a = arm_angle_only(q, model, cfg)?;
    let mut j = AngleJacobian::zeros();
    for i in 0..ARM_DOF {
        let (mut qp, mut qm) = (*q, *q);
        qp[i] += ANGLE_FD_STEP;
        qm[i] -= ANGLE_FD_STEP;
        let d = wrap_angle(arm_angle_only(&qp, model, cfg)? - arm_angle_only(&qm, model, cfg)?);
        j[i] = d / (2.0 * ANGLE_FD_STEP);
    }
    Ok((a, j))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmIkConfig {
    /// Workspace scaling applied to the tool-pose error.
    pub lambda_scale: f64,
    /// Pose, arm-angle, regularization and smoothing weights.
    pub weights: [f64; 4],
    /// Per-row scaling of the pose task (linear xyz, angular xyz).
    #[serde(default = "unit_pose_weights")]
    pub pose_row_weights: [f64; 6],
    #[serde(rename = "dt_s")]
    pub dt: f64,
    #[serde(rename = "velocity_damper_margin_rad")]
    pub velocity_damper_margin: f64,
    #[serde(default = "unit_gain")]
    pub damper_gain: f64,
    /// Fraction of the pose and swivel errors requested per tick.
    #[serde(default = "half_gain")]
    pub task_gain: f64,
    /// Direction spanning the reference plane together with the shoulder-wrist line.
    pub reference_direction: [f64; 3],
    /// Desired swivel angle in that plane.
    #[serde(default, rename = "target_arm_angle_rad")]
    pub target_arm_angle: f64,
}

fn unit_pose_weights() -> [f64; 6] {
    [1.0; 6]
}

fn unit_gain() -> f64 {
    1.0
}

fn half_gain() -> f64 {
    0.5
}

impl Default for ArmIkConfig {
    fn default() -> Self {
        Self {
            lambda_scale: 1.0,
            weights: [1.0, 0.05, 1e-3, 1e-2],
            pose_row_weights: unit_pose_weights(),
            dt: 0.02,
            velocity_damper_margin: 0.05,
            damper_gain: 1.0,
            task_gain: half_gain(),
            reference_direction: [0.0, 0.0, 1.0],
            target_arm_angle: 0.0,
        }
    }
}

impl ArmIkConfig {
    pub fn validate(&self) -> Result<(), ArmError> {
        let bad = |m: &str| Err(ArmError::InvalidConfig(m.to_string()));
        if !self.weights.iter().chain(&self.pose_row_weights).all(|w| *w >= 0.0 && w.is_finite()) {
            return bad("weights must be non-negative");
        }
        if !(self.dt > 0.0) {
            return bad("dt_s must be positive");
        }
        if !(self.velocity_damper_margin >= 0.0) {
            return bad("velocity_damper_margin_rad must be non-negative");
        }
        if !(self.damper_gain > 0.0 && self.damper_gain <= 1.0) {
            return bad("damper_gain must be in (0, 1]");
        }
        if !(self.task_gain > 0.0 && self.task_gain <= 1.0) {
            return bad("task_gain must be in (0, 1]");
        }
        if !(self.lambda_scale.is_finite()) {
            return bad("lambda_scale must be finite");
        }
        if Vector3::from(self.reference_direction).norm() < DEGENERATE_LENGTH {
            return bad("reference_direction must be non-zero");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: ArmVector,
    pub q_dot_prev: ArmVector,
}

/// Joint-velocity box that respects velocity limits and keeps one
/// integration step inside the position limits shrunk by the margin.
pub fn velocity_bounds(q: &ArmVector, model: &ArmModel, cfg: &ArmIkConfig) -> (ArmVector, ArmVector) {
    let (k, m, dt) = (cfg.damper_gain, cfg.velocity_damper_margin, cfg.dt);
    let mut lo = ArmVector::zeros();
    let mut hi = ArmVector::zeros();
    for (i, j) in model.joints.iter().enumerate() {
        let v = j.velocity_limit;
        let upper = v.min(k * (j.limits[1] - q[i] - m) / dt);
        let lower = (-v).max(k * (j.limits[0] - q[i] + m) / dt);
        hi[i] = upper;
        // Inside the margin band the dampers can cross; keep the box valid.
        lo[i] = lower.min(upper);
    }
    (lo, hi)
}

/// Quadratic form `0.5 x^T H x - b^T x` of the arm objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmQp {
    pub hessian: SMatrix<f64, ARM_DOF, ARM_DOF>,
    pub linear: ArmVector,
}

impl ArmQp {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        j_e: &ToolJacobian,
        dx: &Vector6<f64>,
        j_a: &AngleJacobian,
        d_alpha: f64,
        q_dot_prev: &ArmVector,
        cfg: &ArmIkConfig,
    ) -> Self {
        let [w0, w1, w2, w3] = cfg.weights;
        let wd = Vector6::from(cfg.pose_row_weights);
        let wj = SMatrix::<f64, 6, ARM_DOF>::from_fn(|r, c| wd[r] * j_e[(r, c)]);
        let hessian = 2.0 * (w0 * j_e.transpose() * wj + w1 * j_a.transpose() * j_a)
            + 2.0 * (w2 + w3) * SMatrix::<f64, ARM_DOF, ARM_DOF>::identity();
        let target = dx.component_mul(&wd) * cfg.lambda_scale;
        let linear = 2.0 * (w0 * j_e.transpose() * target + w1 * j_a.transpose() * d_alpha + w3 * q_dot_prev);
        Self { hessian, linear }
    }

    pub fn gradient(&self, x: &ArmVector) -> ArmVector {
        self.hessian * x - self.linear
    }

    pub fn objective(&self, x: &ArmVector) -> f64 {
        0.5 * x.dot(&(self.hessian * x)) - self.linear.dot(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub q_dot: ArmVector,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Infinity norm of the projected-gradient step `x - P(x - grad)`.
pub fn kkt_residual(qp: &ArmQp, x: &ArmVector, lo: &ArmVector, hi: &ArmVector) -> f64 {
    let g = qp.gradient(x);
    (0..ARM_DOF)
        .map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs())
        .fold(0.0, f64::max)
}

const QP_MAX_ITERATIONS: usize = 64;

/// Primal active-set solve of the box QP from a feasible start.
pub fn solve_box_qp(qp: &ArmQp, lo: &ArmVector, hi: &ArmVector, start: &ArmVector) -> QpSolution {
    let mut x = ArmVector::from_fn(|i, _| start[i].clamp(lo[i], hi[i]));
    // 0 free, -1 at lower bound, +1 at upper bound.
    let mut active = [0i8; ARM_DOF];
    for i in 0..ARM_DOF {
        if lo[i] == hi[i] {
            active[i] = -1;
            x[i] = lo[i];
        }
    }
    let scale = 1.0 + qp.linear.amax() + qp.hessian.amax();
    let mut iterations = 0;
    // Set after an unblocked step: x minimizes over the current free set.
    let mut stationary = false;
    while iterations < QP_MAX_ITERATIONS {
        iterations += 1;
        let free: Vec<usize> = (0..ARM_DOF).filter(|&i| active[i] == 0).collect();
        let mut p = ArmVector::zeros();
        if !free.is_empty() && !stationary {
            let n = free.len();
            let h = DMatrix::from_fn(n, n, |r, c| qp.hessian[(free[r], free[c])]);
            let g = qp.gradient(&x);
            let rhs = DVector::from_fn(n, |r, _| -g[free[r]]);
            let step = match Cholesky::new(h.clone()) {
                Some(ch) => ch.solve(&rhs),
                // Singular without regularization: take the minimum-norm step.
                None => h
                    .svd(true, true)
                    .solve(&rhs, 1e-12 * scale)
                    .unwrap_or_else(|_| DVector::zeros(n)),
            };
            for (k, &i) in free.iter().enumerate() {
                p[i] = step[k];
            }
        }
        if stationary || p.amax() <= 1e-15 * (1.0 + x.amax()) {
            stationary = false;
            let g = qp.gradient(&x);
            let mut worst = None;
            let mut worst_v = 1e-13 * scale;
            for i in 0..ARM_DOF {
                if lo[i] == hi[i] {
                    continue;
                }
                let v = match active[i] {
                    -1 => -g[i],
                    1 => g[i],
                    _ => 0.0,
                };
                if v > worst_v {
                    worst_v = v;
                    worst = Some(i);
                }
            }
            match worst {
                Some(i) => active[i] = 0,
                None => break,
            }
            continue;
        }
        let mut t = 1.0;
        let mut block = None;
        for i in 0..ARM_DOF {
            if active[i] != 0 || p[i] == 0.0 {
                continue;
            }
            let (limit, side) = if p[i] < 0.0 { (lo[i], -1) } else { (hi[i], 1) };
            let ti = (limit - x[i]) / p[i];
            if ti < t {
                t = ti.max(0.0);
                block = Some((i, side));
            }
        }
        x += p * t;
        match block {
            Some((i, side)) => active[i] = side,
            None => stationary = true,
        }
        for i in 0..ARM_DOF {
            match active[i] {
                -1 => x[i] = lo[i],
                1 => x[i] = hi[i],
                _ => x[i] = x[i].clamp(lo[i], hi[i]),
            }
        }
    }
    QpSolution {
        kkt_residual: kkt_residual(qp, &x, lo, hi),
        q_dot: x,
        iterations,
    }
}

/// Minimize the weighted task objective inside the velocity box.
#[allow(clippy::too_many_arguments)]
pub fn solve_arm_qp(
    j_e: &ToolJacobian,
    dx: &Vector6<f64>,
    j_a: &AngleJacobian,
    d_alpha: f64,
    state: &ArmState,
    bounds: &(ArmVector, ArmVector),
    cfg: &ArmIkConfig,
) -> QpSolution {
    let qp = ArmQp::build(j_e, dx, j_a, d_alpha, &state.q_dot_prev, cfg);
    solve_box_qp(&qp, &bounds.0, &bounds.1, &ArmVector::zeros())
}

pub fn integrate(state: &ArmState, q_dot: &ArmVector, dt: f64) -> ArmState {
    ArmState {
        q: state.q + q_dot * dt,
        q_dot_prev: *q_dot,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmStepReport {
    pub state: ArmState,
    pub q_dot: ArmVector,
    pub pose_error: Vector6<f64>,
    pub arm_angle: f64,
    pub kkt_residual: f64,
}

/// One tick: scaled pose and swivel errors become desired rates over `dt`, the QP
/// picks the joint velocity, and the state is integrated.
pub fn arm_step(state: &ArmState, target: &Isometry3<f64>, model: &ArmModel, cfg: &ArmIkConfig) -> Result<ArmStepReport, ArmError> {
    let frames = arm_fk(&state.q, model);
    let err = pose_error(&frames.tool, target);
    let j_e = tool_jacobian(&state.q, model);
    let (alpha, j_a) = arm_angle(&state.q, model, cfg)?;
    let d_alpha = wrap_angle(cfg.target_arm_angle - alpha);
    let bounds = velocity_bounds(&state.q, model, cfg);
    let rate = cfg.task_gain / cfg.dt;
    let sol = solve_arm_qp(&j_e, &(err * rate), &j_a, d_alpha * rate, state, &bounds, cfg);
    Ok(ArmStepReport {
        state: integrate(state, &sol.q_dot, cfg.dt),
        q_dot: sol.q_dot,
        pose_error: err,
        arm_angle: alpha,
        kkt_residual: sol.kkt_residual,
    })
}

/// Tool pose after applying a relative wrist motion to a start pose:
/// translation adds in the base frame, rotation composes on the left.
pub fn relative_target(start: &Isometry3<f64>, motion: &Isometry3<f64>) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::from(start.translation.vector + motion.translation.vector),
        motion.rotation * start.rotation,
    )
}

/// A comfortable configuration with the elbow up and the tool pointing down.
pub fn ready_pose() -> ArmVector {
    ArmVector::from_column_slice(&[0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rot_axis;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut impl Rng, lo: &ArmVector, hi: &ArmVector) -> ArmVector {
        ArmVector::from_fn(|i, _| rng.gen_range(lo[i]..=hi[i]))
    }

    fn inner(m: &ArmModel) -> (ArmVector, ArmVector) {
        let pad = ArmVector::repeat(0.1);
        (m.lower() + pad, m.upper() - pad)
    }

    #[test]
    fn jacobian_position_rows_match_differences() {
        let m = ArmModel::reference();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let (lo, hi) = inner(&m);
        for _ in 0..50 {
            let q = rand_vec(&mut rng, &lo, &hi);
            let j = tool_jacobian(&q, &m);
            for c in 0..ARM_DOF {
                let h = 1e-6;
                let (mut a, mut b) = (q, q);
                a[c] += h;
                b[c] -= h;
                let fd = (arm_fk(&a, &m).tool.translation.vector - arm_fk(&b, &m).tool.translation.vector) / (2.0 * h);
                assert!((fd - j.fixed_view::<3, 1>(0, c)).amax() < 1e-6);
                let ra = arm_fk(&a, &m).tool.rotation;
                let rb = arm_fk(&b, &m).tool.rotation;
                let w = (ra * rb.inverse()).scaled_axis() / (2.0 * h);
                assert!((w - j.fixed_view::<3, 1>(3, c)).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn joint_through_tool_point_has_no_linear_part() {
        // The last axis passes through the flange centre; a tool offset along it keeps that.
        let m = ArmModel::reference();
        let j = tool_jacobian(&ready_pose(), &m);
        assert!(j.fixed_view::<3, 1>(0, 6).norm() < 1e-12);
    }

    #[test]
    fn jacobian_rank() {
        let m = ArmModel::reference();
        let j = tool_jacobian(&ready_pose(), &m);
        let sv = j.svd(false, false).singular_values;
        assert!(sv.min() > 1e-3);
        assert_eq!(sv.len(), 6);
    }

    #[test]
    fn swivel_definition() {
        let s = Vector3::new(0.0, 0.0, 0.3);
        let w = Vector3::new(0.5, 0.0, 0.3);
        let up = Vector3::z();
        let e = Vector3::new(0.25, 0.0, 0.6);
        assert!(swivel_angle(&s, &e, &w, &up).unwrap().abs() < 1e-15);
        let u = (w - s).normalize();
        for delta in [0.3, -1.0, 2.5] {
            let er = s + rot_axis(&u, delta) * (e - s);
            assert_close!(swivel_angle(&s, &er, &w, &up).unwrap(), delta, 1e-12);
        }
        assert!(matches!(
            swivel_angle(&s, &Vector3::new(0.2, 0.0, 0.3), &w, &up),
            Err(ArmError::DegenerateAxis(_))
        ));
        assert!(swivel_angle(&s, &e, &s, &up).is_err());
    }

    #[test]
    fn arm_angle_jacobian_matches_differences() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let (lo, hi) = inner(&m);
        let mut checked = 0;
        while checked < 50 {
            let q = rand_vec(&mut rng, &lo, &hi);
            let Ok((_, j)) = arm_angle(&q, &m, &cfg) else { continue };
            for c in 0..ARM_DOF {
                let h = 1e-5;
                let (mut a, mut b) = (q, q);
                a[c] += h;
                b[c] -= h;
                let fd = wrap_angle(arm_angle(&a, &m, &cfg).unwrap().0 - arm_angle(&b, &m, &cfg).unwrap().0) / (2.0 * h);
                assert!((fd - j[c]).abs() < 1e-5, "col {c}: {fd} vs {}", j[c]);
            }
            checked += 1;
        }
    }

    #[test]
    fn velocity_bound_cases() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let centre = (m.lower() + m.upper()) / 2.0;
        let (lo, hi) = velocity_bounds(&centre, &m, &cfg);
        assert_eq!(hi, m.velocity_limits());
        assert_eq!(lo, -m.velocity_limits());
        let mut q = centre;
        q[2] = m.upper()[2] - cfg.velocity_damper_margin;
        let (_, hi) = velocity_bounds(&q, &m, &cfg);
        assert!(hi[2].abs() < 1e-12);
    }

    #[test]
    fn integration_stays_in_limits() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..100_000 {
            let q = rand_vec(&mut rng, &m.lower(), &m.upper());
            let (lo, hi) = velocity_bounds(&q, &m, &cfg);
            let qd = rand_vec(&mut rng, &lo, &hi);
            let next = integrate(&ArmState { q, q_dot_prev: qd }, &qd, cfg.dt).q;
            for i in 0..ARM_DOF {
                assert!(next[i] >= m.lower()[i] && next[i] <= m.upper()[i]);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_velocity() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let q = ready_pose();
        let state = ArmState { q, q_dot_prev: ArmVector::zeros() };
        let (_, ja) = arm_angle(&q, &m, &cfg).unwrap();
        let sol = solve_arm_qp(
            &tool_jacobian(&q, &m),
            &Vector6::zeros(),
            &ja,
            0.0,
            &state,
            &velocity_bounds(&q, &m, &cfg),
            &cfg,
        );
        assert_eq!(sol.q_dot, ArmVector::zeros());
    }

    #[test]
    fn pure_pose_task_matches_normal_equations() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig {
            weights: [1.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        let q = ready_pose();
        let j = tool_jacobian(&q, &m);
        let dx = Vector6::new(0.01, -0.02, 0.005, 0.02, 0.0, -0.01);
        let qp = ArmQp::build(&j, &dx, &AngleJacobian::zeros(), 0.0, &ArmVector::zeros(), &cfg);
        let big = ArmVector::repeat(1e3);
        let sol = solve_box_qp(&qp, &(-big), &big, &ArmVector::zeros());
        let jjt = j * j.transpose();
        let pinv = j.transpose() * jjt.try_inverse().unwrap() * dx;
        assert!((j * sol.q_dot - dx).amax() < 1e-9);
        assert!((sol.q_dot - pinv).amax() < 1e-9);
    }

    #[test]
    fn strictly_convex_solution_is_start_independent() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let q = ready_pose();
        let dx = Vector6::new(0.5, -0.3, 0.2, 1.0, -0.5, 0.3) / cfg.dt;
        let (_, ja) = arm_angle(&q, &m, &cfg).unwrap();
        let qp = ArmQp::build(&tool_jacobian(&q, &m), &dx, &ja, 0.3, &ArmVector::repeat(0.1), &cfg);
        let (lo, hi) = velocity_bounds(&q, &m, &cfg);
        let reference = solve_box_qp(&qp, &lo, &hi, &ArmVector::zeros()).q_dot;
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        for _ in 0..10 {
            let start = rand_vec(&mut rng, &lo, &hi);
            let s = solve_box_qp(&qp, &lo, &hi, &start);
            assert!((s.q_dot - reference).amax() < 1e-10);
        }
    }

    /// Minimize over the free coordinates for a fixed value of coordinate `k`.
    fn reduced_objective(qp: &ArmQp, k: usize, v: f64) -> f64 {
        let free: Vec<usize> = (0..ARM_DOF).filter(|&i| i != k).collect();
        let h = DMatrix::from_fn(6, 6, |r, c| qp.hessian[(free[r], free[c])]);
        let rhs = DVector::from_fn(6, |r, _| qp.linear[free[r]] - qp.hessian[(free[r], k)] * v);
        let y = h.cholesky().unwrap().solve(&rhs);
        let mut x = ArmVector::zeros();
        x[k] = v;
        for (r, &i) in free.iter().enumerate() {
            x[i] = y[r];
        }
        qp.objective(&x)
    }

    #[test]
    fn saturated_coordinate_matches_grid_oracle() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let q = ready_pose();
        let j = tool_jacobian(&q, &m);
        // Demand a rotation rate mostly about the last joint axis, far above its limit.
        let z7 = j.fixed_view::<3, 1>(3, 6).into_owned();
        let dx = Vector6::new(0.0, 0.0, 0.0, z7.x, z7.y, z7.z) * 20.0;
        let qp = ArmQp::build(&j, &dx, &AngleJacobian::zeros(), 0.0, &ArmVector::zeros(), &cfg);
        let (lo, hi) = velocity_bounds(&q, &m, &cfg);
        let sol = solve_box_qp(&qp, &lo, &hi, &ArmVector::zeros());
        assert_eq!(sol.q_dot[6], hi[6]);
        assert!(qp.gradient(&sol.q_dot)[6] <= 0.0);
        assert!(sol.kkt_residual <= 1e-8);
        // Grid over the clamped coordinate, refined around the best cell.
        let (mut a, mut b) = (lo[6], hi[6]);
        for _ in 0..12 {
            let n = 40;
            let best = (0..=n)
                .map(|i| a + (b - a) * i as f64 / n as f64)
                .min_by(|x, y| reduced_objective(&qp, 6, *x).total_cmp(&reduced_objective(&qp, 6, *y)))
                .unwrap();
            let cell = (b - a) / n as f64;
            a = (best - cell).max(lo[6]);
            b = (best + cell).min(hi[6]);
        }
        assert!((0.5 * (a + b) - sol.q_dot[6]).abs() < 1e-6);
    }

    #[test]
    fn random_instances_feasible_with_small_kkt() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for _ in 0..20000 {
            let q = rand_vec(&mut rng, &m.lower(), &m.upper());
            let dx = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)) / cfg.dt;
            let prev = ArmVector::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let ja = AngleJacobian::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let qp = ArmQp::build(&tool_jacobian(&q, &m), &dx, &ja, rng.gen_range(-5.0..5.0), &prev, &cfg);
            let (lo, hi) = velocity_bounds(&q, &m, &cfg);
            let s = solve_box_qp(&qp, &lo, &hi, &ArmVector::zeros());
            for i in 0..ARM_DOF {
                assert!(s.q_dot[i] >= lo[i] && s.q_dot[i] <= hi[i]);
            }
            assert!(s.kkt_residual <= 1e-8, "kkt {}", s.kkt_residual);
        }
    }

    #[test]
    fn smoothing_weight_reduces_velocity_jumps() {
        let m = ArmModel::reference();
        let q = ready_pose();
        let inputs: Vec<Vector6<f64>> = (0..20)
            .map(|k| Vector6::new((k as f64).sin(), (k as f64 * 0.7).cos(), 0.3, 0.0, 0.5 * (k as f64).cos(), 0.0) * 0.2)
            .collect();
        let mut last = f64::INFINITY;
        for w3 in [0.0, 0.01, 0.1, 1.0] {
            let cfg = ArmIkConfig {
                weights: [1.0, 0.0, 1e-3, w3],
                ..Default::default()
            };
            let j = tool_jacobian(&q, &m);
            let (lo, hi) = velocity_bounds(&q, &m, &cfg);
            let mut prev = ArmVector::zeros();
            let mut total = 0.0;
            for dx in &inputs {
                let qp = ArmQp::build(&j, dx, &AngleJacobian::zeros(), 0.0, &prev, &cfg);
                let s = solve_box_qp(&qp, &lo, &hi, &ArmVector::zeros()).q_dot;
                total += (s - prev).norm();
                prev = s;
            }
            assert!(total <= last + 1e-12);
            last = total;
        }
    }

    #[test]
    fn closed_loop_converges_to_nearby_pose() {
        let m = ArmModel::reference();
        let cfg = ArmIkConfig::default();
        let mut state = ArmState {
            q: ready_pose(),
            q_dot_prev: ArmVector::zeros(),
        };
        let start = arm_fk(&state.q, &m).tool;
        let target = relative_target(
            &start,
            &Isometry3::from_parts(Translation3::new(0.03, -0.02, 0.01), UnitQuaternion::identity()),
        );
        let mut err = f64::INFINITY;
        for _ in 0..200 {
            let r = arm_step(&state, &target, &m, &cfg).unwrap();
            let e = r.pose_error.fixed_rows::<3>(0).norm();
            if e < 1e-4 {
                return;
            }
            assert!(e < err, "error rose from {err} to {e}");
            err = e;
            state = r.state;
        }
        panic!("did not converge, final error {err}");
    }
}
