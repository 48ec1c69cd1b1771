use nalgebra::{DMatrix, DVector, Vector3};

use super::{
    extract_keyvectors, target_length, weight, HumanHandFrame, KeyvectorSpec, RetargetConfig, RetargetError,
    KEYVECTORS, MIN_DISTANCE,
};
use crate::finger::{coupling_slope, dip_coupled_angle};
use crate::hand::{hand_fk, hand_keypoint_jacobian, parse_keypoint_label, HandGeometry, HandJointState, DIGITS, JOINTS};

/// Keyvector rows followed by one smoothing row per joint.
pub const RESIDUAL_ROWS: usize = 3 * KEYVECTORS + JOINTS;

/// Per-frame targets and weights, fixed during one solve.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub targets: [Vector3<f64>; KEYVECTORS],
    pub weights: [f64; KEYVECTORS],
    /// Human keyvector lengths after flooring.
    pub distances: [f64; KEYVECTORS],
}

pub fn prepare_frame(
    frame: &HumanHandFrame,
    spec: &KeyvectorSpec,
    cfg: &RetargetConfig,
) -> Result<PreparedFrame, RetargetError> {
    let human = extract_keyvectors(frame, spec, cfg)?;
    let mut out = PreparedFrame {
        targets: [Vector3::zeros(); KEYVECTORS],
        weights: [0.0; KEYVECTORS],
        distances: [0.0; KEYVECTORS],
    };
    for (i, (k, v)) in spec.keyvectors.iter().zip(&human).enumerate() {
        let d = v.norm().max(MIN_DISTANCE);
        let scaled = v.component_mul(&Vector3::from(k.beta));
        let scaled_norm = scaled.norm();
        let dir = if scaled_norm > 0.0 { scaled / scaled_norm } else { Vector3::zeros() };
        out.distances[i] = d;
        out.weights[i] = weight(d, k.membership, cfg);
        out.targets[i] = dir * target_length(d, k.membership, scaled_norm / d, cfg);
    }
    Ok(out)
}

fn endpoints(spec: &KeyvectorSpec) -> Result<Vec<[(usize, usize); 2]>, RetargetError> {
    spec.keyvectors
        .iter()
        .map(|k| {
            let f = parse_keypoint_label(&k.from).ok_or_else(|| RetargetError::UnknownKeypoint(k.from.clone()))?;
            let t = parse_keypoint_label(&k.to).ok_or_else(|| RetargetError::UnknownKeypoint(k.to.clone()))?;
            Ok([f, t])
        })
        .collect()
}

/// Replace every DIP angle of `q` by its coupled value; returns `dq4/dq3` per digit.
pub(crate) fn couple(q: &HandJointState, g: &HandGeometry) -> Result<(HandJointState, [f64; DIGITS]), RetargetError> {
    let mut out = *q;
    let mut slopes = [0.0; DIGITS];
    for d in 0..DIGITS {
        let qd = &mut out.digits[d];
        qd.q4 = dip_coupled_angle(qd.q3, &g.digits[d], qd.q4)?;
        slopes[d] = coupling_slope(qd.q3, qd.q4, &g.digits[d])?;
    }
    Ok((out, slopes))
}

fn evaluate(
    q: &HandJointState,
    prepared: &PreparedFrame,
    spec: &KeyvectorSpec,
    cfg: &RetargetConfig,
    g: &HandGeometry,
    q_prev: &HandJointState,
    chain_rule: bool,
) -> Result<(DVector<f64>, DMatrix<f64>), RetargetError> {
    let (qc, slopes) = couple(q, g)?;
    let kp = hand_fk(&qc, g);
    let jac = hand_keypoint_jacobian(&qc, g);
    let mut r = DVector::zeros(RESIDUAL_ROWS);
    let mut j = DMatrix::zeros(RESIDUAL_ROWS, JOINTS);
    for (i, [(fd, fk), (td, tk)]) in endpoints(spec)?.into_iter().enumerate() {
        let sw = prepared.weights[i].sqrt();
        let v = kp.point(td, tk) - kp.point(fd, fk);
        r.fixed_rows_mut::<3>(3 * i).copy_from(&(sw * (v - prepared.targets[i])));
        for c in 0..4 {
            let mut col = j.fixed_view_mut::<3, 1>(3 * i, 4 * td + c);
            col += sw * jac[td][tk][c];
            let mut col = j.fixed_view_mut::<3, 1>(3 * i, 4 * fd + c);
            col -= sw * jac[fd][fk][c];
        }
    }
    let sl = cfg.lambda_smooth.sqrt();
    let (qa, qp) = (qc.to_array(), q_prev.to_array());
    for k in 0..JOINTS {
        r[3 * KEYVECTORS + k] = sl * (qa[k] - qp[k]);
        j[(3 * KEYVECTORS + k, k)] = sl;
    }
    for (d, slope) in slopes.iter().enumerate() {
        let dip = j.column(4 * d + 3).clone_owned();
        if chain_rule {
            let mut pip = j.column_mut(4 * d + 2);
            pip.axpy(*slope, &dip, 1.0);
        }
        j.column_mut(4 * d + 3).fill(0.0);
    }
    Ok((r, j))
}

/// Stacked residual (45 weighted keyvector rows, 20 smoothing rows) and its
/// Jacobian in the 20 joint columns.
///
/// The DIP angle of `q` only seeds the coupling solve; it is replaced by the
/// coupled value of the PIP angle, so DIP columns are zero and PIP columns
/// carry the coupling term.
pub fn residuals_and_jacobian(
    q: &HandJointState,
    prepared: &PreparedFrame,
    spec: &KeyvectorSpec,
    cfg: &RetargetConfig,
    g: &HandGeometry,
    q_prev: &HandJointState,
) -> Result<(DVector<f64>, DMatrix<f64>), RetargetError> {
    evaluate(q, prepared, spec, cfg, g, q_prev, true)
}

/// Same as [`residuals_and_jacobian`] but with the DIP-through-PIP term left
/// out of the PIP columns. Diagnostic only.
pub fn residuals_and_jacobian_without_chain_rule(
    q: &HandJointState,
    prepared: &PreparedFrame,
    spec: &KeyvectorSpec,
    cfg: &RetargetConfig,
    g: &HandGeometry,
    q_prev: &HandJointState,
) -> Result<(DVector<f64>, DMatrix<f64>), RetargetError> {
    evaluate(q, prepared, spec, cfg, g, q_prev, false)
}
