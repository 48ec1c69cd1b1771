//! Constraint residuals in squared-length form and their analytic partials.

use nalgebra::{Matrix2, Vector2, Vector3};

use super::{ActuatorState, FingerGeometry};
use crate::math::{drot_y, drot_z, rot_y, rot_z};

#[inline]
fn ex() -> Vector3<f64> {
    Vector3::x()
}

/// Residual of PSS chain `k` (0 or 1) with lead-screw displacement `d`.
#[inline]
pub fn pss_chain_residual(k: usize, q1: f64, q2: f64, d: f64, g: &FingerGeometry) -> f64 {
    let b = g.mcp_origin + rot_y(q1) * rot_z(q2) * g.pss_anchor[k];
    let a = g.pss_rest[k] - ex() * d;
    (b - a).norm_squared() - g.pss_length[k] * g.pss_length[k]
}

/// Partials of one PSS residual with respect to `(q1, q2, d)`.
#[inline]
pub(crate) fn pss_chain_partials(k: usize, q1: f64, q2: f64, d: f64, g: &FingerGeometry) -> [f64; 3] {
    let (ry, rz) = (rot_y(q1), rot_z(q2));
    let b_local = g.pss_anchor[k];
    let diff = g.mcp_origin + ry * rz * b_local - g.pss_rest[k] + ex() * d;
    [
        2.0 * diff.dot(&(drot_y(q1) * rz * b_local)),
        2.0 * diff.dot(&(ry * drot_z(q2) * b_local)),
        2.0 * diff.x,
    ]
}

/// Both PSS residuals of the MCP joint.
pub fn mcp_residual(q1: f64, q2: f64, d: &ActuatorState, g: &FingerGeometry) -> Vector2<f64> {
    Vector2::new(
        pss_chain_residual(0, q1, q2, d.d1, g),
        pss_chain_residual(1, q1, q2, d.d2, g),
    )
}

/// `d f / d (q1, q2)`.
pub fn mcp_jacobian_q(q1: f64, q2: f64, d: &ActuatorState, g: &FingerGeometry) -> Matrix2<f64> {
    let a = pss_chain_partials(0, q1, q2, d.d1, g);
    let b = pss_chain_partials(1, q1, q2, d.d2, g);
    Matrix2::new(a[0], a[1], b[0], b[1])
}

/// `d f / d (d1, d2)`; diagonal because each chain sees one screw.
pub fn mcp_jacobian_d(q1: f64, q2: f64, d: &ActuatorState, g: &FingerGeometry) -> Matrix2<f64> {
    let a = pss_chain_partials(0, q1, q2, d.d1, g);
    let b = pss_chain_partials(1, q1, q2, d.d2, g);
    Matrix2::new(a[2], 0.0, 0.0, b[2])
}

#[inline]
fn pip_points(q3: f64, alpha: f64, g: &FingerGeometry) -> (Vector3<f64>, Vector3<f64>) {
    let p5 = g.pip_origin + rot_z(q3) * g.pip_pin;
    let p4 = g.crank_pivot + rot_z(alpha) * g.crank_pin;
    (p5, p4)
}

/// PIP crossed four-bar closure, evaluated in the proximal phalanx frame.
pub fn pip_fourbar_residual(q3: f64, alpha: f64, g: &FingerGeometry) -> f64 {
    let (p5, p4) = pip_points(q3, alpha, g);
    (p5 - p4).norm_squared() - g.pip_coupler_length * g.pip_coupler_length
}

/// `(d g1/d q3, d g1/d alpha)`.
pub fn pip_fourbar_partials(q3: f64, alpha: f64, g: &FingerGeometry) -> (f64, f64) {
    let (p5, p4) = pip_points(q3, alpha, g);
    let diff = p5 - p4;
    (
        2.0 * diff.dot(&(drot_z(q3) * g.pip_pin)),
        -2.0 * diff.dot(&(drot_z(alpha) * g.crank_pin)),
    )
}

/// Squared PSU span implied by the universal-joint angle, approximated by `q1`.
#[inline]
pub(crate) fn psu_span_sq(q1: f64, g: &FingerGeometry) -> f64 {
    let (a, b) = (g.psu_lower_length, g.psu_upper_length);
    a * a + b * b - 2.0 * a * b * (std::f64::consts::PI - q1.abs()).cos()
}

#[inline]
pub(crate) fn psu_diff(alpha: f64, d3: f64, q1: f64, q2: f64, g: &FingerGeometry) -> Vector3<f64> {
    let local = g.crank_pivot + rot_z(alpha) * g.psu_anchor;
    g.mcp_origin + rot_y(q1) * rot_z(q2) * local - g.psu_rest + ex() * d3
}

/// PSU chain closure between the PIP lead screw and the crank.
pub fn psu_residual(alpha: f64, d3: f64, q1: f64, q2: f64, g: &FingerGeometry) -> f64 {
    psu_diff(alpha, d3, q1, q2, g).norm_squared() - psu_span_sq(q1, g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsuPartials {
    pub alpha: f64,
    pub d3: f64,
    pub q1: f64,
    pub q2: f64,
}

pub fn psu_partials(alpha: f64, d3: f64, q1: f64, q2: f64, g: &FingerGeometry) -> PsuPartials {
    let local = g.crank_pivot + rot_z(alpha) * g.psu_anchor;
    let (ry, rz) = (rot_y(q1), rot_z(q2));
    let diff = g.mcp_origin + ry * rz * local - g.psu_rest + ex() * d3;
    let ab = g.psu_lower_length * g.psu_upper_length;
    PsuPartials {
        alpha: 2.0 * diff.dot(&(ry * rz * drot_z(alpha) * g.psu_anchor)),
        d3: 2.0 * diff.x,
        // -(d/dq1) of the span term: cos(pi - |q1|) = -cos(q1) is smooth.
        q1: 2.0 * diff.dot(&(drot_y(q1) * rz * local)) + 2.0 * ab * q1.sin(),
        q2: 2.0 * diff.dot(&(ry * drot_z(q2) * local)),
    }
}

#[inline]
fn dip_diff(q3: f64, q4: f64, g: &FingerGeometry) -> Vector3<f64> {
    let p6 = rot_z(q3).transpose() * (g.dip_drive_pin - g.pip_origin);
    let p7 = g.dip_origin + rot_z(q4) * g.dip_pin;
    p6 - p7
}

/// DIP crossed four-bar closure, evaluated in the middle phalanx frame.
pub fn dip_residual(q3: f64, q4: f64, g: &FingerGeometry) -> f64 {
    dip_diff(q3, q4, g).norm_squared() - g.dip_coupler_length * g.dip_coupler_length
}

/// `(d h/d q3, d h/d q4)`.
pub fn dip_partials(q3: f64, q4: f64, g: &FingerGeometry) -> (f64, f64) {
    let diff = dip_diff(q3, q4, g);
    (
        2.0 * diff.dot(&(drot_z(q3).transpose() * (g.dip_drive_pin - g.pip_origin))),
        -2.0 * diff.dot(&(drot_z(q4) * g.dip_pin)),
    )
}
