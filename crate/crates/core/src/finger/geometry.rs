use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::residuals::{dip_residual, mcp_residual, pip_fourbar_residual, psu_residual};
use super::{ActuatorState, FingerError};

/// Largest residual (m^2) tolerated at the zero configuration when a geometry is loaded.
pub const ZERO_CONFIG_TOLERANCE: f64 = 1e-12;

/// Anchor points, link lengths and travel limits of one linkage-driven digit.
///
/// Frames: `O` is the digit base (origin under the MCP joint in the plane of
/// the three lead-screw endpoints, x along the finger, flexion about z).
/// `Pmcp` is the proximal phalanx frame at the MCP joint, `P3` the crank frame
/// of the PIP four-bar, `Ppip` and `Pdip` the middle and distal phalanx frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerGeometry {
    /// MCP joint centre in `O`.
    #[serde(rename = "mcp_origin_m")]
    pub mcp_origin: Vector3<f64>,
    /// Rest positions of the two MCP lead-screw endpoints (A1, A2) in `O`.
    #[serde(rename = "pss_rest_m")]
    pub pss_rest: [Vector3<f64>; 2],
    /// Ball anchors on the proximal phalanx (B1, B2) in `Pmcp`.
    #[serde(rename = "pss_anchor_mcp_m")]
    pub pss_anchor: [Vector3<f64>; 2],
    #[serde(rename = "pss_length_m")]
    pub pss_length: [f64; 2],
    /// Rest position of the PIP lead-screw endpoint (P1) in `O`.
    #[serde(rename = "psu_rest_m")]
    pub psu_rest: Vector3<f64>,
    /// Crank pivot P3 in `Pmcp`.
    #[serde(rename = "crank_pivot_mcp_m")]
    pub crank_pivot: Vector3<f64>,
    /// PSU attachment P22 in `P3`.
    #[serde(rename = "psu_anchor_crank_m")]
    pub psu_anchor: Vector3<f64>,
    /// Four-bar pin P4 in `P3`.
    #[serde(rename = "crank_pin_crank_m")]
    pub crank_pin: Vector3<f64>,
    /// PIP joint centre in `Pmcp`.
    #[serde(rename = "pip_origin_mcp_m")]
    pub pip_origin: Vector3<f64>,
    /// Four-bar pin P5 in `Ppip`.
    #[serde(rename = "pip_pin_pip_m")]
    pub pip_pin: Vector3<f64>,
    /// DIP drive pin P6, fixed to the proximal phalanx, in `Pmcp`.
    #[serde(rename = "dip_drive_pin_mcp_m")]
    pub dip_drive_pin: Vector3<f64>,
    /// DIP joint centre in `Ppip`.
    #[serde(rename = "dip_origin_pip_m")]
    pub dip_origin: Vector3<f64>,
    /// DIP coupler pin P7 in `Pdip`.
    #[serde(rename = "dip_pin_dip_m")]
    pub dip_pin: Vector3<f64>,
    /// Fingertip keypoint in `Pdip`.
    #[serde(rename = "tip_offset_dip_m")]
    pub tip_offset: Vector3<f64>,
    /// |P4 P5|
    #[serde(rename = "pip_coupler_length_m")]
    pub pip_coupler_length: f64,
    /// |P6 P7|
    #[serde(rename = "dip_coupler_length_m")]
    pub dip_coupler_length: f64,
    /// |P1 P21|
    #[serde(rename = "psu_lower_length_m")]
    pub psu_lower_length: f64,
    /// |P21 P22|
    #[serde(rename = "psu_upper_length_m")]
    pub psu_upper_length: f64,
    #[serde(rename = "travel_min_m")]
    pub travel_min: [f64; 3],
    #[serde(rename = "travel_max_m")]
    pub travel_max: [f64; 3],
    /// Static limits for q1..q4 as `[lower, upper]`.
    #[serde(rename = "joint_limits_rad")]
    pub joint_limits: [[f64; 2]; 4],
    #[serde(rename = "alpha_range_rad")]
    pub alpha_range: [f64; 2],
}

fn polar(r: f64, deg: f64) -> Vector3<f64> {
    let a = deg.to_radians();
    Vector3::new(r * a.cos(), r * a.sin(), 0.0)
}

// Joint ranges shared by every digit of the reference hand.
const ABDUCTION_LIMIT: f64 = 0.35;
const FLEXION_LIMITS: [f64; 2] = [-0.17, 1.57];
const PIP_LIMITS: [f64; 2] = [0.0, 1.6];
const DIP_LIMITS: [f64; 2] = [0.0, 1.1];
// Lead-screw travel of the unit-scale design; covers the joint box above with
// at least 0.5 mm to spare (checked by the `joint_box_corners_fit_travel` test).
const TRAVEL_MIN: [f64; 3] = [-0.0175, -0.0175, -0.0085];
const TRAVEL_MAX: [f64; 3] = [0.0045, 0.0045, 0.0145];

impl FingerGeometry {
    /// The reference digit at the given uniform scale (1.0 = index finger).
    ///
    /// Rest anchors are chosen first; every link length is then back-solved
    /// from the rest pose so that all residuals vanish exactly at `q = 0, d = 0`.
    pub fn reference(scale: f64) -> Self {
        let s = scale;
        let mcp_origin = Vector3::new(0.0, 0.010, 0.0) * s;
        let lateral = Vector3::new(0.0, 0.0, 0.0072) * s;
        let anchor = polar(0.0105, -111.0) * s;
        let pss_anchor = [anchor + lateral, anchor - lateral];
        let pss_rest = [
            Vector3::new(-0.026, 0.0, 0.0) * s + lateral,
            Vector3::new(-0.026, 0.0, 0.0) * s - lateral,
        ];
        let crank_pivot = Vector3::new(0.012, -0.004, 0.0) * s;
        let psu_anchor = polar(0.0090, -60.0) * s;
        let psu_rest = Vector3::new(-0.0200, 0.0, 0.0) * s;
        let pip_origin = Vector3::new(0.045, 0.0, 0.0) * s;
        let pip_pin = polar(0.0070, 68.0) * s;
        let crank_pin = polar(0.0075, -18.0) * s;
        let dip_origin = Vector3::new(0.026, 0.0, 0.0) * s;
        let dip_drive_pin = pip_origin + polar(0.0065, 100.0) * s;
        let dip_pin = polar(0.0095, -129.0) * s;
        let tip_offset = Vector3::new(0.022, 0.0, 0.0) * s;

        let pss_length = [
            (mcp_origin + pss_anchor[0] - pss_rest[0]).norm(),
            (mcp_origin + pss_anchor[1] - pss_rest[1]).norm(),
        ];
        let psu_span = (mcp_origin + crank_pivot + psu_anchor - psu_rest).norm();
        let pip_coupler_length = (pip_origin + pip_pin - crank_pivot - crank_pin).norm();
        let dip_coupler_length = (dip_drive_pin - pip_origin - dip_origin - dip_pin).norm();

        let mut travel_min = TRAVEL_MIN;
        let mut travel_max = TRAVEL_MAX;
        for i in 0..3 {
            travel_min[i] *= s;
            travel_max[i] *= s;
        }

        Self {
            mcp_origin,
            pss_rest,
            pss_anchor,
            pss_length,
            psu_rest,
            crank_pivot,
            psu_anchor,
            crank_pin,
            pip_origin,
            pip_pin,
            dip_drive_pin,
            dip_origin,
            dip_pin,
            tip_offset,
            pip_coupler_length,
            dip_coupler_length,
            psu_lower_length: 0.375 * psu_span,
            psu_upper_length: 0.625 * psu_span,
            travel_min,
            travel_max,
            joint_limits: [
                [-ABDUCTION_LIMIT, ABDUCTION_LIMIT],
                FLEXION_LIMITS,
                PIP_LIMITS,
                DIP_LIMITS,
            ],
            alpha_range: [-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2],
        }
    }

    /// Uniformly scale every point, length and travel limit; angles are unchanged.
    pub fn scaled(&self, s: f64) -> Self {
        let mut g = self.clone();
        g.mcp_origin *= s;
        for v in g.pss_rest.iter_mut().chain(g.pss_anchor.iter_mut()) {
            *v *= s;
        }
        for v in [
            &mut g.psu_rest,
            &mut g.crank_pivot,
            &mut g.psu_anchor,
            &mut g.crank_pin,
            &mut g.pip_origin,
            &mut g.pip_pin,
            &mut g.dip_drive_pin,
            &mut g.dip_origin,
            &mut g.dip_pin,
            &mut g.tip_offset,
        ] {
            *v *= s;
        }
        for l in g.pss_length.iter_mut() {
            *l *= s;
        }
        g.pip_coupler_length *= s;
        g.dip_coupler_length *= s;
        g.psu_lower_length *= s;
        g.psu_upper_length *= s;
        for i in 0..3 {
            g.travel_min[i] *= s;
            g.travel_max[i] *= s;
        }
        g
    }

    /// Residuals of every constraint at `q = 0, d = 0, alpha = 0`.
    pub fn zero_config_residuals(&self) -> ZeroConfigReport {
        let d = ActuatorState::default();
        let mcp = mcp_residual(0.0, 0.0, &d, self);
        ZeroConfigReport {
            mcp: [mcp.x, mcp.y],
            psu: psu_residual(0.0, 0.0, 0.0, 0.0, self),
            pip_fourbar: pip_fourbar_residual(0.0, 0.0, self),
            dip: dip_residual(0.0, 0.0, self),
        }
    }

    /// Check positivity, ordering and zero-configuration consistency.
    pub fn validate(&self) -> Result<(), FingerError> {
        let lengths = [
            ("pss_length_m[0]", self.pss_length[0]),
            ("pss_length_m[1]", self.pss_length[1]),
            ("pip_coupler_length_m", self.pip_coupler_length),
            ("dip_coupler_length_m", self.dip_coupler_length),
            ("psu_lower_length_m", self.psu_lower_length),
            ("psu_upper_length_m", self.psu_upper_length),
        ];
        for (name, v) in lengths {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FingerError::InvalidGeometry(format!("{name} must be positive, got {v}")));
            }
        }
        for i in 0..3 {
            if !(self.travel_min[i] < self.travel_max[i]) {
                return Err(FingerError::InvalidGeometry(format!(
                    "travel of actuator {} is empty: [{}, {}]",
                    i + 1,
                    self.travel_min[i],
                    self.travel_max[i]
                )));
            }
            if !(self.travel_min[i] <= 0.0 && 0.0 <= self.travel_max[i]) {
                return Err(FingerError::InvalidGeometry(format!(
                    "travel of actuator {} does not contain the rest position",
                    i + 1
                )));
            }
        }
        for (j, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo <= hi) {
                return Err(FingerError::InvalidGeometry(format!(
                    "joint limits of q{} are not ordered: [{lo}, {hi}]",
                    j + 1
                )));
            }
        }
        if !(self.alpha_range[0] < self.alpha_range[1]) {
            return Err(FingerError::InvalidGeometry("alpha range is empty".into()));
        }
        let report = self.zero_config_residuals();
        if report.max_abs() > ZERO_CONFIG_TOLERANCE {
            return Err(FingerError::InvalidGeometry(format!(
                "zero configuration is inconsistent: {report:?}"
            )));
        }
        Ok(())
    }

    pub fn within_travel(&self, d: &ActuatorState) -> Option<usize> {
        let v = d.as_array();
        (0..3).find(|&i| !(self.travel_min[i] <= v[i] && v[i] <= self.travel_max[i]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZeroConfigReport {
    pub mcp: [f64; 2],
    pub psu: f64,
    pub pip_fourbar: f64,
    pub dip: f64,
}

impl ZeroConfigReport {
    pub fn max_abs(&self) -> f64 {
        [self.mcp[0], self.mcp[1], self.psu, self.pip_fourbar, self.dip]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_is_zero_consistent() {
        for s in [0.85, 0.95, 1.0, 1.08] {
            let g = FingerGeometry::reference(s);
            g.validate().unwrap();
            assert!(g.zero_config_residuals().max_abs() < 1e-18);
        }
    }

    #[test]
    fn scaling_matches_reference_construction() {
        let a = FingerGeometry::reference(1.0).scaled(1.08);
        let b = FingerGeometry::reference(1.08);
        assert!((a.pss_length[0] - b.pss_length[0]).abs() < 1e-15);
        assert!((a.tip_offset - b.tip_offset).norm() < 1e-15);
        a.validate().unwrap();
    }

    #[test]
    fn inconsistent_geometry_rejected() {
        let mut g = FingerGeometry::reference(1.0);
        g.pss_length[0] += 1e-4;
        assert!(matches!(g.validate(), Err(FingerError::InvalidGeometry(_))));
        let mut g = FingerGeometry::reference(1.0);
        g.dip_coupler_length = -1.0;
        assert!(g.validate().is_err());
        let mut g = FingerGeometry::reference(1.0);
        g.travel_min[2] = g.travel_max[2];
        assert!(g.validate().is_err());
    }

    #[test]
    fn serializes_with_units_in_names() {
        let g = FingerGeometry::reference(1.0);
        let text = toml::to_string(&g).unwrap();
        assert!(text.contains("pss_length_m"));
        assert!(text.contains("joint_limits_rad"));
        let back: FingerGeometry = toml::from_str(&text).unwrap();
        assert_eq!(back, g);
    }
}
