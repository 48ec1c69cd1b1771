//! Thumb transmission: a slider-crank abduction joint followed by the finger
//! flexion stack with the MCP abduction pinned at zero and one PSS chain.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::finger::{
    alpha_from_pip, alpha_from_psu, check_residuals, dip_partials, dip_residual, pip_from_alpha,
    pip_fourbar_residual, pss_chain_partials, pss_chain_residual, pss_displacement, psu_displacement,
    psu_residual, scalar_root, ActuatorState, FingerError, FingerGeometry, FingerJointState, FkSolution,
    IkSolution, Stage, StageResiduals, COLD_START_STEPS, warm_alpha,
};
use crate::math::rot_axis;

/// Slider-crank driving the thumb abduction joint, in the thumb mount frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThumbAbduction {
    /// Unit joint axis through the mount origin.
    pub axis: Vector3<f64>,
    #[serde(rename = "range_rad")]
    pub range: [f64; 2],
    /// Crank pin at zero abduction.
    #[serde(rename = "crank_pin_m")]
    pub crank_pin: Vector3<f64>,
    /// Slider pin at zero displacement.
    #[serde(rename = "slider_rest_m")]
    pub slider_rest: Vector3<f64>,
    /// Unit direction of positive slider displacement.
    pub slider_direction: Vector3<f64>,
    #[serde(rename = "rod_length_m")]
    pub rod_length: f64,
    #[serde(rename = "travel_m")]
    pub travel: [f64; 2],
}

const CRANK_RADIUS: f64 = 0.012;
const ROD_LENGTH: f64 = 0.030;
const TRAVEL_MARGIN: f64 = 0.0005;

impl ThumbAbduction {
    pub fn reference(scale: f64) -> Self {
        let axis = Vector3::new(0.0, -1.0, 0.0);
        let range = [(-4.0f64).to_radians(), 90.0f64.to_radians()];
        let mid = 0.5 * (range[0] + range[1]);
        // Crank perpendicular to the slider at mid-range.
        let crank_mid = Vector3::new(-CRANK_RADIUS, 0.0, 0.0) * scale;
        let u = axis.cross(&crank_mid).normalize();
        let rod = ROD_LENGTH * scale;
        let slider_mid = crank_mid - u * rod;
        let crank_pin = rot_axis(&axis, -mid) * crank_mid;
        let mut ab = Self {
            axis,
            range,
            crank_pin,
            slider_rest: slider_mid,
            slider_direction: u,
            rod_length: rod,
            travel: [-1.0, 1.0],
        };
        let t0 = ab.displacement(0.0, 0.0).expect("rest pose reachable");
        ab.slider_rest = slider_mid + u * t0;
        let a = ab.displacement(range[0], 0.0).expect("range reachable");
        let b = ab.displacement(range[1], 0.0).expect("range reachable");
        ab.travel = [a.min(b) - TRAVEL_MARGIN * scale, a.max(b) + TRAVEL_MARGIN * scale];
        ab
    }

    fn crank(&self, q: f64) -> Vector3<f64> {
        rot_axis(&self.axis, q) * self.crank_pin
    }

    pub fn residual(&self, q: f64, d: f64) -> f64 {
        (self.crank(q) - self.slider_rest - self.slider_direction * d).norm_squared() - self.rod_length * self.rod_length
    }

    /// `(d r/d q, d r/d d)`.
    pub fn partials(&self, q: f64, d: f64) -> (f64, f64) {
        let c = self.crank(q);
        let diff = c - self.slider_rest - self.slider_direction * d;
        (2.0 * diff.dot(&self.axis.cross(&c)), -2.0 * diff.dot(&self.slider_direction))
    }

    /// Slider displacement closing the chain at angle `q`; root nearest `near`.
    pub fn displacement(&self, q: f64, near: f64) -> Option<f64> {
        let delta = self.slider_rest - self.crank(q);
        let b = delta.dot(&self.slider_direction);
        let disc = b * b - delta.norm_squared() + self.rod_length * self.rod_length;
        if !(disc >= 0.0) {
            return None;
        }
        let s = disc.sqrt();
        let (hi, lo) = (-b + s, -b - s);
        Some(if (hi - near).abs() <= (lo - near).abs() { hi } else { lo })
    }

    pub fn angle(&self, d: f64, seed: f64) -> Result<f64, FingerError> {
        scalar_root(Stage::Abduction, seed, |q| self.residual(q, d), |q| self.partials(q, d).0).map(|(q, _)| q)
    }
}

fn travel_error(actuator: usize, value: f64, range: [f64; 2], forward: bool) -> FingerError {
    if forward {
        FingerError::OutOfTravel {
            actuator,
            value,
            min: range[0],
            max: range[1],
        }
    } else {
        FingerError::TravelExceeded {
            actuator,
            value,
            min: range[0],
            max: range[1],
        }
    }
}

fn thumb_ranges(g: &FingerGeometry, ab: &ThumbAbduction) -> [[f64; 2]; 3] {
    [
        ab.travel,
        [g.travel_min[0], g.travel_max[0]],
        [g.travel_min[2], g.travel_max[2]],
    ]
}

/// Residuals of the thumb: `mcp` holds `[flexion chain, abduction slider-crank]`.
pub fn thumb_residuals(
    q: &FingerJointState,
    d: &ActuatorState,
    alpha: f64,
    g: &FingerGeometry,
    ab: &ThumbAbduction,
) -> StageResiduals {
    StageResiduals {
        mcp: [pss_chain_residual(0, 0.0, q.q2, d.d2, g), ab.residual(q.q1, d.d1)],
        psu: psu_residual(alpha, d.d3, 0.0, q.q2, g),
        pip_fourbar: pip_fourbar_residual(q.q3, alpha, g),
        dip: dip_residual(q.q3, q.q4, g),
    }
}

fn thumb_cascade(
    d: &ActuatorState,
    g: &FingerGeometry,
    ab: &ThumbAbduction,
    w: &FingerJointState,
    alpha_seed: f64,
) -> Result<FkSolution, FingerError> {
    let qa = ab.angle(d.d1, w.q1)?;
    let (q2, i1) = scalar_root(
        Stage::Mcp,
        w.q2,
        |x| pss_chain_residual(0, 0.0, x, d.d2, g),
        |x| pss_chain_partials(0, 0.0, x, d.d2, g)[1],
    )?;
    let (alpha, i2) = alpha_from_psu(d.d3, 0.0, q2, g, alpha_seed)?;
    let (q3, i3) = pip_from_alpha(alpha, g, w.q3)?;
    let (q4, i4) = scalar_root(Stage::Dip, w.q4, |x| dip_residual(q3, x, g), |x| dip_partials(q3, x, g).1)?;
    let joints = FingerJointState::new(qa, q2, q3, q4);
    let residuals = thumb_residuals(&joints, d, alpha, g, ab);
    check_residuals(&residuals)?;
    Ok(FkSolution {
        joints,
        alpha,
        residuals,
        iterations: i1 + i2 + i3 + i4,
    })
}

/// Thumb forward transmission; `q1` of the result is the abduction angle.
pub fn thumb_fk(
    d: &ActuatorState,
    g: &FingerGeometry,
    ab: &ThumbAbduction,
    warm: Option<&FingerJointState>,
    alpha_seed: Option<f64>,
) -> Result<FkSolution, FingerError> {
    let dv = d.as_array();
    for (i, r) in thumb_ranges(g, ab).iter().enumerate() {
        if !(r[0] <= dv[i] && dv[i] <= r[1]) {
            return Err(travel_error(i, dv[i], *r, true));
        }
    }
    if let Some(w) = warm {
        return thumb_cascade(d, g, ab, w, alpha_seed.unwrap_or_else(|| warm_alpha(w, g)));
    }
    let mut w = FingerJointState::default();
    let mut alpha = 0.0;
    let mut iterations = 0;
    for step in 1..=COLD_START_STEPS {
        let t = step as f64 / COLD_START_STEPS as f64;
        let sol = thumb_cascade(&ActuatorState::new(d.d1 * t, d.d2 * t, d.d3 * t), g, ab, &w, alpha)?;
        w = sol.joints;
        alpha = sol.alpha;
        iterations += sol.iterations;
    }
    let mut sol = thumb_cascade(d, g, ab, &w, alpha)?;
    sol.iterations += iterations;
    Ok(sol)
}

/// Thumb inverse transmission; `q.q4` is ignored.
pub fn thumb_ik(
    q: &FingerJointState,
    g: &FingerGeometry,
    ab: &ThumbAbduction,
    warm: Option<&ActuatorState>,
    alpha_seed: Option<f64>,
) -> Result<IkSolution, FingerError> {
    let near = warm.copied().unwrap_or_default();
    let unreachable = |stage| FingerError::NoConvergence {
        stage,
        residual: f64::INFINITY,
    };
    let d1 = ab.displacement(q.q1, near.d1).ok_or_else(|| unreachable(Stage::Abduction))?;
    let d2 = pss_displacement(0, 0.0, q.q2, g, near.d2).ok_or_else(|| unreachable(Stage::Mcp))?;
    let alpha = alpha_from_pip(q.q3, g, alpha_seed.unwrap_or(0.0))?;
    let d3 = psu_displacement(alpha, 0.0, q.q2, g, near.d3).ok_or_else(|| unreachable(Stage::Psu))?;
    let actuators = ActuatorState::new(d1, d2, d3);
    let dv = actuators.as_array();
    for (i, r) in thumb_ranges(g, ab).iter().enumerate() {
        if !(r[0] <= dv[i] && dv[i] <= r[1]) {
            return Err(travel_error(i, dv[i], *r, false));
        }
    }
    let mut residuals = thumb_residuals(q, &actuators, alpha, g, ab);
    residuals.dip = 0.0;
    check_residuals(&residuals)?;
    Ok(IkSolution {
        actuators,
        alpha,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finger::dip_coupled_angle;
    use rand::{Rng, SeedableRng};

    fn setup() -> (FingerGeometry, ThumbAbduction) {
        let mut g = FingerGeometry::reference(0.95);
        let ab = ThumbAbduction::reference(0.95);
        g.joint_limits[0] = ab.range;
        (g, ab)
    }

    #[test]
    fn rest_is_consistent() {
        let (_, ab) = setup();
        assert!(ab.residual(0.0, 0.0).abs() < 1e-18);
        assert!(ab.travel[0] < 0.0 && ab.travel[1] > 0.0);
    }

    #[test]
    fn abduction_partials_match_differences() {
        let (_, ab) = setup();
        let h = 1e-6;
        for (q, d) in [(0.1, 0.002), (1.2, -0.004), (-0.05, 0.0)] {
            let (pq, pd) = ab.partials(q, d);
            let nq = (ab.residual(q + h, d) - ab.residual(q - h, d)) / (2.0 * h);
            let nd = (ab.residual(q, d + h) - ab.residual(q, d - h)) / (2.0 * h);
            assert!((pq - nq).abs() < 1e-9 && (pd - nd).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip() {
        let (g, ab) = setup();
        let mut rng = rand::rngs::StdRng::seed_from_u64(17);
        let l = g.joint_limits;
        for _ in 0..300 {
            let q3 = rng.gen_range(l[2][0]..=l[2][1]);
            let q = FingerJointState::new(
                rng.gen_range(ab.range[0]..=ab.range[1]),
                rng.gen_range(l[1][0]..=l[1][1]),
                q3,
                dip_coupled_angle(q3, &g, 0.0).unwrap(),
            );
            let ik = thumb_ik(&q, &g, &ab, None, None).unwrap();
            let fk = thumb_fk(&ik.actuators, &g, &ab, None, None).unwrap();
            for (a, b) in q.as_array().iter().zip(fk.joints.as_array()) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!(fk.residuals.max_abs() <= 1e-9);
        }
    }
}
