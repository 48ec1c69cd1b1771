//! Stagewise forward and inverse transmission solves.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;

use super::residuals::{
    dip_partials, dip_residual, mcp_jacobian_q, mcp_residual, pip_fourbar_partials, pip_fourbar_residual,
    psu_diff, psu_partials, psu_residual, psu_span_sq,
};
use super::{
    finger_solver_settings, ActuatorState, FingerError, FingerGeometry, FingerJointState, Stage,
    STAGE_RESIDUAL_TOLERANCE,
};
use crate::kincore::{solve_root, ResidualProblem};

/// Threshold on `|dh/dq4|` (m^2/rad) below which the DIP coupling is singular.
const TOGGLE_THRESHOLD: f64 = 1e-12;

pub(crate) const COLD_START_STEPS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageResiduals {
    pub mcp: [f64; 2],
    pub psu: f64,
    pub pip_fourbar: f64,
    pub dip: f64,
}

impl StageResiduals {
    pub fn evaluate(q: &FingerJointState, d: &ActuatorState, alpha: f64, g: &FingerGeometry) -> Self {
        let f = mcp_residual(q.q1, q.q2, d, g);
        Self {
            mcp: [f.x, f.y],
            psu: psu_residual(alpha, d.d3, q.q1, q.q2, g),
            pip_fourbar: pip_fourbar_residual(q.q3, alpha, g),
            dip: dip_residual(q.q3, q.q4, g),
        }
    }

    pub fn max_abs(&self) -> f64 {
        [self.mcp[0], self.mcp[1], self.psu, self.pip_fourbar, self.dip]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FkSolution {
    pub joints: FingerJointState,
    pub alpha: f64,
    pub residuals: StageResiduals,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IkSolution {
    pub actuators: ActuatorState,
    pub alpha: f64,
    pub residuals: StageResiduals,
}

pub(crate) fn scalar_root(
    stage: Stage,
    x0: f64,
    f: impl Fn(f64) -> f64 + Send + Sync,
    df: impl Fn(f64) -> f64 + Send + Sync,
) -> Result<(f64, usize), FingerError> {
    let problem = ResidualProblem::new(1, 1, |x: &DVector<f64>, r: &mut DVector<f64>| r[0] = f(x[0]))
        .with_jacobian(|x: &DVector<f64>, j: &mut DMatrix<f64>| j[(0, 0)] = df(x[0]));
    let sol = solve_root(&problem, &DVector::from_element(1, x0), &finger_solver_settings())?;
    if !sol.is_converged() {
        return Err(FingerError::NoConvergence {
            stage,
            residual: sol.final_residual_norm,
        });
    }
    Ok((sol.x[0], sol.iterations))
}

fn solve_mcp(d: &ActuatorState, g: &FingerGeometry, seed: [f64; 2]) -> Result<([f64; 2], usize), FingerError> {
    let problem = ResidualProblem::new(2, 2, |x: &DVector<f64>, r: &mut DVector<f64>| {
        let f = mcp_residual(x[0], x[1], d, g);
        r[0] = f.x;
        r[1] = f.y;
    })
    .with_jacobian(|x: &DVector<f64>, j: &mut DMatrix<f64>| {
        let m = mcp_jacobian_q(x[0], x[1], d, g);
        j.copy_from(&m);
    });
    let sol = solve_root(&problem, &DVector::from_column_slice(&seed), &finger_solver_settings())?;
    if !sol.is_converged() {
        return Err(FingerError::NoConvergence {
            stage: Stage::Mcp,
            residual: sol.final_residual_norm,
        });
    }
    Ok(([sol.x[0], sol.x[1]], sol.iterations))
}

/// Crank angle that closes the PSU chain for the given screw and MCP angles.
pub(crate) fn alpha_from_psu(d3: f64, q1: f64, q2: f64, g: &FingerGeometry, seed: f64) -> Result<(f64, usize), FingerError> {
    scalar_root(
        Stage::Psu,
        seed,
        |a| psu_residual(a, d3, q1, q2, g),
        |a| psu_partials(a, d3, q1, q2, g).alpha,
    )
}

/// PIP angle that closes the four-bar for the given crank angle.
pub(crate) fn pip_from_alpha(alpha: f64, g: &FingerGeometry, seed: f64) -> Result<(f64, usize), FingerError> {
    scalar_root(
        Stage::PipFourBar,
        seed,
        |q3| pip_fourbar_residual(q3, alpha, g),
        |q3| pip_fourbar_partials(q3, alpha, g).0,
    )
}

/// Crank angle that closes the PIP four-bar for a given `q3`.
pub fn alpha_from_pip(q3: f64, g: &FingerGeometry, seed: f64) -> Result<f64, FingerError> {
    scalar_root(
        Stage::PipFourBar,
        seed,
        |a| pip_fourbar_residual(q3, a, g),
        |a| pip_fourbar_partials(q3, a, g).1,
    )
    .map(|(a, _)| a)
}

/// DIP angle that closes the coupling four-bar for a given `q3`.
pub fn dip_coupled_angle(q3: f64, g: &FingerGeometry, seed: f64) -> Result<f64, FingerError> {
    scalar_root(
        Stage::Dip,
        seed,
        |q4| dip_residual(q3, q4, g),
        |q4| dip_partials(q3, q4, g).1,
    )
    .map(|(q4, _)| q4)
}

/// `dq4/dq3` at a coupled pair, by implicit differentiation of the DIP closure.
pub(crate) fn coupling_slope(q3: f64, q4: f64, g: &FingerGeometry) -> Result<f64, FingerError> {
    let (h3, h4) = dip_partials(q3, q4, g);
    if h4.abs() < TOGGLE_THRESHOLD {
        return Err(FingerError::SingularCoupling { derivative: h4 });
    }
    Ok(-h3 / h4)
}

/// `dq4/dq3` along the coupled curve at `q3`.
pub fn dip_coupling_derivative(q3: f64, g: &FingerGeometry) -> Result<f64, FingerError> {
    let q4 = dip_coupled_angle(q3, g, 0.0)?;
    coupling_slope(q3, q4, g)
}

/// Root of `|c + d e_x|^2 = len_sq` closest to `near`, if the rod can reach.
fn screw_root(c: Vector3<f64>, len_sq: f64, near: f64) -> Option<f64> {
    let disc = len_sq - c.y * c.y - c.z * c.z;
    if !(disc >= 0.0) {
        return None;
    }
    let s = disc.sqrt();
    let (hi, lo) = (-c.x + s, -c.x - s);
    Some(if (hi - near).abs() <= (lo - near).abs() { hi } else { lo })
}

/// Screw displacement of PSS chain `k` that reaches the anchor at `(q1, q2)`.
pub fn pss_displacement(k: usize, q1: f64, q2: f64, g: &FingerGeometry, near: f64) -> Option<f64> {
    let b = g.mcp_origin + crate::math::rot_y(q1) * crate::math::rot_z(q2) * g.pss_anchor[k];
    screw_root(b - g.pss_rest[k], g.pss_length[k] * g.pss_length[k], near)
}

/// PIP screw displacement that closes the PSU chain.
pub fn psu_displacement(alpha: f64, q1: f64, q2: f64, g: &FingerGeometry, near: f64) -> Option<f64> {
    screw_root(psu_diff(alpha, 0.0, q1, q2, g), psu_span_sq(q1, g), near)
}

/// Forward transmission: screw displacements to joint angles.
pub fn finger_fk(
    d: &ActuatorState,
    g: &FingerGeometry,
    warm: Option<&FingerJointState>,
) -> Result<FingerJointState, FingerError> {
    finger_fk_detailed(d, g, warm, None).map(|s| s.joints)
}

/// As [`finger_fk`], also returning the crank angle and every stage residual.
///
/// `alpha_seed` defaults to zero; passing the previous crank angle saves a few
/// iterations in a control loop.
pub fn finger_fk_detailed(
    d: &ActuatorState,
    g: &FingerGeometry,
    warm: Option<&FingerJointState>,
    alpha_seed: Option<f64>,
) -> Result<FkSolution, FingerError> {
    let dv = d.as_array();
    for i in 0..3 {
        if !(g.travel_min[i] <= dv[i] && dv[i] <= g.travel_max[i]) {
            return Err(FingerError::OutOfTravel {
                actuator: i,
                value: dv[i],
                min: g.travel_min[i],
                max: g.travel_max[i],
            });
        }
    }
    match warm {
        Some(w) => fk_cascade(d, g, w, alpha_seed.unwrap_or_else(|| warm_alpha(w, g))),
        None => {
            // Cold start: follow the screws out from the rest pose so every
            // stage stays on the branch that contains q = 0.
            let mut w = FingerJointState::default();
            let mut alpha = 0.0;
            let mut iterations = 0;
            for step in 1..=COLD_START_STEPS {
                let t = step as f64 / COLD_START_STEPS as f64;
                let dt = ActuatorState::new(d.d1 * t, d.d2 * t, d.d3 * t);
                let sol = fk_cascade(&dt, g, &w, alpha)?;
                w = sol.joints;
                alpha = sol.alpha;
                iterations += sol.iterations;
            }
            let mut sol = fk_cascade(d, g, &w, alpha)?;
            sol.iterations += iterations;
            Ok(sol)
        }
    }
}

/// Crank angle matching the PIP angle of a warm joint state.
pub(crate) fn warm_alpha(w: &FingerJointState, g: &FingerGeometry) -> f64 {
    alpha_from_pip(w.q3, g, 0.0).unwrap_or(0.0)
}

fn fk_cascade(d: &ActuatorState, g: &FingerGeometry, w: &FingerJointState, alpha_seed: f64) -> Result<FkSolution, FingerError> {
    let ([q1, q2], it_mcp) = solve_mcp(d, g, [w.q1, w.q2])?;
    let (alpha, it_psu) = alpha_from_psu(d.d3, q1, q2, g, alpha_seed)?;
    let (q3, it_pip) = pip_from_alpha(alpha, g, w.q3)?;
    let (q4, it_dip) = scalar_root(
        Stage::Dip,
        w.q4,
        |q4| dip_residual(q3, q4, g),
        |q4| dip_partials(q3, q4, g).1,
    )?;
    let joints = FingerJointState::new(q1, q2, q3, q4);
    let residuals = StageResiduals::evaluate(&joints, d, alpha, g);
    check_residuals(&residuals)?;
    Ok(FkSolution {
        joints,
        alpha,
        residuals,
        iterations: it_mcp + it_psu + it_pip + it_dip,
    })
}

pub(crate) fn check_residuals(r: &StageResiduals) -> Result<(), FingerError> {
    let checks = [
        (Stage::Mcp, r.mcp[0].abs().max(r.mcp[1].abs())),
        (Stage::Psu, r.psu.abs()),
        (Stage::PipFourBar, r.pip_fourbar.abs()),
        (Stage::Dip, r.dip.abs()),
    ];
    for (stage, v) in checks {
        if !(v <= STAGE_RESIDUAL_TOLERANCE) {
            return Err(FingerError::NoConvergence { stage, residual: v });
        }
    }
    Ok(())
}

/// Inverse transmission: joint angles to screw displacements.
///
/// `q.q4` is ignored; the DIP joint is passive. With a warm start the screw
/// roots nearest the previous command are selected.
pub fn finger_ik(
    q: &FingerJointState,
    g: &FingerGeometry,
    warm: Option<&ActuatorState>,
) -> Result<ActuatorState, FingerError> {
    finger_ik_detailed(q, g, warm, None).map(|s| s.actuators)
}

pub fn finger_ik_detailed(
    q: &FingerJointState,
    g: &FingerGeometry,
    warm: Option<&ActuatorState>,
    alpha_seed: Option<f64>,
) -> Result<IkSolution, FingerError> {
    let near = warm.copied().unwrap_or_default();
    let unreachable = |stage: Stage| FingerError::NoConvergence {
        stage,
        residual: f64::INFINITY,
    };
    let d1 = pss_displacement(0, q.q1, q.q2, g, near.d1).ok_or_else(|| unreachable(Stage::Mcp))?;
    let d2 = pss_displacement(1, q.q1, q.q2, g, near.d2).ok_or_else(|| unreachable(Stage::Mcp))?;
    let alpha = alpha_from_pip(q.q3, g, alpha_seed.unwrap_or(0.0))?;
    let d3 = psu_displacement(alpha, q.q1, q.q2, g, near.d3).ok_or_else(|| unreachable(Stage::Psu))?;
    let actuators = ActuatorState::new(d1, d2, d3);
    let dv = actuators.as_array();
    for i in 0..3 {
        if !(g.travel_min[i] <= dv[i] && dv[i] <= g.travel_max[i]) {
            return Err(FingerError::TravelExceeded {
                actuator: i,
                value: dv[i],
                min: g.travel_min[i],
                max: g.travel_max[i],
            });
        }
    }
    // The DIP closure does not involve the screws and is not reported here.
    let f = mcp_residual(q.q1, q.q2, &actuators, g);
    let residuals = StageResiduals {
        mcp: [f.x, f.y],
        psu: psu_residual(alpha, d3, q.q1, q.q2, g),
        pip_fourbar: pip_fourbar_residual(q.q3, alpha, g),
        dip: 0.0,
    };
    check_residuals(&residuals)?;
    Ok(IkSolution {
        actuators,
        alpha,
        residuals,
    })
}
