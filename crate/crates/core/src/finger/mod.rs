//! Transmission kinematics of one linkage-driven digit.
//!
//! Two lead screws drive the 2-DoF MCP joint through PSS chains, a third drives
//! the PIP joint through a PSU chain and a crossed four-bar, and a second
//! four-bar couples the DIP joint to the PIP joint.

mod geometry;
mod keypoints;
mod residuals;
mod solve;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kincore::{KinError, SolverSettings};

pub use geometry::{FingerGeometry, ZeroConfigReport, ZERO_CONFIG_TOLERANCE};
pub use keypoints::{link_keypoints, link_keypoints_jacobian, DigitKeypoints, KEYPOINTS_PER_DIGIT};
pub use residuals::{
    dip_partials, dip_residual, mcp_jacobian_d, mcp_jacobian_q, mcp_residual, pip_fourbar_partials,
    pip_fourbar_residual, pss_chain_residual, psu_partials, psu_residual, PsuPartials,
};
pub use solve::{
    alpha_from_pip, dip_coupled_angle, dip_coupling_derivative, finger_fk, finger_fk_detailed, finger_ik,
    finger_ik_detailed, pss_displacement, psu_displacement, FkSolution, IkSolution, StageResiduals,
};
pub(crate) use residuals::pss_chain_partials;
pub(crate) use solve::{
    alpha_from_psu, check_residuals, coupling_slope, pip_from_alpha, scalar_root, warm_alpha, COLD_START_STEPS,
};

/// Largest residual (m^2) accepted from any finger solve stage.
pub const STAGE_RESIDUAL_TOLERANCE: f64 = 1e-9;

/// Finger joint angles (rad). `q4` is passive and follows `q3`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FingerJointState {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
}

impl FingerJointState {
    pub fn new(q1: f64, q2: f64, q3: f64, q4: f64) -> Self {
        Self { q1, q2, q3, q4 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.q1, self.q2, self.q3, self.q4]
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }
}

/// Lead-screw displacements (m) relative to the rest pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl ActuatorState {
    pub fn new(d1: f64, d2: f64, d3: f64) -> Self {
        Self { d1, d2, d3 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.d1, self.d2, self.d3]
    }

    pub fn from_array(d: [f64; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mcp,
    Psu,
    PipFourBar,
    Dip,
    Abduction,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Mcp => "MCP",
            Stage::Psu => "PSU",
            Stage::PipFourBar => "PIP four-bar",
            Stage::Dip => "DIP four-bar",
            Stage::Abduction => "abduction",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FingerError {
    #[error("{stage} stage did not converge (residual {residual:.3e})")]
    NoConvergence { stage: Stage, residual: f64 },
    #[error("actuator d{} = {value} m is outside travel [{min}, {max}]", .actuator + 1)]
    OutOfTravel {
        actuator: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("joint command needs actuator d{} = {value} m, outside travel [{min}, {max}]", .actuator + 1)]
    TravelExceeded {
        actuator: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("DIP four-bar is at a toggle point (dh/dq4 = {derivative:.3e})")]
    SingularCoupling { derivative: f64 },
    #[error("invalid finger geometry: {0}")]
    InvalidGeometry(String),
    #[error(transparent)]
    Solver(#[from] KinError),
}

/// Solver settings used by every finger stage.
///
/// Residuals are squared lengths, so the tolerance is in m^2; 1e-15 m^2 keeps
/// joint round trips well below 1e-8 rad.
pub fn finger_solver_settings() -> SolverSettings {
    SolverSettings {
        max_iterations: 50,
        residual_tolerance: 1e-15,
        step_tolerance: 1e-14,
        initial_damping: 1e-6,
        finite_difference_step: 1e-7,
    }
}
