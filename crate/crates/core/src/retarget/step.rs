use nalgebra::{DMatrix, DVector};

use super::objective::couple;
use super::{prepare_frame, residuals_and_jacobian, HumanHandFrame, KeyvectorSpec, RetargetConfig, RetargetError, RESIDUAL_ROWS};
use crate::hand::{clamp_command, HandGeometry, HandJointState, DIGITS};
use crate::kincore::{solve_least_squares, ResidualProblem, SolveStatus};

/// Independent joints: abduction, flexion and PIP of each digit.
const REDUCED: usize = 3 * DIGITS;
/// Inward offset (rad) of the restart from a bound-stationary solution.
const BOUND_PROBE: f64 = 0.1;

/// Last accepted command; the smoothing reference of the next solve.
#[derive(Clone, Debug, PartialEq)]
pub struct RetargetState {
    pub q_prev: HandJointState,
    pub frames_solved: usize,
}

impl RetargetState {
    /// Seeds the first solve with neutral abduction and mid-range flexion.
    pub fn new(g: &HandGeometry) -> Self {
        let mut q = HandJointState::default();
        for (d, digit) in q.digits.iter_mut().enumerate() {
            let l = g.limit_map.static_limits[d];
            *digit = crate::finger::FingerJointState::from_array(std::array::from_fn(|j| if j == 0 { 0.0 } else { 0.5 * (l[j][0] + l[j][1]) }));
        }
        let q = clamp_command(&q, &g.limit_map);
        let q = couple(&q, g).map(|(q, _)| clamp_command(&q, &g.limit_map)).unwrap_or(q);
        Self { q_prev: q, frames_solved: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub command: HandJointState,
    pub cost: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

fn expand(x: &DVector<f64>, seed: &HandJointState) -> HandJointState {
    let mut q = *seed;
    for d in 0..DIGITS {
        q.digits[d].q1 = x[3 * d];
        q.digits[d].q2 = x[3 * d + 1];
        q.digits[d].q3 = x[3 * d + 2];
    }
    q
}

fn reduce(v: &[f64]) -> DVector<f64> {
    DVector::from_fn(REDUCED, |i, _| v[4 * (i / 3) + i % 3])
}

/// Retarget one frame. On failure the state is left untouched so the caller
/// keeps sending the previous command. The first frame has no previous
/// command, so it is solved without the smoothing term.
pub fn retarget_step(
    frame: &HumanHandFrame,
    spec: &KeyvectorSpec,
    cfg: &RetargetConfig,
    state: &mut RetargetState,
    g: &HandGeometry,
) -> Result<StepReport, RetargetError> {
    let first;
    let cfg = if state.frames_solved == 0 {
        first = RetargetConfig {
            lambda_smooth: 0.0,
            ..cfg.clone()
        };
        &first
    } else {
        cfg
    };
    let prepared = prepare_frame(frame, spec, cfg)?;
    let prev = state.q_prev;
    let eval = |x: &DVector<f64>| residuals_and_jacobian(&expand(x, &prev), &prepared, spec, cfg, g, &prev);
    let problem = ResidualProblem::new(REDUCED, RESIDUAL_ROWS, |x, r| match eval(x) {
        Ok((v, _)) => r.copy_from(&v),
        Err(_) => r.fill(f64::NAN),
    })
    .with_jacobian(|x, j: &mut DMatrix<f64>| match eval(x) {
        Ok((_, full)) => {
            for c in 0..REDUCED {
                j.set_column(c, &full.column(4 * (c / 3) + c % 3));
            }
        }
        Err(_) => j.fill(f64::NAN),
    })
    .with_bounds(reduce(&cfg.q_lower), reduce(&cfg.q_upper))?;
    let (lo, hi) = (reduce(&cfg.q_lower), reduce(&cfg.q_upper));
    let mut sol = solve_least_squares(&problem, &reduce(&prev.to_array()), &cfg.solver)?;
    // A straight joint on its bound can be a stationary point of the cost
    // without being a minimum; retry once from just inside the box.
    if sol.is_converged() && sol.cost > cfg.solver.residual_tolerance {
        let mut moved = false;
        let mut x = sol.x.clone();
        for i in 0..REDUCED {
            let room = hi[i] - lo[i];
            if x[i] <= lo[i] {
                x[i] = lo[i] + BOUND_PROBE.min(0.5 * room);
                moved = true;
            } else if x[i] >= hi[i] {
                x[i] = hi[i] - BOUND_PROBE.min(0.5 * room);
                moved = true;
            }
        }
        if moved {
            let retry = solve_least_squares(&problem, &x, &cfg.solver)?;
            if retry.is_converged() && retry.cost < sol.cost {
                sol = retry;
            }
        }
    }
    if !sol.is_converged() {
        return Err(RetargetError::NoConvergence {
            status: format!("{:?}", sol.status),
            cost: sol.cost,
        });
    }
    let clamped = clamp_command(&expand(&sol.x, &prev), &g.limit_map);
    // Rounding in the DIP closure can land a hair outside the DIP range.
    let command = clamp_command(&couple(&clamped, g)?.0, &g.limit_map);
    state.q_prev = command;
    state.frames_solved += 1;
    Ok(StepReport {
        command,
        cost: sol.cost,
        iterations: sol.iterations,
        status: sol.status,
    })
}
