//! Dense nonlinear root finding and bound-constrained least squares.
//!
//! Every solver in the crate funnels through one Levenberg–Marquardt loop with
//! Marquardt (diagonal) scaling. Damping is multiplied by 10 on a rejected step
//! and divided by 10 on an accepted one. Bounds are handled by projecting the
//! trial point onto the box and freezing coordinates whose gradient pushes them
//! out of it, so every iterate is feasible.
//!
//! Systems here are tiny (n <= 20), so everything is dense and allocated once
//! per solve. Multiple roots are not disambiguated: the solver stays in the
//! basin of `x0`, and callers that need continuity must warm start from the
//! previous solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

type ResidualFn<'a> = dyn Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync + 'a;
type JacobianFn<'a> = dyn Fn(&DVector<f64>, &mut DMatrix<f64>) + Send + Sync + 'a;

const DAMPING_MIN: f64 = 1e-20;
const DAMPING_MAX: f64 = 1e16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("root solve needs a square system, got {residuals} residuals for {unknowns} unknowns")]
    NotSquare { unknowns: usize, residuals: usize },
    #[error("least squares needs at least as many residuals ({residuals}) as unknowns ({unknowns})")]
    Underdetermined { unknowns: usize, residuals: usize },
    #[error("bounds at index {index} are not ordered: lower {lower} > upper {upper}")]
    InvalidBounds { index: usize, lower: f64, upper: f64 },
    #[error("invalid solver settings: {0}")]
    InvalidSettings(&'static str),
    #[error("initial guess is not finite")]
    NonFiniteStart,
    #[error("evaluation is not finite when perturbing coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },
}

/// A residual map `x -> r(x)` with an optional analytic Jacobian and optional box bounds.
pub struct ResidualProblem<'a> {
    dim_x: usize,
    dim_r: usize,
    residual: Box<ResidualFn<'a>>,
    jacobian: Option<Box<JacobianFn<'a>>>,
    bounds: Option<(DVector<f64>, DVector<f64>)>,
}

impl<'a> ResidualProblem<'a> {
    pub fn new(
        dim_x: usize,
        dim_r: usize,
        residual: impl Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync + 'a,
    ) -> Self {
        Self {
            dim_x,
            dim_r,
            residual: Box::new(residual),
            jacobian: None,
            bounds: None,
        }
    }

    /// Attach an analytic Jacobian (row-major in residual index, column per unknown).
    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(&DVector<f64>, &mut DMatrix<f64>) + Send + Sync + 'a,
    ) -> Self {
        self.jacobian = Some(Box::new(jacobian));
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, KinError> {
        for (len, what) in [(lower.len(), "lower bounds"), (upper.len(), "upper bounds")] {
            if len != self.dim_x {
                return Err(KinError::DimensionMismatch {
                    what,
                    expected: self.dim_x,
                    got: len,
                });
            }
        }
        for i in 0..self.dim_x {
            if !(lower[i] <= upper[i]) {
                return Err(KinError::InvalidBounds {
                    index: i,
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        self.bounds = Some((lower, upper));
        Ok(self)
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_r(&self) -> usize {
        self.dim_r
    }

    pub fn bounds(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        self.bounds.as_ref().map(|(l, u)| (l, u))
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim_r);
        (self.residual)(x, &mut r);
        r
    }

    /// Analytic Jacobian if one was supplied, central differences otherwise.
    pub fn jacobian(&self, x: &DVector<f64>, fd_step: f64) -> Result<DMatrix<f64>, KinError> {
        let mut j = DMatrix::zeros(self.dim_r, self.dim_x);
        self.jacobian_into(x, fd_step, &mut j)?;
        Ok(j)
    }

    fn jacobian_into(&self, x: &DVector<f64>, fd_step: f64, out: &mut DMatrix<f64>) -> Result<(), KinError> {
        match &self.jacobian {
            Some(jac) => {
                jac(x, out);
                Ok(())
            }
            None => {
                *out = numeric_jacobian(|v: &DVector<f64>| self.residual(v), x, fd_step)?;
                Ok(())
            }
        }
    }

    fn project(&self, x: &mut DVector<f64>) -> bool {
        let mut moved = false;
        if let Some((lo, hi)) = &self.bounds {
            for i in 0..x.len() {
                let c = x[i].clamp(lo[i], hi[i]);
                if c != x[i] {
                    x[i] = c;
                    moved = true;
                }
            }
        }
        moved
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub residual_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub finite_difference_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            residual_tolerance: 1e-10,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
            finite_difference_step: 1e-6,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), KinError> {
        if self.max_iterations == 0 {
            return Err(KinError::InvalidSettings("max_iterations must be at least 1"));
        }
        let positive = [
            (self.residual_tolerance, "residual_tolerance must be > 0"),
            (self.step_tolerance, "step_tolerance must be > 0"),
            (self.initial_damping, "initial_damping must be > 0"),
            (self.finite_difference_step, "finite_difference_step must be > 0"),
        ];
        for (v, msg) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KinError::InvalidSettings(msg));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    SingularJacobian,
    DivergedNaN,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub x: DVector<f64>,
    /// Infinity norm of the residual at `x`.
    pub final_residual_norm: f64,
    /// Half the squared two-norm of the residual at `x`.
    pub cost: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// The initial guess was outside the bounds and got projected.
    pub projected_start: bool,
}

impl SolveResult {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Root,
    LeastSquares,
}

/// Solve the square system `r(x) = 0` starting from `x0`.
///
/// `Converged` means `max_i |r_i(x)| <= residual_tolerance`.
pub fn solve_root(
    problem: &ResidualProblem<'_>,
    x0: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<SolveResult, KinError> {
    if problem.dim_r != problem.dim_x {
        return Err(KinError::NotSquare {
            unknowns: problem.dim_x,
            residuals: problem.dim_r,
        });
    }
    levenberg_marquardt(problem, x0, settings, Mode::Root)
}

/// Minimize `0.5 * ||r(x)||^2` subject to the problem's bounds.
///
/// `Converged` means the projected gradient `x - P(x - J^T r)` has infinity
/// norm at most `step_tolerance`, or that no step longer than
/// `step_tolerance` (relative to `|x|`) can still decrease the cost.
pub fn solve_least_squares(
    problem: &ResidualProblem<'_>,
    x0: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<SolveResult, KinError> {
    if problem.dim_r < problem.dim_x {
        return Err(KinError::Underdetermined {
            unknowns: problem.dim_x,
            residuals: problem.dim_r,
        });
    }
    levenberg_marquardt(problem, x0, settings, Mode::LeastSquares)
}

/// Central-difference Jacobian with absolute step `h`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>, KinError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(h > 0.0) {
        return Err(KinError::InvalidSettings("finite difference step must be > 0"));
    }
    let n = x.len();
    let mut probe = x.clone();
    let mut jac: Option<DMatrix<f64>> = None;
    for i in 0..n {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if plus.iter().chain(minus.iter()).any(|v| !v.is_finite()) {
            return Err(KinError::NonFiniteEvaluation { coordinate: i });
        }
        let j = jac.get_or_insert_with(|| DMatrix::zeros(plus.len(), n));
        if plus.len() != j.nrows() || minus.len() != j.nrows() {
            return Err(KinError::DimensionMismatch {
                what: "residual length",
                expected: j.nrows(),
                got: plus.len(),
            });
        }
        for k in 0..plus.len() {
            j[(k, i)] = (plus[k] - minus[k]) / (2.0 * h);
        }
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(0, 0)))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn levenberg_marquardt(
    problem: &ResidualProblem<'_>,
    x0: &DVector<f64>,
    settings: &SolverSettings,
    mode: Mode,
) -> Result<SolveResult, KinError> {
    settings.validate()?;
    let n = problem.dim_x;
    let m = problem.dim_r;
    if x0.len() != n {
        return Err(KinError::DimensionMismatch {
            what: "initial guess",
            expected: n,
            got: x0.len(),
        });
    }
    if !all_finite(x0) {
        return Err(KinError::NonFiniteStart);
    }

    let mut x = x0.clone();
    let projected_start = problem.project(&mut x);
    let mut r = DVector::zeros(m);
    (problem.residual)(&x, &mut r);

    let finish = |x: DVector<f64>, r: &DVector<f64>, iterations, status| SolveResult {
        final_residual_norm: inf_norm(r),
        cost: 0.5 * r.norm_squared(),
        x,
        iterations,
        status,
        projected_start,
    };

    if !all_finite(&r) {
        return Ok(finish(x, &r, 0, SolveStatus::DivergedNaN));
    }

    let mut cost = 0.5 * r.norm_squared();
    let mut damping = settings.initial_damping;
    let mut jac = DMatrix::zeros(m, n);
    let mut trial = DVector::zeros(n);
    let mut r_trial = DVector::zeros(m);
    let mut free = vec![true; n];

    for iter in 0..settings.max_iterations {
        if mode == Mode::Root && inf_norm(&r) <= settings.residual_tolerance {
            return Ok(finish(x, &r, iter, SolveStatus::Converged));
        }

        problem.jacobian_into(&x, settings.finite_difference_step, &mut jac)?;
        if jac.iter().any(|v| !v.is_finite()) {
            return Ok(finish(x, &r, iter, SolveStatus::DivergedNaN));
        }
        let gradient = jac.tr_mul(&r);

        // Freeze coordinates sitting on a bound whose descent direction leaves the box.
        let mut projected_gradient = 0.0f64;
        for i in 0..n {
            free[i] = true;
            if let Some((lo, hi)) = &problem.bounds {
                let g = gradient[i];
                if (x[i] <= lo[i] && g > 0.0) || (x[i] >= hi[i] && g < 0.0) {
                    free[i] = false;
                }
                let pg = x[i] - (x[i] - g).clamp(lo[i], hi[i]);
                projected_gradient = projected_gradient.max(pg.abs());
            } else {
                projected_gradient = projected_gradient.max(gradient[i].abs());
            }
        }
        if mode == Mode::LeastSquares && projected_gradient <= settings.step_tolerance {
            return Ok(finish(x, &r, iter, SolveStatus::Converged));
        }

        let free_idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        if free_idx.is_empty() {
            // Every coordinate is pinned against a bound by its gradient: a KKT point.
            let status = match mode {
                Mode::LeastSquares => SolveStatus::Converged,
                Mode::Root => SolveStatus::MaxIterations,
            };
            return Ok(finish(x, &r, iter, status));
        }
        let k = free_idx.len();
        let jtj = jac.tr_mul(&jac);
        let max_diag = free_idx.iter().map(|&i| jtj[(i, i)]).fold(0.0f64, f64::max);
        if !(max_diag > 0.0) {
            return Ok(finish(x, &r, iter, SolveStatus::SingularJacobian));
        }
        let floor = max_diag * 1e-12;
        let mut reduced = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (a, &i) in free_idx.iter().enumerate() {
            rhs[a] = -gradient[i];
            for (b, &j) in free_idx.iter().enumerate() {
                reduced[(a, b)] = jtj[(i, j)];
            }
        }

        let xnorm = inf_norm(&x);
        loop {
            let mut system = reduced.clone();
            for (a, &i) in free_idx.iter().enumerate() {
                system[(a, a)] += damping * jtj[(i, i)].max(floor);
            }
            let Some(chol) = system.cholesky() else {
                damping *= 10.0;
                if damping > DAMPING_MAX {
                    return Ok(finish(x, &r, iter + 1, SolveStatus::SingularJacobian));
                }
                continue;
            };
            let delta = chol.solve(&rhs);
            trial.copy_from(&x);
            for (a, &i) in free_idx.iter().enumerate() {
                trial[i] += delta[a];
            }
            problem.project(&mut trial);
            let step = (0..n).fold(0.0f64, |s, i| s.max((trial[i] - x[i]).abs()));
            let negligible = step <= settings.step_tolerance * (xnorm + settings.step_tolerance);

            (problem.residual)(&trial, &mut r_trial);
            let trial_cost = 0.5 * r_trial.norm_squared();
            if all_finite(&r_trial) && trial_cost < cost {
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = trial_cost;
                damping = (damping / 10.0).max(DAMPING_MIN);
                if mode == Mode::LeastSquares && negligible {
                    return Ok(finish(x, &r, iter + 1, SolveStatus::Converged));
                }
                break;
            }
            if negligible {
                // Nothing left to gain at working precision.
                let status = match mode {
                    Mode::LeastSquares => SolveStatus::Converged,
                    Mode::Root if inf_norm(&r) <= settings.residual_tolerance => SolveStatus::Converged,
                    Mode::Root => SolveStatus::MaxIterations,
                };
                return Ok(finish(x, &r, iter + 1, status));
            }
            damping *= 10.0;
            if damping > DAMPING_MAX {
                let status = if all_finite(&r_trial) {
                    SolveStatus::SingularJacobian
                } else {
                    SolveStatus::DivergedNaN
                };
                return Ok(finish(x, &r, iter + 1, status));
            }
        }
    }

    let iterations = settings.max_iterations;
    let status = if mode == Mode::Root && inf_norm(&r) <= settings.residual_tolerance {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    Ok(finish(x, &r, iterations, status))
}
