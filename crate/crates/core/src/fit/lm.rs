//! Levenberg–Marquardt with Marquardt diagonal scaling.
//!
//! Each iteration solves `(JᵀJ + μ·diag(JᵀJ)) δ = -Jᵀr` by Cholesky and
//! accepts the step only if `½‖r‖²` strictly decreases. Rejected steps
//! raise `μ`; accepted ones lower it. Problems may change their residual
//! set at fixed intervals through [`LeastSquares::refresh`]; between
//! refreshes the residual count is frozen.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub trait LeastSquares {
    fn num_params(&self) -> usize;

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;

    /// Re-derives any state that depends on `x` (e.g. visibility). Returns
    /// true if the objective changed.
    fn refresh(&mut self, _x: &DVector<f64>) -> Result<bool> {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    /// Relative energy decrease below which an accepted step ends the solve.
    pub function_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub min_damping: f64,
    pub max_damping: f64,
    /// Iterations between calls to [`LeastSquares::refresh`]; 0 disables.
    pub refresh_interval: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            parameter_tolerance: 1e-10,
            function_tolerance: 1e-12,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.1,
            min_damping: 1e-12,
            max_damping: 1e12,
            refresh_interval: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    ParameterTolerance,
    FunctionTolerance,
    /// Damping saturated without finding a decreasing step.
    NoImprovement,
    MaxIterations,
    /// The damped system stayed indefinite up to the maximum damping.
    SolverFailure,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::SolverFailure)
    }
}

/// One trial step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub energy_before: f64,
    /// `None` when the trial point could not be evaluated.
    pub energy_after: Option<f64>,
    pub damping: f64,
    pub accepted: bool,
    /// Incremented whenever a refresh changes the objective.
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub x: DVector<f64>,
    pub energy: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub history: Vec<StepRecord>,
}

fn half_sq(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

pub fn minimize<P: LeastSquares>(
    problem: &mut P,
    x0: DVector<f64>,
    config: &LmConfig,
) -> Result<LmReport> {
    let n = problem.num_params();
    let mut x = x0;
    let (mut r, mut jac) = problem.residuals_and_jacobian(&x)?;
    let mut energy = half_sq(&r);
    let mut mu = config.initial_damping;
    let mut history = Vec::new();
    let mut epoch = 0;
    let mut iteration = 0;

    let termination = loop {
        if iteration >= config.max_iterations {
            break Termination::MaxIterations;
        }
        iteration += 1;
        if config.refresh_interval > 0
            && iteration > 1
            && (iteration - 1) % config.refresh_interval == 0
            && problem.refresh(&x)?
        {
            epoch += 1;
            (r, jac) = problem.residuals_and_jacobian(&x)?;
            energy = half_sq(&r);
        }

        let gradient = jac.tr_mul(&r);
        let hessian = jac.tr_mul(&jac);
        let stop = if gradient.amax() < config.gradient_tolerance {
            Some(Termination::GradientTolerance)
        } else {
            None
        };

        let diag_floor = hessian.diagonal().max() * 1e-12;
        let scale: DVector<f64> = hessian.diagonal().map(|d| d.max(diag_floor).max(1e-300));

        let mut outcome = stop;
        while outcome.is_none() {
            let mut damped = hessian.clone();
            for i in 0..n {
                damped[(i, i)] += mu * scale[i];
            }
            let Some(chol) = damped.cholesky() else {
                mu *= config.damping_increase;
                if mu > config.max_damping {
                    outcome = Some(Termination::SolverFailure);
                }
                continue;
            };
            let step = -chol.solve(&gradient);
            if step.norm() <= config.parameter_tolerance * (x.norm() + config.parameter_tolerance) {
                outcome = Some(Termination::ParameterTolerance);
                break;
            }
            let candidate = &x + &step;
            let trial = problem.residuals(&candidate).ok().map(|rc| half_sq(&rc));
            let accepted = matches!(trial, Some(e) if e < energy);
            history.push(StepRecord {
                iteration,
                energy_before: energy,
                energy_after: trial,
                damping: mu,
                accepted,
                epoch,
            });
            if accepted {
                let new_energy = trial.unwrap();
                let decrease = energy - new_energy;
                x = candidate;
                (r, jac) = problem.residuals_and_jacobian(&x)?;
                energy = half_sq(&r);
                mu = (mu * config.damping_decrease).max(config.min_damping);
                if decrease <= config.function_tolerance * new_energy.max(f64::MIN_POSITIVE) {
                    outcome = Some(Termination::FunctionTolerance);
                }
                break;
            }
            mu *= config.damping_increase;
            if mu > config.max_damping {
                outcome = Some(Termination::NoImprovement);
            }
        }

        if let Some(reason) = outcome {
            // A converged point is only final if the frozen state still holds
            // there.
            if reason.converged() && config.refresh_interval > 0 && problem.refresh(&x)? {
                epoch += 1;
                (r, jac) = problem.residuals_and_jacobian(&x)?;
                energy = half_sq(&r);
                mu = mu.min(config.initial_damping);
                continue;
            }
            break reason;
        }
    };

    Ok(LmReport {
        x,
        energy,
        iterations: iteration,
        termination,
        history,
    })
}
