//! Levenberg-Marquardt with multiplicative damping updates and plateau
//! stopping.
//!
//! Each iteration linearizes the residual model, forms `A = J^T J` and
//! `g = J^T r`, clamps and damps the diagonal, solves `A d = -g`, retracts,
//! and keeps the step only if `sum r^2` strictly decreases.

use std::time::Instant;

use log::debug;

use crate::error::{invalid, Error, Result};
use crate::linsolve::{jacobi_preconditioner, pcg_solve, CholeskySolver, Ordering, SolveStats, SolverKind};
use crate::sparse::{diag_clamp_in_place, diag_scale_add_in_place, BsrMatrix, NormalAssembler};
use crate::trace::{evaluate, sparse_jacobian, Evaluation, ParamSet, ResidualModel};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub initial_damping: f64,
    pub min_damping: f64,
    pub max_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub diag_min: f64,
    pub diag_max: f64,
    pub max_iterations: usize,
    pub patience: usize,
    pub plateau_tol: f64,
    pub solver: SolverKind,
    pub ordering: Ordering,
    pub pcg_tol: f64,
    /// `None` means `max(250, 2 * free entities)`.
    pub pcg_max_iters: Option<usize>,
    /// Keep symbolic products, factors and the last linearization between
    /// iterations.
    pub reuse_cache: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-6,
            min_damping: 1e-16,
            max_damping: 1e16,
            damping_up: 2.0,
            damping_down: 0.5,
            diag_min: 1e-6,
            diag_max: 1e32,
            max_iterations: 10,
            patience: 3,
            plateau_tol: 1e-6,
            solver: SolverKind::Cholesky,
            ordering: Ordering::Amd,
            pcg_tol: 1e-8,
            pcg_max_iters: None,
            reuse_cache: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.min_damping
            && self.min_damping <= self.initial_damping
            && self.initial_damping <= self.max_damping
            && self.max_damping.is_finite()
            && self.damping_up > 0.0
            && self.damping_down > 0.0
            && self.patience >= 1
            && self.plateau_tol >= 0.0
            && self.diag_min <= self.diag_max
            && self.pcg_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("inconsistent LM configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Plateau,
    MaxIterations,
    SolverFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Plateau => "plateau",
            Termination::MaxIterations => "max_iters",
            Termination::SolverFailure => "solver_failure",
        })
    }
}

/// One row of the optimization trajectory. Row 0 is the initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost after this iteration (unchanged by a rejected step).
    pub cost: f64,
    /// Damping after the update rule ran.
    pub lambda: f64,
    pub accepted: bool,
    /// Seconds since the start of [`optimize`].
    pub elapsed: f64,
    pub solve: Option<SolveStats>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub accepted: bool,
    /// The linear solve failed and `lambda` was already at its maximum.
    pub solver_failure: bool,
    pub solve: Option<SolveStats>,
}

/// How often each kind of symbolic work ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SymbolicCounts {
    pub products: usize,
    pub flatten: usize,
    pub factor: usize,
}

/// Mutable optimizer state carried between [`lm_step`] calls.
#[derive(Debug)]
pub struct LmState {
    params: ParamSet,
    lambda: f64,
    cost: f64,
    residual_rows: usize,
    /// Cost after every iteration, starting with the initial cost.
    history: Vec<f64>,
    iteration: usize,
    accepted: usize,
    rejected: usize,
    assembler: NormalAssembler,
    cholesky: CholeskySolver,
    /// Forward pass at the current parameters, if not yet linearized.
    current: Option<Evaluation>,
    /// `(A, g)` at the current parameters.
    linearization: Option<(BsrMatrix, Vec<f64>)>,
}

impl LmState {
    pub fn new(model: &dyn ResidualModel, params: ParamSet, config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let ev = evaluate(model, &params)?;
        let cost = ev.cost();
        Ok(Self {
            params,
            lambda: config.initial_damping,
            cost,
            residual_rows: ev.rows(),
            history: vec![cost],
            iteration: 0,
            accepted: 0,
            rejected: 0,
            assembler: NormalAssembler::new(config.reuse_cache),
            cholesky: CholeskySolver::new(config.ordering, config.reuse_cache),
            current: Some(ev),
            linearization: None,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn accepted_steps(&self) -> usize {
        self.accepted
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    /// Residual blocks per evaluation (observations or edges).
    pub fn residual_rows(&self) -> usize {
        self.residual_rows
    }

    pub fn symbolic_counts(&self) -> SymbolicCounts {
        SymbolicCounts {
            products: self.assembler.product_builds(),
            flatten: self.assembler.flatten_builds(),
            factor: self.cholesky.symbolic_builds(),
        }
    }

    fn linearize(&mut self, model: &dyn ResidualModel) -> Result<(BsrMatrix, Vec<f64>)> {
        if let Some(lin) = &self.linearization {
            return Ok(lin.clone());
        }
        let ev = match self.current.take() {
            Some(ev) => ev,
            None => evaluate(model, &self.params)?,
        };
        let jac = sparse_jacobian(&ev, &self.params)?;
        let lin = self.assembler.assemble(&jac.blocks, ev.residuals())?;
        Ok(lin)
    }
}

fn is_solver_breakdown(e: &Error) -> bool {
    matches!(
        e,
        Error::NotSpd { .. } | Error::NumericalBreakdown { .. } | Error::InvalidArgument(_)
    )
}

fn solve(state: &mut LmState, a: &BsrMatrix, b: &[f64], config: &LmConfig) -> Result<(Vec<f64>, SolveStats)> {
    match config.solver {
        SolverKind::Cholesky => state.cholesky.solve(a, b),
        SolverKind::Pcg => {
            let m = jacobi_preconditioner(a)?;
            let entities: usize = state.params.groups().iter().map(|g| g.free_count()).sum();
            let max_iters = config.pcg_max_iters.unwrap_or(250.max(2 * entities));
            pcg_solve(a, b, &m, config.pcg_tol, max_iters)
        }
    }
}

/// One LM iteration. A rejected step leaves the parameters and cost
/// untouched and only raises the damping.
pub fn lm_step(model: &dyn ResidualModel, state: &mut LmState, config: &LmConfig) -> Result<StepOutcome> {
    let (a, g) = state.linearize(model)?;
    if config.reuse_cache {
        state.linearization = Some((a.clone(), g.clone()));
    }
    state.iteration += 1;

    let mut damped = a;
    diag_clamp_in_place(&mut damped, config.diag_min, config.diag_max)?;
    diag_scale_add_in_place(&mut damped, state.lambda)?;
    let rhs: Vec<f64> = g.iter().map(|v| -v).collect();

    let lambda_before = state.lambda;
    let reject = |state: &mut LmState, solve: Option<SolveStats>, failed: bool| {
        state.rejected += 1;
        state.lambda = (state.lambda * config.damping_up).min(config.max_damping);
        state.history.push(state.cost);
        if !config.reuse_cache {
            state.linearization = None;
        }
        StepOutcome {
            accepted: false,
            solver_failure: failed && lambda_before >= config.max_damping,
            solve,
        }
    };

    let (delta, stats) = match solve(state, &damped, &rhs, config) {
        Ok(v) => v,
        Err(e) if is_solver_breakdown(&e) => {
            debug!("iteration {}: linear solve failed ({e}), raising damping", state.iteration);
            return Ok(reject(state, None, true));
        }
        Err(e) => return Err(e),
    };
    let candidate = match state.params.retract(&delta) {
        Ok(p) => p,
        Err(_) => return Ok(reject(state, Some(stats), true)),
    };
    let ev = match evaluate(model, &candidate) {
        Ok(ev) => ev,
        Err(Error::Cheirality { row, depth }) => {
            debug!("iteration {}: step puts row {row} behind the camera ({depth:e})", state.iteration);
            return Ok(reject(state, Some(stats), false));
        }
        Err(e) => return Err(e),
    };
    let cost = ev.cost();
    if cost < state.cost {
        state.params = candidate;
        state.cost = cost;
        state.current = Some(ev);
        state.linearization = None;
        state.accepted += 1;
        state.lambda = (state.lambda * config.damping_down).max(config.min_damping);
        state.history.push(cost);
        Ok(StepOutcome {
            accepted: true,
            solver_failure: false,
            solve: Some(stats),
        })
    } else {
        Ok(reject(state, Some(stats), false))
    }
}

/// Whether the run should stop: the iteration budget is spent or the last
/// `patience` accepted steps each improved the cost by less than
/// `plateau_tol` relative.
///
/// `history` holds the cost after every iteration, initial cost first; a
/// rejected iteration repeats the previous cost.
pub fn stop_on_plateau(history: &[f64], config: &LmConfig) -> bool {
    if history.len() > config.max_iterations {
        return true;
    }
    let improvements: Vec<f64> = history
        .windows(2)
        .filter(|w| w[1] < w[0])
        .map(|w| (w[0] - w[1]) / w[0].abs())
        .collect();
    improvements.len() >= config.patience
        && improvements[improvements.len() - config.patience..]
            .iter()
            .all(|&r| r < config.plateau_tol)
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: ParamSet,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub termination: Termination,
    /// `iterations + 1` records, initial state first.
    pub trajectory: Vec<IterationRecord>,
    pub residual_rows: usize,
    pub symbolic: SymbolicCounts,
}

impl LmReport {
    /// `final_cost / residual_rows`: for BA the mean squared reprojection
    /// error per observation.
    pub fn mse(&self) -> f64 {
        self.final_cost / self.residual_rows as f64
    }
}

/// Runs [`lm_step`] until plateau, the iteration budget, or solver failure.
pub fn optimize(model: &dyn ResidualModel, params: ParamSet, config: &LmConfig) -> Result<LmReport> {
    let start = Instant::now();
    let mut state = LmState::new(model, params, config)?;
    let mut trajectory = vec![IterationRecord {
        iteration: 0,
        cost: state.cost,
        lambda: state.lambda,
        accepted: true,
        elapsed: start.elapsed().as_secs_f64(),
        solve: None,
    }];
    let termination = if config.max_iterations == 0 {
        Termination::MaxIterations
    } else {
        loop {
            let out = lm_step(model, &mut state, config)?;
            trajectory.push(IterationRecord {
                iteration: state.iteration,
                cost: state.cost,
                lambda: state.lambda,
                accepted: out.accepted,
                elapsed: start.elapsed().as_secs_f64(),
                solve: out.solve,
            });
            debug!(
                "iter {} cost {:e} lambda {:e} accepted {}",
                state.iteration, state.cost, state.lambda, out.accepted
            );
            if out.solver_failure {
                break Termination::SolverFailure;
            }
            if state.cost == 0.0 {
                break Termination::Plateau;
            }
            let plateau = LmConfig {
                max_iterations: usize::MAX,
                ..config.clone()
            };
            if stop_on_plateau(&state.history, &plateau) {
                break Termination::Plateau;
            }
            if state.iteration >= config.max_iterations {
                break Termination::MaxIterations;
            }
        }
    };
    Ok(LmReport {
        final_cost: state.cost,
        iterations: state.iteration,
        accepted_steps: state.accepted,
        rejected_steps: state.rejected,
        termination,
        trajectory,
        residual_rows: state.residual_rows,
        symbolic: state.symbolic_counts(),
        params: state.into_params(),
    })
}
