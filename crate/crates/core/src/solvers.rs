//! Outer iteration for one load step.
//!
//! All strategies share `psi <- psi + tau delta` with `K delta = -R(psi)` and
//! Armijo backtracking on the merit. They differ only in the per-triangle
//! blocks `S_T` of `K`:
//!
//! * `Ssn`: generalized Jacobian of the material law, every iteration.
//! * `Lqn`: BFGS-updated 2x2 blocks, started from the generalized Jacobian.
//! * `Lcm`: scalar difference-quotient slopes from the first iterate, factorized once.
//! * `Gcm`: `mu0 mu_r I` everywhere, factorized once per solver.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use faer::sparse::linalg::solvers::SymbolicLlt;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{Evaluation, FemError, GateLoads, P1Model, QuadPointState};
use crate::linalg::{dot, norm, LinalgError, SparseSym, SpdFactor};
use crate::material::MU0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(alias = "SSN")]
    Ssn,
    #[serde(alias = "LQN")]
    Lqn,
    #[serde(alias = "LCM")]
    Lcm,
    #[serde(alias = "GCM")]
    Gcm,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ssn, Strategy::Lqn, Strategy::Lcm, Strategy::Gcm];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ssn => "ssn",
            Strategy::Lqn => "lqn",
            Strategy::Lcm => "lcm",
            Strategy::Gcm => "gcm",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy '{s}' (expected ssn, lqn, lcm or gcm)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub strategy: Strategy,
    pub armijo_rho: f64,
    pub armijo_sigma: f64,
    pub term_rel_tol: f64,
    pub max_iters: usize,
    pub max_backtracks: u32,
    pub gcm_mu_r: f64,
    /// Field step of the difference quotients, A/m.
    pub lcm_fd_step: f64,
    /// Optional extra stop: `sum_i |R_i| <= flux_tol * max_i |Phi_i|` must hold
    /// as well as the merit criterion. The residual is measured in flux
    /// units and bounds the imbalance of the recovered gate fluxes.
    pub flux_tol: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ssn,
            armijo_rho: 0.5,
            armijo_sigma: 0.1,
            term_rel_tol: 1e-8,
            max_iters: 500,
            max_backtracks: 60,
            gcm_mu_r: 1000.0,
            lcm_fd_step: 1.0,
            flux_tol: None,
        }
    }
}

impl SolverConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.armijo_sigma > 0.0 && self.armijo_sigma < 0.5) {
            return bad("armijo_sigma must lie in (0, 1/2)");
        }
        if !(self.armijo_rho > 0.0 && self.armijo_rho < 1.0) {
            return bad("armijo_rho must lie in (0, 1)");
        }
        if !(self.term_rel_tol > 0.0) {
            return bad("term_rel_tol must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.gcm_mu_r > 0.0 && self.gcm_mu_r.is_finite()) {
            return bad("gcm_mu_r must be positive");
        }
        if !(self.lcm_fd_step > 0.0 && self.lcm_fd_step.is_finite()) {
            return bad("lcm_fd_step must be positive");
        }
        if let Some(t) = self.flux_tol {
            if !(t > 0.0 && t.is_finite()) {
                return bad("flux_tol must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub strategy: Strategy,
    /// Accepted updates.
    pub iterations: usize,
    pub step_sizes: Vec<f64>,
    /// Merit at the initial guess and after every update.
    pub merit_history: Vec<f64>,
    /// Euclidean norm of the residual at every computed direction.
    pub residual_norms: Vec<f64>,
    /// `||grad delta||_h` of every computed direction, the final unused one included.
    pub direction_norms: Vec<f64>,
    pub factorizations: usize,
    pub wall_time_s: f64,
    pub converged: bool,
}

impl SolveReport {
    fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            iterations: 0,
            step_sizes: Vec::new(),
            merit_history: Vec::new(),
            residual_norms: Vec::new(),
            direction_norms: Vec::new(),
            factorizations: 0,
            wall_time_s: 0.0,
            converged: false,
        }
    }

    pub fn final_merit(&self) -> f64 {
        *self.merit_history.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no convergence within {iterations} iterations (last merit change {last_change:e})")]
    MaxIters { iterations: usize, last_change: f64 },
    #[error("line search failed at iteration {iteration} (slope {slope:e})")]
    LineSearch { iteration: usize, slope: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fem(#[from] FemError),
}

impl From<LinalgError> for SolverError {
    fn from(e: LinalgError) -> Self {
        SolverError::Fem(FemError::Linalg(e))
    }
}

/// Converged iterate of one load step.
#[derive(Debug, Clone)]
pub struct LoadStepOutcome {
    pub psi: Vec<f64>,
    /// Material response at `psi`, ready to be committed.
    pub eval: Evaluation,
    pub report: SolveReport,
}

/// Merit values are trusted up to this multiple of their rounding scale.
const MERIT_ROUNDING: f64 = 8.0 * f64::EPSILON;
/// Curvature pairs with `s.y` below this fraction of `|s||y|` are skipped.
const BFGS_SKIP: f64 = 1e-12;

/// `delta = -K^{-1} R`.
pub fn newton_step(factor: &SpdFactor, residual: &[f64]) -> Vec<f64> {
    factor.solve(residual).into_iter().map(|x| -x).collect()
}

/// Largest `tau = rho^m`, `m <= max_backtracks`, with
/// `M(psi + tau delta) <= M(psi) + sigma tau slope`, where `slope = R . delta < 0`.
/// Returns the step and the evaluation at the accepted point.
#[allow(clippy::too_many_arguments)]
pub fn armijo_linesearch(
    model: &P1Model,
    states: &[QuadPointState],
    loads: &GateLoads,
    psi: &[f64],
    current: &Evaluation,
    direction: &[f64],
    slope: f64,
    cfg: &SolverConfig,
) -> Result<(f64, Evaluation), SolverError> {
    if !(slope < 0.0) {
        return Err(SolverError::LineSearch { iteration: 0, slope });
    }
    let mut tau = 1.0;
    let mut trial_psi = vec![0.0; psi.len()];
    for _ in 0..=cfg.max_backtracks {
        for ((t, p), d) in trial_psi.iter_mut().zip(psi).zip(direction) {
            *t = p + tau * d;
        }
        let trial = model.evaluate(&trial_psi, states, loads)?;
        if trial.merit <= current.merit + cfg.armijo_sigma * tau * slope {
            return Ok((tau, trial));
        }
        // Once the change of M is below its rounding level the comparison
        // is noise; the derivative form of the Armijo condition, exact for
        // quadratic M, is decided instead.
        let slack = MERIT_ROUNDING * current.merit_scale.max(trial.merit_scale);
        if (trial.merit - current.merit).abs() <= slack
            && dot(&model.residual(&trial, loads), direction) <= (2.0 * cfg.armijo_sigma - 1.0) * slope
        {
            return Ok((tau, trial));
        }
        tau *= cfg.armijo_rho;
    }
    Err(SolverError::LineSearch { iteration: 0, slope })
}

/// Runs load steps on one model and keeps the factorizations that outlive a step.
pub struct Solver<'a> {
    model: &'a P1Model,
    cfg: SolverConfig,
    symbolic: Option<SymbolicLlt<usize>>,
    fixed_gcm: Option<SpdFactor>,
}

impl<'a> Solver<'a> {
    pub fn new(model: &'a P1Model, cfg: SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            symbolic: None,
            fixed_gcm: None,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn factorize(&mut self, k: &SparseSym, report: &mut SolveReport) -> Result<SpdFactor, SolverError> {
        report.factorizations += 1;
        let f = match &self.symbolic {
            Some(sym) => SpdFactor::with_symbolic(sym.clone(), k)?,
            None => {
                let f = SpdFactor::new(k)?;
                self.symbolic = Some(f.symbolic());
                f
            }
        };
        Ok(f)
    }

    fn factorize_blocks(&mut self, blocks: &[Matrix2<f64>], report: &mut SolveReport) -> Result<SpdFactor, SolverError> {
        let k = self.model.assemble(blocks)?;
        self.factorize(&k, report)
    }

    /// Scalar slopes `(dBx/dHx + dBy/dHy) / 2` from central differences,
    /// clamped to the admissible slope range of each material.
    fn lcm_blocks(&self, eval: &Evaluation, states: &[QuadPointState]) -> Result<Vec<Matrix2<f64>>, SolverError> {
        let step = self.cfg.lcm_fd_step;
        let mut blocks = Vec::with_capacity(states.len());
        for (t, qp) in states.iter().enumerate() {
            let stack = &self.model.materials[qp.material];
            let h = eval.h[t];
            let mut slope = 0.0;
            for axis in 0..2 {
                let mut e = Vector2::zeros();
                e[axis] = step;
                let fwd = stack.forward_b(&(h + e), &qp.state);
                let bwd = stack.forward_b(&(h - e), &qp.state);
                let (fwd, bwd) = match (fwd, bwd) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(source), _) | (_, Err(source)) => {
                        return Err(FemError::Material { triangle: t, source }.into())
                    }
                };
                let denom = 2.0 * step;
                slope += if denom.abs() < 1e-14 {
                    stack.mu0
                } else {
                    (fwd[axis] - bwd[axis]) / denom
                };
            }
            let mu = (0.5 * slope).clamp(stack.mu0, stack.lipschitz_bound());
            blocks.push(Matrix2::identity() * mu);
        }
        Ok(blocks)
    }

    /// Solves one load step from `psi0` with fixed memory `states`.
    pub fn run_load_step(
        &mut self,
        psi0: &[f64],
        states: &[QuadPointState],
        loads: &GateLoads,
    ) -> Result<LoadStepOutcome, SolverError> {
        let start = Instant::now();
        let model = self.model;
        let cfg = self.cfg;
        let mut report = SolveReport::new(cfg.strategy);
        let mut psi = psi0.to_vec();
        let mut eval = model.evaluate(&psi, states, loads)?;
        let tol = cfg.term_rel_tol * eval.merit.abs().max(1.0);
        report.merit_history.push(eval.merit);

        let mut blocks: Vec<Matrix2<f64>> = Vec::new();
        let mut fixed: Option<SpdFactor> = None;
        match cfg.strategy {
            Strategy::Ssn => {}
            Strategy::Lqn => blocks = model.jacobian_blocks(&eval, states),
            Strategy::Lcm => {
                let b = self.lcm_blocks(&eval, states)?;
                fixed = Some(self.factorize_blocks(&b, &mut report)?);
            }
            Strategy::Gcm => {
                if self.fixed_gcm.is_none() {
                    let mu = MU0 * cfg.gcm_mu_r;
                    let b = vec![Matrix2::identity() * mu; model.num_triangles()];
                    let f = self.factorize_blocks(&b, &mut report)?;
                    self.fixed_gcm = Some(f);
                }
            }
        }

        let flux_scale = loads.all().iter().fold(0.0f64, |m, f| m.max(f.abs())).max(f64::MIN_POSITIVE);
        let flux_ok = |r: &[f64]| {
            cfg.flux_tol
                .is_none_or(|t| r.iter().map(|x| x.abs()).sum::<f64>() <= t * flux_scale)
        };
        let mut merit_settled = false;
        let mut last_change = f64::INFINITY;
        for iteration in 0..cfg.max_iters {
            let r = model.residual(&eval, loads);
            report.residual_norms.push(norm(&r));
            let balanced = flux_ok(&r);
            if merit_settled && balanced {
                report.converged = true;
                break;
            }
            let direction = match cfg.strategy {
                Strategy::Ssn => {
                    let b = model.jacobian_blocks(&eval, states);
                    newton_step(&self.factorize_blocks(&b, &mut report)?, &r)
                }
                Strategy::Lqn => {
                    let b = blocks.clone();
                    newton_step(&self.factorize_blocks(&b, &mut report)?, &r)
                }
                Strategy::Lcm => newton_step(fixed.as_ref().expect("factorized above"), &r),
                Strategy::Gcm => newton_step(self.fixed_gcm.as_ref().expect("factorized above"), &r),
            };
            report.direction_norms.push(model.grad_norm(&direction));
            let slope = dot(&r, &direction);

            // For convex M every step along delta with tau <= 1 lowers M by at
            // most |slope|, so the merit-change test would be met next anyway.
            if -slope <= tol && balanced {
                report.converged = true;
                break;
            }
            let (tau, trial) = armijo_linesearch(model, states, loads, &psi, &eval, &direction, slope, &cfg)
                .map_err(|e| match e {
                    SolverError::LineSearch { slope, .. } => SolverError::LineSearch { iteration, slope },
                    other => other,
                })?;
            for (p, d) in psi.iter_mut().zip(&direction) {
                *p += tau * d;
            }
            if cfg.strategy == Strategy::Lqn {
                bfgs_update(&mut blocks, &eval, &trial);
            }
            last_change = trial.merit - eval.merit;
            eval = trial;
            report.iterations += 1;
            report.step_sizes.push(tau);
            report.merit_history.push(eval.merit);
            if last_change.abs() <= tol {
                if cfg.flux_tol.is_none() {
                    report.converged = true;
                    break;
                }
                merit_settled = true;
            }
        }
        report.wall_time_s = start.elapsed().as_secs_f64();
        if !report.converged {
            return Err(SolverError::MaxIters {
                iterations: report.iterations,
                last_change,
            });
        }
        Ok(LoadStepOutcome { psi, eval, report })
    }
}

/// BFGS update of every block with `s = H_new - H_old`, `y = B_new - B_old`.
fn bfgs_update(blocks: &mut [Matrix2<f64>], old: &Evaluation, new: &Evaluation) {
    for (t, m) in blocks.iter_mut().enumerate() {
        let s = new.h[t] - old.h[t];
        let y = new.responses[t].b - old.responses[t].b;
        let sy = s.dot(&y);
        if s.norm() == 0.0 || sy <= BFGS_SKIP * s.norm() * y.norm() {
            continue;
        }
        let ms = *m * s;
        let sms = s.dot(&ms);
        if sms <= 0.0 {
            continue;
        }
        *m += y * y.transpose() / sy - ms * ms.transpose() / sms;
        // keep the block exactly symmetric
        let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
        m[(0, 1)] = off;
        m[(1, 0)] = off;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_spd;
    use crate::material::MaterialStack;
    use crate::mesh::{build_tjoint, TJointParams, TriMesh};

    fn coarse() -> TriMesh {
        build_tjoint(&TJointParams::default()).unwrap()
    }

    fn linear(mu: f64) -> MaterialStack {
        MaterialStack {
            cells: Vec::new(),
            mu0: mu,
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let mut c = SolverConfig::default();
        c.armijo_sigma = 0.5;
        assert!(c.validate().is_err());
        c = SolverConfig::default();
        c.armijo_rho = 1.0;
        assert!(c.validate().is_err());
        assert_eq!("GCM".parse::<Strategy>().unwrap(), Strategy::Gcm);
        assert!("newton".parse::<Strategy>().is_err());
    }

    #[test]
    fn zero_load_needs_no_iteration() {
        let model = P1Model::gated(coarse(), MaterialStack::lavet5()).unwrap();
        let states = model.virgin_states();
        for s in Strategy::ALL {
            let mut solver = Solver::new(&model, SolverConfig::with_strategy(s)).unwrap();
            let out = solver
                .run_load_step(&vec![0.0; model.n_free()], &states, &GateLoads::default())
                .unwrap();
            assert!(out.report.converged);
            assert_eq!(out.report.iterations, 0);
            assert!(out.psi.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn linear_problem_one_newton_step() {
        let mu = 1000.0 * MU0;
        let model = P1Model::gated(coarse(), linear(mu)).unwrap();
        let states = model.virgin_states();
        let loads = GateLoads::new(-0.5, 1.0);
        let exact = solve_spd(&model.laplacian().scaled(mu), &model.load_vector(&loads)).unwrap();
        for s in [Strategy::Ssn, Strategy::Gcm] {
            let cfg = SolverConfig {
                gcm_mu_r: 1000.0,
                ..SolverConfig::with_strategy(s)
            };
            let mut solver = Solver::new(&model, cfg).unwrap();
            let out = solver.run_load_step(&vec![0.0; model.n_free()], &states, &loads).unwrap();
            assert_eq!(out.report.iterations, 1, "{s}");
            assert_eq!(out.report.step_sizes, vec![1.0]);
            let err: f64 = out.psi.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let scale = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err <= 1e-10 * scale);
        }
    }

    #[test]
    fn already_converged() {
        let model = P1Model::gated(coarse(), MaterialStack::lavet5()).unwrap();
        let states = model.virgin_states();
        let loads = GateLoads::new(0.2, -0.4);
        let mut solver = Solver::new(&model, SolverConfig::default()).unwrap();
        let first = solver.run_load_step(&vec![0.0; model.n_free()], &states, &loads).unwrap();
        let again = solver.run_load_step(&first.psi, &states, &loads).unwrap();
        assert!(again.report.converged && again.report.iterations <= 1);
    }

    #[test]
    fn merit_decreases_and_direction_descends() {
        let model = P1Model::gated(coarse(), MaterialStack::lavet5()).unwrap();
        let states = model.virgin_states();
        let loads = GateLoads::new(-0.5, 1.0);
        for s in Strategy::ALL {
            let mut solver = Solver::new(&model, SolverConfig::with_strategy(s)).unwrap();
            let out = solver.run_load_step(&vec![0.0; model.n_free()], &states, &loads).unwrap();
            let m = &out.report.merit_history;
            assert!(m.windows(2).all(|w| w[1] < w[0]), "{s}: {m:?}");
            assert!(out.report.step_sizes.iter().all(|&t| t > 0.0 && t <= 1.0));
        }
    }

    #[test]
    fn backtracking_on_steep_law() {
        // a saturating law driven hard: the full Newton step from zero overshoots
        let model = P1Model::gated(coarse(), MaterialStack::lavet5()).unwrap();
        let states = model.virgin_states();
        let loads = GateLoads::new(-1.5, 2.5);
        let mut solver = Solver::new(&model, SolverConfig::default()).unwrap();
        let out = solver.run_load_step(&vec![0.0; model.n_free()], &states, &loads).unwrap();
        assert!(out.report.step_sizes.iter().any(|&t| t < 1.0));
    }

    #[test]
    fn linesearch_rejects_ascent() {
        let model = P1Model::gated(coarse(), linear(MU0)).unwrap();
        let states = model.virgin_states();
        let loads = GateLoads::new(-0.5, 1.0);
        let psi = vec![0.0; model.n_free()];
        let eval = model.evaluate(&psi, &states, &loads).unwrap();
        let r = model.residual(&eval, &loads);
        // uphill direction
        let err = armijo_linesearch(&model, &states, &loads, &psi, &eval, &r, dot(&r, &r), &SolverConfig::default());
        assert!(matches!(err, Err(SolverError::LineSearch { .. })));
    }

    #[test]
    fn strategies_agree() {
        let model = P1Model::gated(coarse(), MaterialStack::lavet5()).unwrap();
        let states = model.virgin_states();
        let loads = GateLoads::new(-0.5, 1.0);
        let mut sols = Vec::new();
        for s in Strategy::ALL {
            let mut solver = Solver::new(&model, SolverConfig::with_strategy(s)).unwrap();
            sols.push(solver.run_load_step(&vec![0.0; model.n_free()], &states, &loads).unwrap());
        }
        let reference = &sols[0].psi;
        let n = model.grad_norm(reference);
        for o in &sols[1..] {
            let d: Vec<f64> = o.psi.iter().zip(reference).map(|(a, b)| a - b).collect();
            assert!(model.grad_norm(&d) <= 1e-4 * n, "{}", o.report.strategy);
        }
    }
}
