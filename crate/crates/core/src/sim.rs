//! Load programs: single load steps and time-stepped flux cycles with memory
//! commits, probe recording and an energy ledger.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{Evaluation, FemError, GateLoads, P1Model, QuadPointState};
use crate::linalg::dot;
use crate::mesh::Point;
use crate::solvers::{SolveReport, Solver, SolverConfig, SolverError, Strategy};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("load step {step} (t = {t}) failed: {source}")]
    Solver {
        step: usize,
        t: f64,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("probe {name} at ({x}, {y}) lies outside the domain")]
    ProbeOutside { name: String, x: f64, y: f64 },
    #[error("invalid load program: {0}")]
    InvalidProgram(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

/// Fluxes imposed at gates 1 and 2 over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadProgram {
    SingleStep { phi1: f64, phi2: f64 },
    Cycle {
        /// Steps per unit time; one period of the waveform has length 1.
        steps_per_unit: usize,
        t_end: f64,
        #[serde(default = "default_ramp")]
        ramp: bool,
    },
}

fn default_ramp() -> bool {
    true
}

/// `(1 - cos 4 pi t) / 2` on the first quarter period, 1 afterwards.
pub fn ramp_factor(t: f64) -> f64 {
    if t <= 0.25 {
        0.5 * (1.0 - (4.0 * PI * t).cos())
    } else {
        1.0
    }
}

/// `phi1 = cos(2 pi t + 2 pi / 3)`, `phi2 = cos(2 pi t)`, optionally ramped.
pub fn waveform(t: f64, ramp: bool) -> GateLoads {
    let s = if ramp { ramp_factor(t) } else { 1.0 };
    GateLoads::new(
        s * (2.0 * PI * t + 2.0 * PI / 3.0).cos(),
        s * (2.0 * PI * t).cos(),
    )
}

impl LoadProgram {
    /// Two periods in 100 steps with the initial ramp.
    pub fn two_period_cycle() -> Self {
        Self::Cycle {
            steps_per_unit: 50,
            t_end: 2.0,
            ramp: true,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match *self {
            Self::SingleStep { phi1, phi2 } => {
                if !(phi1.is_finite() && phi2.is_finite()) {
                    return Err(SimError::InvalidProgram("fluxes must be finite".into()));
                }
            }
            Self::Cycle {
                steps_per_unit,
                t_end,
                ..
            } => {
                if steps_per_unit == 0 {
                    return Err(SimError::InvalidProgram("steps_per_unit must be positive".into()));
                }
                if !(t_end.is_finite() && t_end > 0.0) {
                    return Err(SimError::InvalidProgram("t_end must be positive".into()));
                }
                if self.num_steps() == 0 {
                    return Err(SimError::InvalidProgram("program has no steps".into()));
                }
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        match *self {
            Self::SingleStep { .. } => 1,
            Self::Cycle {
                steps_per_unit,
                t_end,
                ..
            } => (steps_per_unit as f64 * t_end + 1e-9).floor() as usize,
        }
    }

    /// Time of step `n`, counted from 1.
    pub fn time(&self, n: usize) -> f64 {
        match *self {
            Self::SingleStep { .. } => 0.0,
            Self::Cycle { steps_per_unit, .. } => n as f64 / steps_per_unit as f64,
        }
    }

    pub fn loads_at(&self, t: f64) -> GateLoads {
        match *self {
            Self::SingleStep { phi1, phi2 } => GateLoads::new(phi1, phi2),
            Self::Cycle { ramp, .. } => waveform(t, ramp),
        }
    }

    /// Steps per unit time, or `None` for a single step.
    pub fn steps_per_period(&self) -> Option<usize> {
        match *self {
            Self::SingleStep { .. } => None,
            Self::Cycle { steps_per_unit, .. } => Some(steps_per_unit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

impl ProbePoint {
    pub fn new(name: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            name: name.into(),
            x,
            y,
        }
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Six points spread over yoke and limb of the default T-joint.
pub fn default_probes() -> Vec<ProbePoint> {
    vec![
        ProbePoint::new("M1", -1.2, 0.5),
        ProbePoint::new("M2", -0.4, 0.5),
        ProbePoint::new("M3", 0.0, 0.5),
        ProbePoint::new("M4", 0.4, 0.5),
        ProbePoint::new("M5", 0.0, -0.5),
        ProbePoint::new("M6", 0.0, -1.2),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub t: f64,
    #[serde(rename = "Hx")]
    pub hx: f64,
    #[serde(rename = "Hy")]
    pub hy: f64,
    #[serde(rename = "Bx")]
    pub bx: f64,
    #[serde(rename = "By")]
    pub by: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSeries {
    pub probes: Vec<ProbePoint>,
    /// `records[i]` holds the history of `probes[i]`.
    pub records: Vec<Vec<ProbeRecord>>,
}

impl ProbeSeries {
    fn new(probes: Vec<ProbePoint>) -> Self {
        let records = vec![Vec::new(); probes.len()];
        Self { probes, records }
    }

    pub fn get(&self, name: &str) -> Option<&[ProbeRecord]> {
        self.probes
            .iter()
            .position(|p| p.name == name)
            .map(|i| self.records[i].as_slice())
    }
}

/// Closed-polygon `oint H_x dB_x` over `records`; positive for loops that
/// dissipate energy.
pub fn loop_area_x(records: &[ProbeRecord]) -> f64 {
    let n = records.len();
    (0..n)
        .map(|i| {
            let a = &records[i];
            let b = &records[(i + 1) % n];
            0.5 * (a.hx + b.hx) * (b.bx - a.bx)
        })
        .sum()
}

/// Half peak-to-peak amplitude of `Hx, Hy, Bx, By` over `records`, each
/// raised to at least `floor` times the largest amplitude of its kind (H or B).
fn amplitudes(records: &[ProbeRecord], floor: f64) -> [f64; 4] {
    let mut amp = [0.0f64; 4];
    for (c, a) in amp.iter_mut().enumerate() {
        let (lo, hi) = records
            .iter()
            .map(|r| components(r)[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        *a = 0.5 * (hi - lo);
    }
    let h_max = amp[0].max(amp[1]);
    let b_max = amp[2].max(amp[3]);
    for (c, a) in amp.iter_mut().enumerate() {
        *a = a.max(floor * if c < 2 { h_max } else { b_max });
    }
    amp
}

fn components(r: &ProbeRecord) -> [f64; 4] {
    [r.hx, r.hy, r.bx, r.by]
}

fn relative_gap(records: &[ProbeRecord], period: usize, amp: &[f64; 4], steps: std::ops::Range<usize>) -> f64 {
    let mut worst = 0.0f64;
    for i in steps {
        let now = components(&records[i]);
        let before = components(&records[i - period]);
        for c in 0..4 {
            if amp[c] > 0.0 {
                worst = worst.max((now[c] - before[c]).abs() / amp[c]);
            }
        }
    }
    worst
}

/// Largest deviation between each record of the last period and the record
/// one period earlier, relative to the amplitudes of the last period (see
/// `amplitudes`).
pub fn periodicity_defect(records: &[ProbeRecord], period: usize, floor: f64) -> f64 {
    let n = records.len();
    assert!(n >= 2 * period && period > 0);
    let amp = amplitudes(&records[n - period..], floor);
    relative_gap(records, period, &amp, n - period..n)
}

/// Gap between the end point of the last period and its start point, with the
/// same normalization as [`periodicity_defect`].
pub fn closure_defect(records: &[ProbeRecord], period: usize, floor: f64) -> f64 {
    let n = records.len();
    assert!(n > period && period > 0);
    let amp = amplitudes(&records[n - period..], floor);
    relative_gap(records, period, &amp, n - 1..n)
}

/// Potential and committed memory after a load step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub psi: Vec<f64>,
    pub states: Vec<QuadPointState>,
    pub t_index: usize,
}

impl SimulationState {
    pub fn virgin(model: &P1Model) -> Self {
        Self {
            psi: vec![0.0; model.n_free()],
            states: model.virgin_states(),
            t_index: 0,
        }
    }
}

/// Replaces the memory by the polarizations of `eval`. Leaves `psi` and
/// `t_index` alone, so committing the same evaluation twice is harmless.
pub fn commit_state(model: &P1Model, sim: &SimulationState, eval: &Evaluation) -> Result<SimulationState, SimError> {
    Ok(SimulationState {
        psi: sim.psi.clone(),
        states: model.committed_states(eval, &sim.states)?,
        t_index: sim.t_index,
    })
}

/// Everything recorded about one converged load step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub loads: GateLoads,
    pub report: SolveReport,
    /// `sum_T |T| w*(H_T)` at the converged potential.
    pub coenergy: f64,
    /// Dissipation of the memory update made by this step.
    pub dissipation: f64,
    /// Flux entering through each gate, from the discrete balance.
    pub fluxes: [f64; 3],
}

impl StepRecord {
    /// `|sum_i flux_i|` relative to the largest gate flux (or 1 when all vanish).
    pub fn flux_imbalance(&self) -> f64 {
        let scale = self.fluxes.iter().fold(0.0f64, |m, f| m.max(f.abs()));
        self.fluxes.iter().sum::<f64>().abs() / if scale > 0.0 { scale } else { 1.0 }
    }
}

fn step_record(
    model: &P1Model,
    step: usize,
    t: f64,
    loads: GateLoads,
    psi: &[f64],
    eval: &Evaluation,
    states: &[QuadPointState],
    report: SolveReport,
) -> StepRecord {
    StepRecord {
        step,
        t,
        loads,
        report,
        coenergy: eval.merit + dot(&model.load_vector(&loads), psi),
        dissipation: model.dissipation(eval, states),
        fluxes: model.gate_fluxes(eval),
    }
}

/// Result of [`run_single_step`].
#[derive(Debug, Clone)]
pub struct SingleStepOutcome {
    /// Converged potential; memory committed only if requested.
    pub state: SimulationState,
    pub eval: Evaluation,
    pub record: StepRecord,
}

/// One solve from `psi = 0` with the given fluxes. The memory is virgin, or
/// taken from `initial` when given.
pub fn run_single_step(
    model: &P1Model,
    cfg: SolverConfig,
    loads: GateLoads,
    initial: Option<&SimulationState>,
    commit: bool,
) -> Result<SingleStepOutcome, SimError> {
    let start = match initial {
        Some(s) => s.clone(),
        None => SimulationState::virgin(model),
    };
    let mut solver = Solver::new(model, cfg).map_err(|source| SimError::Solver { step: 1, t: 0.0, source })?;
    let psi0 = vec![0.0; model.n_free()];
    let out = solver
        .run_load_step(&psi0, &start.states, &loads)
        .map_err(|source| SimError::Solver { step: 1, t: 0.0, source })?;
    let record = step_record(model, 1, 0.0, loads, &out.psi, &out.eval, &start.states, out.report);
    let mut state = SimulationState {
        psi: out.psi,
        states: start.states,
        t_index: start.t_index,
    };
    if commit {
        state = commit_state(model, &state, &out.eval)?;
        state.t_index += 1;
    }
    Ok(SingleStepOutcome {
        state,
        eval: out.eval,
        record,
    })
}

#[derive(Debug, Clone)]
pub struct CycleResult {
    pub strategy: Strategy,
    pub steps: Vec<StepRecord>,
    pub probes: ProbeSeries,
    pub state: SimulationState,
}

impl CycleResult {
    pub fn average_iterations(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.report.iterations as f64).sum::<f64>() / self.steps.len() as f64
    }

    pub fn wall_time_s(&self) -> f64 {
        self.steps.iter().map(|s| s.report.wall_time_s).sum()
    }

    pub fn worst_flux_imbalance(&self) -> f64 {
        self.steps.iter().map(StepRecord::flux_imbalance).fold(0.0, f64::max)
    }

    pub fn total_dissipation(&self) -> f64 {
        self.steps.iter().map(|s| s.dissipation).sum()
    }
}

/// Checks that every probe lies inside the mesh.
pub fn validate_probes(model: &P1Model, probes: &[ProbePoint]) -> Result<(), SimError> {
    for p in probes {
        if model.mesh.locate(&p.point()).is_none() {
            return Err(SimError::ProbeOutside {
                name: p.name.clone(),
                x: p.x,
                y: p.y,
            });
        }
    }
    Ok(())
}

/// Runs every step of `program` from the virgin state, warm-starting each
/// solve from the previous potential and committing the memory after each
/// converged step. Probes are read after the commit.
pub fn run_cycle(
    model: &P1Model,
    cfg: SolverConfig,
    program: &LoadProgram,
    probes: &[ProbePoint],
) -> Result<CycleResult, SimError> {
    program.validate()?;
    validate_probes(model, probes)?;
    let mut solver = Solver::new(model, cfg).map_err(|source| SimError::Solver { step: 0, t: 0.0, source })?;
    let mut sim = SimulationState::virgin(model);
    let mut series = ProbeSeries::new(probes.to_vec());
    let mut steps = Vec::with_capacity(program.num_steps());
    for n in 1..=program.num_steps() {
        let t = program.time(n);
        let loads = program.loads_at(t);
        let out = solver
            .run_load_step(&sim.psi, &sim.states, &loads)
            .map_err(|source| SimError::Solver { step: n, t, source })?;
        steps.push(step_record(model, n, t, loads, &out.psi, &out.eval, &sim.states, out.report));
        sim.psi = out.psi;
        sim = commit_state(model, &sim, &out.eval)?;
        sim.t_index = n;
        for (i, p) in probes.iter().enumerate() {
            let (h, b) = model.probe(&sim.psi, &sim.states, &p.point())?;
            series.records[i].push(ProbeRecord {
                t,
                hx: h.x,
                hy: h.y,
                bx: b.x,
                by: b.y,
            });
        }
    }
    Ok(CycleResult {
        strategy: cfg.strategy,
        steps,
        probes: series,
        state: sim,
    })
}

/// One strategy's run in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub steps: usize,
    pub average_iterations: f64,
    pub total_iterations: usize,
    pub wall_time_s: f64,
    pub final_merit: f64,
    /// `||psi - psi_first||_h / ||psi_first||_h` between final potentials,
    /// where `first` is the first strategy listed.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub runs: Vec<StrategyRun>,
    /// Termination tolerance of the runs that produced `deviation`.
    pub agreement_term_rel_tol: f64,
    pub max_deviation: f64,
}

fn relative_h_distance(model: &P1Model, a: &[f64], reference: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(reference).map(|(x, y)| x - y).collect();
    let scale = model.grad_norm(reference);
    let gap = model.grad_norm(&d);
    if scale > 0.0 {
        gap / scale
    } else {
        gap
    }
}

/// Runs `program` once per strategy with `base` otherwise unchanged.
///
/// Iteration counts come from these runs. Final potentials are compared on
/// them too, unless `agreement_term_rel_tol` is given: then every strategy is
/// run again with that merit tolerance, since the slowly contracting fixed
/// metric methods stop far from the solution under a loose merit test.
pub fn compare_strategies(
    model: &P1Model,
    base: SolverConfig,
    program: &LoadProgram,
    strategies: &[Strategy],
    agreement_term_rel_tol: Option<f64>,
) -> Result<Comparison, SimError> {
    if strategies.len() < 2 {
        return Err(SimError::InvalidProgram("a comparison needs at least two strategies".into()));
    }
    let mut runs = Vec::with_capacity(strategies.len());
    let mut finals = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let cfg = SolverConfig { strategy, ..base };
        let r = run_cycle(model, cfg, program, &[])?;
        runs.push(StrategyRun {
            strategy,
            steps: r.steps.len(),
            average_iterations: r.average_iterations(),
            total_iterations: r.steps.iter().map(|s| s.report.iterations).sum(),
            wall_time_s: r.wall_time_s(),
            final_merit: r.steps.last().map_or(0.0, |s| s.report.final_merit()),
            deviation: 0.0,
        });
        finals.push(r.state.psi);
    }
    if let Some(tol) = agreement_term_rel_tol {
        finals.clear();
        for &strategy in strategies {
            let cfg = SolverConfig {
                strategy,
                term_rel_tol: tol,
                flux_tol: None,
                ..base
            };
            finals.push(run_cycle(model, cfg, program, &[])?.state.psi);
        }
    }
    let mut max_deviation = 0.0f64;
    for (run, psi) in runs.iter_mut().zip(&finals) {
        run.deviation = relative_h_distance(model, psi, &finals[0]);
        max_deviation = max_deviation.max(run.deviation);
    }
    Ok(Comparison {
        runs,
        agreement_term_rel_tol: agreement_term_rel_tol.unwrap_or(base.term_rel_tol),
        max_deviation,
    })
}

#[derive(Serialize)]
struct IterationRow {
    step: usize,
    strategy: &'static str,
    iterations: usize,
    wall_ms: f64,
    converged: bool,
}

#[derive(Serialize)]
struct EnergyRow {
    step: usize,
    coenergy: f64,
    dissipation_increment: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), SimError> {
    let err = |e: &dyn std::fmt::Display| SimError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = File::create(path).map_err(|e| err(&e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

pub fn write_iterations_csv(path: &Path, steps: &[StepRecord]) -> Result<(), SimError> {
    write_rows(
        path,
        steps.iter().map(|s| IterationRow {
            step: s.step,
            strategy: s.report.strategy.name(),
            iterations: s.report.iterations,
            wall_ms: 1e3 * s.report.wall_time_s,
            converged: s.report.converged,
        }),
    )
}

pub fn write_energy_csv(path: &Path, steps: &[StepRecord]) -> Result<(), SimError> {
    write_rows(
        path,
        steps.iter().map(|s| EnergyRow {
            step: s.step,
            coenergy: s.coenergy,
            dissipation_increment: s.dissipation,
        }),
    )
}

/// Writes `probes_<name>.csv` for every probe into `dir`.
pub fn write_probe_csvs(dir: &Path, series: &ProbeSeries) -> Result<(), SimError> {
    for (p, rec) in series.probes.iter().zip(&series.records) {
        write_rows(&dir.join(format!("probes_{}.csv", p.name)), rec.iter().copied())?;
    }
    Ok(())
}

/// Writes iterations, energy and probe CSVs of a cycle into `dir`.
pub fn write_cycle_outputs(dir: &Path, result: &CycleResult) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::Output {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    write_iterations_csv(&dir.join("iterations.csv"), &result.steps)?;
    write_energy_csv(&dir.join("energy.csv"), &result.steps)?;
    write_probe_csvs(dir, &result.probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::MaterialStack;
    use crate::mesh::{build_tjoint, TJointParams};

    fn coarse_model() -> P1Model {
        let mesh = build_tjoint(&TJointParams {
            target_h: 0.35,
            ..TJointParams::default()
        })
        .unwrap();
        P1Model::gated(mesh, MaterialStack::lavet5()).unwrap()
    }

    #[test]
    fn waveform_and_ramp() {
        assert_eq!(ramp_factor(0.0), 0.0);
        assert!((ramp_factor(0.125) - 0.5).abs() < 1e-15);
        assert_eq!(ramp_factor(0.25), 1.0);
        assert_eq!(ramp_factor(0.7), 1.0);
        let l = waveform(1.0, true);
        assert!((l.phi2 - 1.0).abs() < 1e-14 && (l.phi1 + 0.5).abs() < 1e-14);
        for k in 0..40 {
            let l = waveform(0.05 * k as f64, true);
            assert!((l.phi1 + l.phi2 + l.phi3()).abs() < 1e-15);
        }
    }

    #[test]
    fn program_steps() {
        let p = LoadProgram::two_period_cycle();
        p.validate().unwrap();
        assert_eq!(p.num_steps(), 100);
        assert!((p.time(100) - 2.0).abs() < 1e-15);
        assert!((p.time(1) - 0.02).abs() < 1e-15);
        assert!(LoadProgram::Cycle {
            steps_per_unit: 0,
            t_end: 1.0,
            ramp: true
        }
        .validate()
        .is_err());
        assert!(LoadProgram::SingleStep {
            phi1: f64::NAN,
            phi2: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn program_serde_roundtrip() {
        let p = LoadProgram::two_period_cycle();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<LoadProgram>(&s).unwrap(), p);
    }

    #[test]
    fn zero_flux_step_is_trivial() {
        let m = coarse_model();
        let out = run_single_step(&m, SolverConfig::default(), GateLoads::default(), None, true).unwrap();
        assert!(out.state.psi.iter().all(|&p| p == 0.0));
        assert_eq!(out.record.report.iterations, 0);
        assert_eq!(out.state.states, m.virgin_states());
    }

    #[test]
    fn sign_flip_is_odd() {
        let m = coarse_model();
        let cfg = SolverConfig::default();
        let a = run_single_step(&m, cfg, GateLoads::new(-0.5, 1.0), None, false).unwrap();
        let b = run_single_step(&m, cfg, GateLoads::new(0.5, -1.0), None, false).unwrap();
        let scale = m.grad_norm(&a.state.psi);
        let sum: Vec<f64> = a.state.psi.iter().zip(&b.state.psi).map(|(x, y)| x + y).collect();
        assert!(m.grad_norm(&sum) <= 1e-8 * scale);
    }

    #[test]
    fn commit_is_idempotent() {
        let m = coarse_model();
        let out = run_single_step(&m, SolverConfig::default(), GateLoads::new(-0.5, 1.0), None, false).unwrap();
        let once = commit_state(&m, &out.state, &out.eval).unwrap();
        let twice = commit_state(&m, &once, &out.eval).unwrap();
        assert_eq!(once, twice);
        assert_ne!(once.states, m.virgin_states());
        assert!(out.record.dissipation >= 0.0);
    }

    #[test]
    fn zero_cycle_stays_zero() {
        let m = coarse_model();
        let p = LoadProgram::SingleStep { phi1: 0.0, phi2: 0.0 };
        let r = run_cycle(&m, SolverConfig::default(), &p, &default_probes()).unwrap();
        assert_eq!(r.steps.len(), 1);
        for rec in &r.probes.records {
            assert_eq!(rec.len(), 1);
            assert_eq!([rec[0].hx, rec[0].hy, rec[0].bx, rec[0].by], [0.0; 4]);
        }
    }

    #[test]
    fn probe_outside_named() {
        let m = coarse_model();
        let probes = vec![ProbePoint::new("far", 5.0, 5.0)];
        let p = LoadProgram::two_period_cycle();
        match run_cycle(&m, SolverConfig::default(), &p, &probes) {
            Err(SimError::ProbeOutside { name, .. }) => assert_eq!(name, "far"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_cycle_records_everything() {
        let m = coarse_model();
        let p = LoadProgram::Cycle {
            steps_per_unit: 10,
            t_end: 0.5,
            ramp: true,
        };
        let cfg = SolverConfig {
            flux_tol: Some(1e-10),
            ..SolverConfig::default()
        };
        let r = run_cycle(&m, cfg, &p, &default_probes()).unwrap();
        assert_eq!(r.steps.len(), 5);
        assert_eq!(r.state.t_index, 5);
        assert!(r.probes.records.iter().all(|rec| rec.len() == 5));
        assert!(r.steps.iter().all(|s| s.dissipation >= 0.0 && s.report.converged));
        assert!(r.worst_flux_imbalance() <= 1e-8, "{}", r.worst_flux_imbalance());

        let dir = tempfile::tempdir().unwrap();
        write_cycle_outputs(dir.path(), &r).unwrap();
        let it = std::fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
        assert!(it.starts_with("step,strategy,iterations,wall_ms,converged\n"));
        assert_eq!(it.lines().count(), 6);
        let pr = std::fs::read_to_string(dir.path().join("probes_M3.csv")).unwrap();
        assert!(pr.starts_with("t,Hx,Hy,Bx,By\n"));
        let en = std::fs::read_to_string(dir.path().join("energy.csv")).unwrap();
        assert!(en.starts_with("step,coenergy,dissipation_increment\n"));
    }

    #[test]
    fn comparison_of_linear_problem() {
        let mesh = build_tjoint(&TJointParams {
            target_h: 0.35,
            ..TJointParams::default()
        })
        .unwrap();
        let m = P1Model::gated(mesh, MaterialStack::vacuum()).unwrap();
        let base = SolverConfig {
            gcm_mu_r: 1.0,
            ..SolverConfig::default()
        };
        let p = LoadProgram::SingleStep { phi1: -0.5, phi2: 1.0 };
        let c = compare_strategies(&m, base, &p, &[Strategy::Ssn, Strategy::Gcm], None).unwrap();
        assert_eq!(c.runs[1].total_iterations, 1);
        assert!(c.max_deviation <= 1e-12, "{}", c.max_deviation);
        assert!(compare_strategies(&m, base, &p, &[Strategy::Ssn], None).is_err());
    }

    #[test]
    fn loop_area_orientation() {
        // counterclockwise unit square in the (H, B) plane
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let rec: Vec<ProbeRecord> = pts
            .iter()
            .map(|&(h, b)| ProbeRecord {
                t: 0.0,
                hx: h,
                hy: 0.0,
                bx: b,
                by: 0.0,
            })
            .collect();
        assert!((loop_area_x(&rec) - 1.0).abs() < 1e-15);
        let rev: Vec<ProbeRecord> = rec.iter().rev().copied().collect();
        assert!((loop_area_x(&rev) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn periodicity_of_exact_repeat() {
        let rec: Vec<ProbeRecord> = (0..20)
            .map(|i| {
                let s = (2.0 * PI * (i % 10) as f64 / 10.0).sin();
                ProbeRecord {
                    t: i as f64,
                    hx: s,
                    hy: 0.0,
                    bx: 2.0 * s,
                    by: 0.0,
                }
            })
            .collect();
        assert_eq!(periodicity_defect(&rec, 10, 0.01), 0.0);
        let mut bad = rec.clone();
        bad[15].bx += 0.2;
        assert!((periodicity_defect(&bad, 10, 0.01) - 0.1 / 0.951_056_516_295_153_5).abs() < 1e-9);
        assert_eq!(closure_defect(&bad, 10, 0.01), 0.0);
        bad[19].hx += 0.1;
        assert!((closure_defect(&bad, 10, 0.01) - 0.1 / 0.951_056_516_295_153_5).abs() < 1e-9);
    }
}
