//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hyst_core::fem::{GateLoads, P1Model};
use hyst_core::linalg::solve_spd;
use hyst_core::material::{MaterialStack, MU0};
use hyst_core::mesh::{build_tjoint, TJointParams, TriMesh};
use hyst_core::sim::{
    closure_defect, compare_strategies, default_probes, loop_area_x, periodicity_defect, run_cycle, run_single_step,
    Comparison, CycleResult, LoadProgram, StepRecord,
};
use hyst_core::solvers::{SolveReport, SolverConfig, Strategy};
use hyst_core::verify::{run_suite, MaterialReport, VerifyConfig, KKT_TOL_FACTOR, ORACLE_TOL, SEMISMOOTH_DROP};

const SUITE_TIME_LIMIT: Duration = Duration::from_secs(60);

const BENCH_TARGET_H: f64 = 0.12;
const BENCH_LEVELS: [usize; 3] = [0, 1, 2];
const MIN_COARSE_DOFS: usize = 500;
const ITERATION_SPREAD: usize = 2;
const MESH_STUDY_TIME_LIMIT: Duration = Duration::from_secs(300);
const BENCH_LOADS: (f64, f64) = (-0.5, 1.0);

const FULL_STEPS_AT_END: usize = 3;

const AGREEMENT_TOL: f64 = 1e-6;
/// Merit tolerance of the agreement runs.
const AGREEMENT_TERM_REL_TOL: f64 = 1e-15;
const COMPARISON_TIME_LIMIT: Duration = Duration::from_secs(900);

const LOOP_CLOSURE_TOL: f64 = 0.01;
/// Components below this fraction of the largest amplitude are measured against it.
const AMPLITUDE_FLOOR: f64 = 0.01;
const FLUX_BALANCE_TOL: f64 = 1e-8;
/// Residual stop of the load-cycle run.
const CYCLE_FLUX_TOL: f64 = 1e-10;
const STEPS_PER_PERIOD: usize = 50;

const LINEAR_MU_R: f64 = 1000.0;
const LINEAR_MATCH_TOL: f64 = 1e-10;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

fn bench_mesh() -> TriMesh {
    build_tjoint(&TJointParams {
        target_h: BENCH_TARGET_H,
        ..TJointParams::default()
    })
    .expect("benchmark mesh")
}

fn bench_models() -> Vec<P1Model> {
    let base = bench_mesh();
    BENCH_LEVELS
        .iter()
        .map(|&l| P1Model::gated(base.refine_times(l), MaterialStack::lavet5()).expect("model"))
        .collect()
}

fn bench_step() -> LoadProgram {
    LoadProgram::SingleStep {
        phi1: BENCH_LOADS.0,
        phi2: BENCH_LOADS.1,
    }
}

fn property_line(report: &MaterialReport, names: &[&str]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in names {
        match report.properties.iter().find(|p| p.name == *name) {
            Some(p) => {
                passed &= p.passed && p.violations == 0;
                parts.push(format!(
                    "{name}: {}/{} violations, worst margin {:.3e}",
                    p.violations, p.samples, p.worst_margin
                ));
            }
            None => {
                passed = false;
                parts.push(format!("{name}: missing"));
            }
        }
    }
    Outcome::new(passed, parts.join("; "))
}

fn criterion_1(report: &MaterialReport, elapsed: Duration) -> Outcome {
    let b = &report.branches;
    let mut o = property_line(report, &["oracle"]);
    let covered = b.sticking > 0 && b.sliding > 0 && b.smooth > 0;
    o.passed &= covered && elapsed < SUITE_TIME_LIMIT && report.samples >= 10_000;
    o.detail = format!(
        "{} (tol {ORACLE_TOL:e}); samples {}, branches sticking {} sliding {} smooth {}; {:.1} s",
        o.detail,
        report.samples,
        b.sticking,
        b.sliding,
        b.smooth,
        elapsed.as_secs_f64()
    );
    o
}

fn superlinear_tail(report: &SolveReport) -> (bool, Vec<f64>) {
    let d = &report.direction_norms;
    let ratios: Vec<f64> = d.windows(2).map(|w| w[1] / w[0]).collect();
    let tau = &report.step_sizes;
    let full_steps = tau.len() >= FULL_STEPS_AT_END && tau[tau.len() - FULL_STEPS_AT_END..].iter().all(|&t| t == 1.0);
    let decreasing = ratios.len() >= FULL_STEPS_AT_END
        && ratios[ratios.len() - FULL_STEPS_AT_END..].windows(2).all(|w| w[1] < w[0]);
    (full_steps && decreasing, ratios)
}

fn ordered(c: &Comparison) -> bool {
    c.runs.windows(2).all(|w| w[0].average_iterations <= w[1].average_iterations)
}

fn describe(c: &Comparison) -> String {
    c.runs
        .iter()
        .map(|r| format!("{} {:.2}", r.strategy, r.average_iterations))
        .collect::<Vec<_>>()
        .join(" / ")
}

fn worst_imbalance(steps: &[StepRecord]) -> f64 {
    steps.iter().map(StepRecord::flux_imbalance).fold(0.0, f64::max)
}

fn criterion_8(cycle: &CycleResult, loose: &CycleResult) -> Outcome {
    let p = STEPS_PER_PERIOD;
    let mut closure = 0.0f64;
    let mut periodic = 0.0f64;
    let mut min_area = f64::INFINITY;
    let mut loose_closure = 0.0f64;
    for (i, records) in cycle.probes.records.iter().enumerate() {
        closure = closure.max(closure_defect(&records[..2 * p], p, AMPLITUDE_FLOOR));
        periodic = periodic.max(periodicity_defect(&records[..3 * p], p, AMPLITUDE_FLOOR));
        min_area = min_area.min(loop_area_x(&records[p..2 * p])).min(loop_area_x(&records[2 * p..3 * p]));
        loose_closure = loose_closure.max(closure_defect(&loose.probes.records[i][..2 * p], p, AMPLITUDE_FLOOR));
    }
    let imbalance = worst_imbalance(&cycle.steps);
    let converged = cycle.steps.iter().all(|s| s.report.converged);
    Outcome::new(
        converged
            && closure <= LOOP_CLOSURE_TOL
            && periodic <= LOOP_CLOSURE_TOL
            && min_area >= 0.0
            && imbalance <= FLUX_BALANCE_TOL,
        format!(
            "SSN, residual stop {CYCLE_FLUX_TOL:e}, {} steps: loop closure {closure:.2e}, third vs second period \
             {periodic:.2e} (tol {LOOP_CLOSURE_TOL}), min loop area {min_area:.3e}, worst flux imbalance \
             {imbalance:.2e} (tol {FLUX_BALANCE_TOL:e}); merit stop only: closure {loose_closure:.2e}, \
             imbalance {:.2e}",
            cycle.steps.len(),
            worst_imbalance(&loose.steps)
        ),
    )
}

fn criterion_9(mesh: &TriMesh) -> Outcome {
    let loads = GateLoads::new(BENCH_LOADS.0, BENCH_LOADS.1);
    let mut passed = true;
    let mut parts = Vec::new();
    for mu_r in [1.0, LINEAR_MU_R] {
        let stack = MaterialStack {
            cells: Vec::new(),
            mu0: mu_r * MU0,
        };
        let model = P1Model::gated(mesh.clone(), stack).expect("model");
        let direct = solve_spd(&model.laplacian().scaled(mu_r * MU0), &model.load_vector(&loads)).expect("direct solve");
        let scale = direct.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for strategy in [Strategy::Ssn, Strategy::Gcm] {
            let cfg = SolverConfig {
                gcm_mu_r: mu_r,
                ..SolverConfig::with_strategy(strategy)
            };
            match run_single_step(&model, cfg, loads, None, false) {
                Ok(out) => {
                    let r = &out.record.report;
                    let err = out
                        .state
                        .psi
                        .iter()
                        .zip(&direct)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                        / scale;
                    passed &= r.converged && r.iterations == 1 && r.step_sizes == [1.0] && err <= LINEAR_MATCH_TOL;
                    parts.push(format!(
                        "mu_r {mu_r} {strategy}: {} it, tau {:?}, rel err {err:.1e}",
                        r.iterations, r.step_sizes
                    ));
                }
                Err(e) => {
                    passed = false;
                    parts.push(format!("mu_r {mu_r} {strategy}: {e}"));
                }
            }
        }
    }
    Outcome::new(passed, format!("{} (tol {LINEAR_MATCH_TOL:e})", parts.join("; ")))
}

fn main() -> ExitCode {
    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, o));
    };

    // material suite
    let start = Instant::now();
    let suite = run_suite(&MaterialStack::lavet5(), &VerifyConfig::default());
    let elapsed = start.elapsed();
    report(1, criterion_1(&suite, elapsed));
    report(2, property_line(&suite, &["monotonicity", "lipschitz"]));
    let mut kkt = property_line(&suite, &["kkt"]);
    kkt.detail = format!("{} (tol {KKT_TOL_FACTOR:e} (A+|H|))", kkt.detail);
    report(3, kkt);
    let mut semi = property_line(&suite, &["semismoothness"]);
    semi.passed &= suite.properties.iter().any(|p| p.name == "semismoothness" && p.samples >= 1000);
    semi.detail = format!("{} (decay factor {SEMISMOOTH_DROP})", semi.detail);
    report(4, semi);

    // mesh study
    let models = bench_models();
    let start = Instant::now();
    let loads = GateLoads::new(BENCH_LOADS.0, BENCH_LOADS.1);
    let runs: Vec<_> = models
        .iter()
        .map(|m| run_single_step(m, SolverConfig::default(), loads, None, false))
        .collect();
    let elapsed = start.elapsed();
    let dofs: Vec<usize> = models.iter().map(P1Model::n_free).collect();
    let reports: Vec<Option<&SolveReport>> = runs.iter().map(|r| r.as_ref().ok().map(|o| &o.record.report)).collect();
    let all_converged = reports.iter().all(|r| r.is_some_and(|r| r.converged));
    let its: Vec<usize> = reports.iter().map(|r| r.map_or(usize::MAX, |r| r.iterations)).collect();
    let spread = its.iter().max().unwrap() - its.iter().min().unwrap();
    report(
        5,
        Outcome::new(
            all_converged && dofs[0] >= MIN_COARSE_DOFS && spread <= ITERATION_SPREAD && elapsed < MESH_STUDY_TIME_LIMIT,
            format!(
                "dofs {dofs:?}, SSN iterations {its:?}, spread {spread} (max {ITERATION_SPREAD}); {:.1} s",
                elapsed.as_secs_f64()
            ),
        ),
    );

    let mut superlinear = all_converged;
    let mut parts = Vec::new();
    for (l, r) in reports.iter().enumerate() {
        if let Some(r) = r {
            let (ok, ratios) = superlinear_tail(r);
            superlinear &= ok;
            let ratios: Vec<String> = ratios.iter().map(|x| format!("{x:.2e}")).collect();
            parts.push(format!("level {l}: tau {:?}, ratios [{}]", r.step_sizes, ratios.join(", ")));
        }
    }
    report(6, Outcome::new(superlinear, parts.join("; ")));

    // solver comparison
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    let coarse = &models[0];
    let problems: Vec<(String, &P1Model, LoadProgram)> = models
        .iter()
        .enumerate()
        .map(|(l, m)| (format!("step level {l}"), m, bench_step()))
        .chain(std::iter::once((
            "cycle".to_string(),
            coarse,
            LoadProgram::two_period_cycle(),
        )))
        .collect();
    for (name, model, program) in &problems {
        match compare_strategies(
            model,
            SolverConfig::default(),
            program,
            &Strategy::ALL,
            Some(AGREEMENT_TERM_REL_TOL),
        ) {
            Ok(c) => {
                passed &= ordered(&c) && c.max_deviation <= AGREEMENT_TOL;
                parts.push(format!("{name}: {}, deviation {:.1e}", describe(&c), c.max_deviation));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    let elapsed = start.elapsed();
    passed &= elapsed < COMPARISON_TIME_LIMIT;
    report(
        7,
        Outcome::new(
            passed,
            format!(
                "{} (agreement tol {AGREEMENT_TOL:e} at merit tol {AGREEMENT_TERM_REL_TOL:e}); {:.1} s",
                parts.join("; "),
                elapsed.as_secs_f64()
            ),
        ),
    );

    // load cycle
    let three_periods = LoadProgram::Cycle {
        steps_per_unit: STEPS_PER_PERIOD,
        t_end: 3.0,
        ramp: true,
    };
    let tight = SolverConfig {
        flux_tol: Some(CYCLE_FLUX_TOL),
        ..SolverConfig::default()
    };
    let probes = default_probes();
    match (
        run_cycle(coarse, tight, &three_periods, &probes),
        run_cycle(coarse, SolverConfig::default(), &LoadProgram::two_period_cycle(), &probes),
    ) {
        (Ok(cycle), Ok(loose)) => report(8, criterion_8(&cycle, &loose)),
        (Err(e), _) | (_, Err(e)) => report(8, Outcome::new(false, e.to_string())),
    }

    report(9, criterion_9(&coarse.mesh));

    let failed: Vec<usize> = outcomes.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria PASS", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAIL {failed:?}");
        ExitCode::FAILURE
    }
}
