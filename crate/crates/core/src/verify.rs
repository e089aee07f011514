//! Brute-force reference minimizer and the randomized material property suite.
//!
//! The reference minimizer shares no code with the local solver: it evaluates
//! the incremental objective on nested polar grids centred at `J_p`, so the
//! sticking point `J = J_p` is always a grid node.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::material::{Branch, HysteresisCell, MaterialError, MaterialStack, StackState};

/// Final grid spacing of the reference minimizer, in T for the radius and rad for the angle.
pub const ORACLE_STEP: f64 = 1e-7;

const COARSE_RADIAL: usize = 200;
const COARSE_ANGULAR: usize = 180;
const ZOOM_FACTOR: f64 = 10.0;
/// Half-width of every window after the first pass, in grid nodes.
const WINDOW_NODES: f64 = 30.0;
const MAX_ZOOM_PASSES: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub j: Vector2<f64>,
    pub objective: f64,
    /// Number of grid passes, the coarse one included.
    pub passes: usize,
}

/// `U(J) - <H, J> + chi |J - J_p|`, written out from the energy formula.
fn reference_objective(cell: &HysteresisCell, j: &Vector2<f64>, h: &Vector2<f64>, rho: f64) -> f64 {
    let r = j.norm();
    if r >= cell.j_sat {
        return f64::INFINITY;
    }
    let u = -(cell.energy_prefactor * cell.a_strength * cell.j_sat / PI)
        * (PI * r / (2.0 * cell.j_sat)).cos().ln();
    u - h.dot(j) + cell.chi * rho
}

struct Window {
    lo: f64,
    step: f64,
    count: usize,
}

impl Window {
    fn at(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }
}

/// Minimizes the incremental objective of `cell` by nested grid search in
/// polar coordinates `J = J_p + rho (cos theta, sin theta)`.
///
/// Each pass zooms the window around the best node by a factor of ten;
/// a best node on an open window edge recenters without zooming.
/// The search stops once both spacings are below [`ORACLE_STEP`], or the
/// radius is pinned at zero with radial spacing below it.
pub fn oracle_minimize(cell: &HysteresisCell, h: &Vector2<f64>, jp: &Vector2<f64>) -> OracleResult {
    let rho_max = jp.norm() + cell.j_sat;
    let mut radial = Window {
        lo: 0.0,
        step: rho_max / COARSE_RADIAL as f64,
        count: COARSE_RADIAL + 1,
    };
    let mut angular = Window {
        lo: 0.0,
        step: 2.0 * PI / COARSE_ANGULAR as f64,
        count: COARSE_ANGULAR,
    };
    let mut full_circle = true;
    let mut passes = 0;

    loop {
        passes += 1;
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for a in 0..angular.count {
            let theta = angular.at(a);
            let dir = Vector2::new(theta.cos(), theta.sin());
            for i in 0..radial.count {
                let rho = radial.at(i);
                let f = reference_objective(cell, &(jp + dir * rho), h, rho);
                if f < best.0 {
                    best = (f, i, a);
                }
            }
        }
        let (f_best, ib, ab) = best;
        let rho_b = radial.at(ib);
        let theta_b = angular.at(ab);

        let done = radial.step <= ORACLE_STEP && (rho_b == 0.0 || angular.step <= ORACLE_STEP);
        if done || passes >= MAX_ZOOM_PASSES {
            let dir = Vector2::new(theta_b.cos(), theta_b.sin());
            return OracleResult {
                j: jp + dir * rho_b,
                objective: f_best,
                passes,
            };
        }

        let radial_edge = (ib == 0 && radial.lo > 0.0) || ib + 1 == radial.count;
        let angular_edge = !full_circle && (ab == 0 || ab + 1 == angular.count);
        let recenter = radial_edge || angular_edge;
        let zoom = |step: f64| {
            if recenter || step <= ORACLE_STEP {
                step
            } else {
                step / ZOOM_FACTOR
            }
        };

        let r_step = zoom(radial.step);
        let r_lo = (rho_b - WINDOW_NODES * r_step).max(0.0);
        let r_hi = (rho_b + WINDOW_NODES * r_step).min(rho_max);
        radial = Window {
            lo: r_lo,
            step: r_step,
            count: ((r_hi - r_lo) / r_step).round() as usize + 1,
        };

        // at the centre every direction ties, so the whole circle stays in play
        if !(full_circle && rho_b == 0.0) {
            let a_step = zoom(angular.step);
            full_circle = false;
            angular = Window {
                lo: theta_b - WINDOW_NODES * a_step,
                step: a_step,
                count: 2 * WINDOW_NODES as usize + 1,
            };
        }
    }
}

/// Settings of the randomized property suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub samples: usize,
    pub semismooth_samples: usize,
    pub seed: u64,
    /// Largest sampled field magnitude in A/m.
    pub h_max: f64,
    /// Multiplies every generalized Jacobian; anything but 1 is a deliberate fault.
    pub jacobian_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            semismooth_samples: 1_000,
            seed: 42,
            h_max: 250.0,
            jacobian_scale: 1.0,
        }
    }
}

/// Outcome of one property over all its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub name: String,
    pub passed: bool,
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack over all samples; negative means violated.
    pub worst_margin: f64,
    pub detail: String,
}

impl PropertyReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            samples: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
            detail: String::new(),
        }
    }

    fn record(&mut self, margin: f64) {
        self.samples += 1;
        if !(margin >= 0.0) {
            self.violations += 1;
        }
        // NaN margins count as violations and are reported as -inf
        let m = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        self.worst_margin = self.worst_margin.min(m);
    }

    fn finish(mut self) -> Self {
        self.passed = self.violations == 0 && self.samples > 0;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub sticking: usize,
    pub sliding: usize,
    pub smooth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialReport {
    pub seed: u64,
    pub samples: usize,
    pub branches: BranchCounts,
    pub properties: Vec<PropertyReport>,
    pub passed: bool,
}

impl MaterialReport {
    pub fn property(&self, name: &str) -> Option<&PropertyReport> {
        self.properties.iter().find(|p| p.name == name)
    }
}

pub const ORACLE_TOL: f64 = 1e-6;
pub const KKT_TOL_FACTOR: f64 = 1e-10;
/// Required drop of the semi-smoothness ratio between the two step sizes.
pub const SEMISMOOTH_DROP: f64 = 10.0;
/// Ratios below this multiple of the slope bound are treated as rounding noise.
pub const SEMISMOOTH_NOISE: f64 = 1e-9;
const ROUNDOFF: f64 = 1e-12;

fn unit(rng: &mut ChaCha8Rng) -> Vector2<f64> {
    let t = rng.gen_range(0.0..2.0 * PI);
    Vector2::new(t.cos(), t.sin())
}

fn disk(rng: &mut ChaCha8Rng, radius: f64) -> Vector2<f64> {
    unit(rng) * radius * rng.gen::<f64>().sqrt()
}

pub fn random_state(stack: &MaterialStack, rng: &mut ChaCha8Rng) -> StackState<2> {
    StackState {
        j_prev: stack.cells.iter().map(|c| disk(rng, 0.7 * c.j_sat)).collect(),
    }
}

/// A field that lands near the pinning threshold of `cell` half of the time.
fn cell_field(cell: &HysteresisCell, jp: &Vector2<f64>, h_max: f64, rng: &mut ChaCha8Rng) -> Vector2<f64> {
    if rng.gen_bool(0.5) {
        let g = cell.grad_u(jp).unwrap_or_else(|_| Vector2::zeros());
        g + unit(rng) * (2.5 * cell.chi.max(1.0) * rng.gen::<f64>())
    } else {
        disk(rng, h_max)
    }
}

fn scaled_jacobian(
    stack: &MaterialStack,
    h: &Vector2<f64>,
    state: &StackState<2>,
    scale: f64,
) -> Result<Matrix2<f64>, MaterialError> {
    Ok(stack.generalized_jacobian(h, state)? * scale)
}

/// Runs every material property on seeded random samples.
pub fn run_suite(stack: &MaterialStack, cfg: &VerifyConfig) -> MaterialReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut branches = BranchCounts::default();
    let mut props = Vec::new();

    let mut oracle = PropertyReport::new("oracle");
    let mut kkt = PropertyReport::new("kkt");
    let mut errors = 0usize;
    if !stack.is_empty() {
        for _ in 0..cfg.samples {
            let cell = stack.cells[rng.gen_range(0..stack.len())];
            let jp = disk(&mut rng, 0.7 * cell.j_sat);
            let h = cell_field(&cell, &jp, cfg.h_max, &mut rng);
            match cell.update(&h, &jp) {
                Ok(res) => {
                    match res.branch {
                        Branch::Sticking => branches.sticking += 1,
                        Branch::Sliding => branches.sliding += 1,
                        Branch::Smooth => branches.smooth += 1,
                    }
                    let reference = oracle_minimize(&cell, &h, &jp);
                    oracle.record(ORACLE_TOL - (res.j_new - reference.j).norm());
                    let tol = KKT_TOL_FACTOR * (cell.a_strength + h.norm());
                    let r = cell.kkt_residual(&res.j_new, res.lambda, &h, &jp);
                    kkt.record(r.map(|r| tol - r).unwrap_or(f64::NAN));
                }
                Err(_) => {
                    errors += 1;
                    oracle.record(f64::NAN);
                    kkt.record(f64::NAN);
                }
            }
        }
    }
    if errors > 0 {
        oracle.detail = format!("{errors} local solves failed");
    }
    props.push(oracle.finish());
    props.push(kkt.finish());

    let lip = stack.lipschitz_bound();
    let mut mono = PropertyReport::new("monotonicity");
    let mut lipschitz = PropertyReport::new("lipschitz");
    let mut nonexp = PropertyReport::new("cell_nonexpansive");
    let mut bounds = PropertyReport::new("jacobian_bounds");
    let mut gradient = PropertyReport::new("gradient_consistency");
    for _ in 0..cfg.samples {
        let state = random_state(stack, &mut rng);
        let h1 = disk(&mut rng, cfg.h_max);
        let h2 = disk(&mut rng, cfg.h_max);
        let (r1, r2) = match (stack.evaluate(&h1, &state), stack.evaluate(&h2, &state)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                for p in [&mut mono, &mut lipschitz, &mut nonexp] {
                    p.record(f64::NAN);
                }
                continue;
            }
        };
        let dh = h1 - h2;
        let db = r1.b - r2.b;
        let scale = (r1.b.norm() + r2.b.norm() + stack.mu0 * (h1.norm() + h2.norm())) * dh.norm();
        mono.record(db.dot(&dh) - stack.mu0 * dh.norm_squared() + ROUNDOFF * scale);
        lipschitz.record(lip * dh.norm() - db.norm() + ROUNDOFF * scale);
        for ((c, a), b) in stack.cells.iter().zip(&r1.cells).zip(&r2.cells) {
            let dj = (a.j_new - b.j_new).norm();
            nonexp.record(dh.norm() / c.sigma() - dj + ROUNDOFF * (1.0 + dh.norm() / c.sigma()));
        }

        let s = scaled_jacobian(stack, &h1, &state, cfg.jacobian_scale);
        match s {
            Ok(s) => {
                let asym = (s[(0, 1)] - s[(1, 0)]).abs();
                let ev = s.symmetric_eigenvalues();
                let lo = ev.min();
                let hi = ev.max();
                let slack = ROUNDOFF * lip;
                bounds.record((lo - stack.mu0 + slack).min(lip - hi + slack).min(slack - asym));
            }
            Err(_) => bounds.record(f64::NAN),
        }

        // central differences of the co-energy against B, away from branch switches
        let eps = 1e-4 * (1.0 + h1.norm());
        let e = unit(&mut rng);
        let plus = stack.evaluate(&(h1 + e * eps), &state);
        let minus = stack.evaluate(&(h1 - e * eps), &state);
        if let (Ok(p), Ok(m)) = (plus, minus) {
            let same_branches = p
                .cells
                .iter()
                .zip(&m.cells)
                .zip(&r1.cells)
                .all(|((a, b), c)| a.branch == c.branch && b.branch == c.branch);
            if same_branches {
                let wp = stack.coenergy_from(&(h1 + e * eps), &p);
                let wm = stack.coenergy_from(&(h1 - e * eps), &m);
                let fd = (wp - wm) / (2.0 * eps);
                let exact = r1.b.dot(&e);
                let denom = r1.b.norm().max(stack.mu0 * (1.0 + h1.norm()));
                gradient.record(1e-6 - (fd - exact).abs() / denom);
            }
        }
    }
    if stack.is_empty() {
        nonexp.samples = 1;
    }
    props.push(mono.finish());
    props.push(lipschitz.finish());
    props.push(nonexp.finish());
    props.push(bounds.finish());
    props.push(gradient.finish());

    props.push(semismooth_check(stack, cfg, &mut rng));

    let passed = props.iter().all(|p| p.passed);
    MaterialReport {
        seed: cfg.seed,
        samples: cfg.samples,
        branches,
        properties: props,
        passed,
    }
}

/// `|B(h + delta) - B(h) - S_B(h + delta) delta| / |delta|`.
pub fn semismooth_ratio(
    stack: &MaterialStack,
    h: &Vector2<f64>,
    state: &StackState<2>,
    delta: &Vector2<f64>,
    jacobian_scale: f64,
) -> Result<f64, MaterialError> {
    let b0 = stack.forward_b(h, state)?;
    let hd = h + delta;
    let response = stack.evaluate(&hd, state)?;
    let s = stack.jacobian_from(&response, state) * jacobian_scale;
    Ok((response.b - b0 - s * delta).norm() / delta.norm())
}

fn semismooth_check(stack: &MaterialStack, cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> PropertyReport {
    let mut rep = PropertyReport::new("semismoothness");
    let floor = SEMISMOOTH_NOISE * stack.lipschitz_bound();
    let mut attempts = 0usize;
    let mut below_floor = 0usize;
    while rep.samples < cfg.semismooth_samples && attempts < 100 * cfg.semismooth_samples.max(1) {
        attempts += 1;
        let state = random_state(stack, rng);
        let h = disk(rng, cfg.h_max);
        let Ok(resp) = stack.evaluate(&h, &state) else {
            rep.record(f64::NAN);
            continue;
        };
        let moving = resp
            .cells
            .iter()
            .zip(&state.j_prev)
            .any(|(c, jp)| (c.j_new - jp).norm() > 1e-6);
        if !moving {
            continue;
        }
        let e = unit(rng);
        let big = e * (1e-3 * (1.0 + h.norm()));
        let small = e * (1e-5 * (1.0 + h.norm()));
        match (
            semismooth_ratio(stack, &h, &state, &big, cfg.jacobian_scale),
            semismooth_ratio(stack, &h, &state, &small, cfg.jacobian_scale),
        ) {
            (Ok(rb), Ok(rs)) => {
                if rs <= floor {
                    below_floor += 1;
                    rep.record(floor - rs);
                } else {
                    rep.record(rb / SEMISMOOTH_DROP - rs);
                }
            }
            _ => rep.record(f64::NAN),
        }
    }
    rep.detail = format!("{below_floor} samples at the rounding floor {floor:.3e}");
    rep.finish()
}
