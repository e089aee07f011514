//! A single pinning cell: log-cos internal energy plus a dry-friction
//! pinning term `chi * |J - J_p|`.

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::MaterialError;

/// Maximum number of Newton steps of the local sliding solve.
pub const MAX_LOCAL_ITERS: usize = 100;

/// Trial points are pulled back to this fraction of the saturation
/// polarization before the objective is evaluated.
const DOMAIN_GUARD: f64 = 1.0 - 1e-12;

/// One pinning element of the energy-based hysteresis model.
///
/// The internal energy is
/// `U(J) = -(c A Js / pi) log(cos(pi |J| / (2 Js)))`, so that the radial
/// derivative is `u'(r) = (c A / 2) tan(pi r / (2 Js))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisCell {
    /// Field strength scale `A` in A/m.
    pub a_strength: f64,
    /// Saturation polarization `Js` in T.
    pub j_sat: f64,
    /// Pinning force `chi` in A/m.
    pub chi: f64,
    /// Energy prefactor `c`, either 1 or 2.
    #[serde(default = "default_prefactor")]
    pub energy_prefactor: f64,
}

fn default_prefactor() -> f64 {
    2.0
}

/// Which case of the local optimality condition the minimizer satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// `J = J_p`, the driving force stays inside the pinning ball.
    Sticking,
    /// `J != J_p` and `|grad U(J) - H| = chi`.
    Sliding,
    /// No pinning (`chi = 0`): `grad U(J) = H`.
    Smooth,
}

/// Minimizer of the local incremental problem together with its multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSolveResult<const D: usize> {
    pub j_new: SVector<f64, D>,
    /// Multiplier of the complementarity system; `|J - J_p| / chi` when sliding,
    /// zero otherwise.
    pub lambda: f64,
    pub branch: Branch,
    /// Norm of the optimality residual at `j_new`.
    pub kkt_norm: f64,
    /// Minimal value `U(J) - <H, J> + chi |J - J_p|`.
    pub objective: f64,
}

/// `max(0, x1 + x2) - x2`; vanishes iff `x1 <= 0`, `x2 >= 0` and `x1 * x2 = 0`.
pub fn ncp_phi(x1: f64, x2: f64) -> f64 {
    (x1 + x2).max(0.0) - x2
}

impl HysteresisCell {
    pub fn new(
        a_strength: f64,
        j_sat: f64,
        chi: f64,
        energy_prefactor: f64,
    ) -> Result<Self, MaterialError> {
        let cell = Self {
            a_strength,
            j_sat,
            chi,
            energy_prefactor,
        };
        cell.validate()?;
        Ok(cell)
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let ok = self.a_strength.is_finite()
            && self.a_strength > 0.0
            && self.j_sat.is_finite()
            && self.j_sat > 0.0
            && self.chi.is_finite()
            && self.chi >= 0.0
            && (self.energy_prefactor == 1.0 || self.energy_prefactor == 2.0);
        if ok {
            Ok(())
        } else {
            Err(MaterialError::InvalidParameter(format!(
                "cell requires A > 0, Js > 0, chi >= 0, c in {{1, 2}}; got {self:?}"
            )))
        }
    }

    /// `c A / 2`, the field scale of the anhysteretic curve.
    #[inline]
    fn field_scale(&self) -> f64 {
        0.5 * self.energy_prefactor * self.a_strength
    }

    #[inline]
    fn angle(&self, r: f64) -> f64 {
        0.5 * PI * r / self.j_sat
    }

    /// Strong convexity modulus of `U`: the smallest Hessian eigenvalue, attained at `J = 0`.
    pub fn sigma(&self) -> f64 {
        self.field_scale() * 0.5 * PI / self.j_sat
    }

    fn check_domain<const D: usize>(&self, j: &SVector<f64, D>) -> Result<f64, MaterialError> {
        let r = j.norm();
        if r.is_finite() && r < self.j_sat {
            Ok(r)
        } else {
            Err(MaterialError::Domain {
                norm: r,
                j_sat: self.j_sat,
            })
        }
    }

    /// Radial derivative `u'(r)`.
    pub fn du(&self, r: f64) -> f64 {
        self.field_scale() * self.angle(r).tan()
    }

    /// Radial second derivative `u''(r)`.
    pub fn d2u(&self, r: f64) -> f64 {
        let c = self.angle(r).cos();
        self.sigma() / (c * c)
    }

    /// `u'(r) / r`, continuous at `r = 0` where it equals `sigma`.
    pub fn du_over_r(&self, r: f64) -> f64 {
        let x = self.angle(r);
        let tan_x_over_x = if x < 1e-4 {
            let x2 = x * x;
            1.0 + x2 / 3.0 + 2.0 * x2 * x2 / 15.0
        } else {
            x.tan() / x
        };
        self.sigma() * tan_x_over_x
    }

    fn energy_radial(&self, r: f64) -> f64 {
        -(2.0 * self.field_scale() * self.j_sat / PI) * self.angle(r).cos().ln()
    }

    pub fn internal_energy<const D: usize>(&self, j: &SVector<f64, D>) -> Result<f64, MaterialError> {
        let r = self.check_domain(j)?;
        Ok(self.energy_radial(r))
    }

    pub fn grad_u<const D: usize>(
        &self,
        j: &SVector<f64, D>,
    ) -> Result<SVector<f64, D>, MaterialError> {
        let r = self.check_domain(j)?;
        Ok(j * self.du_over_r(r))
    }

    pub fn hess_u<const D: usize>(
        &self,
        j: &SVector<f64, D>,
    ) -> Result<SMatrix<f64, D, D>, MaterialError> {
        let r = self.check_domain(j)?;
        Ok(self.hess_radial(j, r))
    }

    fn hess_radial<const D: usize>(&self, j: &SVector<f64, D>, r: f64) -> SMatrix<f64, D, D> {
        let tangential = self.du_over_r(r);
        let mut hess = SMatrix::<f64, D, D>::identity() * tangential;
        if r > 0.0 {
            let e = j / r;
            hess += (e * e.transpose()) * (self.d2u(r) - tangential);
        }
        hess
    }

    /// Inverse of `grad U`: the anhysteretic polarization for field `v`.
    pub fn anhysteretic<const D: usize>(&self, v: &SVector<f64, D>) -> SVector<f64, D> {
        let s = v.norm();
        if s == 0.0 {
            return SVector::zeros();
        }
        let r = (2.0 * self.j_sat / PI) * (s / self.field_scale()).atan();
        v * (r.min(DOMAIN_GUARD * self.j_sat) / s)
    }

    /// `U(J) - <H, J> + chi |J - J_p|`.
    pub fn local_objective<const D: usize>(
        &self,
        j: &SVector<f64, D>,
        h: &SVector<f64, D>,
        jp: &SVector<f64, D>,
    ) -> Result<f64, MaterialError> {
        Ok(self.internal_energy(j)? - h.dot(j) + self.chi * (j - jp).norm())
    }

    fn local_tolerance<const D: usize>(&self, h: &SVector<f64, D>) -> f64 {
        1e-12 * (self.a_strength + h.norm())
    }

    /// Minimizes `U(J) - <H, J> + chi |J - J_p|` over `J`.
    ///
    /// The sticking case is decided exactly from the subdifferential at
    /// `J_p`; at the switch point `|grad U(J_p) - H| = chi` sticking wins.
    /// Sliding is solved by a guarded Newton method on
    /// `grad U(J) - H + chi (J - J_p)/|J - J_p| = 0`.
    pub fn update<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        jp: &SVector<f64, D>,
    ) -> Result<CellSolveResult<D>, MaterialError> {
        self.check_domain(jp)?;
        if !h.iter().all(|x| x.is_finite()) {
            return Err(MaterialError::InvalidParameter(format!(
                "non-finite field {:?}",
                h.as_slice()
            )));
        }

        if self.chi == 0.0 {
            let j = self.anhysteretic(h);
            let kkt_norm = self.kkt_residual(&j, 0.0, h, jp)?;
            return Ok(CellSolveResult {
                j_new: j,
                lambda: 0.0,
                branch: Branch::Smooth,
                kkt_norm,
                objective: self.local_objective(&j, h, jp)?,
            });
        }

        let drive = self.grad_u(jp)? - h;
        if drive.norm() <= self.chi {
            return Ok(CellSolveResult {
                j_new: *jp,
                lambda: 0.0,
                branch: Branch::Sticking,
                kkt_norm: 0.0,
                objective: self.local_objective(jp, h, jp)?,
            });
        }

        // a slide below the spacing of representable J is the switch point
        // up to rounding in `drive`
        let rho_lin = (drive.norm() - self.chi) / self.hess_u(jp)?.norm();
        if rho_lin <= 8.0 * f64::EPSILON * self.j_sat {
            return Ok(CellSolveResult {
                j_new: *jp,
                lambda: 0.0,
                branch: Branch::Sticking,
                kkt_norm: self.kkt_residual(jp, 0.0, h, jp)?,
                objective: self.local_objective(jp, h, jp)?,
            });
        }

        let j = self.solve_sliding(h, jp, &drive)?;
        let lambda = (j - jp).norm() / self.chi;
        Ok(CellSolveResult {
            j_new: j,
            lambda,
            branch: Branch::Sliding,
            kkt_norm: self.kkt_residual(&j, lambda, h, jp)?,
            objective: self.local_objective(&j, h, jp)?,
        })
    }

    /// Sliding branch in polar coordinates `J = J_p + rho (cos phi a + sin phi b)`
    /// on the plane spanned by the steepest descent direction `a` at `J_p` and `H`.
    ///
    /// In these coordinates the pinning term is `chi rho` and the objective is
    /// smooth. Every stationary point with `rho > 0` is the minimizer, and
    /// descent from a point below `f(J_p)` cannot return to `rho = 0`.
    fn solve_sliding<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        jp: &SVector<f64, D>,
        drive: &SVector<f64, D>,
    ) -> Result<SVector<f64, D>, MaterialError> {
        let tol = self.local_tolerance(h);
        let a = -drive / drive.norm();
        let b = plane_complement(&a, h, jp);
        let point = |rho: f64, phi: f64| jp + (a * phi.cos() + b * phi.sin()) * rho;
        let objective = |rho: f64, phi: f64| {
            let j = point(rho, phi);
            let r = j.norm();
            if rho <= 0.0 || !(r < self.j_sat) {
                return f64::INFINITY;
            }
            self.energy_radial(r) - h.dot(&j) + self.chi * rho
        };

        let stationarity = |rho: f64, phi: f64| -> Result<f64, MaterialError> {
            let e = a * phi.cos() + b * phi.sin();
            Ok((self.grad_u(&(jp + e * rho))? - h + e * self.chi).norm())
        };

        // Two starting guesses: the anhysteretic point at H - chi a, exact in the
        // collinear case, and the minimizer of the quadratic model along a.
        let hess0 = self.hess_u(jp)?;
        let rho_lin = (drive.norm() - self.chi) / a.dot(&(hess0 * a));
        let mut start = (rho_lin, 0.0);
        let guess = self.anhysteretic(&(h - a * self.chi)) - jp;
        let (ga, gb) = (guess.dot(&a), guess.dot(&b));
        let rho_anh = (ga * ga + gb * gb).sqrt();
        let f_lin = objective(start.0, start.1);
        let slack = 1e-14 * (f_lin.abs() + h.norm() * self.j_sat);
        if rho_anh > 0.0 && (!f_lin.is_finite() || objective(rho_anh, gb.atan2(ga)) < f_lin - slack) {
            start = (rho_anh, gb.atan2(ga));
        }
        let (mut rho, mut phi) = start;
        while !objective(rho, phi).is_finite() {
            rho *= 0.5;
            if rho < 1e-300 {
                return Err(MaterialError::Convergence {
                    iterations: 0,
                    residual: f64::INFINITY,
                });
            }
        }

        let mut residual = f64::INFINITY;
        for _ in 0..MAX_LOCAL_ITERS {
            let e = a * phi.cos() + b * phi.sin();
            let t = b * phi.cos() - a * phi.sin();
            let j = jp + e * rho;
            let g = self.grad_u(&j)? - h;
            residual = (g + e * self.chi).norm();
            if residual <= tol {
                return Ok(j);
            }
            let hess = self.hess_u(&j)?;
            let (he, ht) = (hess * e, hess * t);
            let grad = [g.dot(&e) + self.chi, rho * g.dot(&t)];
            let m11 = e.dot(&he);
            let m12 = rho * e.dot(&ht) + g.dot(&t);
            let m22 = rho * rho * t.dot(&ht) - rho * g.dot(&e);
            let step = newton_or_scaled_gradient(m11, m12, m22, grad);
            // close to saturation the residual cannot reach the tolerance in
            // floating point; stop once the correction is below the spacing of J
            let resolution = 8.0 * f64::EPSILON * j.norm().max(rho);
            if m11 > 0.0 && step[0].abs() <= resolution && (rho * step[1]).abs() <= resolution {
                return Ok(j);
            }

            let f0 = objective(rho, phi);
            let slope = grad[0] * step[0] + grad[1] * step[1];
            let slack = 1e-15 * (f0.abs() + h.norm() * self.j_sat);
            let mut alpha = 1.0;
            loop {
                let (rt, pt) = (rho + alpha * step[0], phi + alpha * step[1]);
                let ft = objective(rt, pt);
                // near the solution the decrease of f drops below its rounding
                // level, so a step that halves the stationarity residual is kept too
                if ft <= f0 + 1e-4 * alpha * slope + slack
                    || (ft.is_finite() && stationarity(rt, pt)? <= 0.5 * residual)
                {
                    rho = rt;
                    phi = pt;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    return Err(MaterialError::Convergence {
                        iterations: MAX_LOCAL_ITERS,
                        residual,
                    });
                }
            }
        }
        Err(MaterialError::Convergence {
            iterations: MAX_LOCAL_ITERS,
            residual,
        })
    }

    /// Norm of the semi-smooth reformulation of the local optimality system,
    /// `(J - J_p + lambda (grad U(J) - H), phi(|grad U(J) - H|^2/2 - chi^2/2, lambda))`.
    ///
    /// Without pinning the multiplier is meaningless and the smooth
    /// condition `|grad U(J) - H|` is returned instead.
    pub fn kkt_residual<const D: usize>(
        &self,
        j: &SVector<f64, D>,
        lambda: f64,
        h: &SVector<f64, D>,
        jp: &SVector<f64, D>,
    ) -> Result<f64, MaterialError> {
        let g = self.grad_u(j)? - h;
        if self.chi == 0.0 {
            return Ok(g.norm());
        }
        let first = j - jp + g * lambda;
        let second = ncp_phi(0.5 * (g.norm_squared() - self.chi * self.chi), lambda);
        Ok((first.norm_squared() + second * second).sqrt())
    }

    /// Element `S_J` of the generalized Jacobian of `H -> J(H)` at a solved state.
    pub fn jacobian<const D: usize>(
        &self,
        result: &CellSolveResult<D>,
        jp: &SVector<f64, D>,
    ) -> SMatrix<f64, D, D> {
        let j = result.j_new;
        let r = j.norm();
        let mut m = self.hess_radial(&j, r);
        match result.branch {
            Branch::Sticking => return SMatrix::zeros(),
            Branch::Smooth => {}
            Branch::Sliding => {
                let d = j - jp;
                let rho = d.norm();
                if rho == 0.0 {
                    return SMatrix::zeros();
                }
                let e = d / rho;
                m += (SMatrix::<f64, D, D>::identity() - e * e.transpose()) * (self.chi / rho);
            }
        }
        let inv = m.cholesky().map(|c| c.inverse());
        assert!(inv.is_some(), "local Jacobian block must be positive definite");
        inv.unwrap()
    }
}

/// A unit vector orthogonal to `a` in the plane of `h` and `jp`, or any
/// orthogonal unit vector when all three are collinear.
fn plane_complement<const D: usize>(
    a: &SVector<f64, D>,
    h: &SVector<f64, D>,
    jp: &SVector<f64, D>,
) -> SVector<f64, D> {
    for v in [h, jp] {
        let w = v - a * a.dot(v);
        if w.norm() > 1e-12 * v.norm() && w.norm() > 0.0 {
            // a second pass restores orthogonality lost to cancellation
            let w = w.normalize();
            return (w - a * a.dot(&w)).normalize();
        }
    }
    let k = a.iamin();
    let mut w = SVector::<f64, D>::zeros();
    w[k] = 1.0;
    let w = (w - a * a[k]).normalize();
    (w - a * a.dot(&w)).normalize()
}

/// Newton step for the 2x2 model, or a gradient step scaled by the
/// diagonal when the model is not positive definite.
fn newton_or_scaled_gradient(m11: f64, m12: f64, m22: f64, g: [f64; 2]) -> [f64; 2] {
    let det = m11 * m22 - m12 * m12;
    if m11 > 0.0 && det > 1e-14 * (m11 * m22).abs() {
        [(-m22 * g[0] + m12 * g[1]) / det, (m12 * g[0] - m11 * g[1]) / det]
    } else {
        let d1 = m11.abs().max(1e-300);
        let d2 = m22.abs().max(m11.abs() * 1e-12).max(1e-300);
        [-g[0] / d1, -g[1] / d2]
    }
}
