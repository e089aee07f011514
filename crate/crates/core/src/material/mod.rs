//! Local constitutive law of the energy-based vector hysteresis model.
//!
//! Each cell `k` contributes a partial polarization `J_k` minimizing
//! `U_k(J) - <H, J> + chi_k |J - J_{k,p}|`; the forward law is
//! `B(H) = mu0 H + sum_k J_k`.

mod cell;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cell::{ncp_phi, Branch, CellSolveResult, HysteresisCell, MAX_LOCAL_ITERS};

/// Vacuum permeability in H/m.
pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("polarization magnitude {norm} outside the energy domain |J| < {j_sat}")]
    Domain { norm: f64, j_sat: f64 },
    #[error("local solve did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("invalid material parameter: {0}")]
    InvalidParameter(String),
    #[error("cell {index}: {source}")]
    Cell {
        index: usize,
        #[source]
        source: Box<MaterialError>,
    },
}

impl MaterialError {
    fn in_cell(self, index: usize) -> Self {
        MaterialError::Cell {
            index,
            source: Box::new(self),
        }
    }
}

/// An ordered collection of pinning cells sharing one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialStack {
    pub cells: Vec<HysteresisCell>,
    #[serde(default = "default_mu0")]
    pub mu0: f64,
}

fn default_mu0() -> f64 {
    MU0
}

/// Previous partial polarizations `J_{k,p}`, one per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StackState<const D: usize> {
    pub j_prev: Vec<SVector<f64, D>>,
}

/// Outcome of evaluating a stack at one field value.
#[derive(Debug, Clone, PartialEq)]
pub struct StackResponse<const D: usize> {
    pub cells: Vec<CellSolveResult<D>>,
    pub b: SVector<f64, D>,
}

impl<const D: usize> StackState<D> {
    pub fn virgin(cells: usize) -> Self {
        Self {
            j_prev: vec![SVector::zeros(); cells],
        }
    }

    pub fn validate(&self, stack: &MaterialStack) -> Result<(), MaterialError> {
        if self.j_prev.len() != stack.cells.len() {
            return Err(MaterialError::InvalidParameter(format!(
                "state holds {} polarizations for {} cells",
                self.j_prev.len(),
                stack.cells.len()
            )));
        }
        for (k, (jp, cell)) in self.j_prev.iter().zip(&stack.cells).enumerate() {
            let norm = jp.norm();
            if !(norm < cell.j_sat) {
                return Err(MaterialError::Domain {
                    norm,
                    j_sat: cell.j_sat,
                }
                .in_cell(k));
            }
        }
        Ok(())
    }
}

impl MaterialStack {
    pub fn new(cells: Vec<HysteresisCell>) -> Result<Self, MaterialError> {
        for (k, c) in cells.iter().enumerate() {
            c.validate().map_err(|e| e.in_cell(k))?;
        }
        Ok(Self { cells, mu0: MU0 })
    }

    /// Vacuum only; `B = mu0 H`.
    pub fn vacuum() -> Self {
        Self {
            cells: Vec::new(),
            mu0: MU0,
        }
    }

    /// Five-cell model with `A = 65 A/m`, `Js = (0.11, 0.3, 0.44, 0.33, 0.04) T`
    /// and `chi = (0, 10, 20, 40, 60) A/m`.
    pub fn lavet5() -> Self {
        Self::lavet5_with_prefactor(2.0)
    }

    pub fn lavet5_with_prefactor(c: f64) -> Self {
        let j_sat = [0.11, 0.3, 0.44, 0.33, 0.04];
        let chi = [0.0, 10.0, 20.0, 40.0, 60.0];
        let cells = j_sat
            .iter()
            .zip(chi)
            .map(|(&js, chi)| HysteresisCell {
                a_strength: 65.0,
                j_sat: js,
                chi,
                energy_prefactor: c,
            })
            .collect();
        Self { cells, mu0: MU0 }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Upper bound `mu0 + sum_k 1/sigma_k` on the slope of `B(H)`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.mu0 + self.cells.iter().map(|c| 1.0 / c.sigma()).sum::<f64>()
    }

    pub fn evaluate<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        state: &StackState<D>,
    ) -> Result<StackResponse<D>, MaterialError> {
        debug_assert_eq!(state.j_prev.len(), self.cells.len());
        let mut b = h * self.mu0;
        let mut cells = Vec::with_capacity(self.cells.len());
        for (k, (cell, jp)) in self.cells.iter().zip(&state.j_prev).enumerate() {
            let r = cell.update(h, jp).map_err(|e| e.in_cell(k))?;
            b += r.j_new;
            cells.push(r);
        }
        Ok(StackResponse { cells, b })
    }

    pub fn forward_b<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        state: &StackState<D>,
    ) -> Result<SVector<f64, D>, MaterialError> {
        Ok(self.evaluate(h, state)?.b)
    }

    /// Co-energy density `w*(H) = mu0 |H|^2 / 2 - sum_k min_J {...}`, whose gradient is `B(H)`.
    pub fn coenergy_density<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        state: &StackState<D>,
    ) -> Result<f64, MaterialError> {
        Ok(self.coenergy_from(h, &self.evaluate(h, state)?))
    }

    pub fn coenergy_from<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        response: &StackResponse<D>,
    ) -> f64 {
        0.5 * self.mu0 * h.norm_squared() - response.cells.iter().map(|c| c.objective).sum::<f64>()
    }

    /// `S_B = mu0 I + sum_k S_{J_k}` built from an already solved response,
    /// so the local problems are not solved twice.
    pub fn jacobian_from<const D: usize>(
        &self,
        response: &StackResponse<D>,
        state: &StackState<D>,
    ) -> SMatrix<f64, D, D> {
        let mut s = SMatrix::<f64, D, D>::identity() * self.mu0;
        for ((cell, r), jp) in self.cells.iter().zip(&response.cells).zip(&state.j_prev) {
            s += cell.jacobian(r, jp);
        }
        s
    }

    pub fn generalized_jacobian<const D: usize>(
        &self,
        h: &SVector<f64, D>,
        state: &StackState<D>,
    ) -> Result<SMatrix<f64, D, D>, MaterialError> {
        let response = self.evaluate(h, state)?;
        Ok(self.jacobian_from(&response, state))
    }

    /// Energy dissipated by moving from `state` to `response`: `sum_k chi_k |J_k - J_{k,p}|`.
    pub fn dissipation<const D: usize>(
        &self,
        response: &StackResponse<D>,
        state: &StackState<D>,
    ) -> f64 {
        self.cells
            .iter()
            .zip(&response.cells)
            .zip(&state.j_prev)
            .map(|((c, r), jp)| c.chi * (r.j_new - jp).norm())
            .sum()
    }
}
