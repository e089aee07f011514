//! P1 scalar-potential discretization with one-point quadrature.
//!
//! The unknown is `psi` with `H = H_s - grad psi`. Gate 1 is grounded, the
//! vertices of gates 2 and 3 share one unknown each, and the prescribed gate
//! fluxes enter through the load functional `l(v) = Phi_2 c_2(v) + Phi_3 c_3(v)`.
//!
//! The discrete merit is `M(psi) = sum_T |T| w*(H_T) - l(psi)` and the
//! residual is its gradient, `R(psi)[v] = -sum_T |T| B_T . grad v - l(v)`.
//! A positive gate flux enters the domain.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::linalg::{LinalgError, SparseSym, TripletBuilder};
use crate::material::{MaterialError, MaterialStack, StackResponse, StackState};
use crate::mesh::{BoundaryTag, Point, TriMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("triangle {triangle}: {source}")]
    Material {
        triangle: usize,
        #[source]
        source: MaterialError,
    },
    #[error("point ({x}, {y}) lies outside the mesh")]
    OutsideDomain { x: f64, y: f64 },
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Where the value of the potential at a vertex comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexDof {
    Free(usize),
    /// Equipotential gate vertex; the payload is the master unknown.
    Slave(usize),
    Grounded,
}

impl VertexDof {
    pub fn index(self) -> Option<usize> {
        match self {
            VertexDof::Free(i) | VertexDof::Slave(i) => Some(i),
            VertexDof::Grounded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub vertex: Vec<VertexDof>,
    /// Unknowns of the gate-2 and gate-3 potentials; empty without gates.
    pub masters: Vec<usize>,
    pub n_free: usize,
}

impl DofMap {
    /// Gate 1 grounded, gates 2 and 3 equipotential. Free vertices are
    /// numbered by vertex index and the two masters come last.
    pub fn gated(mesh: &TriMesh) -> Result<Self, FemError> {
        let mut vertex = vec![VertexDof::Free(usize::MAX); mesh.num_vertices()];
        let gates: Vec<Vec<usize>> = BoundaryTag::GATES.iter().map(|&g| mesh.tagged_vertices(g)).collect();
        for (g, verts) in gates.iter().enumerate() {
            if verts.is_empty() {
                return Err(FemError::Setup(format!("gate {} has no vertices", g + 1)));
            }
        }
        for &v in &gates[0] {
            vertex[v] = VertexDof::Grounded;
        }
        for (gi, verts) in gates.iter().enumerate().skip(1) {
            for &v in verts {
                if vertex[v] == VertexDof::Grounded || matches!(vertex[v], VertexDof::Slave(_)) {
                    return Err(FemError::Setup(format!("vertex {v} lies on two gates")));
                }
                vertex[v] = VertexDof::Slave(gi);
            }
        }
        let mut n = 0;
        for d in vertex.iter_mut() {
            if let VertexDof::Free(i) = d {
                *i = n;
                n += 1;
            }
        }
        let masters = vec![n, n + 1];
        for d in vertex.iter_mut() {
            if let VertexDof::Slave(gi) = d {
                *d = VertexDof::Slave(n + *gi - 1);
            }
        }
        Ok(Self {
            vertex,
            masters,
            n_free: n + 2,
        })
    }

    /// Every vertex free except `ground`, which fixes the additive constant
    /// of a problem without gates.
    pub fn grounded_vertex(mesh: &TriMesh, ground: usize) -> Result<Self, FemError> {
        if ground >= mesh.num_vertices() {
            return Err(FemError::Setup(format!("vertex {ground} does not exist")));
        }
        let mut n = 0;
        let vertex = (0..mesh.num_vertices())
            .map(|v| {
                if v == ground {
                    VertexDof::Grounded
                } else {
                    n += 1;
                    VertexDof::Free(n - 1)
                }
            })
            .collect();
        Ok(Self {
            vertex,
            masters: Vec::new(),
            n_free: n,
        })
    }

    /// Vertex values of the potential.
    pub fn expand(&self, psi: &[f64]) -> Vec<f64> {
        assert_eq!(psi.len(), self.n_free);
        self.vertex.iter().map(|d| d.index().map_or(0.0, |i| psi[i])).collect()
    }
}

/// Prescribed fluxes through gates 1 and 2; gate 3 closes the balance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateLoads {
    pub phi1: f64,
    pub phi2: f64,
}

impl GateLoads {
    pub fn new(phi1: f64, phi2: f64) -> Self {
        Self { phi1, phi2 }
    }

    pub fn phi3(&self) -> f64 {
        -(self.phi1 + self.phi2)
    }

    pub fn all(&self) -> [f64; 3] {
        [self.phi1, self.phi2, self.phi3()]
    }
}

/// Material memory at the barycenter of one triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadPointState {
    pub material: usize,
    pub state: StackState<2>,
}

/// Material response of every triangle at one potential.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub h: Vec<Vector2<f64>>,
    pub responses: Vec<StackResponse<2>>,
    pub merit: f64,
    /// Sum of magnitudes of the merit terms, for rounding estimates.
    pub merit_scale: f64,
}

/// Mesh, constraints, materials and element geometry of one problem.
#[derive(Debug, Clone)]
pub struct P1Model {
    pub mesh: TriMesh,
    pub dofs: DofMap,
    pub materials: Vec<MaterialStack>,
    /// Material index of every triangle.
    pub material_of: Vec<usize>,
    /// Source field per triangle.
    pub h_source: Vec<Vector2<f64>>,
    area: Vec<f64>,
    shape_grad: Vec<[Vector2<f64>; 3]>,
    local: Vec<[Option<usize>; 3]>,
}

impl P1Model {
    pub fn new(
        mesh: TriMesh,
        dofs: DofMap,
        materials: Vec<MaterialStack>,
        material_of: Vec<usize>,
        h_source: Vec<Vector2<f64>>,
    ) -> Result<Self, FemError> {
        let nt = mesh.num_triangles();
        if material_of.len() != nt || h_source.len() != nt {
            return Err(FemError::Setup(format!(
                "{nt} triangles but {} material ids and {} source values",
                material_of.len(),
                h_source.len()
            )));
        }
        if dofs.vertex.len() != mesh.num_vertices() {
            return Err(FemError::Setup("dof map does not match the mesh".into()));
        }
        if let Some(&m) = material_of.iter().find(|&&m| m >= materials.len()) {
            return Err(FemError::Setup(format!("material id {m} out of range")));
        }
        let mut area = Vec::with_capacity(nt);
        let mut shape_grad = Vec::with_capacity(nt);
        let mut local = Vec::with_capacity(nt);
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|v| mesh.vertices[v]);
            let a = mesh.area(t);
            // grad of the barycentric coordinate of vertex i: rotated opposite edge over 2|T|
            let g = [0, 1, 2].map(|i| {
                let e = p[(i + 2) % 3] - p[(i + 1) % 3];
                Vector2::new(-e.y, e.x) / (2.0 * a)
            });
            area.push(a);
            shape_grad.push(g);
            local.push(tri.map(|v| dofs.vertex[v].index()));
        }
        Ok(Self {
            mesh,
            dofs,
            materials,
            material_of,
            h_source,
            area,
            shape_grad,
            local,
        })
    }

    /// Gated problem with one material everywhere and no source field.
    pub fn gated(mesh: TriMesh, material: MaterialStack) -> Result<Self, FemError> {
        let dofs = DofMap::gated(&mesh)?;
        let nt = mesh.num_triangles();
        Self::new(mesh, dofs, vec![material], vec![0; nt], vec![Vector2::zeros(); nt])
    }

    pub fn n_free(&self) -> usize {
        self.dofs.n_free
    }

    pub fn num_triangles(&self) -> usize {
        self.mesh.num_triangles()
    }

    pub fn area(&self, t: usize) -> f64 {
        self.area[t]
    }

    pub fn virgin_states(&self) -> Vec<QuadPointState> {
        self.material_of
            .iter()
            .map(|&m| QuadPointState {
                material: m,
                state: StackState::virgin(self.materials[m].len()),
            })
            .collect()
    }

    /// Constant gradient of the P1 interpolant on triangle `t`.
    pub fn gradient_at_barycenter(&self, psi: &[f64], t: usize) -> Vector2<f64> {
        let mut g = Vector2::zeros();
        for (i, d) in self.local[t].iter().enumerate() {
            if let Some(k) = d {
                g += self.shape_grad[t][i] * psi[*k];
            }
        }
        g
    }

    /// `H_s - grad psi` on triangle `t`.
    pub fn field(&self, psi: &[f64], t: usize) -> Vector2<f64> {
        self.h_source[t] - self.gradient_at_barycenter(psi, t)
    }

    /// `l(v)` as a vector over the unknowns.
    pub fn load_vector(&self, loads: &GateLoads) -> Vec<f64> {
        let mut l = vec![0.0; self.n_free()];
        if let [m2, m3] = self.dofs.masters[..] {
            l[m2] = loads.phi2;
            l[m3] = loads.phi3();
        }
        l
    }

    /// Solves every local problem at `psi` and evaluates the merit.
    pub fn evaluate(
        &self,
        psi: &[f64],
        states: &[QuadPointState],
        loads: &GateLoads,
    ) -> Result<Evaluation, FemError> {
        assert_eq!(psi.len(), self.n_free());
        assert_eq!(states.len(), self.num_triangles());
        let mut h = Vec::with_capacity(states.len());
        let mut responses = Vec::with_capacity(states.len());
        let mut merit = 0.0;
        let mut scale = 0.0;
        for (t, qp) in states.iter().enumerate() {
            let stack = &self.materials[qp.material];
            let ht = self.field(psi, t);
            let r = stack
                .evaluate(&ht, &qp.state)
                .map_err(|source| FemError::Material { triangle: t, source })?;
            let w = stack.coenergy_from(&ht, &r);
            merit += self.area[t] * w;
            scale += self.area[t]
                * (0.5 * stack.mu0 * ht.norm_squared() + r.cells.iter().map(|c| c.objective.abs()).sum::<f64>());
            h.push(ht);
            responses.push(r);
        }
        let lv: f64 = self.load_vector(loads).iter().zip(psi).map(|(a, b)| a * b).sum();
        merit -= lv;
        scale += lv.abs();
        Ok(Evaluation {
            h,
            responses,
            merit,
            merit_scale: scale,
        })
    }

    pub fn merit(&self, psi: &[f64], states: &[QuadPointState], loads: &GateLoads) -> Result<f64, FemError> {
        Ok(self.evaluate(psi, states, loads)?.merit)
    }

    /// `R[v] = -sum_T |T| B_T . grad v - l(v)`.
    pub fn residual(&self, eval: &Evaluation, loads: &GateLoads) -> Vec<f64> {
        let mut r = self.load_vector(loads);
        r.iter_mut().for_each(|x| *x = -*x);
        for (t, resp) in eval.responses.iter().enumerate() {
            for (i, d) in self.local[t].iter().enumerate() {
                if let Some(k) = d {
                    r[*k] -= self.area[t] * resp.b.dot(&self.shape_grad[t][i]);
                }
            }
        }
        r
    }

    pub fn assemble_residual(
        &self,
        psi: &[f64],
        states: &[QuadPointState],
        loads: &GateLoads,
    ) -> Result<Vec<f64>, FemError> {
        Ok(self.residual(&self.evaluate(psi, states, loads)?, loads))
    }

    /// `K[v, w] = sum_T |T| grad v . S_T grad w` for given per-triangle blocks.
    pub fn assemble(&self, blocks: &[Matrix2<f64>]) -> Result<SparseSym, FemError> {
        assert_eq!(blocks.len(), self.num_triangles());
        let mut b = TripletBuilder::with_capacity(self.n_free(), 9 * blocks.len());
        for (t, s) in blocks.iter().enumerate() {
            let g = &self.shape_grad[t];
            let l = &self.local[t];
            for i in 0..3 {
                let Some(ki) = l[i] else { continue };
                let sg = s * g[i];
                for j in i..3 {
                    let Some(kj) = l[j] else { continue };
                    let v = self.area[t] * g[j].dot(&sg);
                    b.push(ki, kj, v);
                    if i != j {
                        b.push(kj, ki, v);
                    }
                }
            }
        }
        Ok(b.build()?)
    }

    /// Generalized Jacobians of the material law at an evaluation.
    pub fn jacobian_blocks(&self, eval: &Evaluation, states: &[QuadPointState]) -> Vec<Matrix2<f64>> {
        states
            .iter()
            .zip(&eval.responses)
            .map(|(qp, r)| self.materials[qp.material].jacobian_from(r, &qp.state))
            .collect()
    }

    pub fn assemble_tangent(
        &self,
        psi: &[f64],
        states: &[QuadPointState],
        loads: &GateLoads,
    ) -> Result<SparseSym, FemError> {
        let eval = self.evaluate(psi, states, loads)?;
        self.assemble(&self.jacobian_blocks(&eval, states))
    }

    /// Stiffness matrix of the Laplacian, `sum_T |T| grad v . grad w`.
    pub fn laplacian(&self) -> SparseSym {
        self.assemble(&vec![Matrix2::identity(); self.num_triangles()])
            .expect("element stiffness is well formed")
    }

    /// `(sum_T |T| |grad v|^2)^(1/2)`.
    pub fn grad_norm(&self, v: &[f64]) -> f64 {
        (0..self.num_triangles())
            .map(|t| self.area[t] * self.gradient_at_barycenter(v, t).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Field and induction at `point`, using the memory in `states`.
    pub fn probe(
        &self,
        psi: &[f64],
        states: &[QuadPointState],
        point: &Point,
    ) -> Result<(Vector2<f64>, Vector2<f64>), FemError> {
        let t = self.mesh.locate(point).ok_or(FemError::OutsideDomain {
            x: point.x,
            y: point.y,
        })?;
        let h = self.field(psi, t);
        let qp = &states[t];
        let b = self.materials[qp.material]
            .forward_b(&h, &qp.state)
            .map_err(|source| FemError::Material { triangle: t, source })?;
        Ok((h, b))
    }

    /// Flux entering through each gate, recovered from the discrete balance
    /// `-sum_T |T| B_T . grad chi_i` with `chi_i` the gate's nodal indicator.
    pub fn gate_fluxes(&self, eval: &Evaluation) -> [f64; 3] {
        let mut on_gate = vec![[false; 3]; self.mesh.num_vertices()];
        for (g, tag) in BoundaryTag::GATES.iter().enumerate() {
            for v in self.mesh.tagged_vertices(*tag) {
                on_gate[v][g] = true;
            }
        }
        let mut flux = [0.0; 3];
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            for (i, &v) in tri.iter().enumerate() {
                for g in 0..3 {
                    if on_gate[v][g] {
                        flux[g] -= self.area[t] * eval.responses[t].b.dot(&self.shape_grad[t][i]);
                    }
                }
            }
        }
        flux
    }

    /// `sum_T |T| sum_k chi_k |J_k - J_{k,p}|` between `states` and `eval`.
    pub fn dissipation(&self, eval: &Evaluation, states: &[QuadPointState]) -> f64 {
        states
            .iter()
            .zip(&eval.responses)
            .enumerate()
            .map(|(t, (qp, r))| self.area[t] * self.materials[qp.material].dissipation(r, &qp.state))
            .sum()
    }

    /// New memory taken from the polarizations of `eval`.
    pub fn committed_states(&self, eval: &Evaluation, states: &[QuadPointState]) -> Result<Vec<QuadPointState>, FemError> {
        states
            .iter()
            .zip(&eval.responses)
            .enumerate()
            .map(|(t, (qp, r))| {
                let next = QuadPointState {
                    material: qp.material,
                    state: StackState {
                        j_prev: r.cells.iter().map(|c| c.j_new).collect(),
                    },
                };
                next.state
                    .validate(&self.materials[qp.material])
                    .map_err(|source| FemError::Material { triangle: t, source })?;
                Ok(next)
            })
            .collect()
    }
}
