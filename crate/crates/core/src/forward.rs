//! One implicit-Euler step solved by accelerated local/global iterations.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::contact::{
    detect_step_contacts, diagnostics, position_update, solve_contacts, Attachment, ContactDiagnostics, ContactSet, ContactState, Obstacle,
    RowKind, DEFAULT_MARGIN,
};
use crate::error::{Error, Result};
use crate::factor::{assemble_damping, mul_xyz, Delassus, PdSystem};
use crate::localstep::{project, ProxParams, ProxResult};
use crate::material::{ConstraintKind, MaterialField};
use crate::mesh::TetMesh;
use crate::par::map_range;
use crate::sparse::{norm, SparseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub time: f64,
}

impl SimState {
    pub fn at_rest(mesh: &TetMesh) -> Self {
        Self {
            q: mesh.rest_q(),
            v: vec![0.0; mesh.n_dofs()],
            time: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub h: f64,
    pub max_iters: usize,
    pub eps_rel: f64,
    pub eps_abs: f64,
    /// Anderson window; `None` picks 1 on heterogeneous fields and 5 otherwise.
    pub aa_window: Option<usize>,
    pub contact_margin: f64,
    pub contact_max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            h: 1e-2,
            max_iters: 500,
            eps_rel: 1e-4,
            eps_abs: 1e-9,
            aa_window: None,
            contact_margin: DEFAULT_MARGIN,
            contact_max_iters: 100,
        }
    }
}

/// Weight contrast above which the field counts as heterogeneous.
pub const HETEROGENEOUS_CONTRAST: f64 = 10.0;

pub fn default_aa_window(material: &MaterialField) -> usize {
    if material.weight_contrast() > HETEROGENEOUS_CONTRAST {
        1
    } else {
        5
    }
}

/// Position- and velocity-dependent force hook evaluated at the start of a step.
pub trait StateForce: Send + Sync + std::fmt::Debug {
    fn force(&self, q: &[f64], v: &[f64]) -> Vec<f64>;
    /// `((∂f/∂q)ᵀ w, (∂f/∂v)ᵀ w)`.
    fn vjp(&self, q: &[f64], v: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// Zero-length springs pulling each DoF toward an anchor, plus linear drag:
/// `f = −k (q − q_anchor) − c v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpring {
    pub stiffness: f64,
    pub drag: f64,
    pub anchor: Vec<f64>,
}

impl StateForce for AnchorSpring {
    fn force(&self, q: &[f64], v: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(v)
            .zip(&self.anchor)
            .map(|((q, v), a)| -self.stiffness * (q - a) - self.drag * v)
            .collect()
    }

    fn vjp(&self, _q: &[f64], _v: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            w.iter().map(|x| -self.stiffness * x).collect(),
            w.iter().map(|x| -self.drag * x).collect(),
        )
    }
}

/// Everything that defines the dynamics apart from the state.
#[derive(Debug, Clone)]
pub struct Model {
    pub mesh: TetMesh,
    pub material: MaterialField,
    /// Vertices held at prescribed positions.
    pub dirichlet: Vec<(usize, Vector3<f64>)>,
    pub obstacles: Vec<Obstacle>,
    pub attachments: Vec<Attachment>,
    /// Constant external force per DoF.
    pub f_ext: Vec<f64>,
    pub state_force: Option<Arc<dyn StateForce>>,
}

impl Model {
    pub fn new(mesh: TetMesh, material: MaterialField) -> Self {
        let n = mesh.n_dofs();
        Self {
            mesh,
            material,
            dirichlet: Vec::new(),
            obstacles: Vec::new(),
            attachments: Vec::new(),
            f_ext: vec![0.0; n],
            state_force: None,
        }
    }

    /// Adds `m_v g` to every vertex.
    pub fn add_gravity(&mut self, g: Vector3<f64>) {
        for v in 0..self.mesh.n_vertices() {
            let m = self.mesh.vertex_mass(v);
            for i in 0..3 {
                self.f_ext[3 * v + i] += m * g[i];
            }
        }
    }

    pub fn fixed_vertices(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.dirichlet.iter().map(|d| d.0).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    fn validate(&self) -> Result<()> {
        let n = self.mesh.n_dofs();
        if self.f_ext.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.f_ext.len(),
            });
        }
        if self.material.n_elements() != self.mesh.n_elements() {
            return Err(Error::DimensionMismatch {
                expected: self.mesh.n_elements(),
                got: self.material.n_elements(),
            });
        }
        for &(v, _) in &self.dirichlet {
            if v >= self.mesh.n_vertices() {
                return Err(Error::InvalidConfig(format!("dirichlet vertex {v} out of range")));
            }
        }
        for a in &self.attachments {
            if a.vertex >= self.mesh.n_vertices() {
                return Err(Error::InvalidConfig(format!("attachment vertex {} out of range", a.vertex)));
            }
        }
        Ok(())
    }

    /// Overwrites the Dirichlet DoFs of `q` with their prescribed values.
    pub fn enforce_dirichlet(&self, q: &mut [f64]) {
        for (v, x) in &self.dirichlet {
            q[3 * v..3 * v + 3].copy_from_slice(x.as_slice());
        }
    }

    pub fn enforce_dirichlet_velocity(&self, v: &mut [f64]) {
        for (vi, _) in &self.dirichlet {
            v[3 * vi..3 * vi + 3].fill(0.0);
        }
    }
}

/// Local-step parameters of constraint `c` on element `e`.
pub fn constraint_params(material: &MaterialField, c: ConstraintKind, e: usize) -> ProxParams {
    match c {
        ConstraintKind::LogBarrier => ProxParams {
            mu: material.mu[e],
            lam: material.lam[e],
            k: material.prox_penalty(c),
        },
        _ => ProxParams {
            mu: material.mean_mu,
            lam: material.mean_lam,
            k: material.prox_penalty(c),
        },
    }
}

/// Per-element local step at `q`; `result[e][c]` follows `material.constraints`.
pub fn local_step(mesh: &TetMesh, material: &MaterialField, q: &[f64]) -> Result<Vec<Vec<ProxResult>>> {
    map_range(mesh.n_elements(), |e| {
        let f = mesh.deformation_gradient(e, q);
        material
            .constraints
            .iter()
            .map(|&c| project(c, &f, &constraint_params(material, c, e)))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

/// `q̃ = q + h v + h² M⁻¹ (f_ext + f_state)`.
pub fn free_fall_target(state: &SimState, f_ext: &[f64], f_state: Option<&[f64]>, mesh: &TetMesh, h: f64) -> Vec<f64> {
    (0..state.q.len())
        .map(|i| {
            let f = f_ext[i] + f_state.map_or(0.0, |fs| fs[i]);
            state.q[i] + h * state.v[i] + h * h * f / mesh.lumped_mass[i]
        })
        .collect()
}

/// The part of `b` that does not depend on the local step:
/// `M/h² q̃ + (α M/h) q_t + (B_β/h) q_t`.
pub fn inertial_rhs(mesh: &TetMesh, material: &MaterialField, damping: &SparseMatrix, q_tilde: &[f64], q_t: &[f64], h: f64) -> Vec<f64> {
    let bq = mul_xyz(damping, q_t);
    (0..q_tilde.len())
        .map(|i| {
            let m = mesh.lumped_mass[i];
            m / (h * h) * q_tilde[i] + material.alpha * m / h * q_t[i] + bq[i] / h
        })
        .collect()
}

/// Adds `Σ_e Σ_c w_c V_e G_eᵀ p*_c` to `b` in element order.
pub fn add_projection_rhs(mesh: &TetMesh, material: &MaterialField, prox: &[Vec<ProxResult>], b: &mut [f64]) {
    for (e, per_element) in prox.iter().enumerate() {
        let tet = &mesh.elements[e];
        for (c, res) in per_element.iter().enumerate() {
            let coef = material.constraint_weights[c][e] * mesh.rest_volume[e];
            let cols = mesh.gradient_transpose(e, &res.p_star);
            for a in 0..4 {
                for i in 0..3 {
                    b[3 * tet[a] + i] += coef * cols[a][i];
                }
            }
        }
    }
}

/// Full right-hand side with `b_inertial` from [`inertial_rhs`].
pub fn pd_rhs(mesh: &TetMesh, material: &MaterialField, b_inertial: &[f64], prox: &[Vec<ProxResult>]) -> Vec<f64> {
    let mut b = b_inertial.to_vec();
    add_projection_rhs(mesh, material, prox, &mut b);
    b
}

/// Bounded-window Type-II Anderson history.
#[derive(Debug, Clone)]
pub struct AaHistory {
    pub window: usize,
    pub guard_threshold: f64,
    dq: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
    last: Option<(Vec<f64>, Vec<f64>)>,
    pub guard_trips: usize,
    pub max_len_seen: usize,
}

impl AaHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            guard_threshold: 10.0,
            dq: VecDeque::new(),
            dg: VecDeque::new(),
            last: None,
            guard_trips: 0,
            max_len_seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.dg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dg.is_empty()
    }

    pub fn clear(&mut self) {
        self.dq.clear();
        self.dg.clear();
    }
}

/// Mixes the fixed-point step `g = G(q) − q` with the stored history.
pub fn anderson_mix(hist: &mut AaHistory, q_prev: &[f64], g: &[f64]) -> Vec<f64> {
    let plain: Vec<f64> = q_prev.iter().zip(g).map(|(q, g)| q + g).collect();
    if hist.window == 0 {
        return plain;
    }
    if let Some((ql, gl)) = hist.last.take() {
        hist.dq.push_back(q_prev.iter().zip(&ql).map(|(a, b)| a - b).collect());
        hist.dg.push_back(g.iter().zip(&gl).map(|(a, b)| a - b).collect());
        while hist.dg.len() > hist.window {
            hist.dq.pop_front();
            hist.dg.pop_front();
        }
    }
    hist.last = Some((q_prev.to_vec(), g.to_vec()));
    hist.max_len_seen = hist.max_len_seen.max(hist.dg.len());
    let m = hist.dg.len();
    if m == 0 {
        return plain;
    }
    let gram = DMatrix::from_fn(m, m, |i, j| dot(&hist.dg[i], &hist.dg[j]));
    let frob2: f64 = (0..m).map(|i| gram[(i, i)]).sum();
    let rho = (1e-6 * frob2 / m as f64).max(1e-12);
    let mut lhs = gram;
    for i in 0..m {
        lhs[(i, i)] += rho;
    }
    let rhs = DVector::from_fn(m, |i, _| dot(&hist.dg[i], g));
    let gamma = match lhs.cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            hist.clear();
            hist.guard_trips += 1;
            return plain;
        }
    };
    if !(gamma.norm() <= hist.guard_threshold) {
        hist.clear();
        hist.guard_trips += 1;
        return plain;
    }
    let mut out = plain;
    for j in 0..m {
        let gj = gamma[j];
        for ((o, dq), dg) in out.iter_mut().zip(&hist.dq[j]).zip(&hist.dg[j]) {
            *o -= gj * (dq + dg);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    crate::sparse::dot(a, b)
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Both the iterate step and the right-hand-side change must be small; never fires at `k = 0`.
pub fn dual_gate(q_k: &[f64], q_k1: &[f64], b_k: &[f64], b_k1: &[f64], eps_rel: f64, eps_abs: f64, k: usize) -> bool {
    k >= 1 && diff_norm(q_k1, q_k) <= eps_rel * norm(q_k) + eps_abs && diff_norm(b_k1, b_k) <= eps_rel * norm(b_k) + eps_abs
}

/// Contact data frozen for one step.
#[derive(Debug, Clone)]
pub struct ContactCache {
    pub set: ContactSet,
    pub delassus: Delassus,
    pub state: ContactState,
    pub diagnostics: ContactDiagnostics,
}

impl ContactCache {
    /// Normal contacts carrying a positive multiplier.
    pub fn active_set(&self) -> Vec<usize> {
        (0..self.set.n_normal()).filter(|&c| self.state.lambda[c] > 0.0).collect()
    }
}

/// What the backward pass needs from a converged step.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub q_t: Vec<f64>,
    pub v_t: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub q_prev_iterate: Vec<f64>,
    pub q_star: Vec<f64>,
    /// Local step evaluated at `q_star`, `prox[e][c]`.
    pub prox: Vec<Vec<ProxResult>>,
    pub contact: Option<ContactCache>,
    pub iterations: usize,
    pub converged: bool,
    pub signature: u64,
}

impl ForwardCache {
    pub fn active_set(&self) -> Vec<usize> {
        self.contact.as_ref().map_or_else(Vec::new, |c| c.active_set())
    }

    pub fn lambda_star(&self) -> &[f64] {
        self.contact.as_ref().map_or(&[], |c| &c.state.lambda)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: SimState,
    pub cache: ForwardCache,
    pub iterations: usize,
    pub converged: bool,
    pub step_residual: f64,
    pub rhs_residual: f64,
    pub contact_count: usize,
    pub aa_guard_trips: usize,
    pub aa_max_history: usize,
}

/// Owns the model and its factored operator; refactors only when the
/// operator signature changes.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub model: Model,
    pub config: SolverConfig,
    system: PdSystem,
    damping: SparseMatrix,
    candidates: Vec<usize>,
    factorizations: usize,
}

impl Simulator {
    pub fn new(model: Model, config: SolverConfig) -> Result<Self> {
        model.validate()?;
        if !(config.eps_rel >= 0.0 && config.eps_abs >= 0.0 && config.max_iters >= 1) {
            return Err(Error::InvalidConfig("tolerances must be non-negative and max_iters ≥ 1".into()));
        }
        let fixed = model.fixed_vertices();
        let system = PdSystem::new(&model.mesh, &model.material, config.h, &fixed)?;
        let damping = assemble_damping(&model.mesh, &model.material);
        let candidates = model
            .mesh
            .boundary_vertices()
            .into_iter()
            .filter(|&v| !system.is_fixed(v))
            .collect();
        Ok(Self {
            model,
            config,
            system,
            damping,
            candidates,
            factorizations: 1,
        })
    }

    pub fn system(&self) -> &PdSystem {
        &self.system
    }

    pub fn damping(&self) -> &SparseMatrix {
        &self.damping
    }

    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    pub fn is_stale(&self) -> bool {
        self.system
            .is_stale(&self.model.mesh, &self.model.material, self.config.h, &self.model.fixed_vertices())
    }

    /// Swaps the material field; returns whether a refactorization happened.
    pub fn set_material(&mut self, material: MaterialField) -> Result<bool> {
        self.model.material = material;
        self.damping = assemble_damping(&self.model.mesh, &self.model.material);
        self.refresh()
    }

    /// Refactors if the stored factor no longer matches the model.
    pub fn refresh(&mut self) -> Result<bool> {
        if !self.is_stale() {
            return Ok(false);
        }
        let fixed = self.model.fixed_vertices();
        self.system = PdSystem::new(&self.model.mesh, &self.model.material, self.config.h, &fixed)?;
        self.factorizations += 1;
        Ok(true)
    }

    pub fn aa_window(&self) -> usize {
        self.config.aa_window.unwrap_or_else(|| default_aa_window(&self.model.material))
    }

    pub fn initial_state(&self) -> SimState {
        let mut s = SimState::at_rest(&self.model.mesh);
        self.model.enforce_dirichlet(&mut s.q);
        s
    }

    fn state_force(&self, state: &SimState) -> Option<Vec<f64>> {
        self.model.state_force.as_ref().map(|f| f.force(&state.q, &state.v))
    }

    fn build_contacts(&self, q_t: &[f64], q_tilde: &[f64]) -> Result<Option<(ContactSet, Delassus)>> {
        let mut set = detect_step_contacts(
            &self.model.mesh,
            q_t,
            q_tilde,
            &self.candidates,
            &self.model.obstacles,
            self.config.contact_margin,
        );
        set.bilateral = self.model.attachments.clone();
        if set.is_empty() {
            return Ok(None);
        }
        let delassus = self.system.delassus(&set.rows())?;
        set.assign_regularization(&delassus.w, self.config.h);
        Ok(Some((set, delassus)))
    }

    /// Advances one step. Hitting the iteration cap is reported through
    /// `converged = false` rather than an error.
    pub fn step(&self, state: &SimState) -> Result<StepOutput> {
        if self.is_stale() {
            return Err(Error::InvalidConfig("factor is stale; call refresh() first".into()));
        }
        let n = self.model.mesh.n_dofs();
        if state.q.len() != n || state.v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: state.q.len(),
            });
        }
        let (mesh, material, h) = (&self.model.mesh, &self.model.material, self.config.h);
        let f_state = self.state_force(state);
        let q_tilde = free_fall_target(state, &self.model.f_ext, f_state.as_deref(), mesh, h);
        let mut q_t = state.q.clone();
        self.model.enforce_dirichlet(&mut q_t);
        let b_inertial = inertial_rhs(mesh, material, &self.damping, &q_tilde, &q_t, h);
        let contacts = self.build_contacts(&q_t, &q_tilde)?;
        let mut cstate = contacts.as_ref().map(|(set, _)| ContactState::zeros(set.n_rows()));

        let mut hist = AaHistory::new(self.aa_window());
        let mut q = q_t.clone();
        let mut b_prev: Vec<f64> = Vec::new();
        let mut q_prev_iterate = q.clone();
        let mut q_hat = q.clone();
        let mut converged = false;
        let mut iterations = 0;
        let (mut step_res, mut rhs_res) = (f64::INFINITY, f64::INFINITY);

        for k in 0..self.config.max_iters {
            iterations = k + 1;
            let prox = local_step(mesh, material, &q)?;
            let b = pd_rhs(mesh, material, &b_inertial, &prox);
            let q_free = self.system.solve(&b, &q_t);
            let mut b_total = b;
            q_hat = match (&contacts, cstate.as_mut()) {
                (Some((set, delassus)), Some(cs)) => {
                    let delta_free = set.gaps(&q_free);
                    let (next, _) = solve_contacts(set, &delassus.w, &delta_free, cs.clone(), self.config.contact_max_iters)?;
                    *cs = next;
                    set.add_jacobian_transpose(&cs.force_coefficients(), &mut b_total);
                    position_update(&q_free, delassus, cs)
                }
                _ => q_free,
            };
            self.model.enforce_dirichlet(&mut q_hat);
            step_res = diff_norm(&q_hat, &q);
            if k >= 1 {
                rhs_res = diff_norm(&b_total, &b_prev);
            }
            if dual_gate(&q, &q_hat, &b_prev, &b_total, self.config.eps_rel, self.config.eps_abs, k) {
                q_prev_iterate = q.clone();
                converged = true;
                break;
            }
            let g: Vec<f64> = q_hat.iter().zip(&q).map(|(a, b)| a - b).collect();
            q_prev_iterate = q.clone();
            q = anderson_mix(&mut hist, &q, &g);
            self.model.enforce_dirichlet(&mut q);
            b_prev = b_total;
        }
        if !converged {
            q_hat = q.clone();
        }

        let q_star = q_hat;
        let prox = local_step(mesh, material, &q_star)?;
        let contact = match (contacts, cstate) {
            (Some((set, delassus)), Some(cs)) => {
                let gaps = set.gaps(&q_star);
                let diagnostics = diagnostics(&set, &gaps, &cs.lambda);
                Some(ContactCache {
                    set,
                    delassus,
                    state: cs,
                    diagnostics,
                })
            }
            _ => None,
        };
        let mut v: Vec<f64> = q_star.iter().zip(&q_t).map(|(a, b)| (a - b) / h).collect();
        self.model.enforce_dirichlet_velocity(&mut v);
        let contact_count = contact.as_ref().map_or(0, |c| c.set.n_normal());
        Ok(StepOutput {
            state: SimState {
                q: q_star.clone(),
                v,
                time: state.time + h,
            },
            cache: ForwardCache {
                q_t,
                v_t: state.v.clone(),
                q_tilde,
                q_prev_iterate,
                q_star,
                prox,
                contact,
                iterations,
                converged,
                signature: self.system.signature(),
            },
            iterations,
            converged,
            step_residual: step_res,
            rhs_residual: rhs_res,
            contact_count,
            aa_guard_trips: hist.guard_trips,
            aa_max_history: hist.max_len_seen,
        })
    }

    /// Runs `frames` steps from `state`, returning every step output.
    pub fn rollout(&self, state: &SimState, frames: usize) -> Result<Vec<StepOutput>> {
        let mut out: Vec<StepOutput> = Vec::with_capacity(frames);
        let mut s = state.clone();
        for _ in 0..frames {
            let o = self.step(&s)?;
            s = o.state.clone();
            out.push(o);
        }
        Ok(out)
    }
}

/// Row kinds of the set, re-exported for callers that assemble their own systems.
pub fn row_kinds(set: &ContactSet) -> Vec<RowKind> {
    set.row_kinds()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{EnergyKind, MaterialParams};
    use crate::mesh::{build_tet_mesh, ingest_hex_grid};

    fn unit_tet_mesh(density: f64) -> TetMesh {
        build_tet_mesh(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()],
            vec![[0, 1, 2, 3]],
            density,
        )
        .unwrap()
    }

    #[test]
    fn free_fall_target_examples() {
        let mesh = unit_tet_mesh(24.0); // quarter mass 1 per vertex
        let mut s = SimState::at_rest(&mesh);
        assert_eq!(free_fall_target(&s, &[0.0; 12], None, &mesh, 0.1), s.q);
        s.v = vec![0.5; 12];
        let g: Vec<f64> = (0..12).map(|i| if i % 3 == 1 { -10.0 } else { 0.0 }).collect();
        let qt = free_fall_target(&s, &g, None, &mesh, 0.1);
        let zero = vec![0.0; 12];
        assert_eq!(qt, free_fall_target(&s, &g, Some(&zero), &mesh, 0.1));
        for i in 0..12 {
            let expect = s.q[i] + 0.05 + if i % 3 == 1 { -0.1 } else { 0.0 };
            assert!((qt[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let mesh = ingest_hex_grid([2, 1, 1], 0.1, 1000.0).unwrap();
        for kind in [EnergyKind::NeoHookean, EnergyKind::Corotated] {
            let params = MaterialParams {
                energy_kind: kind,
                ..Default::default()
            };
            let mat = MaterialField::homogeneous(&mesh, 1e5, &params).unwrap();
            let sys = PdSystem::new(&mesh, &mat, 0.01, &[]).unwrap();
            let q = mesh.rest_q();
            let damping = assemble_damping(&mesh, &mat);
            let b0 = inertial_rhs(&mesh, &mat, &damping, &q, &q, 0.01);
            let b = pd_rhs(&mesh, &mat, &b0, &local_step(&mesh, &mat, &q).unwrap());
            let sol = sys.solve(&b, &q);
            assert!(diff_norm(&sol, &q) <= 1e-9 * norm(&q));
        }
    }

    #[test]
    fn rhs_without_elements_is_inertia() {
        let mesh = unit_tet_mesh(6.0);
        let mat = MaterialField::homogeneous(&mesh, 1e3, &MaterialParams::default()).unwrap();
        let damping = SparseMatrix::zeros(4, 4);
        let qt: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let b = pd_rhs(&mesh, &mat, &inertial_rhs(&mesh, &mat, &damping, &qt, &qt, 0.1), &[]);
        for i in 0..12 {
            assert!((b[i] - mesh.lumped_mass[i] / 0.01 * qt[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aa_empty_history_is_plain_step() {
        let mut h = AaHistory::new(3);
        assert_eq!(anderson_mix(&mut h, &[1.0, 2.0], &[0.5, -1.0]), vec![1.5, 1.0]);
    }

    #[test]
    fn aa_secant_on_scalar_linear_map() {
        // G(x) = 0.5 x + 1, fixed point 2
        let step = |x: f64| 0.5 * x + 1.0 - x;
        let mut h = AaHistory::new(1);
        let x0 = 0.0;
        let x1 = anderson_mix(&mut h, &[x0], &[step(x0)])[0];
        let x2 = anderson_mix(&mut h, &[x1], &[step(x1)])[0];
        // exact up to the Tikhonov shift ρ = 1e-6‖ΔG‖²
        assert!((x2 - 2.0).abs() < 1e-5);
        assert!((x1 - 2.0).abs() > 0.5);
    }

    #[test]
    fn aa_guard_clears_history() {
        let mut h = AaHistory::new(1);
        anderson_mix(&mut h, &[0.0], &[1.0]);
        // Δg = 0.05 with g = 1 gives γ ≈ 20
        let out = anderson_mix(&mut h, &[1.0], &[1.05]);
        assert_eq!(out, vec![2.05]);
        assert_eq!(h.len(), 0);
        assert_eq!(h.guard_trips, 1);
    }

    #[test]
    fn gate_examples() {
        let q = [1.0, 2.0];
        let b = [3.0, 4.0];
        assert!(!dual_gate(&q, &q, &b, &b, 1e-4, 1e-9, 0));
        assert!(dual_gate(&q, &q, &b, &b, 1e-4, 1e-9, 1));
        assert!(!dual_gate(&q, &[1.0, 2.0 + 1e-12], &b, &[3.0, 5.0], 1e-4, 1e-9, 3));
    }

    fn falling_block(kind: EnergyKind) -> Simulator {
        let mesh = ingest_hex_grid([2, 2, 1], 0.05, 1000.0).unwrap();
        let params = MaterialParams {
            energy_kind: kind,
            ..Default::default()
        };
        let mat = MaterialField::homogeneous(&mesh, 1e5, &params).unwrap();
        let mut model = Model::new(mesh, mat);
        model.add_gravity(Vector3::new(0.0, -9.81, 0.0));
        Simulator::new(model, SolverConfig::default()).unwrap()
    }

    #[test]
    fn rigid_free_fall_matches_implicit_euler() {
        for kind in [EnergyKind::NeoHookean, EnergyKind::Corotated] {
            let sim = falling_block(kind);
            let h = sim.config.h;
            let mut s = sim.initial_state();
            s.v.iter_mut().step_by(3).for_each(|v| *v = 0.3);
            let (mut y, mut vy, x0) = (s.q.clone(), 0.0, s.q.clone());
            for frame in 1..=10 {
                let out = sim.step(&s).unwrap();
                assert!(out.converged);
                vy -= h * 9.81;
                for i in 0..y.len() / 3 {
                    y[3 * i + 1] += h * vy;
                }
                for i in 0..y.len() / 3 {
                    assert!((out.state.q[3 * i + 1] - y[3 * i + 1]).abs() < 1e-10);
                    assert!((out.state.q[3 * i] - (x0[3 * i] + 0.3 * h * frame as f64)).abs() < 1e-10);
                }
                s = out.state;
            }
            assert_eq!(sim.factorizations(), 1);
        }
    }

    #[test]
    fn velocity_consistency_and_dirichlet() {
        let mesh = ingest_hex_grid([4, 1, 1], 0.05, 1000.0).unwrap();
        let mat = MaterialField::homogeneous(&mesh, 5e4, &MaterialParams::default()).unwrap();
        let mut model = Model::new(mesh, mat);
        model.add_gravity(Vector3::new(0.0, -9.81, 0.0));
        let pinned: Vec<(usize, Vector3<f64>)> = (0..model.mesh.n_vertices())
            .filter(|&v| model.mesh.rest_positions[v].x == 0.0)
            .map(|v| (v, model.mesh.rest_positions[v]))
            .collect();
        model.dirichlet = pinned.clone();
        let sim = Simulator::new(model, SolverConfig::default()).unwrap();
        let mut s = sim.initial_state();
        for _ in 0..5 {
            let out = sim.step(&s).unwrap();
            assert!(out.converged);
            assert!(out.iterations >= 2);
            for i in 0..s.q.len() {
                let dq = out.state.q[i] - s.q[i];
                assert!((out.state.v[i] * sim.config.h - dq).abs() <= 4.0 * f64::EPSILON * dq.abs());
            }
            for (v, x) in &pinned {
                assert_eq!(&out.state.q[3 * v..3 * v + 3], x.as_slice());
            }
            s = out.state;
        }
    }

    #[test]
    fn steps_are_bit_reproducible() {
        let sim = falling_block(EnergyKind::NeoHookean);
        let mut s = sim.initial_state();
        s.v[1] = 2.0;
        let a = sim.rollout(&s, 3).unwrap();
        let b = sim.rollout(&s, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.state, y.state);
        }
    }
}
