//! Vertex-versus-obstacle contact with Fischer–Burmeister complementarity,
//! Coulomb friction and bilateral attachments.
//!
//! Every constraint row acts on a single vertex along a unit direction `d`,
//! with gap `δ = dᵀx_v − g`. Rows are stacked as normals, then bilateral
//! rows, then one tangent pair per frictional contact.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::factor::Delassus;
use crate::mesh::{vertex, TetMesh};

pub const DEFAULT_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum ObstacleKind {
    HalfSpace { normal: Vector3<f64>, offset: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub friction: f64,
}

impl Obstacle {
    pub fn half_space(normal: Vector3<f64>, offset: f64, friction: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) {
            return Err(Error::InvalidConfig("half-space normal must be nonzero".into()));
        }
        Self::check_friction(friction)?;
        Ok(Self {
            kind: ObstacleKind::HalfSpace {
                normal: normal / len,
                offset: offset / len,
            },
            friction,
        })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64, friction: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig(format!("sphere radius must be positive, got {radius}")));
        }
        Self::check_friction(friction)?;
        Ok(Self {
            kind: ObstacleKind::Sphere { center, radius },
            friction,
        })
    }

    fn check_friction(mu: f64) -> Result<()> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("friction coefficient must be non-negative, got {mu}")));
        }
        Ok(())
    }

    /// Outward normal and gap offset so that the signed distance is `nᵀx − g`.
    pub fn frame_at(&self, x: &Vector3<f64>) -> (Vector3<f64>, f64) {
        match &self.kind {
            ObstacleKind::HalfSpace { normal, offset } => (*normal, *offset),
            ObstacleKind::Sphere { center, radius } => {
                let d = x - center;
                let len = d.norm();
                let n = if len > 0.0 { d / len } else { Vector3::y() };
                (n, n.dot(center) + radius)
            }
        }
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        let (n, g) = self.frame_at(x);
        n.dot(x) - g
    }
}

/// Orthonormal tangents completing `n`, seeded by the axis where `n` is smallest.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut k = 0;
    for i in 1..3 {
        if n[i].abs() < n[k].abs() {
            k = i;
        }
    }
    let e = Vector3::ith(k, 1.0);
    let t1 = (e - n.dot(&e) * n).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contact {
    pub vertex: usize,
    pub normal: Vector3<f64>,
    pub gap_offset: f64,
    pub t1: Vector3<f64>,
    pub t2: Vector3<f64>,
    pub obstacle: usize,
    pub friction: f64,
    /// Vertex position at the start of the step; tangential slip is measured from here.
    pub anchor: Vector3<f64>,
}

/// Pins one vertex to a target point with three bilateral rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub vertex: usize,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Normal(usize),
    Bilateral(usize, usize),
    Friction(usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    pub bilateral: Vec<Attachment>,
    /// FB scaling `h² W_rr` per row.
    pub r: Vec<f64>,
}

impl ContactSet {
    pub fn is_empty(&self) -> bool {
        self.n_rows() == 0
    }

    pub fn n_normal(&self) -> usize {
        self.contacts.len()
    }

    pub fn n_bilateral(&self) -> usize {
        3 * self.bilateral.len()
    }

    /// Contacts that carry a tangent pair, in row order.
    pub fn friction_contacts(&self) -> Vec<usize> {
        (0..self.contacts.len()).filter(|&c| self.contacts[c].friction > 0.0).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.n_normal() + self.n_bilateral() + 2 * self.friction_contacts().len()
    }

    pub fn row_kinds(&self) -> Vec<RowKind> {
        let mut kinds: Vec<RowKind> = (0..self.contacts.len()).map(RowKind::Normal).collect();
        for a in 0..self.bilateral.len() {
            for axis in 0..3 {
                kinds.push(RowKind::Bilateral(a, axis));
            }
        }
        for c in self.friction_contacts() {
            kinds.push(RowKind::Friction(c, 0));
            kinds.push(RowKind::Friction(c, 1));
        }
        kinds
    }

    /// `(vertex, direction)` of every row.
    pub fn rows(&self) -> Vec<(usize, Vector3<f64>)> {
        self.row_kinds()
            .into_iter()
            .map(|k| match k {
                RowKind::Normal(c) => (self.contacts[c].vertex, self.contacts[c].normal),
                RowKind::Bilateral(a, axis) => (self.bilateral[a].vertex, Vector3::ith(axis, 1.0)),
                RowKind::Friction(c, 0) => (self.contacts[c].vertex, self.contacts[c].t1),
                RowKind::Friction(c, _) => (self.contacts[c].vertex, self.contacts[c].t2),
            })
            .collect()
    }

    /// Constant offsets `g` so that row gaps read `δ = J q − g`.
    pub fn offsets(&self) -> Vec<f64> {
        self.row_kinds()
            .into_iter()
            .map(|k| match k {
                RowKind::Normal(c) => self.contacts[c].gap_offset,
                RowKind::Bilateral(a, axis) => self.bilateral[a].target[axis],
                RowKind::Friction(c, 0) => self.contacts[c].t1.dot(&self.contacts[c].anchor),
                RowKind::Friction(c, _) => self.contacts[c].t2.dot(&self.contacts[c].anchor),
            })
            .collect()
    }

    pub fn apply_jacobian(&self, q: &[f64]) -> Vec<f64> {
        self.rows().iter().map(|(v, d)| d.dot(&vertex(q, *v))).collect()
    }

    /// `out += Jᵀ y`.
    pub fn add_jacobian_transpose(&self, y: &[f64], out: &mut [f64]) {
        for ((v, d), &yr) in self.rows().iter().zip(y) {
            for i in 0..3 {
                out[3 * v + i] += d[i] * yr;
            }
        }
    }

    pub fn gaps(&self, q: &[f64]) -> Vec<f64> {
        self.apply_jacobian(q).iter().zip(self.offsets()).map(|(jq, g)| jq - g).collect()
    }

    /// Sets `r_rr = h² W_rr` from the Delassus diagonal.
    pub fn assign_regularization(&mut self, w: &DMatrix<f64>, h: f64) {
        self.r = (0..w.nrows()).map(|i| h * h * w[(i, i)]).collect();
    }
}

/// Vertices of `candidates` within `margin` of an obstacle at positions `q`.
/// Each vertex keeps only its first (lowest-index) obstacle hit.
pub fn detect_contacts(q: &[f64], candidates: &[usize], obstacles: &[Obstacle], margin: f64) -> Vec<Contact> {
    let mut out = Vec::new();
    for &v in candidates {
        let x = vertex(q, v);
        for (o, obs) in obstacles.iter().enumerate() {
            if obs.signed_distance(&x) <= margin {
                let (n, g) = obs.frame_at(&x);
                let (t1, t2) = tangent_basis(&n);
                out.push(Contact {
                    vertex: v,
                    normal: n,
                    gap_offset: g,
                    t1,
                    t2,
                    obstacle: o,
                    friction: obs.friction,
                    anchor: x,
                });
                break;
            }
        }
    }
    out
}

/// Detection at the start-of-step positions merged with detection at the
/// predicted positions; the first detection fixes each vertex's frame.
pub fn detect_step_contacts(
    mesh: &TetMesh,
    q_start: &[f64],
    q_predicted: &[f64],
    candidates: &[usize],
    obstacles: &[Obstacle],
    margin: f64,
) -> ContactSet {
    let mut contacts = detect_contacts(q_start, candidates, obstacles, margin);
    let mut seen = vec![false; mesh.n_vertices()];
    for c in &contacts {
        seen[c.vertex] = true;
    }
    for mut c in detect_contacts(q_predicted, candidates, obstacles, margin) {
        if !seen[c.vertex] {
            c.anchor = vertex(q_start, c.vertex);
            seen[c.vertex] = true;
            contacts.push(c);
        }
    }
    contacts.sort_by_key(|c| c.vertex);
    ContactSet {
        contacts,
        bilateral: Vec::new(),
        r: Vec::new(),
    }
}

pub fn fb_residual(delta: f64, r: f64, lambda: f64) -> f64 {
    delta + r * lambda - (delta * delta + r * r * lambda * lambda).sqrt()
}

/// Per-row FB weights `(ω, E)`; the origin takes the active-branch limit `(1, r)`.
pub fn ncp_weights(delta: f64, r: f64, lambda: f64) -> (f64, f64) {
    let root = (delta * delta + r * r * lambda * lambda).sqrt();
    if root == 0.0 {
        return (1.0, r);
    }
    (1.0 - delta / root, (1.0 - r * lambda / root) * r)
}

/// Multipliers with the Fischer–Burmeister weights of the normal rows at the
/// last linearization (1 on every other row).
#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ContactState {
    pub fn zeros(n: usize) -> Self {
        Self {
            lambda: vec![0.0; n],
            omega: vec![1.0; n],
        }
    }

    /// Row coefficients of the contact force `Jᵀλ`.
    pub fn force_coefficients(&self) -> Vec<f64> {
        self.lambda.clone()
    }
}

/// Projection onto the admissible multiplier set: non-negative normals,
/// free bilateral rows, friction pairs inside the Coulomb disc.
pub fn project_multipliers(set: &ContactSet, lambda: &mut [f64]) {
    let nn = set.n_normal();
    for l in lambda[..nn].iter_mut() {
        *l = l.max(0.0);
    }
    let base = nn + set.n_bilateral();
    for (k, c) in set.friction_contacts().into_iter().enumerate() {
        let bound = set.contacts[c].friction * lambda[c];
        let (i, j) = (base + 2 * k, base + 2 * k + 1);
        let norm = (lambda[i] * lambda[i] + lambda[j] * lambda[j]).sqrt();
        if norm > bound {
            let s = if norm > 0.0 { bound / norm } else { 0.0 };
            lambda[i] *= s;
            lambda[j] *= s;
        }
    }
}

/// Row gaps `δ = δ_free + W λ` for a given state.
pub fn predicted_gaps(w: &DMatrix<f64>, delta_free: &[f64], state: &ContactState) -> Vec<f64> {
    let wf = w * DVector::from_column_slice(&state.lambda);
    delta_free.iter().zip(wf.iter()).map(|(a, b)| a + b).collect()
}

/// Branch of the Coulomb law a friction pair is on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrictionMode {
    /// Zero normal force, hence zero friction.
    Off,
    /// Tangential gap held at zero.
    Stick,
    /// On the cone, `λ_f = μ λ_n d`, with `d` opposite to the slip.
    Slide([f64; 2]),
}

fn pair_rows(set: &ContactSet, pair: usize) -> (usize, usize) {
    let base = set.n_normal() + set.n_bilateral();
    (base + 2 * pair, base + 2 * pair + 1)
}

fn pair_regularization(set: &ContactSet, pair: usize) -> f64 {
    let (i, j) = pair_rows(set, pair);
    0.5 * (set.r[i] + set.r[j])
}

/// Natural-map classification `y = λ_f − δ_f / r`: stick when `y` lies in the
/// disc of radius `μ λ_n`, slide along `y/‖y‖` otherwise.
pub fn friction_mode(set: &ContactSet, lambda: &[f64], gaps: &[f64], c: usize, pair: usize) -> FrictionMode {
    let (i, j) = pair_rows(set, pair);
    let bound = set.contacts[c].friction * lambda[c].max(0.0);
    if bound <= 0.0 {
        return FrictionMode::Off;
    }
    let r = pair_regularization(set, pair);
    let y = [lambda[i] - gaps[i] / r, lambda[j] - gaps[j] / r];
    let ny = (y[0] * y[0] + y[1] * y[1]).sqrt();
    if ny <= bound {
        FrictionMode::Stick
    } else {
        FrictionMode::Slide([y[0] / ny, y[1] / ny])
    }
}

/// Complementarity residual in gap units: FB on normals, gaps on bilateral
/// rows, `r (λ_f − Π(y))` on friction pairs. Zero exactly at a Signorini–Coulomb
/// solution with maximal dissipation.
pub fn ncp_residual(set: &ContactSet, gaps: &[f64], lambda: &[f64]) -> Vec<f64> {
    let nn = set.n_normal();
    let mut f = gaps.to_vec();
    for c in 0..nn {
        f[c] = fb_residual(gaps[c], set.r[c], lambda[c]);
    }
    for (pair, c) in set.friction_contacts().into_iter().enumerate() {
        let (i, j) = pair_rows(set, pair);
        let r = pair_regularization(set, pair);
        match friction_mode(set, lambda, gaps, c, pair) {
            FrictionMode::Off => {
                f[i] = r * lambda[i];
                f[j] = r * lambda[j];
            }
            FrictionMode::Stick => {}
            FrictionMode::Slide(d) => {
                let bound = set.contacts[c].friction * lambda[c];
                f[i] = r * (lambda[i] - bound * d[0]);
                f[j] = r * (lambda[j] - bound * d[1]);
            }
        }
    }
    f
}

fn merit(f: &[f64]) -> f64 {
    0.5 * f.iter().map(|x| x * x).sum::<f64>()
}

/// One damped semismooth Newton step on [`ncp_residual`]. The normal rows of
/// the Jacobian are `ω W + E` with the FB weights of [`ncp_weights`].
pub fn contact_iteration(set: &ContactSet, w: &DMatrix<f64>, delta_free: &[f64], state: &ContactState) -> Result<ContactState> {
    let k = set.n_rows();
    if k == 0 {
        return Ok(ContactState::zeros(0));
    }
    let nn = set.n_normal();
    let lambda = &state.lambda;
    let gaps = predicted_gaps(w, delta_free, state);
    let f = ncp_residual(set, &gaps, lambda);
    let mut jac = w.clone();
    let mut omega = vec![1.0; k];
    for c in 0..nn {
        let (om, e) = ncp_weights(gaps[c], set.r[c], lambda[c]);
        omega[c] = om;
        for j in 0..k {
            jac[(c, j)] *= om;
        }
        jac[(c, c)] += e;
    }
    for (pair, c) in set.friction_contacts().into_iter().enumerate() {
        let (i, j) = pair_rows(set, pair);
        let r = pair_regularization(set, pair);
        let rows = [i, j];
        match friction_mode(set, lambda, &gaps, c, pair) {
            FrictionMode::Stick => {}
            FrictionMode::Off => {
                for (a, &row) in rows.iter().enumerate() {
                    for col in 0..k {
                        jac[(row, col)] = 0.0;
                    }
                    jac[(row, rows[a])] = r;
                }
            }
            FrictionMode::Slide(d) => {
                let mu = set.contacts[c].friction;
                let bound = mu * lambda[c];
                let y = [lambda[i] - gaps[i] / r, lambda[j] - gaps[j] / r];
                let ny = (y[0] * y[0] + y[1] * y[1]).sqrt();
                let s = bound / ny;
                // ∂y/∂λ = E_f − W_f / r
                let dy = |a: usize, col: usize| -> f64 { (if col == rows[a] { 1.0 } else { 0.0 }) - w[(rows[a], col)] / r };
                for a in 0..2 {
                    for col in 0..k {
                        let mut v = if col == rows[a] { 1.0 } else { 0.0 };
                        if col == c {
                            v -= mu * d[a];
                        }
                        for b in 0..2 {
                            let proj = (if a == b { 1.0 } else { 0.0 }) - d[a] * d[b];
                            v -= s * proj * dy(b, col);
                        }
                        jac[(rows[a], col)] = r * v;
                    }
                }
            }
        }
    }
    let step = jac
        .lu()
        .solve(&DVector::from_iterator(k, f.iter().map(|x| -x)))
        .ok_or(Error::SingularContactSystem)?;
    if step.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularContactSystem);
    }
    let psi = merit(&f);
    let mut alpha = 1.0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..40 {
        let trial: Vec<f64> = lambda.iter().zip(step.iter()).map(|(l, d)| l + alpha * d).collect();
        let t_state = ContactState {
            lambda: trial.clone(),
            omega: omega.clone(),
        };
        let t_psi = merit(&ncp_residual(set, &predicted_gaps(w, delta_free, &t_state), &trial));
        if t_psi <= (1.0 - 1e-4 * alpha) * psi {
            best = Some((t_psi, trial));
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| t_psi < *b) {
            best = Some((t_psi, trial));
        }
        alpha *= 0.5;
    }
    let (_, lambda) = best.expect("line search evaluates at least once");
    Ok(ContactState { lambda, omega })
}

/// Repeats [`contact_iteration`] until the complementarity residual vanishes
/// to roundoff, then projects onto the admissible set.
pub fn solve_contacts(
    set: &ContactSet,
    w: &DMatrix<f64>,
    delta_free: &[f64],
    init: ContactState,
    max_iters: usize,
) -> Result<(ContactState, usize)> {
    let mut state = init;
    let gap_scale = delta_free.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut iters = max_iters;
    for it in 1..=max_iters {
        let next = contact_iteration(set, w, delta_free, &state)?;
        let change = next
            .lambda
            .iter()
            .zip(&state.lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = next.lambda.iter().map(|x| x.abs()).fold(0.0, f64::max);
        state = next;
        let res = ncp_residual(set, &predicted_gaps(w, delta_free, &state), &state.lambda);
        let res_max = res.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if res_max <= 1e-14 * gap_scale || change <= 1e-15 * scale {
            iters = it;
            break;
        }
    }
    project_multipliers(set, &mut state.lambda);
    Ok((state, iters))
}

/// `q = A⁻¹ b + Σ_r λ_r a_r` from the cached Delassus columns.
pub fn position_update(q_free: &[f64], delassus: &Delassus, state: &ContactState) -> Vec<f64> {
    let mut q = q_free.to_vec();
    for (c, coef) in state.force_coefficients().into_iter().enumerate() {
        delassus.add_column(c, coef, &mut q);
    }
    q
}

/// Worst-case complementarity measures of a converged contact state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContactDiagnostics {
    pub max_fb_normal: f64,
    pub max_penetration: f64,
    pub max_cone_violation: f64,
    pub max_fb_friction: f64,
}

pub fn diagnostics(set: &ContactSet, gaps: &[f64], lambda: &[f64]) -> ContactDiagnostics {
    let mut d = ContactDiagnostics::default();
    let nn = set.n_normal();
    for c in 0..nn {
        d.max_fb_normal = d.max_fb_normal.max(fb_residual(gaps[c], set.r[c], lambda[c]).abs());
        d.max_penetration = d.max_penetration.max(-gaps[c]);
    }
    let base = nn + set.n_bilateral();
    for (k, c) in set.friction_contacts().into_iter().enumerate() {
        let (i, j) = (base + 2 * k, base + 2 * k + 1);
        let lf = (lambda[i] * lambda[i] + lambda[j] * lambda[j]).sqrt();
        let bound = set.contacts[c].friction * lambda[c];
        d.max_cone_violation = d.max_cone_violation.max(lf - bound);
        let slip = (gaps[i] * gaps[i] + gaps[j] * gaps[j]).sqrt();
        d.max_fb_friction = d.max_fb_friction.max(fb_residual(slip, set.r[i], bound - lf).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn floor(mu: f64) -> Obstacle {
        Obstacle::half_space(Vector3::y(), 0.0, mu).unwrap()
    }

    #[test]
    fn detection_examples() {
        let q = vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 2.0, 0.2, 0.0];
        assert!(detect_contacts(&q[..3], &[0], &[floor(0.0)], 1e-4).is_empty());
        let hits = detect_contacts(&q, &[0, 1, 2], &[floor(0.0)], 1e-4);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].vertex, 1);
        assert_eq!(hits[0].normal.dot(&vertex(&q, 1)) - hits[0].gap_offset, 0.0);
        let sphere = Obstacle::sphere(Vector3::new(0.0, 0.0, 0.0), 1.0, 0.3).unwrap();
        let inside = vec![0.0, 0.0, 0.5];
        let hit = &detect_contacts(&inside, &[0], &[sphere], 0.0)[0];
        assert!((hit.normal - Vector3::z()).norm() < 1e-15);
        let delta = hit.normal.dot(&vertex(&inside, 0)) - hit.gap_offset;
        assert!((delta + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fb_examples() {
        assert_eq!(fb_residual(0.0, 1.0, 0.0), 0.0);
        assert_eq!(fb_residual(3.0, 1.0, 0.0), 0.0);
        assert!((fb_residual(1.0, 1.0, 1.0) - (2.0 - 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(ncp_weights(0.0, 2.0, 1.0), (1.0, 0.0));
        assert_eq!(ncp_weights(1.0, 1.0, 0.0), (0.0, 1.0));
        assert_eq!(ncp_weights(0.0, 0.7, 0.0), (1.0, 0.7));
    }

    #[test]
    fn tangent_basis_orthonormal() {
        for n in [
            Vector3::y(),
            Vector3::new(0.3, -0.4, 0.866).normalize(),
            Vector3::new(-1.0, 0.0, 0.0),
        ] {
            let (t1, t2) = tangent_basis(&n);
            assert!(t1.dot(&n).abs() < 1e-15 && t2.dot(&n).abs() < 1e-15 && t1.dot(&t2).abs() < 1e-15);
            assert!((t1.norm() - 1.0).abs() < 1e-15 && (t2.norm() - 1.0).abs() < 1e-15);
        }
    }

    /// One free vertex of mass `m` with `A = m/h²` on each axis.
    fn single_vertex(mu: f64, anchor: Vector3<f64>) -> (ContactSet, DMatrix<f64>, f64) {
        let n = Vector3::y();
        let (t1, t2) = tangent_basis(&n);
        let mut set = ContactSet {
            contacts: vec![Contact {
                vertex: 0,
                normal: n,
                gap_offset: 0.0,
                t1,
                t2,
                obstacle: 0,
                friction: mu,
                anchor,
            }],
            bilateral: vec![],
            r: vec![],
        };
        let (m, h) = (0.5, 0.01);
        let a_inv = h * h / m;
        let rows = set.rows();
        let k = rows.len();
        let w = DMatrix::from_fn(k, k, |i, j| rows[i].1.dot(&rows[j].1) * a_inv);
        set.assign_regularization(&w, h);
        (set, w, a_inv)
    }

    #[test]
    fn resting_vertex_supports_gravity() {
        let (m, h, g) = (0.5, 0.01, 9.81);
        let anchor = Vector3::zeros();
        let (set, w, a_inv) = single_vertex(0.0, anchor);
        // b = M/h² (q + h v − h² g) with the vertex on the floor at rest
        let q_free = Vector3::new(0.0, -h * h * g, 0.0);
        let delta_free: Vec<f64> = set.gaps(q_free.as_slice());
        let (state, _) = solve_contacts(&set, &w, &delta_free, ContactState::zeros(set.n_rows()), 100).unwrap();
        assert!((state.lambda[0] - m * g).abs() <= 1e-9 * m * g);
        let q = q_free + set.contacts[0].normal * a_inv * state.force_coefficients()[0];
        assert!(q.y.abs() <= 1e-6);
        let d = diagnostics(&set, &predicted_gaps(&w, &delta_free, &state), &state.lambda);
        assert!(d.max_fb_normal <= 1e-12);
    }

    #[test]
    fn stick_and_slip_single_contact() {
        let (m, h, g, mu) = (0.5, 0.01, 9.81, 0.5);
        let anchor = Vector3::zeros();
        let (set, w, _) = single_vertex(mu, anchor);
        let (t1, _) = (set.contacts[0].t1, set.contacts[0].t2);
        for (pull, sticks) in [(0.3 * mu * m * g, true), (2.0 * mu * m * g, false)] {
            // tangential force `pull` along t1 plus gravity, vertex starting at rest on the floor
            let q_free = Vector3::new(0.0, -h * h * g, 0.0) + t1 * (h * h * pull / m);
            let delta_free = set.gaps(q_free.as_slice());
            let (state, _) = solve_contacts(&set, &w, &delta_free, ContactState::zeros(set.n_rows()), 200).unwrap();
            let gaps = predicted_gaps(&w, &delta_free, &state);
            let slip = (gaps[1] * gaps[1] + gaps[2] * gaps[2]).sqrt();
            let lf = (state.lambda[1].powi(2) + state.lambda[2].powi(2)).sqrt();
            let ln = state.lambda[0];
            assert!((ln - m * g).abs() <= 1e-9 * m * g);
            if sticks {
                assert!(slip <= 1e-6);
                assert!((lf - pull).abs() <= 1e-9 * pull);
            } else {
                assert!((lf - mu * ln).abs() <= 1e-8);
                let expected_slip = h * h * (pull - mu * m * g) / m;
                assert!((slip - expected_slip).abs() <= 1e-9 * expected_slip);
            }
            assert!(lf <= mu * ln + 1e-10);
        }
    }

    proptest! {
        #[test]
        fn weights_bounded(delta in -10.0f64..10.0, lambda in -10.0f64..10.0, r in 1e-3f64..10.0) {
            let (om, e) = ncp_weights(delta, r, lambda);
            prop_assert!((0.0..=2.0).contains(&om));
            prop_assert!(e >= -1e-15 && e <= 2.0 * r + 1e-15);
        }

        #[test]
        fn fb_zero_iff_complementary(delta in 0.0f64..5.0, lambda in 0.0f64..5.0, r in 0.1f64..3.0) {
            prop_assert!(fb_residual(delta, r, 0.0).abs() < 1e-12);
            prop_assert!(fb_residual(0.0, r, lambda).abs() < 1e-12);
            if delta > 1e-3 && lambda > 1e-3 {
                prop_assert!(fb_residual(delta, r, lambda) > 0.0);
            }
        }

        #[test]
        fn projection_lands_in_cone(l in prop::array::uniform3(-5.0f64..5.0), mu in 0.0f64..2.0) {
            let (mut set, _, _) = single_vertex(mu.max(1e-3), Vector3::zeros());
            set.contacts[0].friction = mu.max(1e-3);
            let mut lambda = l.to_vec();
            project_multipliers(&set, &mut lambda);
            prop_assert!(lambda[0] >= 0.0);
            let lf = (lambda[1].powi(2) + lambda[2].powi(2)).sqrt();
            prop_assert!(lf <= set.contacts[0].friction * lambda[0] + 1e-10);
        }
    }
}
