//! Adjoint of one forward step.
//!
//! At a converged step the positions satisfy `A q − b(q) − C_fᵀ λ = 0` with the
//! active constraint rows `C_g q = g`. The adjoint solves the transposed
//! linearization and routes the result to the step inputs.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::contact::{friction_mode, FrictionMode, RowKind};
use crate::error::{Error, Result};
use crate::factor::{mul_xyz, PdSystem};
use crate::forward::{constraint_params, local_step, ForwardCache, Model, Simulator};
use crate::localstep::{barrier_parameter_sensitivity, prox_differential, prox_potential, ProxResult};
use crate::material::{ConstraintKind, EnergyKind, MaterialField};
use crate::mesh::TetMesh;
use crate::par::map_range;
use crate::sparse::{dot, norm, SparseMatrix};

/// Incoming loss sensitivities to the end-of-step positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSeed {
    pub dl_dq_next: Vec<f64>,
    pub dl_dv_next: Vec<f64>,
}

impl AdjointSeed {
    pub fn zeros(n: usize) -> Self {
        Self {
            dl_dq_next: vec![0.0; n],
            dl_dv_next: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dl_dq_t: Vec<f64>,
    pub dl_dv_t: Vec<f64>,
    pub dl_df_ext: Vec<f64>,
    /// `dl_dw[c][e]` for constraint `c` of element `e`.
    pub dl_dw: Vec<Vec<f64>>,
    pub dl_de: Vec<f64>,
    pub tau_used: f64,
    pub tr_ratio: f64,
    pub adjoint_iterations: usize,
    /// Number of `A` products spent on the trust-region model.
    pub tr_a_products: usize,
    /// Whether the contact-free adjoint path was taken.
    pub fast_path: bool,
}

impl GradientBundle {
    /// Seeds for the previous step of a rollout.
    pub fn as_seed(&self) -> AdjointSeed {
        AdjointSeed {
            dl_dq_next: self.dl_dq_t.clone(),
            dl_dv_next: self.dl_dv_t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardConfig {
    pub eps_tr: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub restart: usize,
    /// Skips the ratio test and uses this blend instead.
    pub tau_override: Option<f64>,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self {
            eps_tr: 0.1,
            tol: 1e-10,
            max_iters: 500,
            restart: 80,
            tau_override: None,
        }
    }
}

/// Damping-aware primal objective whose gradient is `A q − b(q)`:
/// `(1/2h²)‖q−q̃‖²_M + (1/2h)‖q−q_t‖²_{αM+B_β} + Σ_e V_e Σ_c w_c (½‖F−p*_c‖² + φ_c(p*_c)/k_c)`.
pub fn primal_energy(
    q: &[f64],
    q_tilde: &[f64],
    q_t: &[f64],
    mesh: &TetMesh,
    material: &MaterialField,
    damping: &SparseMatrix,
    h: f64,
) -> Result<f64> {
    let prox = local_step(mesh, material, q)?;
    primal_energy_with(q, q_tilde, q_t, mesh, material, damping, h, &prox)
}

#[allow(clippy::too_many_arguments)]
fn primal_energy_with(
    q: &[f64],
    q_tilde: &[f64],
    q_t: &[f64],
    mesh: &TetMesh,
    material: &MaterialField,
    damping: &SparseMatrix,
    h: f64,
    prox: &[Vec<ProxResult>],
) -> Result<f64> {
    let dq: Vec<f64> = q.iter().zip(q_t).map(|(a, b)| a - b).collect();
    let bdq = mul_xyz(damping, &dq);
    let mut inertia = 0.0;
    for i in 0..q.len() {
        let m = mesh.lumped_mass[i];
        let r = q[i] - q_tilde[i];
        inertia += 0.5 * m * r * r / (h * h) + 0.5 * (material.alpha * m * dq[i] + bdq[i]) * dq[i] / h;
    }
    let check_det = material.energy_kind == EnergyKind::NeoHookean || material.log_volume_barrier;
    let per_element: Vec<Result<f64>> = map_range(mesh.n_elements(), |e| {
        let f = mesh.deformation_gradient(e, q);
        if check_det {
            let det = f.determinant();
            if det <= 0.0 {
                return Err(Error::NonPositiveJacobian { det });
            }
        }
        let mut s = 0.0;
        for (c, &kind) in material.constraints.iter().enumerate() {
            let res = &prox[e][c];
            let params = constraint_params(material, kind, e);
            let gap = 0.5 * (f - res.p_star).norm_squared() + prox_potential(kind, &res.sigma_star, &params);
            s += material.constraint_weights[c][e] * gap;
        }
        Ok(mesh.rest_volume[e] * s)
    });
    let mut elastic = 0.0;
    for v in per_element {
        elastic += v?;
    }
    Ok(inertia + elastic)
}

/// Trust-region blend from the last PD increment. `apply_a` is called exactly once.
#[allow(clippy::too_many_arguments)]
pub fn tr_select_tau(
    cache: &ForwardCache,
    apply_a: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    mesh: &TetMesh,
    material: &MaterialField,
    damping: &SparseMatrix,
    h: f64,
    eps_tr: f64,
) -> Result<(f64, f64)> {
    let dq: Vec<f64> = cache.q_star.iter().zip(&cache.q_prev_iterate).map(|(a, b)| a - b).collect();
    let adq = apply_a(&dq);
    let model = 0.5 * dot(&dq, &adq).abs();
    let rho = if model < 1e-12 {
        1.0
    } else {
        let prev = primal_energy(&cache.q_prev_iterate, &cache.q_tilde, &cache.q_t, mesh, material, damping, h)?;
        let star = primal_energy_with(&cache.q_star, &cache.q_tilde, &cache.q_t, mesh, material, damping, h, &cache.prox)?;
        (prev - star) / model
    };
    let tau = tr_rule(rho, eps_tr);
    Ok((tau, rho))
}

pub fn tr_rule(rho: f64, eps_tr: f64) -> f64 {
    if (rho - 1.0).abs() <= eps_tr {
        0.5
    } else {
        1.0
    }
}

/// `δq ↦ Σ_e Σ_c w_c V_e G_eᵀ (∂p*_c/∂F) G_e δq` as per-element 12×12 blocks.
#[derive(Debug, Clone)]
pub struct DbDq {
    blocks: Vec<SMatrix<f64, 12, 12>>,
    dofs: Vec<[usize; 12]>,
    n: usize,
}

impl DbDq {
    pub fn assemble(mesh: &TetMesh, material: &MaterialField, prox: &[Vec<ProxResult>], tau: f64) -> Result<Self> {
        let blocks: Vec<Result<SMatrix<f64, 12, 12>>> = map_range(mesh.n_elements(), |e| {
            let op = mesh.element_operator(e).block;
            let mut d9 = SMatrix::<f64, 9, 9>::zeros();
            for (c, &kind) in material.constraints.iter().enumerate() {
                let w = material.constraint_weights[c][e];
                let diff = prox_differential(kind, &prox[e][c], &constraint_params(material, kind, e), tau)?;
                d9 += diff.to_matrix9() * w;
            }
            Ok(op.transpose() * d9 * op * mesh.rest_volume[e])
        });
        let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            dofs: (0..mesh.n_elements()).map(|e| mesh.element_dofs(e)).collect(),
            n: mesh.n_dofs(),
        })
    }

    fn apply_with(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (blk, dofs) in self.blocks.iter().zip(&self.dofs) {
            let xl = SMatrix::<f64, 12, 1>::from_fn(|i, _| x[dofs[i]]);
            let yl = if transpose { blk.tr_mul(&xl) } else { blk * xl };
            for i in 0..12 {
                out[dofs[i]] += yl[i];
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_with(x, false)
    }

    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.apply_with(x, true)
    }
}

/// Restarted GMRES on `op x = rhs`; returns `(x, iterations, final relative residual)`.
/// Convergence is judged on `true_residual`, which must return `‖r_true‖/‖r₀‖`.
fn gmres(
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    true_residual: &dyn Fn(&[f64]) -> f64,
    tol: f64,
    restart: usize,
    max_iters: usize,
) -> (Vec<f64>, usize, f64) {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut total = 0;
    let mut rel = true_residual(&x);
    if rel <= tol || norm(rhs) == 0.0 {
        return (x, 0, 0.0);
    }
    while total < max_iters {
        let ax = op(&x);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        if beta == 0.0 {
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = DMatrix::<f64>::zeros(restart + 1, restart);
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..restart {
            if total >= max_iters {
                break;
            }
            total += 1;
            let mut w = op(&basis[k]);
            // modified Gram–Schmidt, applied twice for stability
            for _ in 0..2 {
                for (j, vj) in basis.iter().enumerate() {
                    let hij = dot(&w, vj);
                    hess[(j, k)] += hij;
                    for (wi, vi) in w.iter_mut().zip(vj) {
                        *wi -= hij * vi;
                    }
                }
            }
            let hn = norm(&w);
            hess[(k + 1, k)] = hn;
            for j in 0..k {
                let t = cs[j] * hess[(j, k)] + sn[j] * hess[(j + 1, k)];
                hess[(j + 1, k)] = -sn[j] * hess[(j, k)] + cs[j] * hess[(j + 1, k)];
                hess[(j, k)] = t;
            }
            let denom = (hess[(k, k)].powi(2) + hess[(k + 1, k)].powi(2)).sqrt();
            cs[k] = hess[(k, k)] / denom;
            sn[k] = hess[(k + 1, k)] / denom;
            hess[(k, k)] = denom;
            hess[(k + 1, k)] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if hn <= 1e-300 || g[k + 1].abs() <= 1e-3 * tol * beta {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hess[(i, j)] * y[j];
            }
            y[i] = s / hess[(i, i)];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&basis[j]) {
                *xi += yj * vi;
            }
        }
        rel = true_residual(&x);
        if rel <= tol {
            break;
        }
    }
    (x, total, rel)
}

/// Constraint rows that are active at the converged state: the gap direction
/// `c_g` and the force direction `c_f` of each, on one vertex.
#[derive(Debug, Clone)]
pub struct ActiveRow {
    pub vertex: usize,
    pub gap_dir: Vector3<f64>,
    pub force_dir: Vector3<f64>,
    /// Target moves with the start-of-step position (sticking friction).
    pub tracks_start: bool,
}

/// Active rows plus the tangential stiffness `λ_n μ/s · T(I − ddᵀ)Tᵀ` of each
/// sliding contact, which accounts for the slip direction following the slip.
#[derive(Debug, Clone, Default)]
pub struct ActiveSet {
    pub rows: Vec<ActiveRow>,
    pub sliding: Vec<(usize, Matrix3<f64>)>,
}

pub fn active_set(cache: &ForwardCache) -> ActiveSet {
    let Some(cc) = &cache.contact else {
        return ActiveSet::default();
    };
    let set = &cc.set;
    let lambda = &cc.state.lambda;
    let gaps = set.gaps(&cache.q_star);
    let friction = set.friction_contacts();
    let modes: Vec<FrictionMode> = friction
        .iter()
        .enumerate()
        .map(|(pair, &c)| friction_mode(set, lambda, &gaps, c, pair))
        .collect();
    let base = set.n_normal() + set.n_bilateral();
    let rows = set.rows();
    let mut out = ActiveSet::default();
    for (r, kind) in set.row_kinds().iter().enumerate() {
        match *kind {
            RowKind::Normal(c) => {
                if lambda[c] <= 0.0 {
                    continue;
                }
                let ct = &set.contacts[c];
                let mut force_dir = ct.normal;
                if let Some(pair) = friction.iter().position(|&fc| fc == c) {
                    if let FrictionMode::Slide(d) = modes[pair] {
                        let t = ct.t1 * d[0] + ct.t2 * d[1];
                        force_dir += t * ct.friction;
                        let (i, j) = (base + 2 * pair, base + 2 * pair + 1);
                        let slip = (gaps[i] * gaps[i] + gaps[j] * gaps[j]).sqrt();
                        if slip > 0.0 {
                            let tm = nalgebra::Matrix3x2::from_columns(&[ct.t1, ct.t2]);
                            let dv = nalgebra::Vector2::new(d[0], d[1]);
                            let proj = nalgebra::Matrix2::identity() - dv * dv.transpose();
                            let k = lambda[c] * ct.friction / slip;
                            out.sliding.push((ct.vertex, tm * proj * tm.transpose() * k));
                        }
                    }
                }
                out.rows.push(ActiveRow {
                    vertex: rows[r].0,
                    gap_dir: rows[r].1,
                    force_dir,
                    tracks_start: false,
                });
            }
            RowKind::Bilateral(..) => out.rows.push(ActiveRow {
                vertex: rows[r].0,
                gap_dir: rows[r].1,
                force_dir: rows[r].1,
                tracks_start: false,
            }),
            RowKind::Friction(c, _) => {
                let pair = friction.iter().position(|&fc| fc == c).expect("friction pair");
                if modes[pair] == FrictionMode::Stick {
                    out.rows.push(ActiveRow {
                        vertex: rows[r].0,
                        gap_dir: rows[r].1,
                        force_dir: rows[r].1,
                        tracks_start: true,
                    });
                }
            }
        }
    }
    out
}

pub fn active_rows(cache: &ForwardCache) -> Vec<ActiveRow> {
    active_set(cache).rows
}

fn add_sliding(sliding: &[(usize, Matrix3<f64>)], x: &[f64], out: &mut [f64]) {
    for (v, k) in sliding {
        let y = k * Vector3::new(x[3 * v], x[3 * v + 1], x[3 * v + 2]);
        for i in 0..3 {
            out[3 * v + i] += y[i];
        }
    }
}

fn row_apply(row: &ActiveRow, dir: &Vector3<f64>, x: &[f64]) -> f64 {
    let v = row.vertex;
    dir.x * x[3 * v] + dir.y * x[3 * v + 1] + dir.z * x[3 * v + 2]
}

fn row_vector(row: &ActiveRow, dir: &Vector3<f64>, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    out[3 * row.vertex..3 * row.vertex + 3].copy_from_slice(dir.as_slice());
    out
}

/// Adjoint solution: backbone `μ = z` with `y_q = A z`, and row multipliers `ν`.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub z: Vec<f64>,
    pub y_q: Vec<f64>,
    pub nu: Vec<f64>,
    pub iterations: usize,
}

/// Solves `(A − ∂b/∂q + P)ᵀ z + C_gᵀ ν = q̄`, `C_f z = 0` on the free DoFs.
pub fn adjoint_solve(
    system: &PdSystem,
    db_dq: &DbDq,
    active: &ActiveSet,
    q_bar: &[f64],
    config: &BackwardConfig,
) -> Result<AdjointSolution> {
    let rows = &active.rows;
    // Bᵀx − P x, the part of the operator that is not A
    let coupling = |x: &[f64]| -> Vec<f64> {
        let mut y = db_dq.apply_transpose(x);
        let mut p = vec![0.0; x.len()];
        add_sliding(&active.sliding, x, &mut p);
        for (a, b) in y.iter_mut().zip(&p) {
            *a -= b;
        }
        y
    };
    let n = q_bar.len();
    let free = |x: &[f64]| {
        let mut y = x.to_vec();
        system.project_free(&mut y);
        y
    };
    let k_apply = |x: &[f64]| -> Vec<f64> {
        let ax = system.apply_a_free(x);
        let bx = free(&coupling(x));
        ax.iter().zip(&bx).map(|(a, b)| a - b).collect()
    };
    let precond_op = |x: &[f64]| -> Vec<f64> {
        let bx = free(&coupling(x));
        let ainv = system.apply_inverse_free(&bx);
        x.iter().zip(&ainv).map(|(a, b)| a - b).collect()
    };
    let qb = free(q_bar);
    let rn = norm(&qb);
    if rn == 0.0 {
        return Ok(AdjointSolution {
            z: vec![0.0; n],
            y_q: vec![0.0; n],
            nu: vec![0.0; rows.len()],
            iterations: 0,
        });
    }
    let (z, nu, iterations) = if rows.is_empty() {
        let rhs = system.apply_inverse_free(&qb);
        let true_res = |x: &[f64]| {
            let kx = k_apply(x);
            qb.iter().zip(&kx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / rn
        };
        let (x, it, rel) = gmres(&precond_op, &rhs, &true_res, config.tol, config.restart, config.max_iters);
        if !(rel <= config.tol) {
            return Err(Error::AdjointDiverged {
                iterations: it,
                residual: rel,
            });
        }
        (x, Vec::new(), it)
    } else {
        // KKT in (z, ν), left-preconditioned by the same system with A in place of K,
        // whose Schur complement C_f A⁻¹ C_gᵀ is small and dense
        let m = rows.len();
        let a_cols: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| system.apply_inverse_free(&row_vector(r, &r.gap_dir, n)))
            .collect();
        let s_a = DMatrix::from_fn(m, m, |i, j| row_apply(&rows[i], &rows[i].force_dir, &a_cols[j]));
        let s_lu = s_a.lu();
        if !s_lu.is_invertible() {
            return Err(Error::SingularContactSystem);
        }
        let kkt_precond = |r: &[f64]| -> Vec<f64> {
            let ainv = system.apply_inverse_free(&free(&r[..n]));
            let rhs = DVector::from_fn(m, |i, _| row_apply(&rows[i], &rows[i].force_dir, &ainv) - r[n + i]);
            let nu = s_lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(m));
            let mut out = ainv;
            for (j, col) in a_cols.iter().enumerate() {
                for (o, c) in out.iter_mut().zip(col) {
                    *o -= nu[j] * c;
                }
            }
            out.extend(nu.iter());
            out
        };
        let kkt_apply = |x: &[f64]| -> Vec<f64> {
            let (z, nu) = x.split_at(n);
            let mut top = k_apply(z);
            for (r, &v) in rows.iter().zip(nu) {
                for i in 0..3 {
                    top[3 * r.vertex + i] += v * r.gap_dir[i];
                }
            }
            top.extend(rows.iter().map(|r| row_apply(r, &r.force_dir, z)));
            top
        };
        let mut b = qb.clone();
        b.extend(std::iter::repeat_n(0.0, m));
        let op = |x: &[f64]| kkt_precond(&kkt_apply(x));
        let rhs = kkt_precond(&b);
        let true_res = |x: &[f64]| {
            let kx = kkt_apply(x);
            b.iter().zip(&kx).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt() / rn
        };
        let (x, it, rel) = gmres(&op, &rhs, &true_res, config.tol, config.restart, config.max_iters);
        if !(rel <= config.tol) {
            return Err(Error::AdjointDiverged {
                iterations: it,
                residual: rel,
            });
        }
        let (z, nu) = x.split_at(n);
        (z.to_vec(), nu.to_vec(), it)
    };
    let y_q = system.apply_a_free(&z);
    Ok(AdjointSolution { z, y_q, nu, iterations })
}

/// Maps the adjoint solution to sensitivities of the step inputs.
#[allow(clippy::too_many_arguments)]
pub fn route_gradients(
    sol: &AdjointSolution,
    active: &ActiveSet,
    cache: &ForwardCache,
    model: &Model,
    damping: &SparseMatrix,
    seed: &AdjointSeed,
    h: f64,
    tau: f64,
) -> Result<GradientBundle> {
    let (mesh, material) = (&model.mesh, &model.material);
    let z = &sol.z;
    let n = z.len();
    let bz = mul_xyz(damping, z);
    let mut dl_dq_t: Vec<f64> = (0..n)
        .map(|i| {
            let m = mesh.lumped_mass[i];
            m / (h * h) * z[i] + material.alpha * m / h * z[i] + bz[i] / h - seed.dl_dv_next[i] / h
        })
        .collect();
    let rows = &active.rows;
    // sliding directions depend on the slip measured from the start position
    add_sliding(&active.sliding, z, &mut dl_dq_t);
    for (row, nu) in rows.iter().zip(&sol.nu) {
        if row.tracks_start {
            for i in 0..3 {
                dl_dq_t[3 * row.vertex + i] += nu * row.gap_dir[i];
            }
        }
    }
    for &(v, _) in &model.dirichlet {
        dl_dq_t[3 * v..3 * v + 3].fill(0.0);
    }
    let mut dl_dv_t: Vec<f64> = (0..n).map(|i| mesh.lumped_mass[i] / h * z[i]).collect();
    if let Some(hook) = &model.state_force {
        let (gq, gv) = hook.vjp(&cache.q_t, &cache.v_t, z);
        for i in 0..n {
            dl_dq_t[i] += gq[i];
            dl_dv_t[i] += gv[i];
        }
    }
    let dl_df_ext = z.clone();

    let nc = material.constraints.len();
    let per_element: Vec<Result<(Vec<f64>, f64)>> = map_range(mesh.n_elements(), |e| {
        let gz = mesh.deformation_gradient(e, z);
        let f = mesh.deformation_gradient(e, &cache.q_star);
        let v = mesh.rest_volume[e];
        let young = material.young[e];
        let mut dw = vec![0.0; nc];
        let mut de = 0.0;
        for (c, &kind) in material.constraints.iter().enumerate() {
            let res = &cache.prox[e][c];
            dw[c] = v * gz.dot(&(res.p_star - f));
            let w = material.constraint_weights[c][e];
            // weights are linear in E at fixed Poisson ratio
            de += dw[c] * w / young;
            if kind == ConstraintKind::LogBarrier {
                let params = constraint_params(material, kind, e);
                let (dp_dmu, dp_dlam) = barrier_parameter_sensitivity(res, &params, tau)?;
                let dp_de = dp_dmu * (material.mu[e] / young) + dp_dlam * (material.lam[e] / young);
                de += w * v * gz.dot(&dp_de);
            }
        }
        Ok((dw, de))
    });
    let mut dl_dw = vec![vec![0.0; mesh.n_elements()]; nc];
    let mut dl_de = vec![0.0; mesh.n_elements()];
    for (e, r) in per_element.into_iter().enumerate() {
        let (dw, de) = r?;
        for c in 0..nc {
            dl_dw[c][e] = dw[c];
        }
        dl_de[e] = de;
    }
    Ok(GradientBundle {
        dl_dq_t,
        dl_dv_t,
        dl_df_ext,
        dl_dw,
        dl_de,
        tau_used: tau,
        tr_ratio: 1.0,
        adjoint_iterations: sol.iterations,
        tr_a_products: 0,
        fast_path: rows.is_empty() && active.sliding.is_empty(),
    })
}

/// Full backward step for a cache produced by `sim`.
pub fn backward_step(sim: &Simulator, cache: &ForwardCache, seed: &AdjointSeed, config: &BackwardConfig) -> Result<GradientBundle> {
    let system = sim.system();
    if cache.signature != system.signature() {
        return Err(Error::InvalidConfig("cache was produced with a different factor".into()));
    }
    let model = &sim.model;
    let (mesh, material, h) = (&model.mesh, &model.material, sim.config.h);
    let n = mesh.n_dofs();
    if seed.dl_dq_next.len() != n || seed.dl_dv_next.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: seed.dl_dq_next.len(),
        });
    }
    let mut products = 0;
    let (tau, rho) = match config.tau_override {
        Some(t) => (t, f64::NAN),
        None => {
            let mut apply_a = |x: &[f64]| {
                products += 1;
                system.apply_a(x)
            };
            tr_select_tau(cache, &mut apply_a, mesh, material, sim.damping(), h, config.eps_tr)?
        }
    };
    let db_dq = DbDq::assemble(mesh, material, &cache.prox, tau)?;
    let active = active_set(cache);
    let mut q_bar: Vec<f64> = seed.dl_dq_next.iter().zip(&seed.dl_dv_next).map(|(q, v)| q + v / h).collect();
    system.project_free(&mut q_bar);
    let sol = adjoint_solve(system, &db_dq, &active, &q_bar, config)?;
    let mut bundle = route_gradients(&sol, &active, cache, model, sim.damping(), seed, h, tau)?;
    bundle.tr_ratio = rho;
    bundle.tr_a_products = products;
    Ok(bundle)
}

/// Adds `other` into `acc` entrywise for the material and force gradients.
pub fn accumulate_parameters(acc: &mut GradientBundle, other: &GradientBundle) {
    for (a, b) in acc.dl_df_ext.iter_mut().zip(&other.dl_df_ext) {
        *a += b;
    }
    for (ac, bc) in acc.dl_dw.iter_mut().zip(&other.dl_dw) {
        for (a, b) in ac.iter_mut().zip(bc) {
            *a += b;
        }
    }
    for (a, b) in acc.dl_de.iter_mut().zip(&other.dl_de) {
        *a += b;
    }
}
