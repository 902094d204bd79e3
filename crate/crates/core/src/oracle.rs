//! Independent dense reference implementations used to check the solver.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense Cholesky factor `L` with `A = L Lᵀ`.
pub fn dense_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

pub fn cholesky_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Dense inverse of an SPD matrix.
pub fn dense_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = dense_cholesky(a)?;
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let x = cholesky_solve(&l, &e);
        for i in 0..n {
            inv[(i, j)] = x[i];
        }
    }
    Ok(inv)
}

use nalgebra::{DVector, Matrix3, SMatrix, SymmetricEigen, Vector3};

use crate::forward::Model;
use crate::material::{ConstraintKind, MaterialField};
use crate::mesh::TetMesh;

type Mat9 = SMatrix<f64, 9, 9>;
type Vec9 = SMatrix<f64, 9, 1>;
type Mat12 = SMatrix<f64, 12, 12>;

fn vec9(m: &Matrix3<f64>) -> Vec9 {
    Vec9::from_column_slice(m.as_slice())
}

fn mat3(v: &Vec9) -> Matrix3<f64> {
    Matrix3::from_column_slice(v.as_slice())
}

/// Builds the 9×9 matrix of a linear map on 3×3 matrices (column-major vec).
fn matrix_of(map: impl Fn(&Matrix3<f64>) -> Matrix3<f64>) -> Mat9 {
    let mut m = Mat9::zeros();
    for col in 0..9 {
        let mut e = Vec9::zeros();
        e[col] = 1.0;
        m.set_column(col, &vec9(&map(&mat3(&e))));
    }
    m
}

/// Rotation factor of the polar decomposition by Higham's scaled iteration.
pub fn polar_rotation(f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let mut r = *f;
    for _ in 0..100 {
        let inv_t = r
            .try_inverse()
            .ok_or(Error::NonPositiveJacobian { det: r.determinant() })?
            .transpose();
        let g = (r.norm() / inv_t.norm()).sqrt().clamp(1e-3, 1e3);
        let next = 0.5 * (g * r + inv_t / g);
        let change = (next - r).norm();
        r = next;
        if change <= 1e-15 * 3f64.sqrt() {
            break;
        }
    }
    if r.determinant() <= 0.0 {
        return Err(Error::NonPositiveJacobian { det: f.determinant() });
    }
    Ok(r)
}

/// `dR/dF` from the Sylvester equation `ΩS + SΩ = RᵀdF − dFᵀR`.
pub fn polar_rotation_differential(f: &Matrix3<f64>) -> Result<Mat9> {
    let r = polar_rotation(f)?;
    let s = r.transpose() * f;
    let s = 0.5 * (s + s.transpose());
    let lhs = Matrix3::identity() * s.trace() - s;
    let lhs_inv = lhs.try_inverse().ok_or(Error::SingularFilteredHessian { min_eigenvalue: 0.0 })?;
    Ok(matrix_of(|df| {
        let k = r.transpose() * df - df.transpose() * r;
        let axial = Vector3::new(k[(2, 1)], k[(0, 2)], k[(1, 0)]);
        let w = lhs_inv * axial;
        r * w.cross_matrix()
    }))
}

fn log_det(f: &Matrix3<f64>) -> Result<f64> {
    let det = f.determinant();
    if det > 0.0 {
        Ok(det.ln())
    } else {
        Err(Error::NonPositiveJacobian { det })
    }
}

/// Isotropic density on the full deformation gradient, with gradient and Hessian.
#[derive(Debug, Clone, Copy)]
enum Density {
    /// `μ/2(‖F‖²−3) − μ ln J + λ/2 (ln J)²`.
    NeoHookean { mu: f64, lam: f64 },
    /// `−μ ln J + λ/2 (ln J)²`.
    Barrier { mu: f64, lam: f64 },
}

impl Density {
    fn value(&self, f: &Matrix3<f64>) -> Result<f64> {
        let l = log_det(f)?;
        Ok(match *self {
            Density::NeoHookean { mu, lam } => 0.5 * mu * (f.norm_squared() - 3.0) - mu * l + 0.5 * lam * l * l,
            Density::Barrier { mu, lam } => -mu * l + 0.5 * lam * l * l,
        })
    }

    fn gradient(&self, f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
        let l = log_det(f)?;
        let f_inv_t = f.try_inverse().unwrap().transpose();
        Ok(match *self {
            Density::NeoHookean { mu, lam } => mu * f + (lam * l - mu) * f_inv_t,
            Density::Barrier { mu, lam } => (lam * l - mu) * f_inv_t,
        })
    }

    fn hessian(&self, f: &Matrix3<f64>) -> Result<Mat9> {
        let l = log_det(f)?;
        let f_inv = f.try_inverse().unwrap();
        let f_inv_t = f_inv.transpose();
        let (mu, lam, quad) = match *self {
            Density::NeoHookean { mu, lam } => (mu, lam, mu),
            Density::Barrier { mu, lam } => (mu, lam, 0.0),
        };
        Ok(matrix_of(|df| {
            quad * df - (lam * l - mu) * (f_inv_t * df.transpose() * f_inv_t) + lam * (f_inv * df).trace() * f_inv_t
        }))
    }
}

/// 9-D Newton for `argmin_P (k/2)‖P − F‖² + ψ(P)`; returns `(P, dP/dF)`.
fn full_prox(density: Density, f: &Matrix3<f64>, k: f64) -> Result<(Matrix3<f64>, Mat9)> {
    let objective = |p: &Matrix3<f64>| -> f64 {
        match density.value(p) {
            Ok(v) => 0.5 * k * (p - f).norm_squared() + v,
            Err(_) => f64::INFINITY,
        }
    };
    let mut p = if f.determinant() > 0.0 { *f } else { Matrix3::identity() };
    let mut obj = objective(&p);
    let noise = 1e-12 * k * (1.0 + f.norm_squared());
    for it in 0..200 {
        let g = vec9(&(k * (p - f) + density.gradient(&p)?));
        if g.norm() <= 1e-13 * k {
            break;
        }
        let h = density.hessian(&p)? + Mat9::identity() * k;
        let eig = SymmetricEigen::new(h);
        let vals = eig.eigenvalues.map(|l| 1.0 / l.abs().max(1e-10 * k));
        let dir = -(eig.eigenvectors * Mat9::from_diagonal(&vals) * eig.eigenvectors.transpose() * g);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = p + mat3(&(dir * step));
            let t_obj = objective(&trial);
            let t_g = density.gradient(&trial).map(|d| vec9(&(k * (trial - f) + d)).norm());
            if t_obj < obj || (t_obj <= obj + noise && matches!(t_g, Ok(n) if n < g.norm())) {
                p = trial;
                obj = t_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::ProxDiverged {
                iterations: it,
                residual: g.norm(),
            });
        }
    }
    let residual = vec9(&(k * (p - f) + density.gradient(&p)?)).norm();
    if residual > 1e-10 * k {
        return Err(Error::ProxDiverged { iterations: 200, residual });
    }
    let h = density.hessian(&p)? + Mat9::identity() * k;
    let inv = h.try_inverse().ok_or(Error::SingularFilteredHessian { min_eigenvalue: 0.0 })?;
    Ok((p, inv * k))
}

fn cofactor(p: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = p.column(1).cross(&p.column(2));
    let c1 = p.column(2).cross(&p.column(0));
    let c2 = p.column(0).cross(&p.column(1));
    Matrix3::from_columns(&[c0, c1, c2])
}

/// 10-D KKT Newton for the closest unit-determinant matrix; returns `(P, dP/dF)`.
pub fn volume_projection_kkt(f: &Matrix3<f64>) -> Result<(Matrix3<f64>, Mat9)> {
    let det = f.determinant();
    if det <= 0.0 {
        return Err(Error::NonPositiveJacobian { det });
    }
    let mut p = f / det.cbrt();
    let mut nu = 0.0;
    let jac = |p: &Matrix3<f64>, nu: f64| -> SMatrix<f64, 10, 10> {
        let p_inv_t = p.try_inverse().unwrap().transpose();
        let dp = p.determinant();
        let dcof = matrix_of(|d| dp * ((p_inv_t.transpose() * d).trace() * p_inv_t - p_inv_t * d.transpose() * p_inv_t));
        let c = vec9(&cofactor(p));
        let mut j = SMatrix::<f64, 10, 10>::zeros();
        j.fixed_view_mut::<9, 9>(0, 0).copy_from(&(Mat9::identity() - dcof * nu));
        j.fixed_view_mut::<9, 1>(0, 9).copy_from(&(-c));
        j.fixed_view_mut::<1, 9>(9, 0).copy_from(&c.transpose());
        j
    };
    for it in 0..100 {
        let r1 = vec9(&(p - f - nu * cofactor(&p)));
        let r2 = p.determinant() - 1.0;
        let mut r = SMatrix::<f64, 10, 1>::zeros();
        r.fixed_view_mut::<9, 1>(0, 0).copy_from(&r1);
        r[9] = r2;
        if r.norm() <= 1e-14 * (1.0 + f.norm()) {
            break;
        }
        let step = jac(&p, nu).lu().solve(&(-r)).ok_or(Error::ProxDiverged {
            iterations: it,
            residual: r.norm(),
        })?;
        p += mat3(&step.fixed_rows::<9>(0).into_owned());
        nu += step[9];
    }
    if (p.determinant() - 1.0).abs() > 1e-10 {
        return Err(Error::ProxDiverged {
            iterations: 100,
            residual: (p.determinant() - 1.0).abs(),
        });
    }
    let inv = jac(&p, nu)
        .try_inverse()
        .ok_or(Error::SingularFilteredHessian { min_eigenvalue: 0.0 })?;
    let dp = inv.fixed_view::<9, 9>(0, 0).into_owned();
    Ok((p, dp))
}

/// Target, potential `φ(P)/k` and `dP/dF` of one constraint, computed without SVD.
pub fn constraint_reference(kind: ConstraintKind, f: &Matrix3<f64>, mu: f64, lam: f64, k: f64) -> Result<(Matrix3<f64>, f64, Mat9)> {
    match kind {
        ConstraintKind::Rotation => Ok((polar_rotation(f)?, 0.0, polar_rotation_differential(f)?)),
        ConstraintKind::Volume => {
            let (p, d) = volume_projection_kkt(f)?;
            Ok((p, 0.0, d))
        }
        ConstraintKind::NhProx | ConstraintKind::LogBarrier => {
            let density = if kind == ConstraintKind::NhProx {
                Density::NeoHookean { mu, lam }
            } else {
                Density::Barrier { mu, lam }
            };
            let (p, d) = full_prox(density, f, k)?;
            Ok((p, density.value(&p)? / k, d))
        }
    }
}

fn reference_params(material: &MaterialField, kind: ConstraintKind, e: usize) -> (f64, f64, f64) {
    match kind {
        ConstraintKind::LogBarrier => (material.mu[e], material.lam[e], material.mean_k),
        _ => (material.mean_mu, material.mean_lam, material.mean_k),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianFilter {
    None,
    Clamp,
    Abs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonConfig {
    pub filter: HessianFilter,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub shrink: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            filter: HessianFilter::Clamp,
            max_iters: 100,
            grad_tol: 1e-8,
            shrink: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub q: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective after every iteration, starting with the initial value.
    pub energies: Vec<f64>,
}

/// Dense evaluation of the primal objective, its gradient and filtered Hessian.
pub struct DenseObjective<'a> {
    mesh: &'a TetMesh,
    material: &'a MaterialField,
    q_tilde: &'a [f64],
    q_t: &'a [f64],
    h: f64,
    /// `αM + B_β` as a dense matrix on all DoFs.
    damping: DMatrix<f64>,
}

impl<'a> DenseObjective<'a> {
    pub fn new(mesh: &'a TetMesh, material: &'a MaterialField, q_tilde: &'a [f64], q_t: &'a [f64], h: f64) -> Result<Self> {
        let n = mesh.n_dofs();
        if n > 2000 {
            return Err(Error::InvalidConfig(format!("dense oracle is capped at 2000 DoF, got {n}")));
        }
        let mut damping = DMatrix::zeros(n, n);
        for i in 0..n {
            damping[(i, i)] = material.alpha * mesh.lumped_mass[i];
        }
        for e in 0..mesh.n_elements() {
            let beta = material.beta[e] * mesh.rest_volume[e];
            if beta == 0.0 {
                continue;
            }
            let op = mesh.element_operator(e);
            let block = op.block.transpose() * op.block * beta;
            for a in 0..12 {
                for b in 0..12 {
                    damping[(op.dofs[a], op.dofs[b])] += block[(a, b)];
                }
            }
        }
        Ok(Self {
            mesh,
            material,
            q_tilde,
            q_t,
            h,
            damping,
        })
    }

    pub fn energy(&self, q: &[f64]) -> Result<f64> {
        let h = self.h;
        let dq = DVector::from_iterator(q.len(), q.iter().zip(self.q_t).map(|(a, b)| a - b));
        let mut phi = 0.5 * dq.dot(&(&self.damping * &dq)) / h;
        for i in 0..q.len() {
            let r = q[i] - self.q_tilde[i];
            phi += 0.5 * self.mesh.lumped_mass[i] * r * r / (h * h);
        }
        for e in 0..self.mesh.n_elements() {
            let f = self.mesh.deformation_gradient(e, q);
            for (c, &kind) in self.material.constraints.iter().enumerate() {
                let (mu, lam, k) = reference_params(self.material, kind, e);
                let (p, pot, _) = constraint_reference(kind, &f, mu, lam, k)?;
                phi += self.material.constraint_weights[c][e] * self.mesh.rest_volume[e] * (0.5 * (f - p).norm_squared() + pot);
            }
        }
        Ok(phi)
    }

    /// Gradient and Hessian with each element block filtered by `filter`.
    pub fn derivatives(&self, q: &[f64], filter: HessianFilter) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = q.len();
        let h = self.h;
        let dq = DVector::from_iterator(n, q.iter().zip(self.q_t).map(|(a, b)| a - b));
        let mut grad = &self.damping * &dq / h;
        let mut hess = &self.damping / h;
        for i in 0..n {
            let m = self.mesh.lumped_mass[i];
            grad[i] += m * (q[i] - self.q_tilde[i]) / (h * h);
            hess[(i, i)] += m / (h * h);
        }
        for e in 0..self.mesh.n_elements() {
            let op = self.mesh.element_operator(e);
            let f = self.mesh.deformation_gradient(e, q);
            let mut g9 = Vec9::zeros();
            let mut h9 = Mat9::zeros();
            for (c, &kind) in self.material.constraints.iter().enumerate() {
                let (mu, lam, k) = reference_params(self.material, kind, e);
                let (p, _, dp) = constraint_reference(kind, &f, mu, lam, k)?;
                let wv = self.material.constraint_weights[c][e] * self.mesh.rest_volume[e];
                g9 += vec9(&(f - p)) * wv;
                h9 += (Mat9::identity() - dp) * wv;
            }
            let ge = op.block.transpose() * g9;
            let he = filter_block(&(op.block.transpose() * h9 * op.block), filter);
            for a in 0..12 {
                grad[op.dofs[a]] += ge[a];
                for b in 0..12 {
                    hess[(op.dofs[a], op.dofs[b])] += he[(a, b)];
                }
            }
        }
        Ok((grad, hess))
    }
}

/// Eigenvalue filter on a symmetric 12×12 element Hessian.
pub fn filter_block(h: &Mat12, filter: HessianFilter) -> Mat12 {
    let sym = 0.5 * (h + h.transpose());
    if filter == HessianFilter::None {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| match filter {
        HessianFilter::Clamp => l.max(0.0),
        _ => l.abs(),
    });
    eig.eigenvectors * Mat12::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Projected Newton on the primal objective over the free DoFs of `model`.
pub fn newton_solve(model: &Model, h: f64, q_init: &[f64], q_tilde: &[f64], q_t: &[f64], config: &NewtonConfig) -> Result<NewtonResult> {
    if !(config.grad_tol > 0.0 && config.shrink > 0.0 && config.shrink < 1.0) {
        return Err(Error::InvalidConfig("grad_tol must be positive and shrink in (0, 1)".into()));
    }
    let obj = DenseObjective::new(&model.mesh, &model.material, q_tilde, q_t, h)?;
    let mut fixed = vec![false; q_init.len()];
    for &(v, _) in &model.dirichlet {
        fixed[3 * v..3 * v + 3].fill(true);
    }
    let free: Vec<usize> = (0..q_init.len()).filter(|&i| !fixed[i]).collect();
    let mut q = q_init.to_vec();
    model.enforce_dirichlet(&mut q);
    let mut phi = obj.energy(&q)?;
    let mut energies = vec![phi];
    let mut iterations = 0;
    loop {
        let (grad, hess) = obj.derivatives(&q, config.filter)?;
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        let gnorm = gf.norm();
        if gnorm <= config.grad_tol || iterations >= config.max_iters {
            if gnorm > config.grad_tol {
                return Err(Error::MaxIterations { iterations });
            }
            return Ok(NewtonResult {
                q,
                iterations,
                grad_norm: gnorm,
                energies,
            });
        }
        iterations += 1;
        let hf = DMatrix::from_fn(free.len(), free.len(), |i, j| hess[(free[i], free[j])]);
        let l = dense_cholesky(&hf)?;
        let dir = cholesky_solve(&l, (-&gf).as_slice());
        let slope: f64 = dir.iter().zip(gf.iter()).map(|(d, g)| d * g).sum();
        let noise = 1e-13 * phi.abs().max(1e-300);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = q.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += step * dir[k];
            }
            if let Ok(t_phi) = obj.energy(&trial) {
                let armijo = t_phi <= phi + 1e-4 * step * slope && t_phi < phi;
                // below the roundoff floor the objective cannot certify progress
                let flat = -slope < noise && step == 1.0;
                if armijo || flat {
                    q = trial;
                    phi = t_phi;
                    accepted = true;
                    break;
                }
            }
            step *= config.shrink;
        }
        if !accepted {
            return Err(Error::LineSearchFailed);
        }
        energies.push(phi);
    }
}

/// Central differences with per-parameter step `max(1e-6 |p|, floor)`.
pub fn fd_gradient(loss: &dyn Fn(&[f64]) -> f64, params: &[f64], floors: &[f64]) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let step = (1e-6 * params[i].abs()).max(floors[i.min(floors.len() - 1)]);
            p[i] = params[i] + step;
            let up = loss(&p);
            p[i] = params[i] - step;
            let down = loss(&p);
            p[i] = params[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localstep::{corotated_project, log_barrier_prox, nh_prox, prox_differential, volume_project, ProxParams};
    use crate::material::{EnergyKind, MaterialParams};
    use crate::mesh::ingest_hex_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_f(rng: &mut ChaCha8Rng, amp: f64) -> Matrix3<f64> {
        Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-amp..amp))
    }

    #[test]
    fn dense_inverse_examples() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert_eq!(dense_inverse(&i).unwrap(), i);
        let d = DMatrix::from_diagonal_element(3, 3, 4.0);
        assert!((dense_inverse(&d).unwrap() - DMatrix::from_diagonal_element(3, 3, 0.25)).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(20, 20, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(20, 20);
        let prod = &a * dense_inverse(&a).unwrap();
        assert!((prod - DMatrix::identity(20, 20)).abs().max() < 1e-10);
        assert!(matches!(dense_inverse(&(-a)), Err(Error::NotPositiveDefinite { pivot: 0, .. })));
    }

    #[test]
    fn independent_prox_maps_agree_with_local_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mu, lam, k) = (3.0, 7.0, 13.0);
        let params = ProxParams { mu, lam, k };
        for _ in 0..20 {
            let f = random_f(&mut rng, 0.3);
            let cases = [
                (ConstraintKind::Rotation, corotated_project(&f)),
                (ConstraintKind::Volume, volume_project(&f).unwrap()),
                (ConstraintKind::NhProx, nh_prox(&f, mu, lam, k).unwrap()),
                (ConstraintKind::LogBarrier, log_barrier_prox(&f, mu, lam, k).unwrap()),
            ];
            for (kind, res) in cases {
                let (p, _, dp) = constraint_reference(kind, &f, mu, lam, k).unwrap();
                assert!((p - res.p_star).abs().max() < 1e-9, "{kind:?}");
                let d = prox_differential(kind, &res, &params, 0.0).unwrap().to_matrix9();
                assert!((dp - d).abs().max() < 1e-7, "{kind:?} differential");
            }
        }
    }

    #[test]
    fn polar_differential_matches_fd() {
        let f = Matrix3::new(1.1, 0.2, -0.1, 0.05, 0.9, 0.3, -0.2, 0.1, 1.2);
        let d = polar_rotation_differential(&f).unwrap();
        let step = 1e-6;
        for col in 0..9 {
            let mut e = Vec9::zeros();
            e[col] = step;
            let fd = (polar_rotation(&(f + mat3(&e))).unwrap() - polar_rotation(&(f - mat3(&e))).unwrap()) / (2.0 * step);
            assert!((vec9(&fd) - d.column(col)).abs().max() < 1e-8);
        }
    }

    #[test]
    fn fd_gradient_examples() {
        let x = [1.0, -2.0, 0.5];
        let g = fd_gradient(&|p: &[f64]| p.iter().map(|v| v * v).sum(), &x, &[1e-4]);
        for i in 0..3 {
            assert!((g[i] - 2.0 * x[i]).abs() < 1e-8);
        }
        let g = fd_gradient(&|p: &[f64]| 3.0 * p[0] - p[1] + 2.0 * p[2], &x, &[1e-3]);
        assert!((g[0] - 3.0).abs() < 1e-9 && (g[1] + 1.0).abs() < 1e-9 && (g[2] - 2.0).abs() < 1e-9);
    }

    fn small_model(kind: EnergyKind) -> Model {
        let mesh = ingest_hex_grid([2, 1, 1], 0.1, 1000.0).unwrap();
        let params = MaterialParams {
            energy_kind: kind,
            ..Default::default()
        };
        let material = MaterialField::homogeneous(&mesh, 1e4, &params).unwrap();
        Model::new(mesh, material)
    }

    #[test]
    fn newton_rest_is_stationary() {
        let model = small_model(EnergyKind::NeoHookean);
        let q = model.mesh.rest_q();
        let out = newton_solve(&model, 0.01, &q, &q, &q, &NewtonConfig::default()).unwrap();
        assert!(out.iterations <= 1);
        assert!(out.q.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn clamp_and_abs_agree_in_convex_regime() {
        for kind in [EnergyKind::NeoHookean, EnergyKind::Corotated] {
            let model = small_model(kind);
            let q_t = model.mesh.rest_q();
            let q_tilde: Vec<f64> = q_t.iter().enumerate().map(|(i, x)| x + 1e-3 * ((i * 7 % 5) as f64 - 2.0)).collect();
            let mut cfg = NewtonConfig::default();
            let a = newton_solve(&model, 0.01, &q_t, &q_tilde, &q_t, &cfg).unwrap();
            cfg.filter = HessianFilter::Abs;
            let b = newton_solve(&model, 0.01, &q_t, &q_tilde, &q_t, &cfg).unwrap();
            assert!(a.q.iter().zip(&b.q).all(|(x, y)| (x - y).abs() < 1e-8));
            for w in a.energies.windows(2) {
                assert!(w[1] <= w[0] + 1e-13 * w[0].abs(), "{w:?}");
            }
        }
    }
}
