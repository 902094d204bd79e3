//! Per-element local step: projections and proximal maps over principal
//! stretches, plus their differentials for the backward pass.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::material::{
    barrier_stretch_energy, barrier_stretch_gradient, barrier_stretch_hessian, nh_stretch_energy, nh_stretch_gradient, nh_stretch_hessian,
    ConstraintKind,
};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const NEWTON_MAX_ITERS: usize = 50;
pub const BACKTRACK_HALVINGS: usize = 30;
pub const PROX_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub p_star: Matrix3<f64>,
    pub sigma_star: Vector3<f64>,
    pub u_rot: Matrix3<f64>,
    pub v_rot: Matrix3<f64>,
    pub sigma_f: Vector3<f64>,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxHessian {
    pub h_prox: Matrix3<f64>,
    pub tau: f64,
    pub h_filtered: Matrix3<f64>,
}

/// Parameters of one constraint's local problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxParams {
    pub mu: f64,
    pub lam: f64,
    pub k: f64,
}

/// SVD with `det(U) = det(V) = +1`. Singular values are sorted in decreasing
/// order; a reflection shows up as a negative last value.
pub fn signed_svd(f: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = f.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut u_sorted = Matrix3::zeros();
    let mut v_sorted = Matrix3::zeros();
    let mut sigma = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v_t.row(src).transpose());
        sigma[dst] = s[src];
    }
    if u_sorted.determinant() < 0.0 {
        let c = -u_sorted.column(2);
        u_sorted.set_column(2, &c);
        sigma[2] = -sigma[2];
    }
    if v_sorted.determinant() < 0.0 {
        let c = -v_sorted.column(2);
        v_sorted.set_column(2, &c);
        sigma[2] = -sigma[2];
    }
    (u_sorted, sigma, v_sorted)
}

fn recompose(u: &Matrix3<f64>, s: &Vector3<f64>, v: &Matrix3<f64>) -> Matrix3<f64> {
    u * Matrix3::from_diagonal(s) * v.transpose()
}

pub fn corotated_project(f: &Matrix3<f64>) -> ProxResult {
    let (u, sigma_f, v) = signed_svd(f);
    let ones = Vector3::new(1.0, 1.0, 1.0);
    ProxResult {
        p_star: u * v.transpose(),
        sigma_star: ones,
        u_rot: u,
        v_rot: v,
        sigma_f,
        newton_iters: 0,
    }
}

/// Stretches of the closest point with unit determinant. Each satisfies
/// `s_i² − σ_i s_i − ν = 0` for a shared multiplier `ν` fixed by `Σ ln s_i = 0`.
/// Large uniform stretches collapse the smallest axis, which takes the lower root.
fn volume_stretches(sigma: &Vector3<f64>) -> Result<Vector3<f64>> {
    let stretches = |nu: f64, lower: bool| {
        Vector3::from_fn(|i, _| {
            let root = (sigma[i] * sigma[i] + 4.0 * nu).max(0.0).sqrt();
            if lower && i == 2 {
                0.5 * (sigma[i] - root)
            } else {
                0.5 * (sigma[i] + root)
            }
        })
    };
    let log_sum = |s: &Vector3<f64>| s.iter().map(|x| x.ln()).sum::<f64>();
    let lo = if sigma[2] > 0.0 { -0.25 * sigma[2] * sigma[2] } else { 0.0 };
    let lower = sigma[2] > 0.0 && log_sum(&stretches(lo, false)) > 0.0;
    // bracket ends where the log-sum is positive and negative
    let (mut pos, mut neg) = if lower {
        (lo, 0.0)
    } else {
        let mut hi = 1.0f64;
        while log_sum(&stretches(hi, false)) < 0.0 {
            hi *= 4.0;
            if hi > 1e300 {
                return Err(Error::ProxDiverged {
                    iterations: 0,
                    residual: f64::INFINITY,
                });
            }
        }
        (hi, lo)
    };
    let mut nu = if !lower && lo < 0.0 { 0.0 } else { 0.5 * (pos + neg) };
    for _ in 0..300 {
        let s = stretches(nu, lower);
        let r = log_sum(&s);
        if r.abs() < 1e-15 {
            return Ok(s);
        }
        if r > 0.0 {
            pos = nu;
        } else {
            neg = nu;
        }
        let dr: f64 = (0..3).map(|i| 1.0 / (s[i] * (2.0 * s[i] - sigma[i]))).sum();
        let mut next = nu - r / dr;
        let (a, b) = (pos.min(neg), pos.max(neg));
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if next == nu || (b - a) <= 1e-17 * b.abs().max(a.abs()) {
            return Ok(stretches(next, lower));
        }
        nu = next;
    }
    Ok(stretches(nu, lower))
}

pub fn volume_project(f: &Matrix3<f64>) -> Result<ProxResult> {
    let (u, sigma_f, v) = signed_svd(f);
    let s = volume_stretches(&sigma_f)?;
    Ok(ProxResult {
        p_star: recompose(&u, &s, &v),
        sigma_star: s,
        u_rot: u,
        v_rot: v,
        sigma_f,
        newton_iters: 0,
    })
}

/// Jacobian `∂s/∂σ` of [`volume_stretches`].
fn volume_stretch_jacobian(sigma: &Vector3<f64>, s: &Vector3<f64>) -> Matrix3<f64> {
    let denom = Vector3::from_fn(|i, _| 2.0 * s[i] - sigma[i]);
    let a = Vector3::from_fn(|i, _| s[i] / denom[i]);
    let c = Vector3::from_fn(|i, _| -1.0 / denom[i]);
    let a_over_s = Vector3::from_fn(|i, _| a[i] / s[i]);
    let c_over_s: f64 = (0..3).map(|i| c[i] / s[i]).sum();
    Matrix3::from_diagonal(&a) - c * a_over_s.transpose() / c_over_s
}

/// Smooth stretch-space density used inside a proximal map.
trait StretchEnergy {
    fn value(&self, s: &Vector3<f64>) -> f64;
    fn gradient(&self, s: &Vector3<f64>) -> Vector3<f64>;
    fn hessian(&self, s: &Vector3<f64>) -> Matrix3<f64>;
}

struct NeoHookeanStretch(f64, f64);
struct BarrierStretch(f64, f64);

impl StretchEnergy for NeoHookeanStretch {
    fn value(&self, s: &Vector3<f64>) -> f64 {
        nh_stretch_energy(s, self.0, self.1)
    }
    fn gradient(&self, s: &Vector3<f64>) -> Vector3<f64> {
        nh_stretch_gradient(s, self.0, self.1)
    }
    fn hessian(&self, s: &Vector3<f64>) -> Matrix3<f64> {
        nh_stretch_hessian(s, self.0, self.1)
    }
}

impl StretchEnergy for BarrierStretch {
    fn value(&self, s: &Vector3<f64>) -> f64 {
        barrier_stretch_energy(s, self.0, self.1)
    }
    fn gradient(&self, s: &Vector3<f64>) -> Vector3<f64> {
        barrier_stretch_gradient(s, self.0, self.1)
    }
    fn hessian(&self, s: &Vector3<f64>) -> Matrix3<f64> {
        barrier_stretch_hessian(s, self.0, self.1)
    }
}

/// Minimizes `(k/2)‖σ − σ_F‖² + E(σ)` over `σ > 0` with damped Newton.
fn stretch_prox(energy: &impl StretchEnergy, sigma_f: &Vector3<f64>, k: f64) -> Result<(Vector3<f64>, usize)> {
    if !(k > 0.0) {
        return Err(Error::InvalidConfig(format!("prox penalty must be positive, got {k}")));
    }
    let objective = |s: &Vector3<f64>| 0.5 * k * (s - sigma_f).norm_squared() + energy.value(s);
    let residual = |s: &Vector3<f64>| k * (s - sigma_f) + energy.gradient(s);
    let mut s = sigma_f.map(|x| x.max(1e-2));
    let mut r = residual(&s);
    let mut obj = objective(&s);
    // objective changes below this are lost to cancellation in the energy terms
    let noise = 1e-12 * k * (1.0 + sigma_f.norm_squared());
    let mut iters = 0;
    while iters < NEWTON_MAX_ITERS && r.norm() > 1e-13 * k {
        iters += 1;
        let h = energy.hessian(&s) + k * Matrix3::identity();
        let eig = SymmetricEigen::new(h);
        let floor = 1e-8 * k;
        let inv_vals = eig.eigenvalues.map(|l| 1.0 / l.abs().max(floor));
        let dir = -(eig.eigenvectors * Matrix3::from_diagonal(&inv_vals) * eig.eigenvectors.transpose() * r);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..BACKTRACK_HALVINGS {
            let trial = (s + step * dir).map(|x| x.max(SIGMA_FLOOR));
            let trial_obj = objective(&trial);
            let trial_r = residual(&trial);
            if trial_obj.is_finite() && (trial_obj < obj || (trial_obj <= obj + noise + 1e-14 * obj.abs() && trial_r.norm() < r.norm())) {
                s = trial;
                obj = trial_obj;
                r = trial_r;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let res = r.norm();
    if res > PROX_RESIDUAL_TOL * k || !res.is_finite() {
        return Err(Error::ProxDiverged {
            iterations: iters,
            residual: res,
        });
    }
    Ok((s, iters))
}

fn prox_with(energy: &impl StretchEnergy, f: &Matrix3<f64>, k: f64) -> Result<ProxResult> {
    let (u, sigma_f, v) = signed_svd(f);
    let (s, iters) = stretch_prox(energy, &sigma_f, k)?;
    Ok(ProxResult {
        p_star: recompose(&u, &s, &v),
        sigma_star: s,
        u_rot: u,
        v_rot: v,
        sigma_f,
        newton_iters: iters,
    })
}

/// Proximal map of the Neo-Hookean density with penalty `k`.
pub fn nh_prox(f: &Matrix3<f64>, mu: f64, lam: f64, k: f64) -> Result<ProxResult> {
    prox_with(&NeoHookeanStretch(mu, lam), f, k)
}

/// Proximal map of the logarithmic volume barrier with penalty `k`.
pub fn log_barrier_prox(f: &Matrix3<f64>, mu: f64, lam: f64, k: f64) -> Result<ProxResult> {
    prox_with(&BarrierStretch(mu, lam), f, k)
}

/// Runs the local step of constraint `kind`.
pub fn project(kind: ConstraintKind, f: &Matrix3<f64>, params: &ProxParams) -> Result<ProxResult> {
    match kind {
        ConstraintKind::Rotation => Ok(corotated_project(f)),
        ConstraintKind::Volume => volume_project(f),
        ConstraintKind::NhProx => nh_prox(f, params.mu, params.lam, params.k),
        ConstraintKind::LogBarrier => log_barrier_prox(f, params.mu, params.lam, params.k),
    }
}

/// Penalty-scaled stretch potential `φ(p*)/k` of a proximal constraint;
/// zero for pure projections.
pub fn prox_potential(kind: ConstraintKind, sigma_star: &Vector3<f64>, params: &ProxParams) -> f64 {
    match kind {
        ConstraintKind::Rotation | ConstraintKind::Volume => 0.0,
        ConstraintKind::NhProx => nh_stretch_energy(sigma_star, params.mu, params.lam) / params.k,
        ConstraintKind::LogBarrier => barrier_stretch_energy(sigma_star, params.mu, params.lam) / params.k,
    }
}

/// Unfiltered prox-map Hessian `H_ψ(σ*) + k̄ I`.
pub fn prox_hessian(sigma_star: &Vector3<f64>, mu: f64, lam: f64, k: f64) -> Matrix3<f64> {
    nh_stretch_hessian(sigma_star, mu, lam) + k * Matrix3::identity()
}

fn constraint_prox_hessian(kind: ConstraintKind, sigma_star: &Vector3<f64>, params: &ProxParams) -> Option<Matrix3<f64>> {
    match kind {
        ConstraintKind::NhProx => Some(prox_hessian(sigma_star, params.mu, params.lam, params.k)),
        ConstraintKind::LogBarrier => Some(barrier_stretch_hessian(sigma_star, params.mu, params.lam) + params.k * Matrix3::identity()),
        _ => None,
    }
}

/// `(1 − τ) H + τ |H|` through a symmetric eigendecomposition.
pub fn tr_blend(h: &Matrix3<f64>, tau: f64) -> ProxHessian {
    let h_filtered = if tau == 0.0 {
        *h
    } else {
        let eig = SymmetricEigen::new(*h);
        let vals = eig.eigenvalues.map(|l| (1.0 - tau) * l + tau * l.abs());
        eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
    };
    ProxHessian {
        h_prox: *h,
        tau,
        h_filtered,
    }
}

/// Differential of a spectral map `F = U diag(σ) Vᵀ ↦ U diag(f(σ)) Vᵀ`
/// given the stretch Jacobian `D = ∂f/∂σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDifferential {
    pub u: Matrix3<f64>,
    pub v: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub f: Vector3<f64>,
    pub d: Matrix3<f64>,
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

impl SpectralDifferential {
    fn pair_coefficients(&self, i: usize, j: usize) -> (f64, f64) {
        let (si, sj) = (self.sigma[i], self.sigma[j]);
        let scale = 1f64.max(si.abs()).max(sj.abs());
        let sym = if (si - sj).abs() < 1e-8 * scale {
            0.5 * (self.d[(i, i)] - self.d[(i, j)] + self.d[(j, j)] - self.d[(j, i)])
        } else {
            (self.f[i] - self.f[j]) / (si - sj)
        };
        let sum = si + sj;
        let sum = if sum.abs() < 1e-12 * scale {
            (1e-12 * scale).copysign(sum)
        } else {
            sum
        };
        let skew = (self.f[i] + self.f[j]) / sum;
        (sym, skew)
    }

    pub fn apply(&self, df: &Matrix3<f64>) -> Matrix3<f64> {
        let k = self.u.transpose() * df * self.v;
        let mut out = Matrix3::zeros();
        let diag = self.d * Vector3::new(k[(0, 0)], k[(1, 1)], k[(2, 2)]);
        for i in 0..3 {
            out[(i, i)] = diag[i];
        }
        for (i, j) in PAIRS {
            let (sym, skew) = self.pair_coefficients(i, j);
            let a = 0.5 * (k[(i, j)] + k[(j, i)]);
            let b = 0.5 * (k[(i, j)] - k[(j, i)]);
            out[(i, j)] = sym * a + skew * b;
            out[(j, i)] = sym * a - skew * b;
        }
        self.u * out * self.v.transpose()
    }

    /// Dense 9×9 matrix acting on column-major `vec(dF)`.
    pub fn to_matrix9(&self) -> SMatrix<f64, 9, 9> {
        let mut m = SMatrix::<f64, 9, 9>::zeros();
        for col in 0..9 {
            let mut df = Matrix3::zeros();
            df[(col % 3, col / 3)] = 1.0;
            let dp = self.apply(&df);
            for j in 0..3 {
                for i in 0..3 {
                    m[(3 * j + i, col)] = dp[(i, j)];
                }
            }
        }
        m
    }
}

/// Linearization `∂p*/∂F` of a converged local step. Proximal constraints use
/// the `τ`-filtered prox Hessian; projections are differentiated exactly.
pub fn prox_differential(kind: ConstraintKind, result: &ProxResult, params: &ProxParams, tau: f64) -> Result<SpectralDifferential> {
    let d = match kind {
        ConstraintKind::Rotation => Matrix3::zeros(),
        ConstraintKind::Volume => volume_stretch_jacobian(&result.sigma_f, &result.sigma_star),
        ConstraintKind::NhProx | ConstraintKind::LogBarrier => {
            let h = constraint_prox_hessian(kind, &result.sigma_star, params).expect("prox constraint");
            let filtered = tr_blend(&h, tau).h_filtered;
            filtered_solve(&filtered, params.k)? * params.k
        }
    };
    Ok(SpectralDifferential {
        u: result.u_rot,
        v: result.v_rot,
        sigma: result.sigma_f,
        f: result.sigma_star,
        d,
    })
}

fn filtered_solve(h: &Matrix3<f64>, k: f64) -> Result<Matrix3<f64>> {
    let min_eig = SymmetricEigen::new(*h).eigenvalues.min();
    if min_eig.abs() < 1e-12 * k {
        return Err(Error::SingularFilteredHessian { min_eigenvalue: min_eig });
    }
    h.try_inverse().ok_or(Error::SingularFilteredHessian { min_eigenvalue: min_eig })
}

/// Sensitivity of the barrier prox target to the element's own `(μ_e, λ_e)`,
/// returned as `(∂p*/∂μ_e, ∂p*/∂λ_e)`.
pub fn barrier_parameter_sensitivity(result: &ProxResult, params: &ProxParams, tau: f64) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    let s = &result.sigma_star;
    let h = barrier_stretch_hessian(s, params.mu, params.lam) + params.k * Matrix3::identity();
    let inv = filtered_solve(&tr_blend(&h, tau).h_filtered, params.k)?;
    let l: f64 = s.iter().map(|x| x.ln()).sum();
    // ∂(∇φ)/∂μ = −1/σ, ∂(∇φ)/∂λ = L/σ
    let d_mu = inv * s.map(|x| 1.0 / x);
    let d_lam = -(inv * s.map(|x| l / x));
    let lift = |ds: Vector3<f64>| recompose(&result.u_rot, &ds, &result.v_rot);
    Ok((lift(d_mu), lift(d_lam)))
}
