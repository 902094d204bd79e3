//! Material parameters, Neo-Hookean energy evaluation and projective weights.

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::TetMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnergyKind {
    Corotated,
    NeoHookean,
}

/// One projective constraint registered on every element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    /// Projection onto SO(3).
    Rotation,
    /// Projection onto det(F) = 1.
    Volume,
    /// Proximal map of the Neo-Hookean density with mesh-mean parameters.
    NhProx,
    /// Proximal map of the logarithmic volume barrier with per-element parameters.
    LogBarrier,
}

impl ConstraintKind {
    /// Weight of this constraint as a function of the element's Lamé pair.
    pub fn weight(self, mu: f64, lam: f64) -> f64 {
        match self {
            ConstraintKind::Rotation => 2.0 * mu,
            ConstraintKind::Volume | ConstraintKind::LogBarrier => lam,
            ConstraintKind::NhProx => 2.0 * mu + lam,
        }
    }
}

pub fn constraint_layout(kind: EnergyKind, log_barrier: bool) -> Vec<ConstraintKind> {
    match (kind, log_barrier) {
        (EnergyKind::Corotated, false) => vec![ConstraintKind::Rotation, ConstraintKind::Volume],
        (EnergyKind::Corotated, true) => vec![ConstraintKind::Rotation, ConstraintKind::LogBarrier],
        (EnergyKind::NeoHookean, false) => vec![ConstraintKind::NhProx],
        (EnergyKind::NeoHookean, true) => vec![ConstraintKind::NhProx, ConstraintKind::LogBarrier],
    }
}

pub fn lame_from_young_poisson(young: f64, poisson: f64) -> Result<(f64, f64)> {
    if !(0.0..0.5).contains(&poisson) {
        return Err(Error::InvalidPoisson(poisson));
    }
    let mu = young / (2.0 * (1.0 + poisson));
    let lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    Ok((mu, lam))
}

/// Projective weights of the base energy (without the optional barrier).
/// Neo-Hookean yields one weight, corotated yields the rotation/volume pair.
pub fn pd_weight(kind: EnergyKind, mu: f64, lam: f64) -> Vec<f64> {
    constraint_layout(kind, false).into_iter().map(|c| c.weight(mu, lam)).collect()
}

fn check_jacobian(f: &Matrix3<f64>) -> Result<f64> {
    let det = f.determinant();
    if det > 0.0 {
        Ok(det)
    } else {
        Err(Error::NonPositiveJacobian { det })
    }
}

pub fn nh_energy(f: &Matrix3<f64>, mu: f64, lam: f64) -> Result<f64> {
    let log_j = check_jacobian(f)?.ln();
    Ok(0.5 * mu * (f.norm_squared() - 3.0) - mu * log_j + 0.5 * lam * log_j * log_j)
}

pub fn nh_pk1(f: &Matrix3<f64>, mu: f64, lam: f64) -> Result<Matrix3<f64>> {
    let log_j = check_jacobian(f)?.ln();
    let f_inv_t = f.try_inverse().ok_or(Error::NonPositiveJacobian { det: 0.0 })?.transpose();
    Ok(mu * (f - f_inv_t) + lam * log_j * f_inv_t)
}

fn log_sum(s: &Vector3<f64>) -> f64 {
    s.iter().map(|x| x.ln()).sum()
}

/// Neo-Hookean density written over principal stretches.
pub fn nh_stretch_energy(s: &Vector3<f64>, mu: f64, lam: f64) -> f64 {
    let l = log_sum(s);
    0.5 * mu * (s.norm_squared() - 3.0) - mu * l + 0.5 * lam * l * l
}

pub fn nh_stretch_gradient(s: &Vector3<f64>, mu: f64, lam: f64) -> Vector3<f64> {
    let l = log_sum(s);
    Vector3::from_fn(|i, _| mu * (s[i] - 1.0 / s[i]) + lam * l / s[i])
}

/// Stretch-space Hessian of the Neo-Hookean density.
pub fn nh_stretch_hessian(s: &Vector3<f64>, mu: f64, lam: f64) -> Matrix3<f64> {
    let l = log_sum(s);
    Matrix3::from_fn(|i, j| {
        if i == j {
            mu * (1.0 + 1.0 / (s[i] * s[i])) + lam * (1.0 - l) / (s[i] * s[i])
        } else {
            lam / (s[i] * s[j])
        }
    })
}

/// Logarithmic volume barrier `−μ Σ ln σ + (λ/2)(Σ ln σ)²`.
pub fn barrier_stretch_energy(s: &Vector3<f64>, mu: f64, lam: f64) -> f64 {
    let l = log_sum(s);
    -mu * l + 0.5 * lam * l * l
}

pub fn barrier_stretch_gradient(s: &Vector3<f64>, mu: f64, lam: f64) -> Vector3<f64> {
    let l = log_sum(s);
    Vector3::from_fn(|i, _| (-mu + lam * l) / s[i])
}

pub fn barrier_stretch_hessian(s: &Vector3<f64>, mu: f64, lam: f64) -> Matrix3<f64> {
    let l = log_sum(s);
    Matrix3::from_fn(|i, j| {
        if i == j {
            (mu + lam * (1.0 - l)) / (s[i] * s[i])
        } else {
            lam / (s[i] * s[j])
        }
    })
}

/// Volume-weighted means `(μ̄, λ̄, k̄)` with `k̄ = 2μ̄ + λ̄`.
pub fn mesh_means(mu: &[f64], lam: &[f64], mesh: &TetMesh) -> (f64, f64, f64) {
    let total = mesh.total_volume();
    let mean = |vals: &[f64]| vals.iter().zip(&mesh.rest_volume).map(|(x, v)| x * v).sum::<f64>() / total;
    let mu_bar = mean(mu);
    let lam_bar = mean(lam);
    (mu_bar, lam_bar, 2.0 * mu_bar + lam_bar)
}

#[derive(Debug, Clone)]
pub struct MaterialParams {
    pub energy_kind: EnergyKind,
    pub log_volume_barrier: bool,
    pub poisson: f64,
    pub alpha: f64,
    pub beta0: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            energy_kind: EnergyKind::NeoHookean,
            log_volume_barrier: false,
            poisson: 0.4,
            alpha: 0.0,
            beta0: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaterialField {
    pub young: Vec<f64>,
    pub poisson: f64,
    pub mu: Vec<f64>,
    pub lam: Vec<f64>,
    /// Weight of the first registered constraint on each element.
    pub pd_weight: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub alpha: f64,
    pub mean_mu: f64,
    pub mean_lam: f64,
    pub mean_k: f64,
    pub energy_kind: EnergyKind,
    pub log_volume_barrier: bool,
    pub constraints: Vec<ConstraintKind>,
    /// `constraint_weights[c][e]` is the weight of constraint `c` on element `e`.
    pub constraint_weights: Vec<Vec<f64>>,
    frozen_means: Option<(f64, f64)>,
}

impl MaterialField {
    pub fn new(mesh: &TetMesh, young: Vec<f64>, params: &MaterialParams) -> Result<Self> {
        Self::build(mesh, young, params, None)
    }

    /// Same as [`MaterialField::new`] but with the mesh means pinned to the
    /// given `(μ̄, λ̄)` instead of being recomputed from `young`.
    pub fn with_frozen_means(mesh: &TetMesh, young: Vec<f64>, params: &MaterialParams, means: (f64, f64)) -> Result<Self> {
        Self::build(mesh, young, params, Some(means))
    }

    pub fn homogeneous(mesh: &TetMesh, young: f64, params: &MaterialParams) -> Result<Self> {
        Self::new(mesh, vec![young; mesh.n_elements()], params)
    }

    fn build(mesh: &TetMesh, young: Vec<f64>, params: &MaterialParams, frozen_means: Option<(f64, f64)>) -> Result<Self> {
        if young.len() != mesh.n_elements() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_elements(),
                got: young.len(),
            });
        }
        for (e, &y) in young.iter().enumerate() {
            if !(y > 0.0 && y.is_finite()) {
                return Err(Error::InvalidYoung { element: e, value: y });
            }
        }
        if !(params.alpha >= 0.0 && params.beta0 >= 0.0) {
            return Err(Error::InvalidConfig("damping coefficients must be non-negative".into()));
        }
        let mut mu = Vec::with_capacity(young.len());
        let mut lam = Vec::with_capacity(young.len());
        for &y in &young {
            let (m, l) = lame_from_young_poisson(y, params.poisson)?;
            mu.push(m);
            lam.push(l);
        }
        let (mean_mu, mean_lam, mean_k) = match frozen_means {
            Some((m, l)) => (m, l, 2.0 * m + l),
            None => mesh_means(&mu, &lam, mesh),
        };
        let constraints = constraint_layout(params.energy_kind, params.log_volume_barrier);
        let constraint_weights: Vec<Vec<f64>> = constraints
            .iter()
            .map(|c| mu.iter().zip(&lam).map(|(&m, &l)| c.weight(m, l)).collect())
            .collect();
        let mu_ref = mu.iter().cloned().fold(0.0, f64::max);
        let beta = mu.iter().map(|m| params.beta0 * m / mu_ref).collect();
        Ok(Self {
            pd_weight: constraint_weights[0].clone(),
            young,
            poisson: params.poisson,
            mu,
            lam,
            beta,
            beta0: params.beta0,
            alpha: params.alpha,
            mean_mu,
            mean_lam,
            mean_k,
            energy_kind: params.energy_kind,
            log_volume_barrier: params.log_volume_barrier,
            constraints,
            constraint_weights,
            frozen_means,
        })
    }

    pub fn params(&self) -> MaterialParams {
        MaterialParams {
            energy_kind: self.energy_kind,
            log_volume_barrier: self.log_volume_barrier,
            poisson: self.poisson,
            alpha: self.alpha,
            beta0: self.beta0,
        }
    }

    /// Rebuilds the field with new Young's moduli, keeping every other setting.
    pub fn with_young(&self, mesh: &TetMesh, young: Vec<f64>) -> Result<Self> {
        Self::build(mesh, young, &self.params(), self.frozen_means)
    }

    pub fn frozen_means(&self) -> Option<(f64, f64)> {
        self.frozen_means
    }

    pub fn n_elements(&self) -> usize {
        self.young.len()
    }

    /// Sum of all constraint weights on element `e`; this is what enters `A`.
    pub fn total_weight(&self, e: usize) -> f64 {
        self.constraint_weights.iter().map(|w| w[e]).sum()
    }

    /// Ratio of largest to smallest total element weight.
    pub fn weight_contrast(&self) -> f64 {
        let w: Vec<f64> = (0..self.n_elements()).map(|e| self.total_weight(e)).collect();
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        let min = w.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }

    /// Penalty used by the proximal map of constraint `c`.
    pub fn prox_penalty(&self, _c: ConstraintKind) -> f64 {
        self.mean_k
    }

    /// Fingerprint of everything that changes the assembled operator or the local step.
    pub fn version(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for y in &self.young {
            y.to_bits().hash(&mut h);
        }
        self.poisson.to_bits().hash(&mut h);
        self.alpha.to_bits().hash(&mut h);
        self.beta0.to_bits().hash(&mut h);
        self.energy_kind.hash(&mut h);
        self.log_volume_barrier.hash(&mut h);
        if let Some((m, l)) = self.frozen_means {
            m.to_bits().hash(&mut h);
            l.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_tet_mesh, ingest_hex_grid};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn lame_examples() {
        assert_eq!(lame_from_young_poisson(1.0, 0.0).unwrap(), (0.5, 0.0));
        let (mu, lam) = lame_from_young_poisson(1e6, 0.4).unwrap();
        assert!(close(mu, 1e6 / 2.8, 1e-14) && close(mu, 357142.857142857, 1e-9));
        assert!(close(lam, 4e5 / (1.4 * 0.2), 1e-14) && close(lam, 1428571.42857143, 1e-9));
        let (mu, lam) = lame_from_young_poisson(5e5, 0.45).unwrap();
        assert!(close(mu, 172413.793103448, 1e-9));
        assert!(close(lam, 1551724.13793103, 1e-9));
        assert_eq!(lame_from_young_poisson(1.0, 0.5), Err(Error::InvalidPoisson(0.5)));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(pd_weight(EnergyKind::NeoHookean, 0.5, 0.0), vec![1.0]);
        let (mu, lam) = lame_from_young_poisson(1e6, 0.4).unwrap();
        let w = pd_weight(EnergyKind::Corotated, mu, lam);
        assert!(close(w[0], 714285.714285714, 1e-9) && close(w[1], 1428571.42857143, 1e-9));
        let (mu2, lam2) = lame_from_young_poisson(2e6, 0.4).unwrap();
        let w2 = pd_weight(EnergyKind::Corotated, mu2, lam2);
        assert!(close(w2[0], 2.0 * w[0], 1e-15) && close(w2[1], 2.0 * w[1], 1e-15));
    }

    #[test]
    fn energy_examples() {
        let i = Matrix3::identity();
        assert_eq!(nh_energy(&i, 3.0, 5.0).unwrap(), 0.0);
        let psi = nh_energy(&(2.0 * i), 1.0, 0.0).unwrap();
        assert!((psi - (4.5 - 8f64.ln())).abs() < 1e-14);
        assert!((psi - 2.4206).abs() < 1e-4);
        let squash = |j: f64| Matrix3::from_diagonal(&Vector3::new(j, 1.0, 1.0));
        assert!(nh_energy(&squash(1e-6), 1.0, 1.0).unwrap() > nh_energy(&squash(1e-3), 1.0, 1.0).unwrap());
        assert!(matches!(nh_energy(&squash(-1.0), 1.0, 1.0), Err(Error::NonPositiveJacobian { .. })));
    }

    #[test]
    fn stress_examples() {
        assert_eq!(nh_pk1(&Matrix3::identity(), 1.0, 1.0).unwrap(), Matrix3::zeros());
        let p = nh_pk1(&Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)), 1.0, 0.0).unwrap();
        assert!((p - Matrix3::from_diagonal(&Vector3::new(1.5, 0.0, 0.0))).abs().max() < 1e-15);
    }

    fn fd_pk1(f: &Matrix3<f64>, mu: f64, lam: f64) -> Matrix3<f64> {
        let h = 1e-6;
        Matrix3::from_fn(|i, j| {
            let mut fp = *f;
            let mut fm = *f;
            fp[(i, j)] += h;
            fm[(i, j)] -= h;
            (nh_energy(&fp, mu, lam).unwrap() - nh_energy(&fm, mu, lam).unwrap()) / (2.0 * h)
        })
    }

    fn fd_stretch_hessian(s: &Vector3<f64>, mu: f64, lam: f64) -> Matrix3<f64> {
        let h = 1e-6;
        Matrix3::from_fn(|i, j| {
            let mut sp = *s;
            let mut sm = *s;
            sp[j] += h;
            sm[j] -= h;
            (nh_stretch_gradient(&sp, mu, lam)[i] - nh_stretch_gradient(&sm, mu, lam)[i]) / (2.0 * h)
        })
    }

    #[test]
    fn stretch_hessian_examples() {
        let one = Vector3::new(1.0, 1.0, 1.0);
        assert_eq!(nh_stretch_hessian(&one, 1.0, 0.0), 2.0 * Matrix3::identity());
        let h = nh_stretch_hessian(&one, 1.0, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(h[(i, j)], if i == j { 3.0 } else { 1.0 });
            }
        }
        let fd = fd_stretch_hessian(&one, 1.0, 1.0);
        assert!((fd - h).abs().max() <= 1e-6 * h.abs().max());
    }

    #[test]
    fn stretch_hessian_indefinite_somewhere() {
        // stretch-space indefiniteness needs Σ ln σ > 1, i.e. volumetric expansion
        let mut found = false;
        let grid: Vec<f64> = (1..=40).map(|k| 0.1 * k as f64).collect();
        'scan: for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let h = nh_stretch_hessian(&Vector3::new(a, b, c), 1.0, 10.0);
                    if SymmetricEigen::new(h).eigenvalues.min() < 0.0 {
                        found = true;
                        break 'scan;
                    }
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn stretch_hessian_pd_under_compression() {
        let grid: Vec<f64> = (1..=10).map(|k| 0.1 * k as f64).collect();
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let h = nh_stretch_hessian(&Vector3::new(a, b, c), 1.0, 50.0);
                    assert!(SymmetricEigen::new(h).eigenvalues.min() > 0.0);
                }
            }
        }
    }

    #[test]
    fn means_examples() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, -1.0),
        ];
        let mesh = build_tet_mesh(pts, vec![[0, 1, 2, 3], [0, 2, 1, 4]], 1.0).unwrap();
        let (mu_bar, lam_bar, k_bar) = mesh_means(&[1.0, 3.0], &[0.0, 2.0], &mesh);
        assert!((mu_bar - 2.0).abs() < 1e-15 && (lam_bar - 1.0).abs() < 1e-15 && (k_bar - 5.0).abs() < 1e-15);
        let scaled = build_tet_mesh(mesh.rest_positions.iter().map(|p| p * 3.0).collect(), mesh.elements.clone(), 1.0).unwrap();
        let (m2, l2, _) = mesh_means(&[1.0, 3.0], &[0.0, 2.0], &scaled);
        assert!((m2 - mu_bar).abs() < 1e-14 && (l2 - lam_bar).abs() < 1e-14);
        let field = MaterialField::homogeneous(&mesh, 1e5, &MaterialParams::default()).unwrap();
        assert!(close(field.mean_mu, field.mu[0], 1e-15) && close(field.mean_lam, field.lam[0], 1e-15));
    }

    #[test]
    fn damping_follows_stiffness() {
        let mesh = ingest_hex_grid([2, 1, 1], 1.0, 1.0).unwrap();
        let young: Vec<f64> = (0..12).map(|e| 1e5 * (1.0 + (e * 5 % 7) as f64)).collect();
        let params = MaterialParams {
            beta0: 0.05,
            ..Default::default()
        };
        let field = MaterialField::new(&mesh, young, &params).unwrap();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&field.beta), argmax(&field.mu));
        assert_eq!(field.beta.iter().cloned().fold(0.0, f64::max), 0.05);
        for a in 0..12 {
            for b in 0..12 {
                assert_eq!(field.mu[a] < field.mu[b], field.beta[a] < field.beta[b]);
            }
        }
    }

    proptest! {
        #[test]
        fn pk1_is_energy_gradient(
            d in prop::array::uniform9(-0.3f64..0.3),
            mu in 0.1f64..5.0,
            lam in 0.0f64..5.0,
        ) {
            let f = Matrix3::identity() + Matrix3::from_column_slice(&d);
            prop_assume!(f.determinant() > 0.2);
            let p = nh_pk1(&f, mu, lam).unwrap();
            let fd = fd_pk1(&f, mu, lam);
            prop_assert!((p - fd).abs().max() <= 1e-6 * p.abs().max().max(1.0));
        }

        #[test]
        fn stretch_hessian_matches_fd(s in prop::array::uniform3(0.3f64..3.0), mu in 0.1f64..5.0, lam in 0.0f64..5.0) {
            let s = Vector3::from(s);
            let h = nh_stretch_hessian(&s, mu, lam);
            prop_assert!((h - h.transpose()).abs().max() == 0.0);
            let fd = fd_stretch_hessian(&s, mu, lam);
            prop_assert!((h - fd).abs().max() <= 1e-6 * h.abs().max());
        }

        #[test]
        fn weights_route_through_mu(e1 in 1e3f64..1e8, e2 in 1e3f64..1e8, nu in 0.0f64..0.49) {
            let (mu1, lam1) = lame_from_young_poisson(e1, nu).unwrap();
            let (mu2, lam2) = lame_from_young_poisson(e2, nu).unwrap();
            let w1 = pd_weight(EnergyKind::NeoHookean, mu1, lam1)[0];
            let w2 = pd_weight(EnergyKind::NeoHookean, mu2, lam2)[0];
            prop_assert!(((w1 / w2) - (mu1 / mu2)).abs() <= 1e-12 * (mu1 / mu2));
            prop_assert_eq!(e1 < e2, w1 < w2);
        }
    }
}
