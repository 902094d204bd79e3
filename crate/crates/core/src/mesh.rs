//! Tetrahedral meshes, per-element deformation-gradient operators and lumped mass.
//!
//! Degrees of freedom are interleaved: vertex `v` owns entries `3v..3v+3` of
//! every position-like vector. `vec(F)` is column-major, so entry `3j + i`
//! holds `F[(i, j)]`.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};

/// Elements with a rest volume below this are rejected.
pub const VOLUME_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TetMesh {
    pub rest_positions: Vec<Vector3<f64>>,
    pub elements: Vec<[usize; 4]>,
    pub rest_volume: Vec<f64>,
    pub dm_inverse: Vec<Matrix3<f64>>,
    pub density: f64,
    /// Diagonal of the lumped mass matrix, one entry per DoF.
    pub lumped_mass: Vec<f64>,
    shape_gradients: Vec<[Vector3<f64>; 4]>,
    topology_id: u64,
}

/// Dense 9×12 map from an element's vertex positions to `vec(F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementOperator {
    pub block: SMatrix<f64, 9, 12>,
    pub dofs: [usize; 12],
}

impl ElementOperator {
    pub fn apply(&self, q: &[f64]) -> SMatrix<f64, 9, 1> {
        let mut local = SMatrix::<f64, 12, 1>::zeros();
        for (k, &d) in self.dofs.iter().enumerate() {
            local[k] = q[d];
        }
        self.block * local
    }
}

impl TetMesh {
    pub fn new(rest_positions: Vec<Vector3<f64>>, elements: Vec<[usize; 4]>, density: f64) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if !(density > 0.0) {
            return Err(Error::InvalidConfig(format!("density must be positive, got {density}")));
        }
        let n_v = rest_positions.len();
        let mut rest_volume = Vec::with_capacity(elements.len());
        let mut dm_inverse = Vec::with_capacity(elements.len());
        let mut shape_gradients = Vec::with_capacity(elements.len());
        for (e, tet) in elements.iter().enumerate() {
            for &v in tet {
                if v >= n_v {
                    return Err(Error::IndexOutOfRange {
                        element: e,
                        vertex: v,
                        n_vertices: n_v,
                    });
                }
            }
            let x0 = rest_positions[tet[0]];
            let dm = Matrix3::from_columns(&[
                rest_positions[tet[1]] - x0,
                rest_positions[tet[2]] - x0,
                rest_positions[tet[3]] - x0,
            ]);
            let volume = dm.determinant() / 6.0;
            if !(volume >= VOLUME_EPSILON) {
                return Err(Error::DegenerateElement { element: e, volume });
            }
            let inv = dm.try_inverse().ok_or(Error::DegenerateElement { element: e, volume })?;
            let g1: Vector3<f64> = inv.row(0).transpose();
            let g2: Vector3<f64> = inv.row(1).transpose();
            let g3: Vector3<f64> = inv.row(2).transpose();
            shape_gradients.push([-(g1 + g2 + g3), g1, g2, g3]);
            rest_volume.push(volume);
            dm_inverse.push(inv);
        }
        let mut lumped_mass = vec![0.0; 3 * n_v];
        for (tet, &vol) in elements.iter().zip(&rest_volume) {
            let quarter = density * vol / 4.0;
            for &v in tet {
                for axis in 0..3 {
                    lumped_mass[3 * v + axis] += quarter;
                }
            }
        }
        let topology_id = {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            n_v.hash(&mut h);
            elements.hash(&mut h);
            h.finish()
        };
        Ok(Self {
            rest_positions,
            elements,
            rest_volume,
            dm_inverse,
            density,
            lumped_mass,
            shape_gradients,
            topology_id,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.rest_positions.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.n_vertices()
    }

    pub fn vertex_mass(&self, v: usize) -> f64 {
        self.lumped_mass[3 * v]
    }

    pub fn topology_id(&self) -> u64 {
        self.topology_id
    }

    pub fn total_volume(&self) -> f64 {
        self.rest_volume.iter().sum()
    }

    /// Gradients of the four barycentric shape functions of element `e`.
    pub fn shape_gradients(&self, e: usize) -> &[Vector3<f64>; 4] {
        &self.shape_gradients[e]
    }

    pub fn rest_q(&self) -> Vec<f64> {
        flatten(&self.rest_positions)
    }

    pub fn element_dofs(&self, e: usize) -> [usize; 12] {
        let tet = self.elements[e];
        std::array::from_fn(|k| 3 * tet[k / 3] + k % 3)
    }

    pub fn element_operator(&self, e: usize) -> ElementOperator {
        let g = &self.shape_gradients[e];
        let mut block = SMatrix::<f64, 9, 12>::zeros();
        for (a, ga) in g.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    block[(3 * j + i, 3 * a + i)] = ga[j];
                }
            }
        }
        ElementOperator {
            block,
            dofs: self.element_dofs(e),
        }
    }

    /// `F_e = Σ_a x_a g_aᵀ` evaluated at the positions `q`.
    pub fn deformation_gradient(&self, e: usize, q: &[f64]) -> Matrix3<f64> {
        let tet = self.elements[e];
        let g = &self.shape_gradients[e];
        let mut f = Matrix3::zeros();
        for a in 0..4 {
            let x = Vector3::new(q[3 * tet[a]], q[3 * tet[a] + 1], q[3 * tet[a] + 2]);
            f += x * g[a].transpose();
        }
        f
    }

    /// Element contribution `G_eᵀ vec(P)` as four per-vertex 3-vectors.
    pub fn gradient_transpose(&self, e: usize, p: &Matrix3<f64>) -> [Vector3<f64>; 4] {
        let g = &self.shape_gradients[e];
        std::array::from_fn(|a| p * g[a])
    }

    /// Vertices on the boundary surface (faces used by exactly one element).
    pub fn boundary_vertices(&self) -> Vec<usize> {
        let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
        for tet in &self.elements {
            for skip in 0..4 {
                let mut face = [0; 3];
                let mut k = 0;
                for (i, &v) in tet.iter().enumerate() {
                    if i != skip {
                        face[k] = v;
                        k += 1;
                    }
                }
                face.sort_unstable();
                *counts.entry(face).or_insert(0) += 1;
            }
        }
        let mut on_boundary = vec![false; self.n_vertices()];
        for (face, c) in counts {
            if c == 1 {
                for v in face {
                    on_boundary[v] = true;
                }
            }
        }
        (0..self.n_vertices()).filter(|&v| on_boundary[v]).collect()
    }

    pub fn element_centroid(&self, e: usize) -> Vector3<f64> {
        let tet = self.elements[e];
        tet.iter().map(|&v| self.rest_positions[v]).sum::<Vector3<f64>>() / 4.0
    }
}

pub fn flatten(points: &[Vector3<f64>]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn vertex(q: &[f64], v: usize) -> Vector3<f64> {
    Vector3::new(q[3 * v], q[3 * v + 1], q[3 * v + 2])
}

pub fn build_tet_mesh(rest_positions: Vec<Vector3<f64>>, elements: Vec<[usize; 4]>, density: f64) -> Result<TetMesh> {
    TetMesh::new(rest_positions, elements, density)
}

/// Kuhn paths through the unit cube: each permutation of the axes walks
/// from corner 000 to 111, giving six tets sharing that diagonal.
const KUHN_PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Axis-aligned box of `dims` hexahedral cells, each split into six tets.
/// Cells are mirrored by index parity so the split diagonals alternate.
pub fn ingest_hex_grid(dims: [usize; 3], spacing: f64, density: f64) -> Result<TetMesh> {
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!("grid dims must be at least 1, got {dims:?}")));
    }
    let [nx, ny, nz] = dims;
    let index = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut positions = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                positions.push(Vector3::new(i as f64, j as f64, k as f64) * spacing);
            }
        }
    }
    let mut elements = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mirror = [i % 2, j % 2, k % 2];
                let corner = |bits: [usize; 3]| {
                    let b = [bits[0] ^ mirror[0], bits[1] ^ mirror[1], bits[2] ^ mirror[2]];
                    index(i + b[0], j + b[1], k + b[2])
                };
                for perm in KUHN_PERMUTATIONS {
                    let mut bits = [0usize; 3];
                    let mut tet = [corner(bits); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        bits[axis] = 1;
                        tet[step + 1] = corner(bits);
                    }
                    let x0 = positions[tet[0]];
                    let det =
                        Matrix3::from_columns(&[positions[tet[1]] - x0, positions[tet[2]] - x0, positions[tet[3]] - x0]).determinant();
                    if det < 0.0 {
                        tet.swap(2, 3);
                    }
                    elements.push(tet);
                }
            }
        }
    }
    TetMesh::new(positions, elements, density)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_tet() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]
    }

    #[test]
    fn unit_tet_volume_and_mass() {
        let m = build_tet_mesh(unit_tet(), vec![[0, 1, 2, 3]], 6.0).unwrap();
        assert!((m.rest_volume[0] - 1.0 / 6.0).abs() < 1e-15);
        for &mass in &m.lumped_mass {
            assert!((mass - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn inverted_tet_rejected() {
        let err = build_tet_mesh(unit_tet(), vec![[0, 2, 1, 3]], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateElement { element: 0, .. }));
    }

    #[test]
    fn out_of_range_rejected() {
        let err = build_tet_mesh(unit_tet(), vec![[0, 1, 2, 7]], 1.0).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { vertex: 7, .. }));
    }

    #[test]
    fn shared_face_accumulates_mass() {
        let mut pts = unit_tet();
        pts.push(Vector3::new(1.0, 1.0, 1.0));
        let m = build_tet_mesh(pts, vec![[0, 1, 2, 3], [1, 2, 3, 4]], 1.0).unwrap();
        let v0 = m.rest_volume[0];
        let v1 = m.rest_volume[1];
        assert!((m.vertex_mass(0) - v0 / 4.0).abs() < 1e-15);
        assert!((m.vertex_mass(1) - (v0 + v1) / 4.0).abs() < 1e-15);
        assert!((m.vertex_mass(4) - v1 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn hex_grid_counts() {
        let m = ingest_hex_grid([1, 1, 1], 1.0, 1.0).unwrap();
        assert_eq!(m.n_elements(), 6);
        assert!((m.total_volume() - 1.0).abs() < 1e-12);
        let m = ingest_hex_grid([2, 1, 1], 1.0, 1.0).unwrap();
        assert_eq!(m.n_elements(), 12);
        assert_eq!(m.n_vertices(), 12);
        let m = ingest_hex_grid([25, 25, 1], 0.01, 1.0).unwrap();
        assert_eq!(m.n_elements(), 3750);
        assert!((m.total_volume() - 25.0 * 25.0 * 1e-6).abs() < 1e-12 * 25.0 * 25.0 * 1e-6);
    }

    #[test]
    fn hex_grid_is_conforming() {
        // every interior face must be shared by exactly two tets
        let m = ingest_hex_grid([3, 2, 2], 0.5, 1.0).unwrap();
        let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
        for tet in &m.elements {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| tet[i]).collect();
                f.sort_unstable();
                *counts.entry([f[0], f[1], f[2]]).or_insert(0) += 1;
            }
        }
        let boundary_faces = counts.values().filter(|&&c| c == 1).count();
        assert!(counts.values().all(|&c| c <= 2));
        // a 3×2×2 box has 2(3·2 + 3·2 + 2·2) = 32 quads, two triangles each
        assert_eq!(boundary_faces, 64);
        assert_eq!(m.boundary_vertices().len(), m.n_vertices() - 2);
    }

    #[test]
    fn mass_sums_to_total() {
        let m = ingest_hex_grid([3, 2, 1], 0.1, 1000.0).unwrap();
        let axis_sum: f64 = (0..m.n_vertices()).map(|v| m.lumped_mass[3 * v]).sum();
        let expected = 1000.0 * m.total_volume();
        assert!((axis_sum - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn operator_matches_fd() {
        let m = ingest_hex_grid([1, 1, 1], 1.0, 1.0).unwrap();
        let q: Vec<f64> = m
            .rest_q()
            .iter()
            .enumerate()
            .map(|(i, x)| x + 0.1 * ((i * 7 % 5) as f64 - 2.0))
            .collect();
        for e in 0..m.n_elements() {
            let op = m.element_operator(e);
            for (k, &d) in op.dofs.iter().enumerate() {
                let h = 1e-6;
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[d] += h;
                qm[d] -= h;
                let fp = m.deformation_gradient(e, &qp);
                let fm = m.deformation_gradient(e, &qm);
                let fd = (fp - fm) / (2.0 * h);
                for j in 0..3 {
                    for i in 0..3 {
                        assert!((fd[(i, j)] - op.block[(3 * j + i, k)]).abs() < 1e-10);
                    }
                }
            }
            let vf = op.apply(&q);
            let f = m.deformation_gradient(e, &q);
            for j in 0..3 {
                for i in 0..3 {
                    assert!((vf[3 * j + i] - f[(i, j)]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn scaling_gives_scaled_identity() {
        let m = ingest_hex_grid([2, 2, 1], 0.3, 1.0).unwrap();
        let q: Vec<f64> = m.rest_q().iter().map(|x| 2.0 * x).collect();
        for e in 0..m.n_elements() {
            let f = m.deformation_gradient(e, &q);
            assert!((f - Matrix3::<f64>::identity() * 2.0).abs().max() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rest_gradient_is_identity(nx in 1usize..4, ny in 1usize..3, nz in 1usize..3, s in 0.01f64..2.0) {
            let m = ingest_hex_grid([nx, ny, nz], s, 1.0).unwrap();
            let q = m.rest_q();
            for e in 0..m.n_elements() {
                let f = m.deformation_gradient(e, &q);
                prop_assert!((f - Matrix3::identity()).abs().max() < 1e-12);
            }
            let vol = (nx * ny * nz) as f64 * s.powi(3);
            prop_assert!((m.total_volume() - vol).abs() <= 1e-12 * vol);
        }

        #[test]
        fn operator_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let m = ingest_hex_grid([1, 1, 1], 1.0, 1.0).unwrap();
            let n = m.n_dofs();
            let q1: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 17.0).collect();
            let q2: Vec<f64> = (0..n).map(|i| ((i as u64 * 13 + seed * 7) % 11) as f64 / 11.0).collect();
            let qc: Vec<f64> = q1.iter().zip(&q2).map(|(x, y)| a * x + b * y).collect();
            for e in 0..m.n_elements() {
                let op = m.element_operator(e);
                let lhs = op.apply(&qc);
                let rhs = a * op.apply(&q1) + b * op.apply(&q2);
                prop_assert!((lhs - rhs).abs().max() < 1e-12);
            }
        }
    }
}
