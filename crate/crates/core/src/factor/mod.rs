//! Global operator assembly, the `A⁻¹ = SᵀS` factor and Delassus blocks.
//!
//! The operator is identical on the three coordinate axes, so a single
//! scalar `n × n` block is assembled and factored, then applied per axis.

pub mod ldl;
pub mod ordering;

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::material::MaterialField;
use crate::mesh::TetMesh;
use crate::par::map_range;
use crate::sparse::SparseMatrix;

pub use ordering::OrderingKind;

/// Scalar block of `A = (1+αh)M/h² + Σ_e (w_e + β_e/h) V_e G_eᵀG_e`.
pub fn assemble_global(mesh: &TetMesh, material: &MaterialField, h: f64) -> SparseMatrix {
    let n = mesh.n_vertices();
    let mut trip = Vec::with_capacity(n + 16 * mesh.n_elements());
    let inertia = (1.0 + material.alpha * h) / (h * h);
    for v in 0..n {
        trip.push((v, v, inertia * mesh.vertex_mass(v)));
    }
    for (e, tet) in mesh.elements.iter().enumerate() {
        let coeff = (material.total_weight(e) + material.beta[e] / h) * mesh.rest_volume[e];
        let g = mesh.shape_gradients(e);
        for a in 0..4 {
            for b in 0..4 {
                trip.push((tet[a], tet[b], coeff * g[a].dot(&g[b])));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, trip)
}

/// Scalar block of the damping operator `B_β = Σ_e β_e V_e G_eᵀG_e`.
pub fn assemble_damping(mesh: &TetMesh, material: &MaterialField) -> SparseMatrix {
    let n = mesh.n_vertices();
    let mut trip = Vec::with_capacity(16 * mesh.n_elements());
    for (e, tet) in mesh.elements.iter().enumerate() {
        let coeff = material.beta[e] * mesh.rest_volume[e];
        if coeff == 0.0 {
            continue;
        }
        let g = mesh.shape_gradients(e);
        for a in 0..4 {
            for b in 0..4 {
                trip.push((tet[a], tet[b], coeff * g[a].dot(&g[b])));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, trip)
}

#[derive(Debug, Clone)]
pub struct SparseFactor {
    /// `permutation[new] = old`.
    pub permutation: Vec<usize>,
    pub s_factor: SparseMatrix,
    pub s_transpose: SparseMatrix,
    pub signature: u64,
    pub nnz_ratio: f64,
    pub ordering: OrderingKind,
    pub nnz_l: usize,
    pub factor_seconds: f64,
}

const COLUMN_CHUNK: usize = 128;

pub fn factorize(a: &SparseMatrix) -> Result<SparseFactor> {
    let start = Instant::now();
    let n = a.n_rows;
    if a.n_cols != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.n_cols,
        });
    }
    let adj: Vec<Vec<usize>> = (0..n).map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect()).collect();
    let (perm, kind) = ordering::compute(&adj);
    let mut iperm = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    // upper triangle of P A Pᵀ in compressed columns (row j of this CSR is column j)
    let mut trip = Vec::with_capacity(a.nnz());
    for i in 0..n {
        for (j, v) in a.row(i) {
            let (pi, pj) = (iperm[i], iperm[j]);
            if pi <= pj {
                trip.push((pj, pi, v));
            }
        }
    }
    let upper = SparseMatrix::from_triplets(n, n, trip);
    let ldl = ldl::factor(n, &upper.row_offsets, &upper.col_indices, &upper.values)?;
    let scale: Vec<f64> = ldl.d.iter().map(|d| 1.0 / d.sqrt()).collect();
    let n_chunks = n.div_ceil(COLUMN_CHUNK);
    let chunks = map_range(n_chunks, |c| {
        let mut work = vec![0.0; n];
        let mut entries = Vec::new();
        for j in c * COLUMN_CHUNK..((c + 1) * COLUMN_CHUNK).min(n) {
            for (i, x) in ldl.inverse_column(j, &mut work) {
                entries.push((i, perm[j], x * scale[i]));
            }
        }
        entries
    });
    let s_factor = SparseMatrix::from_triplets(n, n, chunks.into_iter().flatten());
    let s_transpose = s_factor.transpose();
    let nnz_ratio = s_factor.nnz() as f64 / (n as f64 * n as f64);
    Ok(SparseFactor {
        permutation: perm,
        s_factor,
        s_transpose,
        signature: 0,
        nnz_ratio,
        ordering: kind,
        nnz_l: ldl.nnz(),
        factor_seconds: start.elapsed().as_secs_f64(),
    })
}

impl SparseFactor {
    pub fn dim(&self) -> usize {
        self.s_factor.n_rows
    }

    /// `Sᵀ(S v)`.
    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        let y = self.s_factor.mul_vec(v);
        self.s_transpose.mul_vec(&y)
    }

    /// Per-axis `Sᵀ(S v)` on an interleaved `3n` vector.
    pub fn apply_inverse_xyz(&self, v: &[f64]) -> Vec<f64> {
        let y = mul_xyz(&self.s_factor, v);
        mul_xyz(&self.s_transpose, &y)
    }

    /// Column `i` of `S` as sorted sparse pairs.
    pub fn s_column(&self, i: usize) -> Vec<(usize, f64)> {
        self.s_transpose.row(i).collect()
    }

    /// Scalar Delassus `W_ab = (A⁻¹)_{v_a v_b}` for the listed indices, with the
    /// dense columns `A⁻¹ e_v` of each distinct index.
    pub fn delassus_scalar(&self, indices: &[usize]) -> (DMatrix<f64>, BTreeMap<usize, Vec<f64>>) {
        let mut ys: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &v in indices {
            ys.entry(v).or_insert_with(|| self.s_column(v));
        }
        let k = indices.len();
        let mut w = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let val = sparse_dot(&ys[&indices[a]], &ys[&indices[b]]);
                w[(a, b)] = val;
                w[(b, a)] = val;
            }
        }
        let columns = ys
            .iter()
            .map(|(&v, y)| {
                let mut z = vec![0.0; self.dim()];
                self.s_factor.transpose_mul_sparse_into(y, &mut z);
                (v, z)
            })
            .collect();
        (w, columns)
    }
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// `y = M x` applied independently to each axis of an interleaved vector.
pub fn mul_xyz(m: &SparseMatrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), 3 * m.n_cols);
    let mut y = vec![0.0; 3 * m.n_rows];
    for i in 0..m.n_rows {
        let mut acc = [0.0; 3];
        for (j, v) in m.row(i) {
            acc[0] += v * x[3 * j];
            acc[1] += v * x[3 * j + 1];
            acc[2] += v * x[3 * j + 2];
        }
        y[3 * i..3 * i + 3].copy_from_slice(&acc);
    }
    y
}

/// Fingerprint of everything that changes the operator.
pub fn signature(mesh: &TetMesh, material: &MaterialField, h: f64, fixed: &[usize]) -> u64 {
    let mut s = std::collections::hash_map::DefaultHasher::new();
    mesh.topology_id().hash(&mut s);
    fixed.hash(&mut s);
    material.version().hash(&mut s);
    material.alpha.to_bits().hash(&mut s);
    material.beta0.to_bits().hash(&mut s);
    h.to_bits().hash(&mut s);
    s.finish()
}

pub fn check_staleness(factor: &SparseFactor, mesh: &TetMesh, material: &MaterialField, h: f64, fixed: &[usize]) -> bool {
    factor.signature != signature(mesh, material, h, fixed)
}

/// Delassus data for contact rows that each act on one vertex along one direction.
#[derive(Debug, Clone)]
pub struct Delassus {
    pub w: DMatrix<f64>,
    pub rows: Vec<(usize, Vector3<f64>)>,
    free_vertices: Vec<usize>,
    /// `A_ff⁻¹ e_v` per distinct contact vertex, indexed by free position.
    columns: BTreeMap<usize, Vec<f64>>,
}

impl Delassus {
    /// `out += coef · A⁻¹ j_c` over the full interleaved DoF vector.
    pub fn add_column(&self, c: usize, coef: f64, out: &mut [f64]) {
        if coef == 0.0 {
            return;
        }
        let (v, d) = self.rows[c];
        let z = &self.columns[&v];
        for (k, &fv) in self.free_vertices.iter().enumerate() {
            let s = coef * z[k];
            out[3 * fv] += s * d.x;
            out[3 * fv + 1] += s * d.y;
            out[3 * fv + 2] += s * d.z;
        }
    }

    pub fn column(&self, c: usize, n_dofs: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_dofs];
        self.add_column(c, 1.0, &mut out);
        out
    }
}

/// The factored operator with Dirichlet vertices eliminated.
#[derive(Debug, Clone)]
pub struct PdSystem {
    pub a: SparseMatrix,
    pub factor: SparseFactor,
    pub free_vertices: Vec<usize>,
    pub fixed_vertices: Vec<usize>,
    free_map: Vec<Option<usize>>,
    a_ff: SparseMatrix,
    a_fd: SparseMatrix,
}

impl PdSystem {
    pub fn new(mesh: &TetMesh, material: &MaterialField, h: f64, fixed: &[usize]) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(format!("time step must be positive, got {h}")));
        }
        let n = mesh.n_vertices();
        let mut fixed_vertices = fixed.to_vec();
        fixed_vertices.sort_unstable();
        fixed_vertices.dedup();
        if let Some(&bad) = fixed_vertices.iter().find(|&&v| v >= n) {
            return Err(Error::InvalidConfig(format!("fixed vertex {bad} out of range")));
        }
        let mut is_fixed = vec![false; n];
        for &v in &fixed_vertices {
            is_fixed[v] = true;
        }
        let free_vertices: Vec<usize> = (0..n).filter(|&v| !is_fixed[v]).collect();
        if free_vertices.is_empty() {
            return Err(Error::InvalidConfig("every vertex is fixed".into()));
        }
        let mut free_map = vec![None; n];
        for (k, &v) in free_vertices.iter().enumerate() {
            free_map[v] = Some(k);
        }
        let fixed_cols: Vec<Option<usize>> = (0..n).map(|v| is_fixed[v].then_some(v)).collect();
        let a = assemble_global(mesh, material, h);
        let a_ff = a.submatrix(&free_map, free_vertices.len(), &free_map, free_vertices.len());
        let a_fd = a.submatrix(&free_map, free_vertices.len(), &fixed_cols, n);
        let mut factor = factorize(&a_ff)?;
        factor.signature = signature(mesh, material, h, &fixed_vertices);
        Ok(Self {
            a,
            factor,
            free_vertices,
            fixed_vertices,
            free_map,
            a_ff,
            a_fd,
        })
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.a.n_rows
    }

    pub fn signature(&self) -> u64 {
        self.factor.signature
    }

    pub fn is_stale(&self, mesh: &TetMesh, material: &MaterialField, h: f64, fixed: &[usize]) -> bool {
        let mut f = fixed.to_vec();
        f.sort_unstable();
        f.dedup();
        check_staleness(&self.factor, mesh, material, h, &f)
    }

    pub fn free_index(&self, v: usize) -> Option<usize> {
        self.free_map[v]
    }

    pub fn is_fixed(&self, v: usize) -> bool {
        self.free_map[v].is_none()
    }

    fn gather_free(&self, x: &[f64]) -> Vec<f64> {
        self.free_vertices
            .iter()
            .flat_map(|&v| [x[3 * v], x[3 * v + 1], x[3 * v + 2]])
            .collect()
    }

    fn scatter_free(&self, xf: &[f64], out: &mut [f64]) {
        for (k, &v) in self.free_vertices.iter().enumerate() {
            out[3 * v..3 * v + 3].copy_from_slice(&xf[3 * k..3 * k + 3]);
        }
    }

    /// Solves `A q = b` on the free DoFs with fixed DoFs taken from `boundary`.
    pub fn solve(&self, b: &[f64], boundary: &[f64]) -> Vec<f64> {
        let coupling = mul_xyz(&self.a_fd, boundary);
        let mut rf = self.gather_free(b);
        for (r, c) in rf.iter_mut().zip(&coupling) {
            *r -= c;
        }
        let xf = self.factor.apply_inverse_xyz(&rf);
        let mut out = boundary.to_vec();
        self.scatter_free(&xf, &mut out);
        out
    }

    /// `A_ff⁻¹ r_f` with zeros on the fixed DoFs.
    pub fn apply_inverse_free(&self, r: &[f64]) -> Vec<f64> {
        let xf = self.factor.apply_inverse_xyz(&self.gather_free(r));
        let mut out = vec![0.0; r.len()];
        self.scatter_free(&xf, &mut out);
        out
    }

    /// `A_ff x_f` with zeros on the fixed DoFs.
    pub fn apply_a_free(&self, x: &[f64]) -> Vec<f64> {
        let yf = mul_xyz(&self.a_ff, &self.gather_free(x));
        let mut out = vec![0.0; x.len()];
        self.scatter_free(&yf, &mut out);
        out
    }

    /// Full product `A x` on all DoFs.
    pub fn apply_a(&self, x: &[f64]) -> Vec<f64> {
        mul_xyz(&self.a, x)
    }

    /// Zeroes the fixed DoFs of `x` in place.
    pub fn project_free(&self, x: &mut [f64]) {
        for &v in &self.fixed_vertices {
            x[3 * v..3 * v + 3].fill(0.0);
        }
    }

    /// Batched Delassus blocks for rows `(vertex, direction)` on free vertices.
    pub fn delassus(&self, rows: &[(usize, Vector3<f64>)]) -> Result<Delassus> {
        let mut idx = Vec::with_capacity(rows.len());
        for &(v, _) in rows {
            idx.push(self.free_map[v].ok_or_else(|| Error::InvalidConfig(format!("contact on fixed vertex {v}")))?);
        }
        let (ws, cols) = self.factor.delassus_scalar(&idx);
        let k = rows.len();
        let w = DMatrix::from_fn(k, k, |a, b| rows[a].1.dot(&rows[b].1) * ws[(a, b)]);
        let columns = cols.into_iter().map(|(fi, z)| (self.free_vertices[fi], z)).collect();
        Ok(Delassus {
            w,
            rows: rows.to_vec(),
            free_vertices: self.free_vertices.clone(),
            columns,
        })
    }
}
