//! Up-looking sparse LDLᵀ with an elimination tree.

use crate::error::{Error, Result};

pub const NO_PARENT: usize = usize::MAX;

/// Unit lower-triangular `L` (diagonal implied) in compressed columns, and `D`.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    pub n: usize,
    pub col_offsets: Vec<usize>,
    pub row_indices: Vec<usize>,
    pub values: Vec<f64>,
    pub d: Vec<f64>,
    pub etree: Vec<usize>,
}

/// Elimination tree and column counts of `L` from the upper triangle in CSC form.
pub fn etree(n: usize, ap: &[usize], ai: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut parent = vec![NO_PARENT; n];
    let mut lnz = vec![0; n];
    let mut work = vec![0; n];
    for j in 0..n {
        work[j] = j;
        for &row in &ai[ap[j]..ap[j + 1]] {
            let mut i = row;
            if i >= j {
                continue;
            }
            while work[i] != j {
                if parent[i] == NO_PARENT {
                    parent[i] = j;
                }
                lnz[i] += 1;
                work[i] = j;
                i = parent[i];
            }
        }
    }
    (parent, lnz)
}

/// Factors a symmetric matrix given by its upper triangle (CSC, sorted rows,
/// diagonal present). Fails on the first non-positive pivot.
pub fn factor(n: usize, ap: &[usize], ai: &[usize], ax: &[f64]) -> Result<LdlFactor> {
    let (parent, lnz) = etree(n, ap, ai);
    let mut lp = vec![0; n + 1];
    for k in 0..n {
        lp[k + 1] = lp[k] + lnz[k];
    }
    let nnz = lp[n];
    let mut li = vec![0; nnz];
    let mut lx = vec![0.0; nnz];
    let mut d = vec![0.0; n];
    let mut d_inv = vec![0.0; n];
    let mut y_vals = vec![0.0; n];
    let mut y_used = vec![false; n];
    let mut y_idx = vec![0; n];
    let mut elim = vec![0; n];
    let mut next_space: Vec<usize> = lp[..n].to_vec();

    for k in 0..n {
        let mut nnz_y = 0;
        for p in ap[k]..ap[k + 1] {
            let b = ai[p];
            if b == k {
                d[k] = ax[p];
                continue;
            }
            if b > k {
                continue;
            }
            y_vals[b] = ax[p];
            if !y_used[b] {
                y_used[b] = true;
                elim[0] = b;
                let mut len = 1;
                let mut next = parent[b];
                while next != NO_PARENT && next < k && !y_used[next] {
                    y_used[next] = true;
                    elim[len] = next;
                    len += 1;
                    next = parent[next];
                }
                while len > 0 {
                    len -= 1;
                    y_idx[nnz_y] = elim[len];
                    nnz_y += 1;
                }
            }
        }
        for i in (0..nnz_y).rev() {
            let c = y_idx[i];
            let slot = next_space[c];
            let yc = y_vals[c];
            for j in lp[c]..slot {
                y_vals[li[j]] -= lx[j] * yc;
            }
            lx[slot] = yc * d_inv[c];
            d[k] -= yc * lx[slot];
            li[slot] = k;
            next_space[c] += 1;
            y_vals[c] = 0.0;
            y_used[c] = false;
        }
        if !(d[k] > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: k, value: d[k] });
        }
        d_inv[k] = 1.0 / d[k];
    }
    Ok(LdlFactor {
        n,
        col_offsets: lp,
        row_indices: li,
        values: lx,
        d,
        etree: parent,
    })
}

impl LdlFactor {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// In-place solve of `L D Lᵀ x = b`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        for i in 0..self.n {
            let xi = x[i];
            for p in self.col_offsets[i]..self.col_offsets[i + 1] {
                x[self.row_indices[p]] -= self.values[p] * xi;
            }
        }
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi /= di;
        }
        for i in (0..self.n).rev() {
            let mut s = 0.0;
            for p in self.col_offsets[i]..self.col_offsets[i + 1] {
                s += self.values[p] * x[self.row_indices[p]];
            }
            x[i] -= s;
        }
    }

    /// Column `j` of `L⁻¹` as `(row, value)` pairs in increasing row order.
    /// Its support is `j` and the elimination-tree ancestors of `j`.
    pub fn inverse_column(&self, j: usize, work: &mut [f64]) -> Vec<(usize, f64)> {
        let mut path = Vec::new();
        let mut v = j;
        while v != NO_PARENT {
            path.push(v);
            work[v] = 0.0;
            v = self.etree[v];
        }
        work[j] = 1.0;
        for &i in &path {
            let xi = work[i];
            if xi == 0.0 {
                continue;
            }
            for p in self.col_offsets[i]..self.col_offsets[i + 1] {
                work[self.row_indices[p]] -= self.values[p] * xi;
            }
        }
        path.iter()
            .map(|&i| {
                let val = work[i];
                work[i] = 0.0;
                (i, val)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        // [[4,1],[1,4]] upper CSC
        let f = factor(2, &[0, 1, 3], &[0, 0, 1], &[4.0, 1.0, 4.0]).unwrap();
        assert_eq!(f.d[0], 4.0);
        assert!((f.d[1] - 3.75).abs() < 1e-15);
        let mut x = vec![1.0, 2.0];
        f.solve_in_place(&mut x);
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 4.0 * x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_rejected() {
        let err = factor(2, &[0, 1, 3], &[0, 0, 1], &[1.0, 2.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { pivot: 1, .. }));
    }
}
