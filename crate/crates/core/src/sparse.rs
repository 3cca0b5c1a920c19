//! Compressed sparse row storage for symmetric finite-element matrices.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::mesh::Mesh;

/// Sparsity pattern shared by every matrix assembled on one mesh.
#[derive(Debug, PartialEq)]
pub struct Pattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl Pattern {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let n = mesh.num_vertices();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for tet in &mesh.tets {
            for &a in tet {
                for &b in tet {
                    rows[a].push(b);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Pattern { n, row_ptr, col_idx }
    }

    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.col_idx[lo..hi].binary_search(&col).ok().map(|p| lo + p)
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }
}

/// Symmetric matrix stored with both triangles.
#[derive(Clone, Debug)]
pub struct SparseSymMatrix {
    pub pattern: Arc<Pattern>,
    pub values: Vec<f64>,
}

impl SparseSymMatrix {
    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let nnz = pattern.nnz();
        SparseSymMatrix {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    /// Adds element matrices in the given order (deterministic reduction).
    pub fn add_elements(&mut self, tets: &[[usize; 4]], blocks: &[[[f64; 4]; 4]]) {
        for (tet, block) in tets.iter().zip(blocks) {
            for a in 0..4 {
                for b in 0..4 {
                    let p = self
                        .pattern
                        .position(tet[a], tet[b])
                        .expect("element entry outside pattern");
                    self.values[p] += block[a][b];
                }
            }
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern.position(row, col).map_or(0.0, |p| self.values[p])
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.pattern.row_ptr[row];
        let hi = self.pattern.row_ptr[row + 1];
        self.pattern.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `self + a * other`; both must share the pattern.
    pub fn axpy(&self, a: f64, other: &SparseSymMatrix) -> SparseSymMatrix {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern);
        SparseSymMatrix {
            pattern: self.pattern.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> SparseSymMatrix {
        SparseSymMatrix {
            pattern: self.pattern.clone(),
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Block `(rows, cols)` as a general sparse matrix in CSR form.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Csr {
        let mut local = vec![usize::MAX; self.n()];
        for (k, &c) in cols.iter().enumerate() {
            local[c] = k;
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for &r in rows {
            for (j, v) in self.row(r) {
                if local[j] != usize::MAX {
                    col_idx.push(local[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Csr {
            nrows: rows.len(),
            ncols: cols.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Coordinate text dump: one `row col value` line per stored entry.
    pub fn to_coordinate_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "% {} {} {}", self.n(), self.n(), self.values.len());
        for i in 0..self.n() {
            for (j, v) in self.row(i) {
                let _ = writeln!(out, "{i} {j} {v:.17e}");
            }
        }
        out
    }
}

/// General CSR matrix (blocks of symmetric matrices).
#[derive(Clone, Debug)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| self.row(i).find(|&(j, _)| j == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0; self.values.len()];
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                let p = next[j];
                col_idx[p] = i;
                values[p] = v;
                next[j] += 1;
            }
        }
        Csr {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr: counts,
            col_idx,
            values,
        }
    }

    /// Largest |i - j| over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0;
        for i in 0..self.nrows {
            for (j, _) in self.row(i) {
                b = b.max(i.abs_diff(j));
            }
        }
        b
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, BoxDomain};

    #[test]
    fn pattern_is_symmetric_and_contains_diagonal() {
        let m = build_box_mesh(3, BoxDomain::unit()).unwrap();
        let p = Pattern::from_mesh(&m);
        for i in 0..p.n {
            assert!(p.position(i, i).is_some());
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                assert!(p.position(p.col_idx[k], i).is_some());
            }
        }
        // Kuhn meshes: interior vertices have 14 neighbours plus themselves.
        let v = m.vertex_id(1, 1, 1);
        assert_eq!(p.row_ptr[v + 1] - p.row_ptr[v], 15);
    }

    #[test]
    fn block_and_transpose_agree_with_dense() {
        let m = build_box_mesh(2, BoxDomain::unit()).unwrap();
        let p = Arc::new(Pattern::from_mesh(&m));
        let mut a = SparseSymMatrix::zeros(p);
        for (k, v) in a.values.iter_mut().enumerate() {
            *v = k as f64;
        }
        let rows = vec![0, 4, 13];
        let cols = vec![1, 3, 4, 9, 13, 26];
        let b = a.block(&rows, &cols);
        let d = a.to_dense();
        let bd = b.to_dense();
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                assert_eq!(bd[(r, c)], d[(i, j)]);
            }
        }
        assert_eq!(b.transpose().to_dense(), bd.transpose());
    }
}
