//! Dense and sparse matrix values.
//!
//! Matrices are immutable after construction. Dense storage is row-major,
//! sparse storage is compressed-row. `nnz` is tracked exactly for both.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Dense(Vec<f64>),
    Sparse {
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    nnz: usize,
    storage: Storage,
}

impl Matrix {
    pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "dense storage length mismatch");
        let nnz = data.iter().filter(|v| **v != 0.0).count();
        Matrix {
            rows,
            cols,
            nnz,
            storage: Storage::Dense(data),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::dense(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Matrix::dense(1, 1, vec![v])
    }

    /// Builds a CSR matrix from (row, col, value) triplets. Duplicate cells are
    /// rejected; zero values are dropped so nnz stays exact.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        triplets.retain(|t| t.2 != 0.0);
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Contract(format!(
                    "duplicate cell ({}, {}) in triplets",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::Contract(format!(
                    "triplet ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let nnz = values.len();
        Ok(Matrix {
            rows,
            cols,
            nnz,
            storage: Storage::Sparse {
                row_ptr,
                col_idx,
                values,
            },
        })
    }

    /// CSR from raw parts, used by IO; validates the format invariants.
    pub fn sparse_from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 || *row_ptr.last().unwrap_or(&0) != values.len() {
            return Err(Error::Contract("invalid CSR row offsets".into()));
        }
        if col_idx.len() != values.len() {
            return Err(Error::Contract("CSR index/value length mismatch".into()));
        }
        for r in 0..rows {
            if row_ptr[r] > row_ptr[r + 1] {
                return Err(Error::Contract("CSR offsets not monotone".into()));
            }
            let cs = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            for w in cs.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Contract("CSR columns not strictly increasing".into()));
                }
            }
            if let Some(&last) = cs.last() {
                if last >= cols {
                    return Err(Error::Contract("CSR column index out of range".into()));
                }
            }
        }
        let nnz = values.len();
        Ok(Matrix {
            rows,
            cols,
            nnz,
            storage: Storage::Sparse {
                row_ptr,
                col_idx,
                values,
            },
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn sparsity(&self) -> f64 {
        if self.cells() == 0 {
            0.0
        } else {
            self.nnz as f64 / self.cells() as f64
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse { .. })
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.get(0, 0)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        match &self.storage {
            Storage::Dense(d) => d[r * self.cols + c],
            Storage::Sparse {
                row_ptr,
                col_idx,
                values,
            } => {
                let lo = row_ptr[r];
                let hi = row_ptr[r + 1];
                match col_idx[lo..hi].binary_search(&c) {
                    Ok(p) => values[lo + p],
                    Err(_) => 0.0,
                }
            }
        }
    }

    /// Stored entries of one row: (column indices, values). Dense rows report
    /// every column.
    pub fn sparse_row(&self, r: usize) -> (&[usize], &[f64]) {
        match &self.storage {
            Storage::Sparse {
                row_ptr,
                col_idx,
                values,
            } => {
                let lo = row_ptr[r];
                let hi = row_ptr[r + 1];
                (&col_idx[lo..hi], &values[lo..hi])
            }
            Storage::Dense(_) => panic!("sparse_row on dense storage"),
        }
    }

    pub fn dense_row(&self, r: usize) -> &[f64] {
        match &self.storage {
            Storage::Dense(d) => &d[r * self.cols..(r + 1) * self.cols],
            Storage::Sparse { .. } => panic!("dense_row on sparse storage"),
        }
    }

    pub fn dense_data(&self) -> &[f64] {
        match &self.storage {
            Storage::Dense(d) => d,
            Storage::Sparse { .. } => panic!("dense_data on sparse storage"),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match &self.storage {
            Storage::Dense(_) => self.clone(),
            Storage::Sparse {
                row_ptr,
                col_idx,
                values,
            } => {
                let mut d = vec![0.0; self.cells()];
                for r in 0..self.rows {
                    for p in row_ptr[r]..row_ptr[r + 1] {
                        d[r * self.cols + col_idx[p]] = values[p];
                    }
                }
                Matrix::dense(self.rows, self.cols, d)
            }
        }
    }

    pub fn to_sparse(&self) -> Matrix {
        match &self.storage {
            Storage::Sparse { .. } => self.clone(),
            Storage::Dense(d) => {
                let mut row_ptr = vec![0usize; self.rows + 1];
                let mut col_idx = Vec::with_capacity(self.nnz);
                let mut values = Vec::with_capacity(self.nnz);
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        let v = d[r * self.cols + c];
                        if v != 0.0 {
                            col_idx.push(c);
                            values.push(v);
                        }
                    }
                    row_ptr[r + 1] = values.len();
                }
                let nnz = values.len();
                Matrix {
                    rows: self.rows,
                    cols: self.cols,
                    nnz,
                    storage: Storage::Sparse {
                        row_ptr,
                        col_idx,
                        values,
                    },
                }
            }
        }
    }

    /// Applies the storage-threshold policy: sparsity below `threshold` stores
    /// sparse. Only called explicitly, never inside the optimizer.
    pub fn with_threshold(&self, threshold: f64) -> Matrix {
        if self.sparsity() < threshold {
            self.to_sparse()
        } else {
            self.to_dense()
        }
    }

    pub fn rand_dense<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(0.1..1.0)).collect();
        Matrix::dense(rows, cols, data)
    }

    /// Random matrix with roughly `sparsity * cells` nonzeros, stored sparse.
    pub fn rand_sparse<R: Rng>(rows: usize, cols: usize, sparsity: f64, rng: &mut R) -> Matrix {
        let target = ((rows * cols) as f64 * sparsity).round() as usize;
        let mut triplets = Vec::with_capacity(target);
        if sparsity >= 0.3 {
            // dense bernoulli sampling for moderately sparse data
            for r in 0..rows {
                for c in 0..cols {
                    if rng.gen_bool(sparsity.min(1.0)) {
                        triplets.push((r, c, rng.gen_range(0.1..1.0)));
                    }
                }
            }
        } else {
            let mut seen = std::collections::HashSet::with_capacity(target * 2);
            while seen.len() < target {
                let r = rng.gen_range(0..rows);
                let c = rng.gen_range(0..cols);
                if seen.insert((r, c)) {
                    triplets.push((r, c, rng.gen_range(0.1..1.0)));
                }
            }
        }
        Matrix::from_triplets(rows, cols, triplets).expect("generated triplets are valid")
    }

    /// Relative per-cell deviation, 0 for exactly equal cells.
    pub fn max_rel_error(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let a = self.get(r, c);
                let b = other.get(r, c);
                if a == b {
                    continue;
                }
                let denom = a.abs().max(b.abs());
                let rel = if denom == 0.0 {
                    f64::INFINITY
                } else {
                    (a - b).abs() / denom
                };
                worst = worst.max(rel);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_sparse_roundtrip() {
        let m = Matrix::dense(2, 3, vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0]);
        assert_eq!(m.nnz(), 3);
        let s = m.to_sparse();
        assert_eq!(s.nnz(), 3);
        assert!(s.is_sparse());
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(m.get(r, c), s.get(r, c));
            }
        }
        assert_eq!(s.to_dense(), m);
    }

    #[test]
    fn triplet_validation() {
        assert!(Matrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0)]).is_err());
        assert!(Matrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
        // explicit zeros are dropped
        let m = Matrix::from_triplets(2, 2, vec![(0, 0, 0.0), (1, 1, 5.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
    }

    #[test]
    fn threshold_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Matrix::rand_sparse(50, 50, 0.1, &mut rng);
        assert!(m.with_threshold(0.4).is_sparse());
        assert!(!m.with_threshold(0.05).is_sparse());
    }

    #[test]
    fn rand_sparse_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::rand_sparse(100, 100, 0.01, &mut rng);
        assert_eq!(m.nnz(), 100);
        assert!((m.sparsity() - 0.01).abs() < 1e-12);
    }
}
