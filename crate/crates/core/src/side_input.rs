//! Side-input views for fused operators.
//!
//! `get_value` is stateless in signature; sparse access keeps a forward-only
//! per-row cursor under the covers and falls back to binary search on
//! backward jumps. Views are per-worker, so cursor state never escapes one
//! execution partition.

use crate::matrix::{Matrix, Storage};
use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideAccess {
    /// Whole-matrix binding (e.g. the right operand of a row matmul).
    Full,
    /// Column vector read per output row.
    RowIndexed,
    /// General matrix read per output cell.
    CellIndexed,
}

pub struct SideInput<'a> {
    matrix: &'a Matrix,
    pub access: SideAccess,
    cursor_row: Cell<usize>,
    cursor_pos: Cell<usize>,
}

impl<'a> SideInput<'a> {
    pub fn new(matrix: &'a Matrix, access: SideAccess) -> Self {
        SideInput {
            matrix,
            access,
            cursor_row: Cell::new(0),
            cursor_pos: Cell::new(0),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        self.matrix
    }

    /// Logical cell value with scalar / vector broadcast; 0 for unstored
    /// sparse cells. Never mutates the logical matrix.
    pub fn get_value(&self, row: usize, col: usize) -> f64 {
        let r = if self.matrix.rows() == 1 { 0 } else { row };
        let c = if self.matrix.cols() == 1 { 0 } else { col };
        match self.matrix.storage() {
            Storage::Dense(d) => d[r * self.matrix.cols() + c],
            Storage::Sparse {
                row_ptr, col_idx, ..
            } => {
                // forward cursor within the current row; reset on row change
                if self.cursor_row.get() != r {
                    self.cursor_row.set(r);
                    self.cursor_pos.set(row_ptr[r]);
                }
                let hi = row_ptr[r + 1];
                let mut p = self.cursor_pos.get();
                if p < hi && col_idx[p] > c {
                    // backward access: binary search from the row start
                    let lo = row_ptr[r];
                    return match col_idx[lo..hi].binary_search(&c) {
                        Ok(i) => self.value_at(lo + i),
                        Err(_) => 0.0,
                    };
                }
                while p < hi && col_idx[p] < c {
                    p += 1;
                }
                self.cursor_pos.set(p);
                if p < hi && col_idx[p] == c {
                    self.value_at(p)
                } else {
                    0.0
                }
            }
        }
    }

    fn value_at(&self, p: usize) -> f64 {
        match self.matrix.storage() {
            Storage::Sparse { values, .. } => values[p],
            Storage::Dense(_) => unreachable!(),
        }
    }

    /// Copies row `r` (dense view of stored values) into `out`.
    pub fn read_row_into(&self, r: usize, out: &mut [f64]) {
        let cols = self.matrix.cols();
        match self.matrix.storage() {
            Storage::Dense(d) => out[..cols].copy_from_slice(&d[r * cols..(r + 1) * cols]),
            Storage::Sparse { .. } => {
                out[..cols].fill(0.0);
                let (ix, vals) = self.matrix.sparse_row(r);
                for (&c, &v) in ix.iter().zip(vals) {
                    out[c] = v;
                }
            }
        }
    }
}
