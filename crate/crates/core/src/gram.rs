//! Packed upper-triangle storage and the weighted Gram kernel shared by
//! the covariance statistics and their bootstrap counterparts.
//!
//! A symmetric `d x d` matrix is stored row by row, keeping only the
//! entries `j >= i`. Row `i` starts at [`row_offset`]`(d, i)` and has
//! `d - i` entries.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::data::SampleMatrix;

pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

pub fn row_offset(d: usize, i: usize) -> usize {
    i * d - i * i.saturating_sub(1) / 2
}

/// Packed range covering rows `rows` of the upper triangle.
pub fn packed_range(d: usize, rows: &Range<usize>) -> Range<usize> {
    row_offset(d, rows.start)..row_offset(d, rows.end)
}

/// Splits `0..d` into consecutive row blocks of at most `width` rows.
pub fn row_blocks(d: usize, width: usize) -> Vec<Range<usize>> {
    let width = width.max(1);
    (0..d)
        .step_by(width)
        .map(|start| start..(start + width).min(d))
        .collect()
}

/// Maps a packed index back to its `(i, j)` cell, `i <= j`.
pub fn packed_cell(d: usize, k: usize) -> (usize, usize) {
    let mut i = 0;
    while row_offset(d, i + 1) <= k {
        i += 1;
    }
    (i, i + (k - row_offset(d, i)))
}

pub fn unpack(d: usize, packed: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        let off = row_offset(d, i);
        for j in i..d {
            let v = packed[off + j - i];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Accumulates `sum_m w_m x_mi x_mj` for the rows `rows` of the packed
/// upper triangle into `out` (overwritten). `weights = None` means unit
/// weights and produces bit-identical output to all-ones weights.
///
/// Each cell is summed over samples in ascending order, independent of
/// the row blocking.
pub fn weighted_gram_rows(
    data: &SampleMatrix,
    weights: Option<&[f64]>,
    rows: Range<usize>,
    out: &mut [f64],
) {
    let d = data.cols();
    let base = row_offset(d, rows.start);
    debug_assert_eq!(out.len(), row_offset(d, rows.end) - base);
    out.iter_mut().for_each(|v| *v = 0.0);
    for m in 0..data.rows() {
        let x = data.row(m);
        let w = weights.map_or(1.0, |w| w[m]);
        for i in rows.clone() {
            let a = w * x[i];
            let off = row_offset(d, i) - base;
            let dst = &mut out[off..off + d - i];
            for (o, &xj) in dst.iter_mut().zip(&x[i..]) {
                *o += a * xj;
            }
        }
    }
}
